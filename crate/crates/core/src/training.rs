//! Seeded initialization and the mini-batch training loop shared by every model kind.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::MlpModel;
use crate::datakit::Dataset;
use crate::error::{check_len, Error, Result};
use crate::gradengine::{adam_step, AdamState, Differentiable};
use crate::structnet::{data_loss, loss_and_grad, Batch, ModelConfig, NodeMode, StructuralCfn, Task};

/// Stream of the shared seed used for splitting and shuffling; stream 0 draws the initial weights.
const SHUFFLE_STREAM: u64 = 1;

fn kaiming(rng: &mut ChaCha8Rng, fan_in: usize) -> f64 {
    let bound = (6.0 / fan_in as f64).sqrt();
    rng.random_range(-bound..=bound)
}

/// Builds a model and draws its parameters from `config.seed` in canonical store order.
///
/// Projections use Kaiming-uniform bounds `±√(6 / fan_in)`; polynomial coefficients
/// start as the identity `[0, 1, 0, …]`; sinusoids start at `A = ω = 1`, phase 0;
/// biases and gate logits start at 0.
pub fn init_model(config: &ModelConfig) -> Result<StructuralCfn> {
    let mut model = StructuralCfn::new(config.clone())?;
    let n = config.n_features;
    let channels = if config.node_mode == NodeMode::Hybrid { 2 } else { 1 };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let names = model.store().names().to_vec();
    let values = model.store_mut().values_mut();
    for (value, name) in values.iter_mut().zip(&names) {
        let mut parts = name.split('.');
        let scope = parts.next().unwrap_or_default();
        parts.next();
        let field = parts.next().unwrap_or_default();
        let index = parts.next();
        *value = match (scope, field) {
            ("node", "v_poly" | "v_sin" | "v_lin") => kaiming(&mut rng, n - 1),
            ("node", "gate_w") => kaiming(&mut rng, channels),
            ("head", "w") => kaiming(&mut rng, 2 * n),
            (_, "coeff") => f64::from(index == Some("1")),
            (_, "amplitude" | "frequency") => 1.0,
            _ => 0.0,
        };
    }
    Ok(model)
}

/// Kaiming-uniform weights and zero biases for the baseline, drawn from `seed`.
pub fn init_mlp(n_features: usize, task: Task, seed: u64) -> Result<MlpModel> {
    let mut model = MlpModel::new(n_features, task)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (fan_in, range) in model.weight_blocks() {
        for v in &mut model.store_mut().values_mut()[range] {
            *v = kaiming(&mut rng, fan_in);
        }
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// `(train data loss, validation data loss)` after each epoch.
    pub epoch_losses: Vec<(f64, f64)>,
    /// Index into `epoch_losses` of the lowest validation loss (earliest on ties).
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub n_train: usize,
    pub n_val: usize,
    pub batch_size: usize,
    /// Parameter digest after restoring the best epoch.
    pub final_store_digest: String,
    /// Not serialized, so reports of identical runs are byte-identical.
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// Splits off the last 10% of a seeded shuffle as validation rows.
pub fn validation_split(n_rows: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    split_with(n_rows, &mut shuffle_rng(seed))
}

fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM);
    rng
}

fn split_with(n_rows: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_rows < 10 {
        return Err(Error::Data(format!(
            "training needs at least 10 rows for a validation split, got {n_rows}"
        )));
    }
    let mut perm: Vec<usize> = (0..n_rows).collect();
    perm.shuffle(rng);
    let val = perm.split_off(n_rows - n_rows / 10);
    Ok((perm, val))
}

/// Adam on mini-batches with early stopping on the validation loss.
///
/// The best parameters seen are restored before returning. Works for any
/// [`Differentiable`] model, so the baseline runs through the same code path.
pub fn train<M: Differentiable + ?Sized>(model: &mut M, data: &Dataset, config: &ModelConfig) -> Result<TrainReport> {
    let started = Instant::now();
    config.validate()?;
    check_len("training data width", model.n_inputs(), data.n_features())?;
    if data.task() != model.task() {
        return Err(Error::Config(format!(
            "model task {:?} does not match data task {:?}",
            model.task(),
            data.task()
        )));
    }
    let mut rng = shuffle_rng(config.seed);
    let (mut train_idx, val_idx) = split_with(data.n_rows(), &mut rng)?;
    let batch_size = config.batch_size_for(data.n_rows());
    let all = data.batch();
    let val_batch = all.select(&val_idx);
    let mut adam = AdamState::new(model.params().len(), config.lr);
    let mut best_values = model.params().values().to_vec();
    let mut best_epoch = 0;
    let mut best_val = f64::INFINITY;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        train_idx.shuffle(&mut rng);
        for chunk in train_idx.chunks(batch_size) {
            model.params_mut().zero_grads();
            loss_and_grad(model, &all.select(chunk))?;
            adam_step(model.params_mut(), &mut adam)?;
        }
        let train_loss = data_loss(model, &all.select(&train_idx))?;
        let val_loss = data_loss(model, &val_batch)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss diverged at epoch {epoch} (train {train_loss}, validation {val_loss})"
            )));
        }
        epoch_losses.push((train_loss, val_loss));
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_values.copy_from_slice(model.params().values());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }
    model.params_mut().set_values(&best_values)?;
    model.params_mut().zero_grads();
    Ok(TrainReport {
        epoch_losses,
        best_epoch,
        best_val_loss: best_val,
        stopped_early,
        n_train: train_idx.len(),
        n_val: val_idx.len(),
        batch_size,
        final_store_digest: model.params().digest(),
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Mean data loss of `model` on every row of `data`.
pub fn evaluate<M: Differentiable + ?Sized>(model: &M, data: &Dataset) -> Result<f64> {
    data_loss(model, &data.batch())
}

/// Data loss restricted to `rows`.
pub fn evaluate_rows<M: Differentiable + ?Sized>(model: &M, data: &Dataset, rows: &[usize]) -> Result<f64> {
    data_loss(model, &Batch::select(data.batch(), rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{standardize, synth_generate, SynthSpec};
    use crate::structnet::Variant;

    fn linear_data(rows: usize, target: impl Fn(&[f64]) -> f64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..rows * 3).map(|_| rng.random_range(-1.5..1.5)).collect();
        let y: Vec<f64> = x.chunks(3).map(&target).collect();
        Dataset::new(x, y, vec!["a".into(), "b".into(), "c".into()], "y", Task::Regression).unwrap()
    }

    #[test]
    fn init_follows_bounds_and_identity_coefficients() {
        let config = ModelConfig::new(7, Task::Regression);
        let model = init_model(&config).unwrap();
        for (name, v) in model.store().names().iter().zip(model.store().values()) {
            if name.contains(".v_poly.") || name.contains(".v_sin.") {
                assert!(v.abs() <= 1.0, "{name}={v}");
            }
        }
        assert_eq!(model.param("node.3.coeff.0"), Some(0.0));
        assert_eq!(model.param("node.3.coeff.1"), Some(1.0));
        assert_eq!(model.param("head.1.coeff.1"), Some(1.0));
        assert_eq!(model.param("node.0.amplitude"), Some(1.0));
        assert_eq!(model.param("head.3.frequency"), Some(1.0));
        assert_eq!(model.param("node.2.phase"), Some(0.0));
        assert_eq!(model.node(4).gate_mix(), Some([0.5, 0.5]));
        assert_ne!(model.param("node.0.gate_w.0"), Some(0.0));
        assert_eq!(init_model(&config).unwrap(), model);
        let other = init_model(&ModelConfig { seed: 7, ..config }).unwrap();
        assert_ne!(other.store().digest(), model.store().digest());
    }

    #[test]
    fn mlp_init_zero_biases() {
        let m = init_mlp(5, Task::Binary, 42).unwrap();
        for (name, v) in m.store().names().iter().zip(m.store().values()) {
            if name.contains(".b.") {
                assert_eq!(*v, 0.0, "{name}");
            } else {
                assert!(v.abs() <= (6.0f64 / 5.0).sqrt());
            }
        }
        assert_eq!(init_mlp(5, Task::Binary, 42).unwrap(), m);
    }

    #[test]
    fn split_needs_ten_rows() {
        assert!(validation_split(9, 0).is_err());
        let (train, val) = validation_split(25, 3).unwrap();
        assert_eq!((train.len(), val.len()), (23, 2));
    }

    #[test]
    fn zero_target_descends() {
        let data = linear_data(100, |_| 0.0);
        let mut config = ModelConfig::new(3, Task::Regression);
        config.epochs = 5;
        let mut model = init_model(&config).unwrap();
        let before = evaluate(&model, &data).unwrap();
        train(&mut model, &data, &config).unwrap();
        assert!(evaluate(&model, &data).unwrap() <= before);
    }

    #[test]
    fn linear_target_is_learned() {
        let data = linear_data(400, |x| x[0]);
        let config = ModelConfig::new(3, Task::Regression);
        let mut model = init_model(&config).unwrap();
        let report = train(&mut model, &data, &config).unwrap();
        let mse = evaluate(&model, &data).unwrap();
        assert!(mse < 0.01, "mse {mse}, report best epoch {}", report.best_epoch);
    }

    #[test]
    fn training_is_deterministic_and_restores_best() {
        let spec = SynthSpec::basic(300, 2);
        let raw = synth_generate(&spec).unwrap();
        let data = standardize(&raw, &(0..raw.n_rows()).collect::<Vec<_>>()).unwrap();
        let mut config = ModelConfig::new(5, Task::Regression).with_variant(Variant::GatedAttention);
        config.epochs = 30;
        config.patience = 5;
        let mut a = init_model(&config).unwrap();
        let mut b = init_model(&config).unwrap();
        let ra = train(&mut a, &data, &config).unwrap();
        let rb = train(&mut b, &data, &config).unwrap();
        assert_eq!(ra.epoch_losses, rb.epoch_losses);
        assert_eq!(ra.final_store_digest, rb.final_store_digest);
        assert_eq!(ra.final_store_digest, a.store().digest());
        let (_, val) = validation_split(data.n_rows(), config.seed).unwrap();
        let min = ra.epoch_losses.iter().map(|l| l.1).fold(f64::INFINITY, f64::min);
        assert_eq!(ra.best_val_loss, min);
        assert_eq!(ra.epoch_losses[ra.best_epoch].1, min);
        assert_eq!(evaluate_rows(&a, &data, &val).unwrap(), min);
    }

    #[test]
    fn task_mismatch_rejected() {
        let data = linear_data(20, |_| 0.0);
        let config = ModelConfig::new(3, Task::Binary);
        let mut model = init_model(&config).unwrap();
        assert!(train(&mut model, &data, &config).is_err());
    }
}
