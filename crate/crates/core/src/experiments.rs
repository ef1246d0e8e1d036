//! Batch protocols built from the library pieces: cross-validation, synthetic recovery,
//! seed stability and sparsity sensitivity.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{mlp_param_count, MlpModel};
use crate::datakit::{
    extended_recovery, kfold, mean, noise_level_xi, paired_ttest, recovery_score, sample_sd, standardize,
    synth_generate, Dataset, ExtendedRecovery, RecoveryScore, SynthMode, SynthSpec, TTest, BONFERRONI_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::interpret::{dependency_matrix, topk_consistency, InteractionSchema};
use crate::structnet::{param_count, ModelConfig, ParamCount, StructuralCfn, Task};
use crate::training::{evaluate, init_mlp, init_model, train, TrainReport};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Environment variable capping the worker threads used for folds and seeds.
pub const THREADS_ENV: &str = "STRUCTCFN_THREADS";

/// Runs `f` inside a pool sized by `STRUCTCFN_THREADS` (all cores when unset).
pub fn with_thread_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::Argument(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?,
        Err(_) => 0,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Argument(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Name of the per-fold metric for a task.
pub fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Regression => "mse",
        Task::Binary => "log_loss",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation across folds.
    pub sd: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        Self {
            mean: mean(values),
            sd: sample_sd(values),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub model_metric: f64,
    pub model_train: TrainReport,
    pub baseline_metric: Option<f64>,
    pub baseline_train: Option<TrainReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub schema_version: u32,
    pub task: Task,
    /// `mse` (standardized target) or `log_loss`.
    pub metric: String,
    pub variant: String,
    pub n_rows: usize,
    pub n_features: usize,
    pub folds: usize,
    pub seed: u64,
    pub config: ModelConfig,
    pub param_count: ParamCount,
    pub model_metrics: Vec<f64>,
    pub model: Summary,
    pub baseline: Option<String>,
    pub baseline_param_count: Option<usize>,
    pub baseline_metrics: Option<Vec<f64>>,
    pub baseline_summary: Option<Summary>,
    /// Paired test on `model - baseline` per fold.
    pub ttest: Option<TTest>,
    pub bonferroni_threshold: f64,
    pub significant_after_bonferroni: Option<bool>,
    pub noise_level_xi: f64,
    pub fold_details: Vec<FoldOutcome>,
}

/// Standardizes `test` and `train` rows with statistics of the train rows.
fn fold_data(ds: &Dataset, train_rows: &[usize], test_rows: &[usize]) -> Result<(Dataset, Dataset)> {
    let stats = ds.fit_standardization(train_rows)?;
    Ok((
        ds.subset(train_rows).apply_standardization(&stats)?,
        ds.subset(test_rows).apply_standardization(&stats)?,
    ))
}

/// k-fold cross-validation of the configured model, optionally against the MLP baseline.
///
/// `ds` is raw (unstandardized); each fold is standardized with its own train statistics.
/// Folds and every model use `config.seed`. Folds run in parallel; results keep fold order.
pub fn cross_validate(ds: &Dataset, config: &ModelConfig, folds: usize, with_baseline: bool) -> Result<CvResult> {
    Ok(cross_validate_with_models(ds, config, folds, with_baseline)?.0)
}

/// As [`cross_validate`], also returning the trained model of every fold.
pub fn cross_validate_with_models(
    ds: &Dataset,
    config: &ModelConfig,
    folds: usize,
    with_baseline: bool,
) -> Result<(CvResult, Vec<StructuralCfn>)> {
    let mut config = config.clone();
    config.n_features = ds.n_features();
    config.task = ds.task();
    config.validate()?;
    let splits = kfold(ds.n_rows(), folds, config.seed)?;
    let results: Vec<(FoldOutcome, StructuralCfn)> = with_thread_pool(|| {
        splits
            .par_iter()
            .enumerate()
            .map(|(f, split)| {
                let (train_set, test_set) = fold_data(ds, &split.train, &split.test)?;
                let mut model = init_model(&config)?;
                let model_train = train(&mut model, &train_set, &config)?;
                let model_metric = evaluate(&model, &test_set)?;
                let (baseline_metric, baseline_train) = if with_baseline {
                    let mut mlp = init_mlp(config.n_features, config.task, config.seed)?;
                    let report = train(&mut mlp, &train_set, &config)?;
                    (Some(evaluate(&mlp, &test_set)?), Some(report))
                } else {
                    (None, None)
                };
                let outcome = FoldOutcome {
                    fold: f,
                    n_train: split.train.len(),
                    n_test: split.test.len(),
                    model_metric,
                    model_train,
                    baseline_metric,
                    baseline_train,
                };
                Ok((outcome, model))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let (outcomes, models): (Vec<FoldOutcome>, Vec<StructuralCfn>) = results.into_iter().unzip();
    let model_metrics: Vec<f64> = outcomes.iter().map(|o| o.model_metric).collect();
    let baseline_metrics: Option<Vec<f64>> = outcomes.iter().map(|o| o.baseline_metric).collect();
    let ttest = match &baseline_metrics {
        Some(b) => Some(paired_ttest(&model_metrics, b)?),
        None => None,
    };
    let result = CvResult {
        schema_version: REPORT_SCHEMA_VERSION,
        task: config.task,
        metric: metric_name(config.task).to_string(),
        variant: config
            .variant()
            .map_or_else(|| "custom".to_string(), |v| v.name().to_string()),
        n_rows: ds.n_rows(),
        n_features: ds.n_features(),
        folds,
        seed: config.seed,
        param_count: param_count(&config)?,
        model: Summary::of(&model_metrics),
        model_metrics,
        baseline: with_baseline.then(|| "mlp".to_string()),
        baseline_param_count: with_baseline.then(|| mlp_param_count(config.n_features)),
        baseline_summary: baseline_metrics.as_deref().map(Summary::of),
        baseline_metrics,
        significant_after_bonferroni: ttest.map(|t| t.p < BONFERRONI_THRESHOLD),
        ttest,
        bonferroni_threshold: BONFERRONI_THRESHOLD,
        noise_level_xi: noise_level_xi(ds)?,
        fold_details: outcomes,
        config,
    };
    Ok((result, models))
}

/// Standardizes every row of `ds` with its own statistics.
pub fn standardize_all(ds: &Dataset) -> Result<Dataset> {
    let all: Vec<usize> = (0..ds.n_rows()).collect();
    standardize(ds, &all)
}

/// Trains a fresh model with `config` on already-standardized data.
pub fn fit(data: &Dataset, config: &ModelConfig) -> Result<(StructuralCfn, TrainReport)> {
    let mut config = config.clone();
    config.n_features = data.n_features();
    config.task = data.task();
    let mut model = init_model(&config)?;
    let report = train(&mut model, data, &config)?;
    Ok((model, report))
}

/// Trains the MLP baseline with the training fields of `config`.
pub fn fit_baseline(data: &Dataset, config: &ModelConfig) -> Result<(MlpModel, TrainReport)> {
    let mut mlp = init_mlp(data.n_features(), data.task(), config.seed)?;
    let report = train(&mut mlp, data, config)?;
    Ok((mlp, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRun {
    pub seed: u64,
    pub success: bool,
    pub recovery: RecoveryScore,
    pub extended: Option<ExtendedRecovery>,
    pub schema: InteractionSchema,
    pub train_mse: f64,
    pub train: TrainReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub schema_version: u32,
    pub mode: SynthMode,
    pub n_samples: usize,
    pub seeds: Vec<u64>,
    pub config: ModelConfig,
    /// Relational recovery success rate: successful seeds / seeds.
    pub success_rate: f64,
    pub runs: Vec<SynthRun>,
}

/// For each seed: generate the manifold with that seed, train with that seed, score recovery.
///
/// Basic mode succeeds when every true pair outranks every noise coupling. Extended mode
/// succeeds when at least four of the five pairs are among the five strongest couplings
/// and no noise feature couples more strongly than the weakest recovered pair.
pub fn run_synthetic(
    mode: SynthMode,
    n_samples: usize,
    seeds: &[u64],
    template: &ModelConfig,
) -> Result<(SynthSummary, Vec<StructuralCfn>)> {
    if seeds.is_empty() {
        return Err(Error::Argument("at least one seed is required".into()));
    }
    let results: Vec<(SynthRun, StructuralCfn)> = with_thread_pool(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let spec = SynthSpec::new(mode, n_samples, seed);
                let data = standardize_all(&synth_generate(&spec)?)?;
                let config = ModelConfig {
                    seed,
                    ..template.clone()
                };
                let (model, report) = fit(&data, &config)?;
                let schema = dependency_matrix(&model).with_feature_names(data.feature_names().to_vec());
                let truth = spec.ground_truth();
                let recovery = recovery_score(&schema, &truth)?;
                let (success, extended) = match mode {
                    SynthMode::Basic => (recovery.success, None),
                    SynthMode::Extended => {
                        let ext = extended_recovery(&schema, &truth)?;
                        (
                            ext.recovered.len() + 1 >= truth.pairs.len() && ext.false_positives.is_empty(),
                            Some(ext),
                        )
                    }
                };
                Ok((
                    SynthRun {
                        seed,
                        success,
                        recovery,
                        extended,
                        schema,
                        train_mse: evaluate(&model, &data)?,
                        train: report,
                    },
                    model,
                ))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let (runs, models): (Vec<SynthRun>, Vec<StructuralCfn>) = results.into_iter().unzip();
    let successes = runs.iter().filter(|r| r.success).count();
    let mut config = template.clone();
    config.n_features = SynthSpec::new(mode, 1, 0).n_features;
    Ok((
        SynthSummary {
            schema_version: REPORT_SCHEMA_VERSION,
            mode,
            n_samples,
            seeds: seeds.to_vec(),
            config,
            success_rate: successes as f64 / seeds.len() as f64,
            runs,
        },
        models,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub schema_version: u32,
    pub k: usize,
    pub seeds: Vec<u64>,
    pub config: ModelConfig,
    pub top_k_sets: Vec<Vec<(usize, usize)>>,
    pub consistency: f64,
    pub schemas: Vec<InteractionSchema>,
}

/// Trains one model per seed on the same standardized data and compares their top-`k` entries.
pub fn run_stability(data: &Dataset, template: &ModelConfig, seeds: &[u64], k: usize) -> Result<StabilityReport> {
    if seeds.len() < 2 {
        return Err(Error::Argument("stability needs at least two seeds".into()));
    }
    let n = data.n_features();
    if k > n * n.saturating_sub(1) {
        return Err(Error::Argument(format!(
            "top-{k} exceeds the {} off-diagonal entries of an {n}-feature matrix",
            n * n.saturating_sub(1)
        )));
    }
    let schemas: Vec<InteractionSchema> = with_thread_pool(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let config = ModelConfig {
                    seed,
                    ..template.clone()
                };
                let (model, _) = fit(data, &config)?;
                Ok(dependency_matrix(&model).with_feature_names(data.feature_names().to_vec()))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let top_k_sets = schemas.iter().map(|s| s.top_k(k)).collect::<Result<Vec<_>>>()?;
    let mut config = template.clone();
    config.n_features = n;
    config.task = data.task();
    Ok(StabilityReport {
        schema_version: REPORT_SCHEMA_VERSION,
        k,
        seeds: seeds.to_vec(),
        config,
        consistency: topk_consistency(&schemas, k)?,
        top_k_sets,
        schemas,
    })
}

/// Number of node projection entries with `|v| > threshold`.
pub fn active_projection_count(model: &StructuralCfn, threshold: f64) -> usize {
    let vals = model.store().values();
    model
        .projection_indices()
        .iter()
        .filter(|&&k| vals[k].abs() > threshold)
        .count()
}

pub const ACTIVE_THRESHOLD: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L1Comparison {
    pub seed: u64,
    pub strong_l1: f64,
    pub weak_l1: f64,
    pub active_strong: usize,
    pub active_weak: usize,
}

impl L1Comparison {
    pub fn sparser_under_strong(&self) -> bool {
        self.active_strong <= self.active_weak
    }
}

/// Trains the basic manifold at two penalty strengths per seed and counts active projections.
pub fn l1_sensitivity(
    n_samples: usize,
    seeds: &[u64],
    strong_l1: f64,
    weak_l1: f64,
    template: &ModelConfig,
) -> Result<Vec<L1Comparison>> {
    with_thread_pool(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let data = standardize_all(&synth_generate(&SynthSpec::basic(n_samples, seed))?)?;
                let count = |l1: f64| -> Result<usize> {
                    let config = ModelConfig {
                        seed,
                        l1,
                        ..template.clone()
                    };
                    let (model, _) = fit(&data, &config)?;
                    Ok(active_projection_count(&model, ACTIVE_THRESHOLD))
                };
                Ok(L1Comparison {
                    seed,
                    strong_l1,
                    weak_l1,
                    active_strong: count(strong_l1)?,
                    active_weak: count(weak_l1)?,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?
}
