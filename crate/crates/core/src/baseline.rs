//! Dense ReLU network baseline: `N → 32 → 16 → 1`.

use crate::error::{check_len, Error, Result};
use crate::gradengine::{Differentiable, ParamStore};
use crate::structnet::Task;

pub const HIDDEN: [usize; 2] = [32, 16];

/// Exact number of learnable scalars for `n_features` inputs.
pub fn mlp_param_count(n_features: usize) -> usize {
    let mut prev = n_features;
    let mut total = 0;
    for width in HIDDEN.into_iter().chain([1]) {
        total += width * prev + width;
        prev = width;
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dense {
    inputs: usize,
    outputs: usize,
    /// Row-major `(outputs, inputs)` weights followed by `outputs` biases.
    start: usize,
}

impl Dense {
    fn bias(&self) -> usize {
        self.start + self.inputs * self.outputs
    }

    fn apply(&self, vals: &[f64], x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let b = self.bias();
        for o in 0..self.outputs {
            let row = &vals[self.start + o * self.inputs..self.start + (o + 1) * self.inputs];
            out.push(crate::basis::dot(row, x) + vals[b + o]);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    task: Task,
    n_features: usize,
    layers: Vec<Dense>,
    store: ParamStore,
}

impl MlpModel {
    /// All weights and biases start at zero; see `training::init_mlp` for the seeded init.
    pub fn new(n_features: usize, task: Task) -> Result<Self> {
        if n_features == 0 {
            return Err(Error::Config("the MLP needs at least one input".into()));
        }
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let mut prev = n_features;
        for (l, width) in HIDDEN.into_iter().chain([1]).enumerate() {
            let start = store.len();
            for o in 0..width {
                store.push_vec(&format!("mlp.{l}.w.{o}"), prev, 0.0);
            }
            store.push_vec(&format!("mlp.{l}.b"), width, 0.0);
            layers.push(Dense {
                inputs: prev,
                outputs: width,
                start,
            });
            prev = width;
        }
        Ok(Self {
            task,
            n_features,
            layers,
            store,
        })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `(fan_in, weight index range)` of each layer, used by the initializer.
    pub fn weight_blocks(&self) -> Vec<(usize, std::ops::Range<usize>)> {
        self.layers.iter().map(|l| (l.inputs, l.start..l.bias())).collect()
    }

    /// Index of the output bias.
    pub fn output_bias_index(&self) -> usize {
        self.layers.last().map(|l| l.bias()).expect("mlp has layers")
    }

    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let vals = self.store.values();
        let mut acts = vec![x.to_vec()];
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.apply(vals, acts.last().unwrap(), &mut out);
            if l != last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(out);
        }
        acts
    }
}

pub fn mlp_forward(m: &MlpModel, x: &[f64]) -> Result<f64> {
    check_len("mlp input", m.n_features, x.len())?;
    Ok(m.predict_raw(x))
}

impl Differentiable for MlpModel {
    fn task(&self) -> Task {
        self.task
    }
    fn n_inputs(&self) -> usize {
        self.n_features
    }
    fn params(&self) -> &ParamStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn predict_raw(&self, x: &[f64]) -> f64 {
        self.activations(x).last().unwrap()[0]
    }
    fn backward_raw(&self, x: &[f64], d_out: &mut dyn FnMut(f64) -> f64, grads: &mut [f64]) -> f64 {
        let acts = self.activations(x);
        let y = acts.last().unwrap()[0];
        let vals = self.store.values();
        let mut delta = vec![d_out(y)];
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = &acts[l];
            let b = layer.bias();
            let mut d_in = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = layer.start + o * layer.inputs;
                for k in 0..layer.inputs {
                    grads[row + k] += d * input[k];
                    d_in[k] += d * vals[row + k];
                }
                grads[b + o] += d;
            }
            if l > 0 {
                // ReLU of the previous layer's output
                for (d, a) in d_in.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            delta = d_in;
        }
        y
    }
    fn penalized(&self) -> &[usize] {
        &[]
    }
    fn l1(&self) -> f64 {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradengine::finite_diff_check;
    use crate::structnet::{loss, loss_and_grad, Batch};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn param_count_examples() {
        assert_eq!(mlp_param_count(10), 897);
        assert_eq!(mlp_param_count(30), 1537);
        assert_eq!(mlp_param_count(8), 833);
        assert_eq!(MlpModel::new(10, Task::Regression).unwrap().store().len(), 897);
    }

    #[test]
    fn zero_weights_emit_output_bias() {
        let mut m = MlpModel::new(4, Task::Regression).unwrap();
        let b = m.output_bias_index();
        m.store_mut().values_mut()[b] = -1.25;
        assert_eq!(mlp_forward(&m, &[1.0, 2.0, 3.0, 4.0]).unwrap(), -1.25);
        assert!(mlp_forward(&m, &[1.0]).is_err());
    }

    #[test]
    fn passthrough_is_linear_for_positive_input() {
        let mut m = MlpModel::new(2, Task::Regression).unwrap();
        for name in ["mlp.0.w.0.0", "mlp.1.w.0.0", "mlp.2.w.0.0"] {
            let k = m.store().names().iter().position(|n| n == name).unwrap();
            m.store_mut().values_mut()[k] = 1.0;
        }
        assert_eq!(mlp_forward(&m, &[0.5, 9.0]).unwrap(), 0.5);
        assert_eq!(mlp_forward(&m, &[2.5, -9.0]).unwrap(), 2.5);
        assert_eq!(mlp_forward(&m, &[-2.5, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..10 {
            let n = 1 + trial % 5;
            let task = if trial % 2 == 0 { Task::Regression } else { Task::Binary };
            let mut m = MlpModel::new(n, task).unwrap();
            for v in m.store_mut().values_mut() {
                *v = rng.random_range(-0.6..0.6);
            }
            let rows = 5;
            let xs: Vec<f64> = (0..rows * n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let ys: Vec<f64> = (0..rows).map(|_| rng.random_range(0..2) as f64).collect();
            let batch = Batch::new(&xs, &ys, n).unwrap();
            loss_and_grad(&mut m, &batch).unwrap();
            let probe = m.clone();
            let r = finite_diff_check(
                |s| {
                    let mut q = probe.clone();
                    q.store_mut().set_values(s.values()).unwrap();
                    loss(&q, &batch).unwrap()
                },
                m.store(),
                1e-5,
                1e-4,
            );
            assert!(r.passed, "{r:?}");
        }
    }
}
