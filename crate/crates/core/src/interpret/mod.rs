//! Reading a trained model: dependency matrix, symbolic laws, gate mixes and top-k stability.

mod symbolic;

pub use symbolic::{extract_symbolic, linspace, parse_expr, Expr, SymbolicLaw, DISPLAY_DECIMALS};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::structnet::{GateMode, StructuralCfn};

/// Row-normalized directed influence: `m[i][j]` is how strongly node `i` reads feature `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionSchema {
    pub m: Vec<Vec<f64>>,
    pub feature_names: Vec<String>,
    /// Rows whose projections were all zero (emitted as zeros).
    pub zero_rows: Vec<usize>,
}

impl InteractionSchema {
    /// Wraps an existing matrix; rows summing to zero are flagged.
    pub fn from_matrix(m: Vec<Vec<f64>>, feature_names: Vec<String>) -> Self {
        let zero_rows = m
            .iter()
            .enumerate()
            .filter(|(_, r)| r.iter().all(|v| *v == 0.0))
            .map(|(i, _)| i)
            .collect();
        Self {
            m,
            feature_names,
            zero_rows,
        }
    }

    /// Replaces the default `x{k}` labels.
    pub fn with_feature_names(mut self, names: Vec<String>) -> Self {
        if names.len() == self.m.len() {
            self.feature_names = names;
        }
        self
    }

    pub fn n(&self) -> usize {
        self.m.len()
    }

    /// The `k` largest off-diagonal entries, strongest first; ties go to the lower `(i, j)`.
    pub fn top_k(&self, k: usize) -> Result<Vec<(usize, usize)>> {
        let n = self.n();
        let cells = n * n.saturating_sub(1);
        if k > cells {
            return Err(Error::Argument(format!(
                "top-{k} requested but an {n}-feature matrix has only {cells} off-diagonal entries"
            )));
        }
        let mut entries: Vec<((usize, usize), f64)> = Vec::with_capacity(cells);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    entries.push(((i, j), self.m[i][j]));
                }
            }
        }
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(entries.into_iter().take(k).map(|(ij, _)| ij).collect())
    }

    /// Header row and first column carry the feature names.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("feature");
        for name in &self.feature_names {
            s.push(',');
            s.push_str(&csv_field(name));
        }
        s.push('\n');
        for (name, row) in self.feature_names.iter().zip(&self.m) {
            s.push_str(&csv_field(name));
            for v in row {
                let _ = write!(s, ",{v:?}");
            }
            s.push('\n');
        }
        s
    }

    /// Directed graph with an edge `j -> i` for every `m[i][j] > threshold`.
    pub fn to_dot(&self, threshold: f64) -> String {
        let mut s = String::from("digraph interaction_schema {\n  rankdir=LR;\n");
        for name in &self.feature_names {
            let _ = writeln!(s, "  \"{}\";", dot_escape(name));
        }
        for (i, row) in self.m.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if i != j && v > threshold {
                    let _ = writeln!(
                        s,
                        "  \"{}\" -> \"{}\" [label=\"{:.3}\", penwidth={:.2}];",
                        dot_escape(&self.feature_names[j]),
                        dot_escape(&self.feature_names[i]),
                        v,
                        1.0 + 4.0 * v
                    );
                }
            }
        }
        s.push_str("}\n");
        s
    }
}

pub const DEFAULT_EDGE_THRESHOLD: f64 = 0.15;

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Maps position `k` of a masked (length `N-1`) vector for node `i` back to a feature index.
pub fn unmask_index(i: usize, k: usize) -> usize {
    if k < i {
        k
    } else {
        k + 1
    }
}

/// `m[i][j] = Σ_φ |gate_w_φ| · |v_φ,j| / Σ_k Σ_φ |gate_w_φ| · |v_φ,k|` per node.
///
/// Each basis channel is weighted by the magnitude of its gate projection component.
/// Open-interaction nodes have a single ungated projection weighted by one.
pub fn dependency_matrix(model: &StructuralCfn) -> InteractionSchema {
    let n = model.n_features();
    let mut m = vec![vec![0.0; n]; n];
    let mut zero_rows = Vec::new();
    for (i, row) in m.iter_mut().enumerate() {
        let node = model.node(i);
        let mut weighted = vec![0.0; n - 1];
        let mut channel = 0;
        if let Some((v, _)) = node.linear {
            for (w, p) in weighted.iter_mut().zip(v) {
                *w += p.abs();
            }
        }
        if let Some(p) = &node.poly {
            let g = node.gate_w[channel].abs();
            channel += 1;
            for (w, v) in weighted.iter_mut().zip(p.projection) {
                *w += g * v.abs();
            }
        }
        if let Some(s) = &node.sinusoid {
            let g = node.gate_w[channel].abs();
            for (w, v) in weighted.iter_mut().zip(s.projection) {
                *w += g * v.abs();
            }
        }
        let total: f64 = weighted.iter().sum();
        if total == 0.0 || !total.is_finite() {
            zero_rows.push(i);
            continue;
        }
        for (k, w) in weighted.iter().enumerate() {
            row[unmask_index(i, k)] = w / total;
        }
    }
    InteractionSchema {
        m,
        feature_names: feature_names(model),
        zero_rows,
    }
}

pub(crate) fn feature_names(model: &StructuralCfn) -> Vec<String> {
    (0..model.n_features()).map(|k| format!("x{k}")).collect()
}

/// Per-node activation mix `(α_sigmoid, α_tanh)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatePhysicsReport {
    pub per_node: Vec<[f64; 2]>,
    pub mean: [f64; 2],
    pub feature_names: Vec<String>,
}

impl GatePhysicsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("feature,alpha_sigmoid,alpha_tanh\n");
        for (name, a) in self.feature_names.iter().zip(&self.per_node) {
            let _ = writeln!(s, "{},{:?},{:?}", csv_field(name), a[0], a[1]);
        }
        let _ = writeln!(s, "mean,{:?},{:?}", self.mean[0], self.mean[1]);
        s
    }
}

pub fn gate_physics(model: &StructuralCfn) -> Result<GatePhysicsReport> {
    if model.config().gate_mode != GateMode::Adaptive || model.node(0).gate_p.is_none() {
        return Err(Error::Argument(format!(
            "gate physics needs an adaptive-gate model, this one is {}",
            model.config().variant().map_or("custom", |v| v.name())
        )));
    }
    let per_node: Vec<[f64; 2]> = (0..model.n_features())
        .map(|i| model.node(i).gate_mix().expect("adaptive nodes carry gate logits"))
        .collect();
    let n = per_node.len() as f64;
    let mean = [
        per_node.iter().map(|a| a[0]).sum::<f64>() / n,
        per_node.iter().map(|a| a[1]).sum::<f64>() / n,
    ];
    Ok(GatePhysicsReport {
        per_node,
        mean,
        feature_names: feature_names(model),
    })
}

/// Fraction of matrix pairs whose top-`k` entry sets coincide.
pub fn topk_consistency(matrices: &[InteractionSchema], k: usize) -> Result<f64> {
    if matrices.len() < 2 {
        return Err(Error::Argument("top-k consistency needs at least two matrices".into()));
    }
    let n = matrices[0].n();
    if matrices.iter().any(|m| m.n() != n) {
        return Err(Error::Argument("top-k consistency needs matrices of one shape".into()));
    }
    let sets: Vec<Vec<(usize, usize)>> = matrices
        .iter()
        .map(|m| {
            m.top_k(k).map(|mut s| {
                s.sort_unstable();
                s
            })
        })
        .collect::<Result<_>>()?;
    let mut same = 0usize;
    let mut total = 0usize;
    for a in 0..sets.len() {
        for b in a + 1..sets.len() {
            total += 1;
            same += usize::from(sets[a] == sets[b]);
        }
    }
    Ok(same as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structnet::{ModelConfig, Task, Variant};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(variant: Variant, n: usize, seed: u64) -> StructuralCfn {
        let mut model = StructuralCfn::new(ModelConfig::new(n, Task::Regression).with_variant(variant)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in model.store_mut().values_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        model
    }

    #[test]
    fn uniform_projection_row() {
        let mut model = StructuralCfn::new(ModelConfig::new(4, Task::Regression)).unwrap();
        for k in 0..3 {
            model.set_param(&format!("node.1.v_poly.{k}"), -0.7);
            model.set_param(&format!("node.1.v_sin.{k}"), 0.2);
        }
        model.set_param("node.1.gate_w.0", 1.0);
        model.set_param("node.1.gate_w.1", -2.0);
        let s = dependency_matrix(&model);
        assert_eq!(s.m[1][1], 0.0);
        for j in [0, 2, 3] {
            assert!((s.m[1][j] - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(s.zero_rows, vec![0, 2, 3]);
        assert!(s.m[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_entry_row() {
        let mut model = StructuralCfn::new(ModelConfig::new(4, Task::Regression)).unwrap();
        // node 2 sees (x0, x1, x3); position 2 is feature 3
        model.set_param("node.2.v_sin.2", 0.4);
        model.set_param("node.2.gate_w.1", 0.5);
        let s = dependency_matrix(&model);
        assert_eq!(s.m[2], vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn rows_are_stochastic_for_every_variant() {
        for (k, &variant) in Variant::ALL.iter().enumerate() {
            let s = dependency_matrix(&random_model(variant, 6, k as u64));
            for (i, row) in s.m.iter().enumerate() {
                assert_eq!(row[i], 0.0);
                assert!(row.iter().all(|v| *v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn exports() {
        let s = InteractionSchema::from_matrix(vec![vec![0.0, 1.0], vec![0.1, 0.0]], vec!["a".into(), "b,c".into()]);
        assert_eq!(s.to_csv(), "feature,a,\"b,c\"\na,0.0,1.0\n\"b,c\",0.1,0.0\n");
        let dot = s.to_dot(DEFAULT_EDGE_THRESHOLD);
        assert!(dot.contains("\"b,c\" -> \"a\""));
        assert!(!dot.contains("\"a\" -> \"b,c\""));
    }

    #[test]
    fn gate_examples() {
        let mut model = StructuralCfn::new(ModelConfig::new(3, Task::Regression)).unwrap();
        assert_eq!(gate_physics(&model).unwrap().mean, [0.5, 0.5]);
        for i in 0..3 {
            model.set_param(&format!("node.{i}.gate_p.0"), 10.0);
            model.set_param(&format!("node.{i}.gate_p.1"), -10.0);
        }
        let r = gate_physics(&model).unwrap();
        assert!(r.mean[0] > 0.999_999 && r.mean[1] < 1e-6);
        assert!(r.per_node.iter().all(|a| (a[0] + a[1] - 1.0).abs() < 1e-12));
        let fixed =
            StructuralCfn::new(ModelConfig::new(3, Task::Regression).with_variant(Variant::TanhPolarity)).unwrap();
        assert!(gate_physics(&fixed).is_err());
    }

    #[test]
    fn topk_examples() {
        let a = InteractionSchema::from_matrix(
            vec![vec![0.0, 0.9, 0.1], vec![0.5, 0.0, 0.5], vec![0.2, 0.8, 0.0]],
            vec![],
        );
        assert_eq!(a.top_k(3).unwrap(), vec![(0, 1), (2, 1), (1, 0)]);
        assert_eq!(topk_consistency(&[a.clone(), a.clone()], 3).unwrap(), 1.0);
        let b = InteractionSchema::from_matrix(
            vec![vec![0.0, 0.1, 0.9], vec![0.4, 0.0, 0.6], vec![0.9, 0.1, 0.0]],
            vec![],
        );
        assert_eq!(topk_consistency(&[a.clone(), b], 2).unwrap(), 0.0);
        assert!(topk_consistency(&[a.clone(), a.clone()], 7).is_err());
        assert!(topk_consistency(&[a], 1).is_err());
    }

    proptest! {
        #[test]
        fn topk_ignores_projection_scale(seed in any::<u64>(), c in 0.01f64..100.0) {
            let model = random_model(Variant::DifferentiableAdaptive, 5, seed);
            let mut scaled = model.clone();
            let idx: Vec<usize> = model.projection_indices().to_vec();
            for k in idx {
                scaled.store_mut().values_mut()[k] *= c;
            }
            let a = dependency_matrix(&model);
            let b = dependency_matrix(&scaled);
            prop_assert_eq!(a.top_k(3).unwrap(), b.top_k(3).unwrap());
        }
    }
}
