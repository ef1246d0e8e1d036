use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interpret::InteractionSchema;
use crate::structnet::Task;

use super::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMode {
    /// Five features: `y = x0² + sin(3·x1·x2) + ε`, with x3 and x4 pure noise.
    Basic,
    /// Twenty features: `y = x0² + Σ sin(3·xa·xb) + ε` over five coupled pairs.
    Extended,
}

impl std::str::FromStr for SynthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(SynthMode::Basic),
            "extended" => Ok(SynthMode::Extended),
            other => Err(Error::Argument(format!(
                "unknown synthetic mode '{other}' (basic|extended)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub mode: SynthMode,
    pub n_samples: usize,
    pub noise_sd: f64,
    pub seed: u64,
    pub n_features: usize,
    pub coupled_pairs: Vec<(usize, usize)>,
}

impl SynthSpec {
    pub fn basic(n_samples: usize, seed: u64) -> Self {
        Self {
            mode: SynthMode::Basic,
            n_samples,
            noise_sd: 0.1,
            seed,
            n_features: 5,
            coupled_pairs: vec![(1, 2)],
        }
    }

    pub fn extended(n_samples: usize, seed: u64) -> Self {
        Self {
            mode: SynthMode::Extended,
            n_samples,
            noise_sd: 0.1,
            seed,
            n_features: 20,
            coupled_pairs: vec![(1, 2), (3, 4), (5, 6), (7, 8), (9, 10)],
        }
    }

    pub fn new(mode: SynthMode, n_samples: usize, seed: u64) -> Self {
        match mode {
            SynthMode::Basic => Self::basic(n_samples, seed),
            SynthMode::Extended => Self::extended(n_samples, seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Argument("synthetic dataset needs at least one sample".into()));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::Argument(format!(
                "noise sd must be finite and >= 0, got {}",
                self.noise_sd
            )));
        }
        let mut used = vec![false; self.n_features];
        used[0] = true;
        for &(a, b) in &self.coupled_pairs {
            for k in [a, b] {
                if k >= self.n_features {
                    return Err(Error::Argument(format!("pair index {k} out of range")));
                }
                if used[k] {
                    return Err(Error::Argument(format!("feature {k} appears in two terms")));
                }
                used[k] = true;
            }
        }
        Ok(())
    }

    pub fn ground_truth(&self) -> GroundTruth {
        let mut used = vec![false; self.n_features];
        used[0] = true;
        for &(a, b) in &self.coupled_pairs {
            used[a] = true;
            used[b] = true;
        }
        GroundTruth {
            pairs: self.coupled_pairs.clone(),
            noise_features: (0..self.n_features).filter(|&k| !used[k]).collect(),
        }
    }

    fn feature_is_uniform(&self, k: usize) -> bool {
        match self.mode {
            // x0..x2 uniform, x3 and x4 Gaussian
            SynthMode::Basic => k < 3,
            SynthMode::Extended => k == 0 || self.coupled_pairs.iter().any(|&(a, b)| a == k || b == k),
        }
    }
}

/// Known interaction structure of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub pairs: Vec<(usize, usize)>,
    pub noise_features: Vec<usize>,
}

/// Noise-free target of one row.
pub fn synth_target(spec: &SynthSpec, x: &[f64]) -> f64 {
    x[0] * x[0]
        + spec
            .coupled_pairs
            .iter()
            .map(|&(a, b)| (3.0 * x[a] * x[b]).sin())
            .sum::<f64>()
}

/// Draws `n_samples` rows; per row the features in index order, then the noise term.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sd).map_err(|e| Error::Argument(e.to_string()))?;
    let n = spec.n_features;
    let mut features = Vec::with_capacity(spec.n_samples * n);
    let mut target = Vec::with_capacity(spec.n_samples);
    let mut row = vec![0.0; n];
    for _ in 0..spec.n_samples {
        for (k, v) in row.iter_mut().enumerate() {
            *v = if spec.feature_is_uniform(k) {
                rng.random_range(-1.0..1.0)
            } else {
                StandardNormal.sample(&mut rng)
            };
        }
        target.push(synth_target(spec, &row) + noise.sample(&mut rng));
        features.extend_from_slice(&row);
    }
    let names = (0..n).map(|k| format!("x{k}")).collect();
    Dataset::new(features, target, names, "y", Task::Regression)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScore {
    /// `M[a][b] + M[b][a]` per true pair.
    pub pair_scores: Vec<f64>,
    /// Strongest bidirectional coupling `M[f][k] + M[k][f]` of any pure-noise feature `f`.
    pub max_noise_score: f64,
    pub success: bool,
}

pub fn recovery_score(schema: &InteractionSchema, truth: &GroundTruth) -> Result<RecoveryScore> {
    let n = schema.m.len();
    for &(a, b) in &truth.pairs {
        if a >= n || b >= n {
            return Err(Error::Argument(format!("pair ({a}, {b}) outside a {n}-feature schema")));
        }
    }
    if let Some(&k) = truth.noise_features.iter().find(|&&k| k >= n) {
        return Err(Error::Argument(format!(
            "noise feature {k} outside a {n}-feature schema"
        )));
    }
    let pair_scores: Vec<f64> = truth
        .pairs
        .iter()
        .map(|&(a, b)| schema.m[a][b] + schema.m[b][a])
        .collect();
    let mut max_noise_score = 0.0f64;
    for &f in &truth.noise_features {
        for k in (0..n).filter(|&k| k != f) {
            max_noise_score = max_noise_score.max(schema.m[f][k] + schema.m[k][f]);
        }
    }
    Ok(RecoveryScore {
        success: pair_scores.iter().all(|&s| s > max_noise_score),
        pair_scores,
        max_noise_score,
    })
}

/// Bidirectional couplings `M[a][b] + M[b][a]` of every unordered pair, strongest first
/// (ties broken by the lower index pair).
pub fn coupling_scores(schema: &InteractionSchema) -> Vec<((usize, usize), f64)> {
    let n = schema.m.len();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for a in 0..n {
        for b in a + 1..n {
            out.push(((a, b), schema.m[a][b] + schema.m[b][a]));
        }
    }
    out.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    out
}

/// Scoring of the twenty-feature experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtendedRecovery {
    pub pair_scores: Vec<f64>,
    pub top_pairs: Vec<(usize, usize)>,
    /// True pairs found among the `pairs.len()` strongest couplings.
    pub recovered: Vec<(usize, usize)>,
    pub min_recovered_score: f64,
    /// Strongest coupling of each pure-noise feature to any other feature.
    pub noise_max_coupling: Vec<(usize, f64)>,
    /// Noise features whose strongest coupling exceeds `min_recovered_score`.
    pub false_positives: Vec<usize>,
}

pub fn extended_recovery(schema: &InteractionSchema, truth: &GroundTruth) -> Result<ExtendedRecovery> {
    let basic = recovery_score(schema, truth)?;
    let ranked = coupling_scores(schema);
    let top_pairs: Vec<(usize, usize)> = ranked.iter().take(truth.pairs.len()).map(|(p, _)| *p).collect();
    let normalized = |&(a, b): &(usize, usize)| (a.min(b), a.max(b));
    let recovered: Vec<(usize, usize)> = truth
        .pairs
        .iter()
        .map(normalized)
        .filter(|p| top_pairs.contains(p))
        .collect();
    let min_recovered_score = recovered
        .iter()
        .map(|&(a, b)| schema.m[a][b] + schema.m[b][a])
        .fold(f64::INFINITY, f64::min);
    let noise_max_coupling: Vec<(usize, f64)> = truth
        .noise_features
        .iter()
        .map(|&f| {
            let best = ranked
                .iter()
                .filter(|((a, b), _)| *a == f || *b == f)
                .map(|(_, s)| *s)
                .fold(0.0, f64::max);
            (f, best)
        })
        .collect();
    let false_positives = noise_max_coupling
        .iter()
        .filter(|(_, s)| *s > min_recovered_score)
        .map(|(f, _)| *f)
        .collect();
    Ok(ExtendedRecovery {
        pair_scores: basic.pair_scores,
        top_pairs,
        recovered,
        min_recovered_score,
        noise_max_coupling,
        false_positives,
    })
}
