//! Tabular data: CSV ingestion, standardization, folds, statistics and synthetic manifolds.

mod stats;
mod synth;

pub use stats::{mean, noise_level_xi, paired_ttest, sample_sd, student_t_two_sided_p, TTest, BONFERRONI_THRESHOLD};
pub use synth::{
    coupling_scores, extended_recovery, recovery_score, synth_generate, synth_target, ExtendedRecovery, GroundTruth,
    RecoveryScore, SynthMode, SynthSpec,
};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::structnet::{Batch, Task};

/// Per-column z-score statistics fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    /// Population standard deviations; 1.0 for constant columns.
    pub stds: Vec<f64>,
    pub constant: Vec<bool>,
    /// Identity (0, 1) for binary targets.
    pub target_mean: f64,
    pub target_std: f64,
}

impl Standardization {
    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, v)| {
                if self.constant[j] {
                    0.0
                } else {
                    (v - self.means[j]) / self.stds[j]
                }
            })
            .collect()
    }

    pub fn transform_target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_std
    }

    pub fn inverse_target(&self, y: f64) -> f64 {
        y * self.target_std + self.target_mean
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    target: Vec<f64>,
    n_features: usize,
    feature_names: Vec<String>,
    target_name: String,
    task: Task,
    standardization: Option<Standardization>,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        target: Vec<f64>,
        feature_names: Vec<String>,
        target_name: impl Into<String>,
        task: Task,
    ) -> Result<Self> {
        let n_features = feature_names.len();
        crate::error::check_len("dataset features", target.len() * n_features, features.len())?;
        if let Some(k) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite feature at row {}, column '{}'",
                k / n_features.max(1),
                feature_names[k % n_features.max(1)]
            )));
        }
        if let Some(r) = target.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite target at row {r}")));
        }
        if task == Task::Binary {
            if let Some(r) = target.iter().position(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Data(format!(
                    "binary target must be 0 or 1, row {r} has {}",
                    target[r]
                )));
            }
        }
        Ok(Self {
            features,
            target,
            n_features,
            feature_names,
            target_name: target_name.into(),
            task,
            standardization: None,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.target.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn target_name(&self) -> &str {
        &self.target_name
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.features[r * self.n_features..(r + 1) * self.n_features]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows())
            .map(|r| self.features[r * self.n_features + j])
            .collect()
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    pub fn batch(&self) -> Batch<'_> {
        Batch::new(&self.features, &self.target, self.n_features).expect("dataset shape is checked on construction")
    }

    /// Rows `indices`, in the given order. Standardization metadata is kept.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        for &r in indices {
            features.extend_from_slice(self.row(r));
        }
        Dataset {
            features,
            target: indices.iter().map(|&r| self.target[r]).collect(),
            standardization: self.standardization.clone(),
            feature_names: self.feature_names.clone(),
            target_name: self.target_name.clone(),
            ..*self
        }
    }

    /// Population statistics over `fit_rows`. Columns with std below 1e-12 are flagged constant.
    pub fn fit_standardization(&self, fit_rows: &[usize]) -> Result<Standardization> {
        if fit_rows.is_empty() {
            return Err(Error::Data("standardization needs at least one fit row".into()));
        }
        let n = fit_rows.len() as f64;
        let mut means = vec![0.0; self.n_features];
        for &r in fit_rows {
            for (m, v) in means.iter_mut().zip(self.row(r)) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        let mut vars = vec![0.0; self.n_features];
        for &r in fit_rows {
            for ((s, v), m) in vars.iter_mut().zip(self.row(r)).zip(&means) {
                *s += (v - m).powi(2);
            }
        }
        let stds: Vec<f64> = vars.iter().map(|s| (s / n).sqrt()).collect();
        let constant: Vec<bool> = stds.iter().map(|s| *s < 1e-12).collect();
        let (target_mean, target_std) = match self.task {
            Task::Binary => (0.0, 1.0),
            Task::Regression => {
                let ys: Vec<f64> = fit_rows.iter().map(|&r| self.target[r]).collect();
                let m = mean(&ys);
                let sd = (ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / n).sqrt();
                (m, if sd < 1e-12 { 1.0 } else { sd })
            }
        };
        Ok(Standardization {
            stds: stds
                .iter()
                .zip(&constant)
                .map(|(s, c)| if *c { 1.0 } else { *s })
                .collect(),
            means,
            constant,
            target_mean,
            target_std,
        })
    }

    /// Applies `stats` to every row (and to a regression target).
    pub fn apply_standardization(&self, stats: &Standardization) -> Result<Dataset> {
        crate::error::check_len("standardization width", self.n_features, stats.means.len())?;
        let mut features = Vec::with_capacity(self.features.len());
        for r in 0..self.n_rows() {
            features.extend(stats.transform_row(self.row(r)));
        }
        Ok(Dataset {
            features,
            target: self.target.iter().map(|&y| stats.transform_target(y)).collect(),
            standardization: Some(stats.clone()),
            feature_names: self.feature_names.clone(),
            target_name: self.target_name.clone(),
            ..*self
        })
    }

    /// Writes a CSV with a header row; the target is the last column.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = self.feature_names.clone();
        header.push(self.target_name.clone());
        w.write_record(&header)?;
        for r in 0..self.n_rows() {
            let mut rec: Vec<String> = self.row(r).iter().map(|v| format!("{v:?}")).collect();
            rec.push(format!("{:?}", self.target[r]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fits on `fit_rows` and standardizes the whole dataset with those statistics.
pub fn standardize(ds: &Dataset, fit_rows: &[usize]) -> Result<Dataset> {
    let stats = ds.fit_standardization(fit_rows)?;
    ds.apply_standardization(&stats)
}

/// Reads a headered CSV; every non-target column becomes a feature.
pub fn load_csv(path: &Path, target_column: &str, task: Task) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let target_idx = headers.iter().position(|h| h == target_column).ok_or_else(|| {
        Error::Data(format!(
            "target column '{target_column}' not found in {}",
            path.display()
        ))
    })?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != target_idx)
        .map(|(_, h)| h.clone())
        .collect();
    let mut features = Vec::new();
    let mut target = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(Error::Data(format!(
                "{}: row {} has {} fields, header has {}",
                path.display(),
                r + 1,
                rec.len(),
                headers.len()
            )));
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Cell {
                path: path.to_path_buf(),
                row: r + 1,
                column: headers[j].clone(),
                message: format!("cannot parse '{cell}' as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Cell {
                    path: path.to_path_buf(),
                    row: r + 1,
                    column: headers[j].clone(),
                    message: format!("non-finite value '{cell}'"),
                });
            }
            if j == target_idx {
                if task == Task::Binary && v != 0.0 && v != 1.0 {
                    return Err(Error::Cell {
                        path: path.to_path_buf(),
                        row: r + 1,
                        column: headers[j].clone(),
                        message: format!("binary target must be 0 or 1, got {cell}"),
                    });
                }
                target.push(v);
            } else {
                features.push(v);
            }
        }
    }
    Dataset::new(features, target, feature_names, target_column, task)
}

/// One cross-validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle, then `k` contiguous test blocks; the first `n % k` blocks get one extra row.
pub fn kfold(n_rows: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Argument(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > n_rows {
        return Err(Error::Argument(format!("k = {k} exceeds the {n_rows} available rows")));
    }
    let mut perm: Vec<usize> = (0..n_rows).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n_rows / k;
    let extra = n_rows % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut test = perm[start..start + size].to_vec();
        let mut train: Vec<usize> = perm[..start].iter().chain(&perm[start + size..]).copied().collect();
        test.sort_unstable();
        train.sort_unstable();
        folds.push(Fold { train, test });
        start += size;
    }
    Ok(folds)
}
