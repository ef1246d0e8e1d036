//! Parameter storage, the Adam update rule and a central-difference gradient checker.
//!
//! Every model in this crate keeps its learnable scalars in a single flat
//! [`ParamStore`]. The order of the scalars is fixed at construction time and
//! each one carries a path-like name (`node.3.v_poly.1`), so the same index
//! always refers to the same symbol across runs and serialization round trips.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Flat store of learnable values with a same-shaped gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    values: Vec<f64>,
    grads: Vec<f64>,
    names: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            grads: Vec::new(),
            names: Vec::new(),
        }
    }

    /// Appends one scalar and returns its index.
    pub fn push(&mut self, name: impl Into<String>, value: f64) -> usize {
        self.values.push(value);
        self.grads.push(0.0);
        self.names.push(name.into());
        self.values.len() - 1
    }

    /// Appends `len` scalars named `{prefix}.{k}` and returns the index of the first.
    pub fn push_vec(&mut self, prefix: &str, len: usize, value: f64) -> usize {
        let start = self.values.len();
        for k in 0..len {
            self.push(format!("{prefix}.{k}"), value);
        }
        start
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [f64] {
        &mut self.grads
    }

    pub(crate) fn grads_mut_vec(&mut self) -> &mut Vec<f64> {
        &mut self.grads
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Replaces all values; the length must match.
    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        crate::error::check_len("ParamStore::set_values", self.values.len(), values.len())?;
        self.values.copy_from_slice(values);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Hex SHA-256 over the little-endian bit patterns of the values.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for v in &self.values {
            hasher.update(v.to_bits().to_le_bytes());
        }
        hex_string(&hasher.finalize())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// A scalar-output model whose parameters live in a [`ParamStore`].
///
/// The trainer only talks to models through this trait, so every model kind
/// shares one optimizer, stopping rule and seeding protocol.
pub trait Differentiable {
    fn task(&self) -> crate::structnet::Task;
    fn n_inputs(&self) -> usize;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Raw output for one row (a logit for binary tasks). No shape checks.
    fn predict_raw(&self, x: &[f64]) -> f64;
    /// Computes the output `y`, then accumulates `d_out(y) * dy/dθ` into `grads`. Returns `y`.
    fn backward_raw(&self, x: &[f64], d_out: &mut dyn FnMut(f64) -> f64, grads: &mut [f64]) -> f64;
    /// Store indices carrying the L1 penalty.
    fn penalized(&self) -> &[usize];
    fn l1(&self) -> f64;
}

/// Adam optimizer state. One instance per [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            lr,
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            eps: Self::EPS,
        }
    }
}

/// One bias-corrected Adam step using the gradients currently held in `store`.
///
/// The gradients are left in place; callers zero them before the next pass.
/// If any gradient is non-finite nothing is modified.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    crate::error::check_len("adam_step moments", store.len(), state.m.len())?;
    if let Some(k) = store.grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient of '{}' is {}",
            store.names[k], store.grads[k]
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for k in 0..store.values.len() {
        let g = store.grads[k];
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g;
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[k] / bc1;
        let v_hat = state.v[k] / bc2;
        store.values[k] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Result of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    /// Largest error over all coordinates, `|a - n| / max(1, |a|, |n|)`.
    pub max_rel_error: f64,
    /// Coordinate name (or index) where the largest error occurred.
    pub worst: Option<String>,
    /// Coordinates whose error exceeded the tolerance.
    pub failures: Vec<(String, f64, f64)>,
    pub checked: usize,
    pub passed: bool,
}

/// Error measure used by the checker. Relative for large gradients, absolute below one.
pub fn gradient_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Checks `analytic` against central differences of `f` around `point`.
pub fn check_gradient<F>(f: F, point: &[f64], analytic: &[f64], h: f64, rel_tol: f64) -> CheckReport
where
    F: Fn(&[f64]) -> f64,
{
    check_named(f, point, analytic, None, h, rel_tol)
}

/// Checks the gradients stored in `store` against central differences of `forward`.
pub fn finite_diff_check<F>(forward: F, store: &ParamStore, h: f64, rel_tol: f64) -> CheckReport
where
    F: Fn(&ParamStore) -> f64,
{
    let eval = |vals: &[f64]| {
        let mut p = store.clone();
        p.values.copy_from_slice(vals);
        forward(&p)
    };
    check_named(eval, &store.values, &store.grads, Some(&store.names), h, rel_tol)
}

fn check_named<F>(f: F, point: &[f64], analytic: &[f64], names: Option<&[String]>, h: f64, rel_tol: f64) -> CheckReport
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(point.len(), analytic.len(), "gradient length mismatch");
    let mut x = point.to_vec();
    let mut report = CheckReport {
        max_rel_error: 0.0,
        worst: None,
        failures: Vec::new(),
        checked: point.len(),
        passed: true,
    };
    for k in 0..point.len() {
        let orig = x[k];
        x[k] = orig + h;
        let fp = f(&x);
        x[k] = orig - h;
        let fm = f(&x);
        x[k] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let err = gradient_error(analytic[k], numeric);
        let label = names.map_or_else(|| k.to_string(), |n| n[k].clone());
        if err.is_nan() || err > rel_tol {
            report.failures.push((label.clone(), analytic[k], numeric));
            report.passed = false;
        }
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = err;
            report.worst = Some(label);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_clears_everything() {
        let mut s = ParamStore::new();
        s.push("a", 1.0);
        s.push("b", 2.0);
        s.grads_mut().copy_from_slice(&[1.5, -2.0]);
        s.zero_grads();
        assert_eq!(s.grads(), &[0.0, 0.0]);
        s.zero_grads();
        assert_eq!(s.grads(), &[0.0, 0.0]);

        let mut empty = ParamStore::new();
        empty.zero_grads();
        assert!(empty.grads().is_empty());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        s.push("w", 1.0);
        s.grads_mut()[0] = 4.0;
        let mut st = AdamState::new(1, 0.01);
        adam_step(&mut s, &mut st).unwrap();
        let expected = 1.0 - 0.01 * 4.0 / (4.0 + 1e-8);
        assert!((s.values()[0] - expected).abs() < 1e-15);
        assert!((s.values()[0] - 0.99).abs() < 1e-9);
        assert_eq!(st.t, 1);
        // grads untouched
        assert_eq!(s.grads()[0], 4.0);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut s = ParamStore::new();
        s.push_vec("w", 3, 0.7);
        let mut st = AdamState::new(3, 0.01);
        adam_step(&mut s, &mut st).unwrap();
        assert_eq!(s.values(), &[0.7, 0.7, 0.7]);
    }

    #[test]
    fn adam_two_steps_match_straight_line_recurrence() {
        // independent transcription of the Adam recurrences
        let (lr, b1, b2, eps, g) = (0.01f64, 0.9f64, 0.999f64, 1e-8f64, 0.3f64);
        let mut theta = -0.25f64;
        let m1 = (1.0 - b1) * g;
        let v1 = (1.0 - b2) * g * g;
        theta -= lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let m2 = b1 * m1 + (1.0 - b1) * g;
        let v2 = b2 * v1 + (1.0 - b2) * g * g;
        theta -= lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);

        let mut s = ParamStore::new();
        s.push("w", -0.25);
        let mut st = AdamState::new(1, lr);
        for _ in 0..2 {
            s.grads_mut()[0] = g;
            adam_step(&mut s, &mut st).unwrap();
        }
        assert!((s.values()[0] - theta).abs() < 1e-15, "{} vs {theta}", s.values()[0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut s = ParamStore::new();
        s.push("node.0.v_poly.0", 1.0);
        s.push("node.0.v_poly.1", 1.0);
        s.grads_mut()[1] = f64::NAN;
        let mut st = AdamState::new(2, 0.01);
        let err = adam_step(&mut s, &mut st).unwrap_err().to_string();
        assert!(err.contains("node.0.v_poly.1"), "{err}");
        assert_eq!(s.values(), &[1.0, 1.0]);
        assert_eq!(st.t, 0);
    }

    #[test]
    fn adam_is_bit_deterministic() {
        let run = || {
            let mut s = ParamStore::new();
            s.push_vec("w", 4, 0.1);
            let mut st = AdamState::new(4, 0.01);
            for step in 0..10 {
                for (k, g) in s.grads_mut().iter_mut().enumerate() {
                    *g = ((step * 7 + k) as f64).sin();
                }
                adam_step(&mut s, &mut st).unwrap();
            }
            s.values().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn quadratic_check_passes() {
        let mut s = ParamStore::new();
        s.push("theta", 3.0);
        s.grads_mut()[0] = 6.0;
        let report = finite_diff_check(|p| p.values()[0].powi(2), &s, 1e-5, 1e-8);
        assert!(report.passed, "{report:?}");
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn constant_check_passes_and_wrong_gradient_fails() {
        let mut s = ParamStore::new();
        s.push_vec("c", 3, 1.0);
        let report = finite_diff_check(|_| 5.0, &s, 1e-5, 1e-10);
        assert!(report.passed);

        s.grads_mut()[2] = 0.5;
        let report = finite_diff_check(|_| 5.0, &s, 1e-5, 1e-4);
        assert!(!report.passed);
        assert_eq!(report.worst.as_deref(), Some("c.2"));
    }

    #[test]
    fn digest_tracks_values() {
        let mut a = ParamStore::new();
        a.push("x", 0.1);
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.values_mut()[0] = 0.1000000000000001;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }
}
