use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

use super::Dataset;

/// Per-comparison significance threshold when three baselines are compared at 0.05.
pub const BONFERRONI_THRESHOLD: f64 = 0.05 / 3.0;

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (`n - 1` denominator); 0 for fewer than two values.
pub fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn population_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-sided.
    pub p: f64,
    pub df: usize,
    pub mean_diff: f64,
    pub sd_diff: f64,
    /// Set when the differences have zero spread but a nonzero mean.
    pub degenerate: bool,
}

/// Paired Student's t-test on `a - b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    check_len("paired t-test samples", a.len(), b.len())?;
    if a.len() < 2 {
        return Err(Error::Argument(format!(
            "paired t-test needs at least 2 pairs, got {}",
            a.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("paired t-test differences".into()));
    }
    let n = d.len();
    let m = mean(&d);
    let sd = sample_sd(&d);
    let df = n - 1;
    let base = TTest {
        t: 0.0,
        p: 1.0,
        df,
        mean_diff: m,
        sd_diff: sd,
        degenerate: false,
    };
    if d.iter().all(|&v| v == 0.0) {
        return Ok(base);
    }
    if sd == 0.0 {
        return Ok(TTest {
            t: f64::INFINITY.copysign(m),
            p: 0.0,
            degenerate: true,
            ..base
        });
    }
    let t = m / (sd / (n as f64).sqrt());
    Ok(TTest {
        t,
        p: student_t_two_sided_p(t, df as f64),
        ..base
    })
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    if !t.is_finite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_beta(x, df / 2.0, 0.5).clamp(0.0, 1.0)
}

/// Lanczos approximation (g = 7, 9 terms), accurate to ~1e-15 for positive arguments.
fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (k, c) in C.iter().enumerate().skip(1) {
        a += c / (x + k as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta `I_x(a, b)` by Lentz's continued fraction.
fn regularized_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_fraction(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_fraction(1.0 - x, b, a) / b
    }
}

fn beta_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let even = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        d = 1.0 + even * d;
        d = if d.abs() < TINY { 1.0 / TINY } else { 1.0 / d };
        c = 1.0 + even / c;
        if c.abs() < TINY {
            c = TINY;
        }
        h *= d * c;
        let odd = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
        d = 1.0 + odd * d;
        d = if d.abs() < TINY { 1.0 / TINY } else { 1.0 / d };
        c = 1.0 + odd / c;
        if c.abs() < TINY {
            c = TINY;
        }
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Solves `A x = b` for symmetric positive definite `A` (row-major, `n × n`) by Cholesky.
fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if d <= 0.0 || !d.is_finite() {
                    return None;
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * n + i];
    }
    Some(x)
}

/// Dataset noise descriptor `ξ = sd(y) / SNR` from an ordinary least-squares fit.
///
/// Features are standardized on all rows; `SNR = Var(ŷ) / Var(y - ŷ)`. Returns 0
/// when the fit is exact and 10 when the fit explains nothing (`Var(ŷ) < 1e-12`);
/// the result never exceeds 10.
pub fn noise_level_xi(ds: &Dataset) -> Result<f64> {
    const CAP: f64 = 10.0;
    let n = ds.n_rows();
    if n < 2 {
        return Err(Error::Data("noise level needs at least 2 rows".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let stats = ds.fit_standardization(&all)?;
    let p = ds.n_features() + 1;
    let design: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            let mut row = vec![1.0];
            row.extend(stats.transform_row(ds.row(r)));
            row
        })
        .collect();
    let y = ds.target();
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    for (row, &yr) in design.iter().zip(y) {
        for i in 0..p {
            xty[i] += row[i] * yr;
            for j in 0..p {
                xtx[i * p + j] += row[i] * row[j];
            }
        }
    }
    let beta = cholesky_solve(&xtx, &xty, p)
        .or_else(|| {
            let mut ridge = xtx.clone();
            for i in 0..p {
                ridge[i * p + i] += 1e-8;
            }
            cholesky_solve(&ridge, &xty, p)
        })
        .ok_or_else(|| Error::Data("least-squares system is singular even with ridge".into()))?;
    let fitted: Vec<f64> = design.iter().map(|row| crate::basis::dot(row, &beta)).collect();
    let resid: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let var_fit = population_var(&fitted);
    let var_resid = population_var(&resid);
    if var_fit < 1e-12 {
        return Ok(CAP);
    }
    if var_resid == 0.0 {
        return Ok(0.0);
    }
    let snr = var_fit / var_resid;
    Ok((population_var(y).sqrt() / snr).min(CAP))
}
