//! Basis primitives: polynomial, sinusoid, sigmoid and linear function units.
//!
//! Parameter views borrow from a flat slice so the model can evaluate them in
//! place. Every `*_backward` function accumulates `upstream * d(value)/d(param)`
//! into a gradient slice laid out exactly like the parameter slice, and
//! optionally the input gradient.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `Σ c_k s^k`, Horner form.
pub fn poly_value(coeffs: &[f64], s: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * s + c)
}

/// `d/ds Σ c_k s^k`.
pub fn poly_slope(coeffs: &[f64], s: f64) -> f64 {
    coeffs
        .iter()
        .enumerate()
        .skip(1)
        .rev()
        .fold(0.0, |acc, (k, c)| acc * s + k as f64 * c)
}

/// Polynomial of a projection: `Σ c_k (v·x + b)^k`.
///
/// Slice layout: `[v_0 .. v_{n-1}, b, c_0 .. c_d]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolynomialParams<'a> {
    pub projection: &'a [f64],
    pub bias: f64,
    pub coeffs: &'a [f64],
}

impl<'a> PolynomialParams<'a> {
    pub fn slice_len(n_inputs: usize, degree: usize) -> usize {
        n_inputs + 1 + degree + 1
    }

    pub fn from_slice(params: &'a [f64], n_inputs: usize) -> Self {
        Self {
            projection: &params[..n_inputs],
            bias: params[n_inputs],
            coeffs: &params[n_inputs + 1..],
        }
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    fn validate(&self, x: &[f64]) -> Result<()> {
        if self.coeffs.len() < 2 {
            return Err(Error::Config(format!(
                "polynomial degree must be at least 1, got {} coefficients",
                self.coeffs.len()
            )));
        }
        check_len("polynomial projection", self.projection.len(), x.len())
    }

    pub fn pre_activation(&self, x: &[f64]) -> f64 {
        dot(self.projection, x) + self.bias
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        poly_value(self.coeffs, self.pre_activation(x))
    }

    pub fn backward(&self, x: &[f64], upstream: f64, grad: &mut [f64], input_grad: Option<&mut [f64]>) {
        let n = self.projection.len();
        let s = self.pre_activation(x);
        let ds = upstream * poly_slope(self.coeffs, s);
        for (g, xj) in grad[..n].iter_mut().zip(x) {
            *g += ds * xj;
        }
        grad[n] += ds;
        let mut pow = 1.0;
        for g in &mut grad[n + 1..] {
            *g += upstream * pow;
            pow *= s;
        }
        if let Some(gx) = input_grad {
            for (g, vj) in gx.iter_mut().zip(self.projection) {
                *g += ds * vj;
            }
        }
    }
}

/// Sinusoid of a projection: `A sin(ω (v·x) + phase)`. No projection bias.
///
/// Slice layout: `[v_0 .. v_{n-1}, A, ω, phase]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinusoidParams<'a> {
    pub projection: &'a [f64],
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

impl<'a> SinusoidParams<'a> {
    pub fn slice_len(n_inputs: usize) -> usize {
        n_inputs + 3
    }

    pub fn from_slice(params: &'a [f64], n_inputs: usize) -> Self {
        Self {
            projection: &params[..n_inputs],
            amplitude: params[n_inputs],
            frequency: params[n_inputs + 1],
            phase: params[n_inputs + 2],
        }
    }

    fn validate(&self, x: &[f64]) -> Result<()> {
        if ![self.amplitude, self.frequency, self.phase]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFinite("sinusoid parameters".into()));
        }
        check_len("sinusoid projection", self.projection.len(), x.len())
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.amplitude * (self.frequency * dot(self.projection, x) + self.phase).sin()
    }

    pub fn backward(&self, x: &[f64], upstream: f64, grad: &mut [f64], input_grad: Option<&mut [f64]>) {
        let n = self.projection.len();
        let s = dot(self.projection, x);
        let arg = self.frequency * s + self.phase;
        let (sin, cos) = arg.sin_cos();
        let d_arg = upstream * self.amplitude * cos;
        let ds = d_arg * self.frequency;
        for (g, xj) in grad[..n].iter_mut().zip(x) {
            *g += ds * xj;
        }
        grad[n] += upstream * sin;
        grad[n + 1] += d_arg * s;
        grad[n + 2] += d_arg;
        if let Some(gx) = input_grad {
            for (g, vj) in gx.iter_mut().zip(self.projection) {
                *g += ds * vj;
            }
        }
    }
}

/// Gradients of a basis unit with respect to its parameter slice and its input.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisGrad {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

pub fn poly_eval(p: &PolynomialParams<'_>, x: &[f64]) -> Result<f64> {
    p.validate(x)?;
    Ok(p.value(x))
}

pub fn poly_grad(p: &PolynomialParams<'_>, x: &[f64]) -> Result<(f64, BasisGrad)> {
    p.validate(x)?;
    let mut g = BasisGrad {
        params: vec![0.0; PolynomialParams::slice_len(x.len(), p.degree())],
        input: vec![0.0; x.len()],
    };
    p.backward(x, 1.0, &mut g.params, Some(&mut g.input));
    Ok((p.value(x), g))
}

pub fn sin_eval(p: &SinusoidParams<'_>, x: &[f64]) -> Result<f64> {
    p.validate(x)?;
    Ok(p.value(x))
}

pub fn sin_grad(p: &SinusoidParams<'_>, x: &[f64]) -> Result<(f64, BasisGrad)> {
    p.validate(x)?;
    let mut g = BasisGrad {
        params: vec![0.0; SinusoidParams::slice_len(x.len())],
        input: vec![0.0; x.len()],
    };
    p.backward(x, 1.0, &mut g.params, Some(&mut g.input));
    Ok((p.value(x), g))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    Polynomial,
    Sinusoid,
    Sigmoid,
}

impl HeadKind {
    /// Number of scalars a head of this kind owns over a `context_len`-wide input.
    pub fn param_len(self, context_len: usize, degree: usize) -> usize {
        match self {
            HeadKind::Linear | HeadKind::Sigmoid => context_len + 1,
            HeadKind::Polynomial => PolynomialParams::slice_len(context_len, degree),
            HeadKind::Sinusoid => SinusoidParams::slice_len(context_len),
        }
    }

    /// One linear bypass followed by polynomial and sinusoid heads, polynomial taking the odd one.
    pub fn default_committee(n_heads: usize) -> Vec<HeadKind> {
        let rest = n_heads.saturating_sub(1);
        let n_poly = rest.div_ceil(2);
        let mut kinds = vec![HeadKind::Linear];
        kinds.extend(std::iter::repeat_n(HeadKind::Polynomial, n_poly));
        kinds.extend(std::iter::repeat_n(HeadKind::Sinusoid, rest - n_poly));
        kinds
    }
}

/// One committee head over the residual context `u = [x, z]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CommitteeHead<'a> {
    /// `w·u + b`
    Linear { weights: &'a [f64], bias: f64 },
    /// `Σ c_k (w·u + b)^k`
    Polynomial(PolynomialParams<'a>),
    /// `A sin(ω (w·u) + phase)`
    Sinusoid(SinusoidParams<'a>),
    /// `σ(w·u + b)`
    Sigmoid { weights: &'a [f64], bias: f64 },
}

impl<'a> CommitteeHead<'a> {
    /// Views a head stored as `[w.., kind-specific..]`.
    pub fn from_slice(kind: HeadKind, params: &'a [f64], context_len: usize) -> Self {
        match kind {
            HeadKind::Linear => CommitteeHead::Linear {
                weights: &params[..context_len],
                bias: params[context_len],
            },
            HeadKind::Sigmoid => CommitteeHead::Sigmoid {
                weights: &params[..context_len],
                bias: params[context_len],
            },
            HeadKind::Polynomial => CommitteeHead::Polynomial(PolynomialParams::from_slice(params, context_len)),
            HeadKind::Sinusoid => CommitteeHead::Sinusoid(SinusoidParams::from_slice(params, context_len)),
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            CommitteeHead::Linear { .. } => HeadKind::Linear,
            CommitteeHead::Polynomial(_) => HeadKind::Polynomial,
            CommitteeHead::Sinusoid(_) => HeadKind::Sinusoid,
            CommitteeHead::Sigmoid { .. } => HeadKind::Sigmoid,
        }
    }

    pub fn weights(&self) -> &'a [f64] {
        match self {
            CommitteeHead::Linear { weights, .. } | CommitteeHead::Sigmoid { weights, .. } => weights,
            CommitteeHead::Polynomial(p) => p.projection,
            CommitteeHead::Sinusoid(p) => p.projection,
        }
    }

    pub fn value(&self, u: &[f64]) -> f64 {
        match self {
            CommitteeHead::Linear { weights, bias } => dot(weights, u) + bias,
            CommitteeHead::Sigmoid { weights, bias } => sigmoid(dot(weights, u) + bias),
            CommitteeHead::Polynomial(p) => p.value(u),
            CommitteeHead::Sinusoid(p) => p.value(u),
        }
    }

    pub fn backward(&self, u: &[f64], upstream: f64, grad: &mut [f64], input_grad: Option<&mut [f64]>) {
        let affine = |weights: &[f64], ds: f64, grad: &mut [f64], input_grad: Option<&mut [f64]>| {
            let n = weights.len();
            for (g, uj) in grad[..n].iter_mut().zip(u) {
                *g += ds * uj;
            }
            grad[n] += ds;
            if let Some(gu) = input_grad {
                for (g, wj) in gu.iter_mut().zip(weights) {
                    *g += ds * wj;
                }
            }
        };
        match self {
            CommitteeHead::Linear { weights, .. } => affine(weights, upstream, grad, input_grad),
            CommitteeHead::Sigmoid { weights, bias } => {
                let s = sigmoid(dot(weights, u) + bias);
                affine(weights, upstream * s * (1.0 - s), grad, input_grad)
            }
            CommitteeHead::Polynomial(p) => p.backward(u, upstream, grad, input_grad),
            CommitteeHead::Sinusoid(p) => p.backward(u, upstream, grad, input_grad),
        }
    }
}

pub fn head_eval(h: &CommitteeHead<'_>, u: &[f64]) -> Result<f64> {
    match h {
        CommitteeHead::Polynomial(p) => poly_eval(p, u),
        CommitteeHead::Sinusoid(p) => sin_eval(p, u),
        _ => {
            check_len("committee head weights", h.weights().len(), u.len())?;
            Ok(h.value(u))
        }
    }
}

pub fn head_grad(h: &CommitteeHead<'_>, u: &[f64]) -> Result<(f64, BasisGrad)> {
    let value = head_eval(h, u)?;
    let degree = match h {
        CommitteeHead::Polynomial(p) => p.degree(),
        _ => 0,
    };
    let mut g = BasisGrad {
        params: vec![0.0; h.kind().param_len(u.len(), degree)],
        input: vec![0.0; u.len()],
    };
    h.backward(u, 1.0, &mut g.params, Some(&mut g.input));
    Ok((value, g))
}
