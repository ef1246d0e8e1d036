//! The structural compositional function network.
//!
//! A model has two stages. The dependency layer holds one masked node per
//! feature; node `i` only ever sees `x` with coordinate `i` removed and emits a
//! scalar context `z_i`. The committee then reads `u = [x, z]` and sums one
//! linear bypass head with a handful of nonlinear basis heads.
//!
//! Canonical parameter order, node by node and then head by head:
//!
//! ```text
//! node.i : v_poly (N-1) | b_poly | coeff (d+1) | v_sin (N-1) | amplitude | frequency | phase | gate_w (C) | gate_p (2)
//! head.j : w (2N) | kind-specific scalars
//! ```
//!
//! Variants drop the blocks they do not use (see [`NodeMode`] and [`GateMode`]).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::basis::{dot, sigmoid, CommitteeHead, HeadKind, PolynomialParams, SinusoidParams};
use crate::error::{check_len, Error, Result};
use crate::gradengine::{Differentiable, ParamStore};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Binary,
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reg" | "regression" => Ok(Task::Regression),
            "bin" | "binary" | "classification" => Ok(Task::Binary),
            other => Err(Error::Argument(format!("unknown task '{other}' (expected reg|binary)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// `α₁σ(g) + α₂tanh(g)` with `α = softmax(p)`.
    Adaptive,
    SigmoidOnly,
    TanhOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeMode {
    /// Polynomial and sinusoid channels, layer-normalized, then gated.
    Hybrid,
    SinusoidOnly,
    PolynomialOnly,
    /// `z_i = v·x₋ᵢ + b`, no basis and no gate.
    LinearOpen,
}

/// Named architecture variants used for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    DifferentiableAdaptive,
    GatedAttention,
    TanhPolarity,
    SinusoidalOnly,
    PolynomialOnly,
    OpenInteraction,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::DifferentiableAdaptive,
        Variant::GatedAttention,
        Variant::TanhPolarity,
        Variant::SinusoidalOnly,
        Variant::PolynomialOnly,
        Variant::OpenInteraction,
    ];

    pub fn modes(self) -> (GateMode, NodeMode) {
        match self {
            Variant::DifferentiableAdaptive => (GateMode::Adaptive, NodeMode::Hybrid),
            Variant::GatedAttention => (GateMode::SigmoidOnly, NodeMode::Hybrid),
            Variant::TanhPolarity => (GateMode::TanhOnly, NodeMode::Hybrid),
            Variant::SinusoidalOnly => (GateMode::Adaptive, NodeMode::SinusoidOnly),
            Variant::PolynomialOnly => (GateMode::Adaptive, NodeMode::PolynomialOnly),
            Variant::OpenInteraction => (GateMode::Adaptive, NodeMode::LinearOpen),
        }
    }

    pub fn from_modes(gate: GateMode, node: NodeMode) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.modes() == (gate, node))
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::DifferentiableAdaptive => "differentiable_adaptive",
            Variant::GatedAttention => "gated_attention",
            Variant::TanhPolarity => "tanh_polarity",
            Variant::SinusoidalOnly => "sinusoidal_only",
            Variant::PolynomialOnly => "polynomial_only",
            Variant::OpenInteraction => "open_interaction",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let alias = match s {
            "adaptive" => "differentiable_adaptive",
            "sigmoid_only" => "gated_attention",
            "tanh_only" => "tanh_polarity",
            "sinusoid_only" => "sinusoidal_only",
            "linear_open" => "open_interaction",
            other => other,
        };
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == alias)
            .ok_or_else(|| Error::Argument(format!("unknown variant '{s}'")))
    }
}

/// Architecture plus training hyperparameters for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_features: usize,
    pub degree: usize,
    pub head_kinds: Vec<HeadKind>,
    pub gate_mode: GateMode,
    pub node_mode: NodeMode,
    pub task: Task,
    pub l1: f64,
    pub seed: u64,
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    /// `None` selects 64 below 5,000 training rows and 512 otherwise.
    pub batch_size: Option<usize>,
}

impl ModelConfig {
    pub const DEFAULT_DEGREE: usize = 2;
    pub const DEFAULT_HEADS: usize = 4;
    pub const DEFAULT_L1: f64 = 1e-4;
    pub const DEFAULT_SEED: u64 = 42;

    pub fn new(n_features: usize, task: Task) -> Self {
        Self {
            n_features,
            degree: Self::DEFAULT_DEGREE,
            head_kinds: HeadKind::default_committee(Self::DEFAULT_HEADS),
            gate_mode: GateMode::Adaptive,
            node_mode: NodeMode::Hybrid,
            task,
            l1: Self::DEFAULT_L1,
            seed: Self::DEFAULT_SEED,
            lr: 0.01,
            epochs: 200,
            patience: 20,
            batch_size: None,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        (self.gate_mode, self.node_mode) = variant.modes();
        self
    }

    pub fn with_heads(mut self, n_heads: usize) -> Self {
        self.head_kinds = HeadKind::default_committee(n_heads);
        self
    }

    pub fn n_heads(&self) -> usize {
        self.head_kinds.len()
    }

    pub fn variant(&self) -> Option<Variant> {
        Variant::from_modes(self.gate_mode, self.node_mode)
    }

    pub fn batch_size_for(&self, n_rows: usize) -> usize {
        self.batch_size.unwrap_or(if n_rows < 5000 { 64 } else { 512 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_features < 2 {
            return Err(Error::Config(format!(
                "at least 2 features are required, got {}",
                self.n_features
            )));
        }
        if self.degree < 1 {
            return Err(Error::Config("polynomial degree must be >= 1".into()));
        }
        if self.head_kinds.first() != Some(&HeadKind::Linear)
            || self.head_kinds.iter().filter(|k| **k == HeadKind::Linear).count() != 1
        {
            return Err(Error::Config(
                "the committee needs exactly one linear head, placed first".into(),
            ));
        }
        if self.node_mode == NodeMode::LinearOpen && self.gate_mode != GateMode::Adaptive {
            return Err(Error::Config(format!(
                "open-interaction nodes have no gate; gate mode {:?} is inconsistent",
                self.gate_mode
            )));
        }
        if !(self.l1 >= 0.0 && self.l1.is_finite()) {
            return Err(Error::Config(format!("l1 must be finite and >= 0, got {}", self.l1)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Absolute offsets of one node's parameter blocks.
#[derive(Debug, Clone, PartialEq)]
struct NodeLayout {
    poly: Option<usize>,
    sin: Option<usize>,
    linear: Option<usize>,
    gate_w: Option<usize>,
    gate_p: Option<usize>,
    channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct HeadLayout {
    kind: HeadKind,
    start: usize,
    len: usize,
}

/// Parameter counts of one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    /// Length of the constructed parameter store.
    pub exact: usize,
    /// Closed-form sum over the per-node and per-head inventories.
    pub enumerated: usize,
    /// `N(2N+d+8) + (2N+1)K`.
    pub formula: usize,
}

pub fn param_count(config: &ModelConfig) -> Result<ParamCount> {
    let model = StructuralCfn::new(config.clone())?;
    let n = config.n_features;
    let d = config.degree;
    let gate_p = if config.gate_mode == GateMode::Adaptive { 2 } else { 0 };
    let per_node = match config.node_mode {
        NodeMode::Hybrid => 2 * (n - 1) + 1 + (d + 1) + 3 + 2 + gate_p,
        NodeMode::PolynomialOnly => (n - 1) + 1 + (d + 1) + 1 + gate_p,
        NodeMode::SinusoidOnly => (n - 1) + 3 + 1 + gate_p,
        NodeMode::LinearOpen => n,
    };
    let heads: usize = config.head_kinds.iter().map(|k| k.param_len(2 * n, d)).sum();
    Ok(ParamCount {
        exact: model.store.len(),
        enumerated: n * per_node + heads,
        formula: n * (2 * n + d + 8) + (2 * n + 1) * config.n_heads(),
    })
}

/// `(h - mean) / sqrt(var + eps)` with population variance and no affine.
pub fn layer_norm(h: &[f64], eps: f64) -> Vec<f64> {
    if h.is_empty() {
        return Vec::new();
    }
    let n = h.len() as f64;
    let mean = h.iter().sum::<f64>() / n;
    let var = h.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    h.iter().map(|v| (v - mean) * inv).collect()
}

/// Pulls a gradient on the normalized outputs back to the inputs.
pub fn layer_norm_backward(h: &[f64], eps: f64, d_out: &[f64]) -> Vec<f64> {
    let n = h.len() as f64;
    let mean = h.iter().sum::<f64>() / n;
    let var = h.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    let y: Vec<f64> = h.iter().map(|v| (v - mean) * inv).collect();
    let mean_d = d_out.iter().sum::<f64>() / n;
    let mean_dy = d_out.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / n;
    d_out
        .iter()
        .zip(&y)
        .map(|(d, yi)| inv * (d - mean_d - yi * mean_dy))
        .collect()
}

fn softmax2(p: &[f64]) -> [f64; 2] {
    let m = p[0].max(p[1]);
    let a = (p[0] - m).exp();
    let b = (p[1] - m).exp();
    [a / (a + b), b / (a + b)]
}

/// Read-only view of one dependency node.
#[derive(Debug, Clone, Copy)]
pub struct HybridNode<'a> {
    pub index: usize,
    pub poly: Option<PolynomialParams<'a>>,
    pub sinusoid: Option<SinusoidParams<'a>>,
    /// Open-interaction projection and bias.
    pub linear: Option<(&'a [f64], f64)>,
    pub gate_w: &'a [f64],
    pub gate_p: Option<&'a [f64]>,
    pub gate_mode: GateMode,
    pub ln_eps: f64,
    layout: &'a NodeLayout,
}

struct NodeTrace {
    h: [f64; 2],
    normed: [f64; 2],
    g: f64,
    z: f64,
}

impl<'a> HybridNode<'a> {
    pub fn n_inputs(&self) -> usize {
        self.poly
            .map(|p| p.projection.len())
            .or(self.sinusoid.map(|s| s.projection.len()))
            .or(self.linear.map(|l| l.0.len()))
            .unwrap_or(0)
    }

    /// `softmax(gate_p)` for adaptive nodes.
    pub fn gate_mix(&self) -> Option<[f64; 2]> {
        self.gate_p.map(softmax2)
    }

    /// Basis channels in layer-norm order (polynomial first).
    pub fn channels(&self, x_minus_i: &[f64]) -> Vec<f64> {
        let mut h = Vec::with_capacity(2);
        if let Some(p) = &self.poly {
            h.push(p.value(x_minus_i));
        }
        if let Some(s) = &self.sinusoid {
            h.push(s.value(x_minus_i));
        }
        h
    }

    /// Context `z_i` from the masked input.
    pub fn context(&self, x_minus_i: &[f64]) -> Result<f64> {
        check_len("node input (x without feature i)", self.n_inputs(), x_minus_i.len())?;
        Ok(self.trace(x_minus_i).z)
    }

    /// Applies the gate to a pre-activation `g`.
    pub fn gate(&self, g: f64) -> f64 {
        match self.gate_mode {
            GateMode::SigmoidOnly => sigmoid(g),
            GateMode::TanhOnly => g.tanh(),
            GateMode::Adaptive => {
                let a = self.gate_mix().unwrap_or([0.5, 0.5]);
                a[0] * sigmoid(g) + a[1] * g.tanh()
            }
        }
    }

    fn trace(&self, x: &[f64]) -> NodeTrace {
        if let Some((v, b)) = self.linear {
            let z = dot(v, x) + b;
            return NodeTrace {
                h: [0.0; 2],
                normed: [0.0; 2],
                g: z,
                z,
            };
        }
        let mut h = [0.0; 2];
        let mut c = 0;
        if let Some(p) = &self.poly {
            h[c] = p.value(x);
            c += 1;
        }
        if let Some(s) = &self.sinusoid {
            h[c] = s.value(x);
            c += 1;
        }
        let mut normed = [0.0; 2];
        if c == 2 {
            let n = layer_norm(&h, self.ln_eps);
            normed.copy_from_slice(&n);
        } else {
            normed[0] = h[0];
        }
        let g = dot(self.gate_w, &normed[..c]);
        NodeTrace {
            h,
            normed,
            g,
            z: self.gate(g),
        }
    }

    /// Accumulates `upstream * dz/dθ` into the model-wide `grads` and, if given, `dz/dx₋ᵢ`.
    fn backward(&self, x: &[f64], upstream: f64, grads: &mut [f64], mut input_grad: Option<&mut [f64]>) -> f64 {
        let t = self.trace(x);
        let l = self.layout;
        if let (Some((v, _)), Some(start)) = (self.linear, l.linear) {
            let n = v.len();
            for (g, xj) in grads[start..start + n].iter_mut().zip(x) {
                *g += upstream * xj;
            }
            grads[start + n] += upstream;
            if let Some(gx) = input_grad {
                for (g, vj) in gx.iter_mut().zip(v) {
                    *g += upstream * vj;
                }
            }
            return t.z;
        }
        let sg = sigmoid(t.g);
        let th = t.g.tanh();
        let dsig = sg * (1.0 - sg);
        let dtanh = 1.0 - th * th;
        let dz_dg = match self.gate_mode {
            GateMode::SigmoidOnly => dsig,
            GateMode::TanhOnly => dtanh,
            GateMode::Adaptive => {
                let a = self.gate_mix().expect("adaptive node without gate logits");
                if let Some(pi) = l.gate_p {
                    let d_alpha = [upstream * sg, upstream * th];
                    let avg = a[0] * d_alpha[0] + a[1] * d_alpha[1];
                    grads[pi] += a[0] * (d_alpha[0] - avg);
                    grads[pi + 1] += a[1] * (d_alpha[1] - avg);
                }
                a[0] * dsig + a[1] * dtanh
            }
        };
        let dg = upstream * dz_dg;
        let c = l.channels;
        let wi = l.gate_w.expect("gated node without gate weights");
        let mut dn = [0.0; 2];
        for k in 0..c {
            grads[wi + k] += dg * t.normed[k];
            dn[k] = dg * self.gate_w[k];
        }
        let dh = if c == 2 {
            let d = layer_norm_backward(&t.h, self.ln_eps, &dn);
            [d[0], d[1]]
        } else {
            dn
        };
        let mut k = 0;
        if let (Some(p), Some(start)) = (&self.poly, l.poly) {
            let len = PolynomialParams::slice_len(x.len(), p.degree());
            p.backward(x, dh[k], &mut grads[start..start + len], input_grad.as_deref_mut());
            k += 1;
        }
        if let (Some(s), Some(start)) = (&self.sinusoid, l.sin) {
            let len = SinusoidParams::slice_len(x.len());
            s.backward(x, dh[k], &mut grads[start..start + len], input_grad);
        }
        t.z
    }
}

/// Output of a full forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    /// Prediction; a logit for binary tasks.
    pub y: f64,
    pub z: Vec<f64>,
    /// `[x, z]`
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuralCfn {
    config: ModelConfig,
    store: ParamStore,
    nodes: Vec<NodeLayout>,
    heads: Vec<HeadLayout>,
    penalized: Vec<usize>,
}

/// Builds a model for the configured variant with every parameter set to zero.
pub fn build_variant(config: &ModelConfig) -> Result<StructuralCfn> {
    StructuralCfn::new(config.clone())
}

impl StructuralCfn {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let n = config.n_features;
        let m = n - 1;
        let d = config.degree;
        let mut store = ParamStore::new();
        let mut nodes = Vec::with_capacity(n);
        let mut penalized = Vec::new();
        for i in 0..n {
            let mut layout = NodeLayout {
                poly: None,
                sin: None,
                linear: None,
                gate_w: None,
                gate_p: None,
                channels: 0,
            };
            let p = |s: &str| format!("node.{i}.{s}");
            if config.node_mode == NodeMode::LinearOpen {
                let start = store.push_vec(&p("v_lin"), m, 0.0);
                store.push(p("b_lin"), 0.0);
                penalized.extend(start..start + m);
                layout.linear = Some(start);
                nodes.push(layout);
                continue;
            }
            if matches!(config.node_mode, NodeMode::Hybrid | NodeMode::PolynomialOnly) {
                let start = store.push_vec(&p("v_poly"), m, 0.0);
                store.push(p("b_poly"), 0.0);
                store.push_vec(&p("coeff"), d + 1, 0.0);
                penalized.extend(start..start + m);
                layout.poly = Some(start);
                layout.channels += 1;
            }
            if matches!(config.node_mode, NodeMode::Hybrid | NodeMode::SinusoidOnly) {
                let start = store.push_vec(&p("v_sin"), m, 0.0);
                store.push(p("amplitude"), 0.0);
                store.push(p("frequency"), 0.0);
                store.push(p("phase"), 0.0);
                penalized.extend(start..start + m);
                layout.sin = Some(start);
                layout.channels += 1;
            }
            layout.gate_w = Some(store.push_vec(&p("gate_w"), layout.channels, 0.0));
            if config.gate_mode == GateMode::Adaptive {
                layout.gate_p = Some(store.push_vec(&p("gate_p"), 2, 0.0));
            }
            nodes.push(layout);
        }
        let mut heads = Vec::with_capacity(config.n_heads());
        for (j, &kind) in config.head_kinds.iter().enumerate() {
            let start = store.len();
            let p = |s: &str| format!("head.{j}.{s}");
            store.push_vec(&p("w"), 2 * n, 0.0);
            match kind {
                HeadKind::Linear | HeadKind::Sigmoid => {
                    store.push(p("bias"), 0.0);
                }
                HeadKind::Polynomial => {
                    store.push(p("bias"), 0.0);
                    store.push_vec(&p("coeff"), d + 1, 0.0);
                }
                HeadKind::Sinusoid => {
                    store.push(p("amplitude"), 0.0);
                    store.push(p("frequency"), 0.0);
                    store.push(p("phase"), 0.0);
                }
            }
            heads.push(HeadLayout {
                kind,
                start,
                len: store.len() - start,
            });
        }
        Ok(Self {
            config,
            store,
            nodes,
            heads,
            penalized,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_features(&self) -> usize {
        self.config.n_features
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Value of the named parameter.
    pub fn param(&self, name: &str) -> Option<f64> {
        let k = self.store.names().iter().position(|n| n == name)?;
        Some(self.store.values()[k])
    }

    /// Sets the named parameter; returns false if no such name exists.
    pub fn set_param(&mut self, name: &str, value: f64) -> bool {
        match self.store.names().iter().position(|n| n == name) {
            Some(k) => {
                self.store.values_mut()[k] = value;
                true
            }
            None => false,
        }
    }

    pub fn node(&self, i: usize) -> HybridNode<'_> {
        let l = &self.nodes[i];
        let vals = self.store.values();
        let m = self.config.n_features - 1;
        let d = self.config.degree;
        HybridNode {
            index: i,
            poly: l
                .poly
                .map(|s| PolynomialParams::from_slice(&vals[s..s + PolynomialParams::slice_len(m, d)], m)),
            sinusoid: l
                .sin
                .map(|s| SinusoidParams::from_slice(&vals[s..s + SinusoidParams::slice_len(m)], m)),
            linear: l.linear.map(|s| (&vals[s..s + m], vals[s + m])),
            gate_w: l.gate_w.map_or(&[][..], |s| &vals[s..s + l.channels]),
            gate_p: l.gate_p.map(|s| &vals[s..s + 2]),
            gate_mode: self.config.gate_mode,
            ln_eps: LAYER_NORM_EPS,
            layout: l,
        }
    }

    pub fn head(&self, j: usize) -> CommitteeHead<'_> {
        let h = &self.heads[j];
        CommitteeHead::from_slice(
            h.kind,
            &self.store.values()[h.start..h.start + h.len],
            2 * self.config.n_features,
        )
    }

    /// Indices of the node projection entries, in node order.
    pub fn projection_indices(&self) -> &[usize] {
        &self.penalized
    }

    /// Copies `x` without coordinate `i` into `out`.
    pub fn mask_into(x: &[f64], i: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&x[..i]);
        out.extend_from_slice(&x[i + 1..]);
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        check_len("model input", self.config.n_features, x.len())?;
        if let Some(k) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("input coordinate {k} is {}", x[k])));
        }
        Ok(self.forward_unchecked(x))
    }

    fn forward_unchecked(&self, x: &[f64]) -> Forward {
        let n = self.config.n_features;
        let mut masked = Vec::with_capacity(n);
        let mut u = Vec::with_capacity(2 * n);
        u.extend_from_slice(x);
        for i in 0..n {
            Self::mask_into(x, i, &mut masked);
            u.push(self.node(i).trace(&masked).z);
        }
        let y = (0..self.heads.len()).map(|j| self.head(j).value(&u)).sum();
        Forward {
            y,
            z: u[n..].to_vec(),
            u,
        }
    }

    /// Runs forward, asks `d_out` for `dL/dy`, and accumulates parameter gradients.
    fn backward_row(&self, x: &[f64], d_out: &mut dyn FnMut(f64) -> f64, grads: &mut [f64]) -> f64 {
        let n = self.config.n_features;
        let fwd = self.forward_unchecked(x);
        let upstream = d_out(fwd.y);
        let mut du = vec![0.0; 2 * n];
        for (j, h) in self.heads.iter().enumerate() {
            self.head(j)
                .backward(&fwd.u, upstream, &mut grads[h.start..h.start + h.len], Some(&mut du));
        }
        let mut masked = Vec::with_capacity(n);
        for i in 0..n {
            let dz = du[n + i];
            if dz != 0.0 {
                Self::mask_into(x, i, &mut masked);
                self.node(i).backward(&masked, dz, grads, None);
            }
        }
        fwd.y
    }

    /// `dz_i/dθ` and `dz_i/dx₋ᵢ` for one node; parameter gradient spans the whole store.
    pub fn node_gradients(&self, i: usize, x_minus_i: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let node = self.node(i);
        check_len("node input (x without feature i)", node.n_inputs(), x_minus_i.len())?;
        let mut grads = vec![0.0; self.store.len()];
        let mut gx = vec![0.0; x_minus_i.len()];
        let z = node.backward(x_minus_i, 1.0, &mut grads, Some(&mut gx));
        Ok((z, grads, gx))
    }
}

impl Differentiable for StructuralCfn {
    fn task(&self) -> Task {
        self.config.task
    }
    fn n_inputs(&self) -> usize {
        self.config.n_features
    }
    fn params(&self) -> &ParamStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn predict_raw(&self, x: &[f64]) -> f64 {
        self.forward_unchecked(x).y
    }
    fn backward_raw(&self, x: &[f64], d_out: &mut dyn FnMut(f64) -> f64, grads: &mut [f64]) -> f64 {
        self.backward_row(x, d_out, grads)
    }
    fn penalized(&self) -> &[usize] {
        &self.penalized
    }
    fn l1(&self) -> f64 {
        self.config.l1
    }
}

/// Rows of a row-major feature matrix with their targets, optionally restricted to `indices`.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    features: &'a [f64],
    targets: &'a [f64],
    width: usize,
    indices: Option<&'a [usize]>,
}

impl<'a> Batch<'a> {
    pub fn new(features: &'a [f64], targets: &'a [f64], width: usize) -> Result<Self> {
        check_len("batch features", targets.len() * width, features.len())?;
        Ok(Self {
            features,
            targets,
            width,
            indices: None,
        })
    }

    pub fn select(self, indices: &'a [usize]) -> Self {
        Self {
            indices: Some(indices),
            ..self
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.indices.map_or(self.targets.len(), <[usize]>::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, k: usize) -> (&'a [f64], f64) {
        let r = self.indices.map_or(k, |idx| idx[k]);
        (&self.features[r * self.width..(r + 1) * self.width], self.targets[r])
    }

    pub fn rows(&self) -> impl Iterator<Item = (&'a [f64], f64)> + '_ {
        (0..self.len()).map(move |k| self.row(k))
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Per-sample data loss: squared error, or binary cross-entropy of `σ(logit)`.
pub fn sample_loss(task: Task, out: f64, y: f64) -> f64 {
    match task {
        Task::Regression => (out - y).powi(2),
        Task::Binary => softplus(out) - y * out,
    }
}

fn sample_slope(task: Task, out: f64, y: f64) -> f64 {
    match task {
        Task::Regression => 2.0 * (out - y),
        Task::Binary => sigmoid(out) - y,
    }
}

/// Mean data loss without the sparsity penalty.
pub fn data_loss<M: Differentiable + ?Sized>(model: &M, batch: &Batch<'_>) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_len("batch width", model.n_inputs(), batch.width())?;
    let task = model.task();
    let total: f64 = batch
        .rows()
        .map(|(x, y)| sample_loss(task, model.predict_raw(x), y))
        .sum();
    Ok(total / batch.len() as f64)
}

/// `l1 · Σ|v|` over the node projection entries.
pub fn l1_penalty<M: Differentiable + ?Sized>(model: &M) -> f64 {
    let vals = model.params().values();
    model.l1() * model.penalized().iter().map(|&k| vals[k].abs()).sum::<f64>()
}

/// Training objective: mean data loss plus the sparsity penalty.
pub fn loss<M: Differentiable + ?Sized>(model: &M, batch: &Batch<'_>) -> Result<f64> {
    Ok(data_loss(model, batch)? + l1_penalty(model))
}

/// Objective value; gradients are accumulated into the model's store.
pub fn loss_and_grad<M: Differentiable + ?Sized>(model: &mut M, batch: &Batch<'_>) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_len("batch width", model.n_inputs(), batch.width())?;
    let task = model.task();
    let scale = 1.0 / batch.len() as f64;
    let mut grads = std::mem::take(model.params_mut().grads_mut_vec());
    let mut total = 0.0;
    for (x, y) in batch.rows() {
        let mut d_out = |out: f64| {
            total += sample_loss(task, out, y);
            scale * sample_slope(task, out, y)
        };
        model.backward_raw(x, &mut d_out, &mut grads);
    }
    let l1 = model.l1();
    let vals = model.params().values();
    for &k in model.penalized() {
        let v = vals[k];
        if v != 0.0 {
            grads[k] += l1 * v.signum();
        }
    }
    *model.params_mut().grads_mut_vec() = grads;
    Ok(total * scale + l1_penalty(model))
}
