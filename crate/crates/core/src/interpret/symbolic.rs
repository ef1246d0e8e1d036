//! Single-driver restrictions of a node rendered as closed-form expressions.

use std::fmt::Write as _;

use serde::Serialize;

use crate::basis::sigmoid;
use crate::error::{Error, Result};
use crate::structnet::{GateMode, StructuralCfn};

/// Decimal places used for the human-readable rendering.
pub const DISPLAY_DECIMALS: usize = 2;

/// Expression in one variable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Expr {
    Const(f64),
    Var,
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, u32),
    Neg(Box<Expr>),
    Sigmoid(Box<Expr>),
    Tanh(Box<Expr>),
    Sin(Box<Expr>),
    Sqrt(Box<Expr>),
}

use Expr::*;

fn c(v: f64) -> Expr {
    Const(v)
}

fn add(a: Expr, b: Expr) -> Expr {
    Add(Box::new(a), Box::new(b))
}

fn mul(a: Expr, b: Expr) -> Expr {
    Mul(Box::new(a), Box::new(b))
}

impl Expr {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Const(v) => *v,
            Var => x,
            Add(a, b) => a.eval(x) + b.eval(x),
            Sub(a, b) => a.eval(x) - b.eval(x),
            Mul(a, b) => a.eval(x) * b.eval(x),
            Div(a, b) => a.eval(x) / b.eval(x),
            Pow(a, k) => a.eval(x).powi(*k as i32),
            Neg(a) => -a.eval(x),
            Sigmoid(a) => sigmoid(a.eval(x)),
            Tanh(a) => a.eval(x).tanh(),
            Sin(a) => a.eval(x).sin(),
            Sqrt(a) => a.eval(x).sqrt(),
        }
    }

    /// Folds constant subtrees and drops exact identities (`+0`, `·1`, `·0`, `^1`).
    ///
    /// A zero numerator folds the quotient to zero; the denominators built by
    /// extraction are strictly positive.
    pub fn simplify(self) -> Expr {
        match self {
            Add(a, b) => match (a.simplify(), b.simplify()) {
                (Const(x), Const(y)) => Const(x + y),
                (Const(z), e) | (e, Const(z)) if z == 0.0 => e,
                (a, b) => add(a, b),
            },
            Sub(a, b) => match (a.simplify(), b.simplify()) {
                (Const(x), Const(y)) => Const(x - y),
                (e, Const(0.0)) => e,
                (Const(0.0), e) => Neg(Box::new(e)),
                (a, b) => Sub(Box::new(a), Box::new(b)),
            },
            Mul(a, b) => match (a.simplify(), b.simplify()) {
                (Const(x), Const(y)) => Const(x * y),
                (Const(z), _) | (_, Const(z)) if z == 0.0 => Const(0.0),
                (Const(o), e) | (e, Const(o)) if o == 1.0 => e,
                (a, b) => mul(a, b),
            },
            Div(a, b) => match (a.simplify(), b.simplify()) {
                (Const(x), Const(y)) => Const(x / y),
                (Const(0.0), _) => Const(0.0),
                (e, Const(1.0)) => e,
                (a, b) => Div(Box::new(a), Box::new(b)),
            },
            Pow(a, k) => match (a.simplify(), k) {
                (_, 0) => Const(1.0),
                (e, 1) => e,
                (Const(x), k) => Const(x.powi(k as i32)),
                (e, k) => Pow(Box::new(e), k),
            },
            Neg(a) => match a.simplify() {
                Const(x) => Const(-x),
                e => Neg(Box::new(e)),
            },
            Sigmoid(a) => unary(a.simplify(), Sigmoid, sigmoid),
            Tanh(a) => unary(a.simplify(), Tanh, f64::tanh),
            Sin(a) => unary(a.simplify(), Sin, f64::sin),
            Sqrt(a) => unary(a.simplify(), Sqrt, f64::sqrt),
            leaf => leaf,
        }
    }

    /// Renders with `decimals` places per constant, or shortest round-trip digits for `None`.
    pub fn render(&self, var: &str, decimals: Option<usize>) -> String {
        let mut s = String::new();
        self.write(&mut s, var, decimals);
        s
    }

    fn precedence(&self) -> u8 {
        match self {
            Add(..) | Sub(..) => 1,
            Mul(..) | Div(..) => 2,
            Neg(_) => 3,
            Const(v) if v.is_sign_negative() && *v != 0.0 => 3,
            Pow(..) => 4,
            _ => 5,
        }
    }

    fn write_at(&self, s: &mut String, var: &str, dec: Option<usize>, min_prec: u8) {
        if self.precedence() < min_prec {
            s.push('(');
            self.write(s, var, dec);
            s.push(')');
        } else {
            self.write(s, var, dec);
        }
    }

    fn write(&self, s: &mut String, var: &str, dec: Option<usize>) {
        match self {
            Const(v) => s.push_str(&format_number(*v, dec)),
            Var => s.push_str(var),
            Add(a, b) => {
                a.write_at(s, var, dec, 1);
                match b.as_ref() {
                    Const(v) if v.is_sign_negative() && *v != 0.0 => {
                        s.push_str(" - ");
                        s.push_str(&format_number(-v, dec));
                    }
                    Neg(inner) => {
                        s.push_str(" - ");
                        inner.write_at(s, var, dec, 2);
                    }
                    other => {
                        s.push_str(" + ");
                        other.write_at(s, var, dec, 2);
                    }
                }
            }
            Sub(a, b) => {
                a.write_at(s, var, dec, 1);
                s.push_str(" - ");
                b.write_at(s, var, dec, 2);
            }
            Mul(a, b) => {
                a.write_at(s, var, dec, 2);
                s.push('·');
                b.write_at(s, var, dec, 3);
            }
            Div(a, b) => {
                a.write_at(s, var, dec, 2);
                s.push_str(" / ");
                b.write_at(s, var, dec, 3);
            }
            Neg(a) => {
                s.push('-');
                a.write_at(s, var, dec, 3);
            }
            Pow(a, k) => {
                a.write_at(s, var, dec, 5);
                s.push_str(&superscript(*k));
            }
            Sigmoid(a) => call(s, "σ", a, var, dec),
            Tanh(a) => call(s, "tanh", a, var, dec),
            Sin(a) => call(s, "sin", a, var, dec),
            Sqrt(a) => call(s, "sqrt", a, var, dec),
        }
    }
}

fn unary(arg: Expr, wrap: fn(Box<Expr>) -> Expr, f: fn(f64) -> f64) -> Expr {
    match arg {
        Const(v) => Const(f(v)),
        e => wrap(Box::new(e)),
    }
}

fn call(s: &mut String, name: &str, arg: &Expr, var: &str, dec: Option<usize>) {
    s.push_str(name);
    s.push('(');
    arg.write(s, var, dec);
    s.push(')');
}

fn format_number(v: f64, dec: Option<usize>) -> String {
    match dec {
        None => format!("{v:?}"),
        Some(p) => {
            let out = format!("{v:.p$}");
            // avoid "-0.00"
            if out.starts_with('-') && out[1..].chars().all(|ch| ch == '0' || ch == '.') {
                out[1..].to_string()
            } else {
                out
            }
        }
    }
}

const SUPERSCRIPTS: [char; 10] = ['⁰', '¹', '²', '³', '⁴', '⁵', '⁶', '⁷', '⁸', '⁹'];

fn superscript(k: u32) -> String {
    k.to_string()
        .chars()
        .map(|d| SUPERSCRIPTS[d.to_digit(10).unwrap() as usize])
        .collect()
}

/// Parses the output of [`Expr::render`] back into a tree. `var` is the variable name.
///
/// Accepts `+ - · * /`, unary minus, `^k` or superscript exponents, and the
/// functions `σ`, `sigmoid`, `tanh`, `sin`, `sqrt`.
pub fn parse_expr(src: &str, var: &str) -> Result<Expr> {
    let mut p = Parser { src, pos: 0, var };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos != src.len() {
        return Err(p.error("unexpected trailing input"));
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    var: &'a str,
}

impl Parser<'_> {
    fn rest(&self) -> &str {
        &self.src[self.pos..]
    }

    fn error(&self, message: &str) -> Error {
        Error::Parse {
            pos: self.pos,
            message: message.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.src.len() - trimmed.len();
    }

    fn eat(&mut self, token: &str) -> bool {
        self.skip_ws();
        if self.rest().starts_with(token) {
            self.pos += token.len();
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            if self.eat("+") {
                lhs = add(lhs, self.term()?);
            } else if self.eat("-") {
                lhs = Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat("·") || self.eat("*") {
                lhs = mul(lhs, self.unary()?);
            } else if self.eat("/") {
                lhs = Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat("-") {
            return Ok(match self.unary()? {
                Const(v) => Const(-v),
                e => Neg(Box::new(e)),
            });
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.eat("^") {
            let start = self.pos;
            let digits = self.rest().chars().take_while(char::is_ascii_digit).count();
            self.pos += digits;
            let k: u32 = self.src[start..self.pos]
                .parse()
                .map_err(|_| self.error("expected an integer exponent"))?;
            return Ok(Pow(Box::new(base), k));
        }
        let mut k: Option<u32> = None;
        while let Some(ch) = self.rest().chars().next() {
            match SUPERSCRIPTS.iter().position(|s| *s == ch) {
                Some(d) => {
                    k = Some(k.unwrap_or(0) * 10 + d as u32);
                    self.pos += ch.len_utf8();
                }
                None => break,
            }
        }
        Ok(match k {
            Some(k) => Pow(Box::new(base), k),
            None => base,
        })
    }

    fn atom(&mut self) -> Result<Expr> {
        self.skip_ws();
        type Wrap = fn(Box<Expr>) -> Expr;
        const FUNCS: [(&str, Wrap); 5] = [
            ("σ(", Sigmoid),
            ("sigmoid(", Sigmoid),
            ("tanh(", Tanh),
            ("sin(", Sin),
            ("sqrt(", Sqrt),
        ];
        for (name, wrap) in FUNCS {
            if self.eat(name) {
                let inner = self.expr()?;
                if !self.eat(")") {
                    return Err(self.error("expected ')'"));
                }
                return Ok(wrap(Box::new(inner)));
            }
        }
        if self.eat("(") {
            let inner = self.expr()?;
            if !self.eat(")") {
                return Err(self.error("expected ')'"));
            }
            return Ok(inner);
        }
        if !self.var.is_empty() && self.eat(self.var) {
            return Ok(Var);
        }
        self.number()
    }

    fn number(&mut self) -> Result<Expr> {
        let bytes = self.rest().as_bytes();
        let mut end = 0;
        while end < bytes.len() && (bytes[end].is_ascii_digit() || bytes[end] == b'.') {
            end += 1;
        }
        if end < bytes.len() && (bytes[end] == b'e' || bytes[end] == b'E') {
            let mut k = end + 1;
            if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                k += 1;
            }
            if k < bytes.len() && bytes[k].is_ascii_digit() {
                end = k;
                while end < bytes.len() && bytes[end].is_ascii_digit() {
                    end += 1;
                }
            }
        }
        let text = &self.rest()[..end];
        let v: f64 = text
            .parse()
            .map_err(|_| self.error("expected a number, variable, function or '('"))?;
        self.pos += end;
        Ok(Const(v))
    }
}

/// The restriction of node `target`'s context to one driver, with every other input at 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SymbolicLaw {
    pub target: usize,
    pub driver: usize,
    pub target_name: String,
    pub driver_name: String,
    /// Rendered with [`DISPLAY_DECIMALS`] places.
    pub expression: String,
    /// Rendered with shortest round-trip digits; parses back to the same tree.
    pub full_precision: String,
    pub tree: Expr,
    pub grid: Vec<f64>,
    /// Largest gap between the parsed full-precision expression and the model on `grid`.
    pub max_roundtrip_error: f64,
}

impl SymbolicLaw {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "z_{} ≈ {}", self.target_name, self.expression);
        let _ = writeln!(s);
        let _ = writeln!(s, "target: {} (node {})", self.target_name, self.target);
        let _ = writeln!(
            s,
            "driver: {} (feature {}), other inputs held at 0",
            self.driver_name, self.driver
        );
        let _ = writeln!(s, "full precision: {}", self.full_precision);
        let (lo, hi) = (
            self.grid.first().copied().unwrap_or(0.0),
            self.grid.last().copied().unwrap_or(0.0),
        );
        let _ = writeln!(
            s,
            "max round-trip error over {} grid points on [{lo}, {hi}]: {:e}",
            self.grid.len(),
            self.max_roundtrip_error
        );
        s
    }
}

/// Builds the closed-form response of node `i` to feature `j`.
///
/// With two channels the layer norm collapses to `δ / sqrt(δ² + eps)` where
/// `δ = (h_poly - h_sin) / 2`, so the gate input is `(w₀ - w₁)·δ / sqrt(δ² + eps)`.
pub fn extract_symbolic(
    model: &StructuralCfn,
    i: usize,
    j: usize,
    grid: &[f64],
    feature_names: &[String],
) -> Result<SymbolicLaw> {
    let n = model.n_features();
    if i >= n || j >= n {
        return Err(Error::Argument(format!(
            "pair ({i}, {j}) out of range for {n} features"
        )));
    }
    if i == j {
        return Err(Error::Argument(format!(
            "node {i} never sees its own feature; pick a driver j != i"
        )));
    }
    if grid.is_empty() {
        return Err(Error::Argument("evaluation grid is empty".into()));
    }
    let names: Vec<String> = if feature_names.len() == n {
        feature_names.to_vec()
    } else {
        super::feature_names(model)
    };
    let tree = node_restriction(model, i, j).simplify();
    let driver_name = names[j].clone();
    let full_precision = tree.render(&driver_name, None);
    let parsed = parse_expr(&full_precision, &driver_name)?;
    let node = model.node(i);
    let jj = if j < i { j } else { j - 1 };
    let mut masked = vec![0.0; n - 1];
    let mut max_err = 0.0f64;
    for &x in grid {
        masked[jj] = x;
        let truth = node.context(&masked)?;
        let err = (parsed.eval(x) - truth).abs();
        max_err = if err.is_nan() { f64::INFINITY } else { max_err.max(err) };
    }
    Ok(SymbolicLaw {
        target: i,
        driver: j,
        target_name: names[i].clone(),
        expression: tree.render(&driver_name, Some(DISPLAY_DECIMALS)),
        driver_name,
        full_precision,
        tree,
        grid: grid.to_vec(),
        max_roundtrip_error: max_err,
    })
}

/// `n` evenly spaced points on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect(),
    }
}

fn node_restriction(model: &StructuralCfn, i: usize, j: usize) -> Expr {
    let node = model.node(i);
    let jj = if j < i { j } else { j - 1 };
    if let Some((v, b)) = node.linear {
        return add(mul(c(v[jj]), Var), c(b));
    }
    let mut channels = Vec::with_capacity(2);
    if let Some(p) = &node.poly {
        let s = add(mul(c(p.projection[jj]), Var), c(p.bias));
        let mut h = c(p.coeffs[0]);
        for (k, &ck) in p.coeffs.iter().enumerate().skip(1) {
            h = add(h, mul(c(ck), Pow(Box::new(s.clone()), k as u32)));
        }
        channels.push(h);
    }
    if let Some(sn) = &node.sinusoid {
        let arg = add(mul(c(sn.frequency * sn.projection[jj]), Var), c(sn.phase));
        channels.push(mul(c(sn.amplitude), Sin(Box::new(arg))));
    }
    let g = if channels.len() == 2 {
        let hs = channels.pop().unwrap();
        let hp = channels.pop().unwrap();
        let delta = mul(c(0.5), Sub(Box::new(hp), Box::new(hs)));
        let norm = Div(
            Box::new(delta.clone()),
            Box::new(Sqrt(Box::new(add(Pow(Box::new(delta), 2), c(node.ln_eps))))),
        );
        mul(c(node.gate_w[0] - node.gate_w[1]), norm)
    } else {
        mul(c(node.gate_w[0]), channels.pop().expect("node has a basis channel"))
    };
    match node.gate_mode {
        GateMode::SigmoidOnly => Sigmoid(Box::new(g)),
        GateMode::TanhOnly => Tanh(Box::new(g)),
        GateMode::Adaptive => {
            let a = node.gate_mix().unwrap_or([0.5, 0.5]);
            add(
                mul(c(a[0]), Sigmoid(Box::new(g.clone()))),
                mul(c(a[1]), Tanh(Box::new(g))),
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structnet::{ModelConfig, Task, Variant};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_node_renders_constant() {
        let model = StructuralCfn::new(ModelConfig::new(3, Task::Regression)).unwrap();
        let law = extract_symbolic(&model, 0, 1, &linspace(-3.0, 3.0, 101), &[]).unwrap();
        assert_eq!(law.expression, "0.25");
        assert_eq!(law.max_roundtrip_error, 0.0);
    }

    #[test]
    fn threshold_influence_shape() {
        let x = || Box::new(Var);
        let e = add(
            Sigmoid(Box::new(add(mul(c(0.70), Var), c(0.12)))),
            Tanh(Box::new(mul(c(0.25), Pow(x(), 2)))),
        );
        assert_eq!(e.render("x_S2", Some(2)), "σ(0.70·x_S2 + 0.12) + tanh(0.25·x_S2²)");
        let back = parse_expr(&e.render("x_S2", None), "x_S2").unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn rendering_respects_precedence() {
        let e = Sub(
            Box::new(mul(c(-1.5), Pow(Box::new(add(Var, c(-2.0))), 3))),
            Box::new(Div(Box::new(c(1.0)), Box::new(mul(c(2.0), Var)))),
        );
        let s = e.render("t", None);
        assert_eq!(s, "-1.5·(t - 2.0)³ - 1.0 / (2.0·t)");
        let back = parse_expr(&s, "t").unwrap();
        for x in [-2.0, 0.3, 1.7] {
            assert!((back.eval(x) - e.eval(x)).abs() < 1e-12);
        }
        assert_eq!(parse_expr("2^3 * x", "x").unwrap().eval(1.5), 12.0);
        assert!(parse_expr("σ(1 + ", "x").is_err());
        assert!(parse_expr("1 2", "x").is_err());
    }

    #[test]
    fn diagonal_pair_is_rejected() {
        let model = StructuralCfn::new(ModelConfig::new(3, Task::Regression)).unwrap();
        assert!(extract_symbolic(&model, 1, 1, &[0.0], &[]).is_err());
        assert!(extract_symbolic(&model, 1, 3, &[0.0], &[]).is_err());
    }

    #[test]
    fn random_nodes_round_trip_for_every_variant() {
        let grid = linspace(-3.0, 3.0, 101);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &variant in &Variant::ALL {
            let mut model = StructuralCfn::new(ModelConfig::new(4, Task::Regression).with_variant(variant)).unwrap();
            for v in model.store_mut().values_mut() {
                *v = rng.random_range(-1.5..1.5);
            }
            for i in 0..4 {
                for j in (0..4).filter(|&j| j != i) {
                    let law = extract_symbolic(&model, i, j, &grid, &[]).unwrap();
                    assert!(
                        law.max_roundtrip_error <= 1e-6,
                        "{variant} ({i},{j}): {}",
                        law.max_roundtrip_error
                    );
                    assert!(!law.expression.is_empty());
                }
            }
        }
    }
}
