//! Network building blocks on top of the autograd graph: scaled dot-product
//! attention, multi-head attention, feed-forward, sinusoidal positions, a
//! named parameter store, and a central-difference gradient checker.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_bt, softmax_rows, Scalar, Tensor};

/// Layer-norm epsilon used everywhere in the model.
pub const LN_EPS: f64 = 1e-5;

/// Scaled dot-product attention: `softmax(q k^T / sqrt(d)) v`. The output
/// has one row per query row. `mask[i*Lk + j] == false` bans key `j` for
/// query `i`.
pub fn attention<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    mask: Option<&[bool]>,
) -> Result<Tensor<F>> {
    let d = q.cols();
    if d == 0 || k.cols() != d {
        return Err(Error::ShapeMismatch(format!(
            "query dim {d} vs key dim {}",
            k.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} keys vs {} values",
            k.rows(),
            v.rows()
        )));
    }
    if let Some(mask) = mask {
        if mask.len() != q.rows() * k.rows() {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} entries for {}x{} scores",
                mask.len(),
                q.rows(),
                k.rows()
            )));
        }
    }
    let scale = F::from_f64(1.0 / (d as f64).sqrt());
    let scores = matmul_bt(q, k).scale(scale);
    let weights = softmax_rows(&scores, mask)?;
    Ok(matmul(&weights, v))
}

/// Multi-head attention block in the graph; `q_in` and `kv_in` are
/// `[L, d_model]`, projections are `[d_model, d_model]`, and the same mask
/// applies to every head.
pub fn multi_head_attention<F: Scalar>(
    g: &mut Graph<F>,
    q_in: Var,
    kv_in: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let d = g.value(wq).cols();
    assert!(heads >= 1 && d % heads == 0, "d_model {d} not divisible by {heads} heads");
    let dh = d / heads;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());

    let q = g.matmul(q_in, wq);
    let k = g.matmul(kv_in, wk);
    let v = g.matmul(kv_in, wv);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, lo, hi);
        let kh = g.slice_cols(k, lo, hi);
        let vh = g.slice_cols(v, lo, hi);
        let scores = g.matmul_bt(qh, kh);
        let scaled = g.scale(scores, scale);
        let weights = g.softmax_rows(scaled, mask.map(|m| m.to_vec()))?;
        outs.push(g.matmul(weights, vh));
    }
    let merged = g.concat_cols(&outs);
    Ok(g.matmul(merged, wo))
}

/// Two-layer feed-forward with ReLU.
pub fn feed_forward<F: Scalar>(
    g: &mut Graph<F>,
    x: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
) -> Var {
    let h = g.matmul(x, w1);
    let h = g.add_bias(h, b1);
    let h = g.relu(h);
    let out = g.matmul(h, w2);
    g.add_bias(out, b2)
}

/// Standard sinusoidal positional encoding for positions
/// `start .. start + length`. `d` must be even.
pub fn sinusoidal_pe<F: Scalar>(length: usize, d: usize, start: usize) -> Result<Tensor<F>> {
    if d % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding needs an even dimension, got {d}"
        )));
    }
    let mut data = Vec::with_capacity(length * d);
    for pos in start..start + length {
        for i in 0..d / 2 {
            let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
            data.push(F::from_f64(rate.sin()));
            data.push(F::from_f64(rate.cos()));
        }
    }
    Tensor::from_vec(vec![length, d], data)
}

/// Ordered, named parameter tensors. Order is fixed at insertion, so
/// binding, gradient extraction and optimizer updates all walk the same
/// sequence.
#[derive(Clone, Debug)]
pub struct Parameters<F> {
    entries: Vec<(String, Tensor<F>)>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Parameters<F> {
    pub fn new() -> Self {
        Parameters {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn set(&mut self, name: &str, tensor: Tensor<F>) {
        let i = self.index[name];
        assert_eq!(
            self.entries[i].1.shape(),
            tensor.shape(),
            "shape change for {name}"
        );
        self.entries[i].1 = tensor;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> Parameters<G> {
        let mut out = Parameters::new();
        for (name, t) in &self.entries {
            out.insert(name.clone(), t.cast::<G>());
        }
        out
    }

    /// Binds every parameter into the graph as a leaf, in insertion order.
    pub fn bind(&self, g: &mut Graph<F>) -> BoundParams {
        let mut vars = Vec::with_capacity(self.entries.len());
        let mut index = HashMap::new();
        for (name, t) in &self.entries {
            let var = g.leaf(t.clone());
            index.insert(name.clone(), vars.len());
            vars.push((name.clone(), var));
        }
        BoundParams { vars, index }
    }
}

impl<F: Scalar> Default for Parameters<F> {
    fn default() -> Self {
        Parameters::new()
    }
}

/// Graph handles for a bound parameter set.
pub struct BoundParams {
    vars: Vec<(String, Var)>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        self.vars[self.index[name]].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Result of a gradient check. The relative error of one element is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub elements_checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "checked {} elements, max rel err {:.3e}, max abs err {:.3e}: {}",
            self.elements_checked,
            self.max_rel_err,
            self.max_abs_err,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

/// Central-difference gradient check of a scalar loss at 64-bit.
///
/// `build` constructs the loss from bound parameters; it runs once with
/// recording for the reverse-mode gradient and twice per checked element
/// for the finite difference. `samples_per_param` limits how many elements
/// of each tensor are probed (None checks all; sampling is seeded and
/// deterministic).
pub fn grad_check(
    params: &Parameters<f64>,
    build: impl Fn(&mut Graph<f64>, &BoundParams) -> Result<Var>,
    eps: f64,
    tol: f64,
    samples_per_param: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let loss = build(&mut g, &bound)?;
    let f0 = g.value(loss).data()[0];
    if !f0.is_finite() {
        return Err(Error::NonFinite("gradient-check loss".into()));
    }
    let grads = g.backward(loss);
    let analytic: Vec<(String, Tensor<f64>)> = bound
        .iter()
        .map(|(name, var)| (name.to_owned(), grads.get(var).clone()))
        .collect();

    let eval = |work: &Parameters<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let bound = work.bind(&mut g);
        let loss = build(&mut g, &bound)?;
        Ok(g.value(loss).data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        elements_checked: 0,
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        worst: None,
        tol,
    };
    for (name, grad) in &analytic {
        let n = grad.len();
        let indices: Vec<usize> = match samples_per_param {
            Some(k) if k < n => {
                let mut picked: Vec<usize> = Vec::with_capacity(k);
                while picked.len() < k {
                    let i = rng.gen_range(0..n);
                    if !picked.contains(&i) {
                        picked.push(i);
                    }
                }
                picked
            }
            _ => (0..n).collect(),
        };
        for i in indices {
            let original = work.get(name).unwrap().data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = original + eps;
            let f_plus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = original - eps;
            let f_minus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = original;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = grad.data()[i];
            let abs_err = (a - numeric).abs();
            let rel_err = abs_err / a.abs().max(numeric.abs()).max(1.0);
            report.elements_checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs_err);
            if rel_err > report.max_rel_err {
                report.max_rel_err = rel_err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

/// Deterministic initializers.
pub mod init {
    use super::*;

    /// Glorot-uniform matrix.
    pub fn xavier<F: Scalar>(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<F> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| F::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        Tensor::from_vec(vec![rows, cols], data).unwrap()
    }

    /// Embedding rows drawn from N(0, d^-1/2), via Box-Muller so the same
    /// stream works for both precisions.
    pub fn embedding<F: Scalar>(vocab: usize, d: usize, rng: &mut impl Rng) -> Tensor<F> {
        let std = (d as f64).powf(-0.5);
        let mut data = Vec::with_capacity(vocab * d);
        while data.len() < vocab * d {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(F::from_f64(r * theta.cos() * std));
            if data.len() < vocab * d {
                data.push(F::from_f64(r * theta.sin() * std));
            }
        }
        Tensor::from_vec(vec![vocab, d], data).unwrap()
    }
}
