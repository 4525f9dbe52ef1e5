//! Tape-based reverse-mode differentiation. Ops record a backward closure;
//! `backward` walks the tape in reverse creation order with a fixed
//! accumulation order, so gradients are bit-reproducible.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    layer_norm_rows, matmul, matmul_at, matmul_bt, pool_rows, row_norm_stats, softmax_rows,
    Scalar, Tensor,
};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<F> = Box<dyn Fn(&Tensor<F>, &[Tensor<F>], &mut [Tensor<F>])>;

struct Node<F> {
    back: Option<BackFn<F>>,
}

/// Loss reduction for [`Graph::cross_entropy`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    /// Sum of per-position losses (the plain negative log-likelihood sum).
    Sum,
    /// Sum divided by the number of non-pad target positions.
    MeanPerToken,
}

pub struct Graph<F: Scalar> {
    values: Vec<Tensor<F>>,
    nodes: Vec<Node<F>>,
    record: bool,
}

impl<F: Scalar> Graph<F> {
    /// Graph that records backward closures (training).
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            nodes: Vec::new(),
            record: true,
        }
    }

    /// Forward-only graph (decoding); `backward` must not be called.
    pub fn inference() -> Self {
        Graph {
            values: Vec::new(),
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.values[v.0]
    }

    fn push(&mut self, value: Tensor<F>, back: Option<BackFn<F>>) -> Var {
        debug_assert!(value.is_finite(), "non-finite forward value");
        self.values.push(value);
        self.nodes.push(Node {
            back: if self.record { back } else { None },
        });
        Var(self.values.len() - 1)
    }

    /// Inserts an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, None)
    }

    /// Runs reverse-mode accumulation from the scalar `loss` and returns the
    /// gradient of every node (indexable by `Var`).
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert!(self.record, "backward on an inference graph");
        assert_eq!(self.values[loss.0].len(), 1, "loss must be scalar");
        let mut grads: Vec<Tensor<F>> = self
            .values
            .iter()
            .map(|v| Tensor::zeros(v.shape().to_vec()))
            .collect();
        grads[loss.0] = Tensor::full(self.values[loss.0].shape().to_vec(), F::one());
        for id in (0..=loss.0).rev() {
            if let Some(back) = &self.nodes[id].back {
                let g = grads[id].clone();
                back(&g, &self.values, &mut grads);
            }
        }
        Gradients { grads }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.values[a.0].add(&self.values[b.0]);
        self.push(
            value,
            Some(Box::new(move |g, _, grads| {
                grads[a.0].add_assign(g);
                grads[b.0].add_assign(g);
            })),
        )
    }

    /// Adds a `[n]` bias to every row of a `[m, n]` tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let x = &self.values[a.0];
        let b = &self.values[bias.0];
        let (m, n) = (x.rows(), x.cols());
        assert_eq!(b.len(), n, "bias length");
        let mut data = x.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += b.data()[j];
            }
        }
        let value = Tensor::from_vec(x.shape().to_vec(), data).unwrap();
        self.push(
            value,
            Some(Box::new(move |g, _, grads| {
                grads[a.0].add_assign(g);
                let gb = &mut grads[bias.0];
                for i in 0..m {
                    for j in 0..n {
                        gb.data_mut()[j] += g.data()[i * n + j];
                    }
                }
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value = self.values[a.0].scale(c);
        self.push(
            value,
            Some(Box::new(move |g, _, grads| {
                grads[a.0].add_assign(&g.scale(c));
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.values[a.0].mul_elem(&self.values[b.0]);
        self.push(
            value,
            Some(Box::new(move |g, values, grads| {
                grads[a.0].add_assign(&g.mul_elem(&values[b.0]));
                grads[b.0].add_assign(&g.mul_elem(&values[a.0]));
            })),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = matmul(&self.values[a.0], &self.values[b.0]);
        self.push(
            value,
            Some(Box::new(move |g, values, grads| {
                grads[a.0].add_assign(&matmul_bt(g, &values[b.0]));
                grads[b.0].add_assign(&matmul_at(&values[a.0], g));
            })),
        )
    }

    /// `a[m,k] @ b[n,k]^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = matmul_bt(&self.values[a.0], &self.values[b.0]);
        self.push(
            value,
            Some(Box::new(move |g, values, grads| {
                grads[a.0].add_assign(&matmul(g, &values[b.0]));
                grads[b.0].add_assign(&matmul_at(g, &values[a.0]));
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.values[a.0].map(|v| if v > F::zero() { v } else { F::zero() });
        self.push(
            value,
            Some(Box::new(move |g, values, grads| {
                let x = &values[a.0];
                let ga = &mut grads[a.0];
                for (slot, (&gv, &xv)) in
                    ga.data_mut().iter_mut().zip(g.data().iter().zip(x.data()))
                {
                    if xv > F::zero() {
                        *slot += gv;
                    }
                }
            })),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.values[parts[0].0].cols();
        let mut data = Vec::new();
        let mut offsets = Vec::with_capacity(parts.len());
        let mut row_cursor = 0;
        for &p in parts {
            let t = &self.values[p.0];
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            offsets.push((p.0, row_cursor, t.rows()));
            row_cursor += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::from_vec(vec![row_cursor, cols], data).unwrap();
        self.push(
            value,
            Some(Box::new(move |g, _, grads| {
                for &(id, start, rows) in &offsets {
                    let gp = &mut grads[id];
                    for r in 0..rows {
                        let src = &g.data()[(start + r) * cols..(start + r + 1) * cols];
                        for (slot, &v) in gp.row_mut(r).iter_mut().zip(src) {
                            *slot += v;
                        }
                    }
                }
            })),
        )
    }

    pub fn slice_rows(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let x = &self.values[a.0];
        let cols = x.cols();
        let data = x.data()[lo * cols..hi * cols].to_vec();
        let value = Tensor::from_vec(vec![hi - lo, cols], data).unwrap();
        self.push(
            value,
            Some(Box::new(move |g, _, grads| {
                let ga = &mut grads[a.0];
                for r in lo..hi {
                    let src = &g.data()[(r - lo) * cols..(r - lo + 1) * cols];
                    for (slot, &v) in ga.row_mut(r).iter_mut().zip(src) {
                        *slot += v;
                    }
                }
            })),
        )
    }

    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let x = &self.values[a.0];
        let (m, n) = (x.rows(), x.cols());
        let w = hi - lo;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&x.row(i)[lo..hi]);
        }
        let value = Tensor::from_vec(vec![m, w], data).unwrap();
        self.push(
            value,
            Some(Box::new(move |g, _, grads| {
                let ga = &mut grads[a.0];
                for i in 0..m {
                    let src = &g.data()[i * w..(i + 1) * w];
                    let dst = &mut ga.data_mut()[i * n + lo..i * n + hi];
                    for (slot, &v) in dst.iter_mut().zip(src) {
                        *slot += v;
                    }
                }
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.values[parts[0].0].rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.values[p.0].cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.values[p.0].row(i));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let value = Tensor::from_vec(vec![m, total], data).unwrap();
        self.push(
            value,
            Some(Box::new(move |g, _, grads| {
                for i in 0..m {
                    let mut offset = 0;
                    for (&id, &w) in ids.iter().zip(&widths) {
                        let src = &g.data()[i * total + offset..i * total + offset + w];
                        for (slot, &v) in grads[id].row_mut(i).iter_mut().zip(src) {
                            *slot += v;
                        }
                        offset += w;
                    }
                }
            })),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let value = self.values[a.0].clone().reshaped(shape).unwrap();
        self.push(
            value,
            Some(Box::new(move |g, values, grads| {
                let back = g
                    .clone()
                    .reshaped(values[a.0].shape().to_vec())
                    .expect("reshape gradient");
                grads[a.0].add_assign(&back);
            })),
        )
    }

    /// Row-wise softmax. `mask[i*n + j] == false` bans position `j` for
    /// query `i`; a fully banned row is an error (it indicates a batching
    /// bug upstream).
    pub fn softmax_rows(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let value = softmax_rows(&self.values[a.0], mask.as_deref())?;
        let out_id = self.values.len();
        Ok(self.push(
            value,
            Some(Box::new(move |g, values, grads| {
                let s = &values[out_id];
                let (m, n) = (s.rows(), s.cols());
                let ga = &mut grads[a.0];
                for i in 0..m {
                    let srow = s.row(i);
                    let grow = &g.data()[i * n..(i + 1) * n];
                    let dot: F = srow.iter().zip(grow).map(|(&sv, &gv)| sv * gv).sum();
                    for j in 0..n {
                        // Masked positions have s = 0, so they get no grad.
                        ga.data_mut()[i * n + j] += srow[j] * (grow[j] - dot);
                    }
                }
            })),
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.values[a.0].sum());
        self.push(
            value,
            Some(Box::new(move |g, _, grads| {
                let gv = g.data()[0];
                for slot in grads[a.0].data_mut() {
                    *slot += gv;
                }
            })),
        )
    }

    /// Gathers rows of an embedding table; backward scatter-adds.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let t = &self.values[table.0];
        let (v, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= v {
                return Err(Error::UnknownTokenId { id, vocab: v });
            }
            data.extend_from_slice(t.row(id as usize));
        }
        let value = Tensor::from_vec(vec![ids.len(), d], data).unwrap();
        let ids = ids.to_vec();
        Ok(self.push(
            value,
            Some(Box::new(move |g, _, grads| {
                let gt = &mut grads[table.0];
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g.data()[r * d..(r + 1) * d];
                    for (slot, &v) in gt.row_mut(id as usize).iter_mut().zip(src) {
                        *slot += v;
                    }
                }
            })),
        ))
    }

    /// Min/max/mean pooling over rows, stacked as `[3, cols]`. Min and max
    /// route gradient to the first extremal row; mean spreads evenly.
    pub fn pool3(&mut self, a: Var) -> Var {
        let value = pool_rows(&self.values[a.0]);
        self.push(
            value,
            Some(Box::new(move |g, values, grads| {
                let x = &values[a.0];
                let (m, n) = (x.rows(), x.cols());
                let inv_m = F::one() / F::from_f64(m as f64);
                let ga = &mut grads[a.0];
                for j in 0..n {
                    let (mut imin, mut imax) = (0, 0);
                    let (mut vmin, mut vmax) = (x.at(0, j), x.at(0, j));
                    for i in 1..m {
                        let v = x.at(i, j);
                        if v < vmin {
                            vmin = v;
                            imin = i;
                        }
                        if v > vmax {
                            vmax = v;
                            imax = i;
                        }
                    }
                    ga.data_mut()[imin * n + j] += g.at(0, j);
                    ga.data_mut()[imax * n + j] += g.at(1, j);
                    let gmean = g.at(2, j) * inv_m;
                    for i in 0..m {
                        ga.data_mut()[i * n + j] += gmean;
                    }
                }
            })),
        )
    }

    /// Layer normalization with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Var {
        let value = layer_norm_rows(&self.values[x.0], &self.values[gain.0], &self.values[bias.0], eps);
        self.push(
            value,
            Some(Box::new(move |g, values, grads| {
                let xv = &values[x.0];
                let gv = &values[gain.0];
                let (m, n) = (xv.rows(), xv.cols());
                let nf = F::from_f64(n as f64);
                for i in 0..m {
                    let row = xv.row(i);
                    let (mean, std) = row_norm_stats(row, eps);
                    let grow = &g.data()[i * n..(i + 1) * n];
                    // dgain, dbias
                    for j in 0..n {
                        let xhat = (row[j] - mean) / std;
                        grads[gain.0].data_mut()[j] += grow[j] * xhat;
                        grads[bias.0].data_mut()[j] += grow[j];
                    }
                    // dx = (1/std) * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                    let mut mean_dxhat = F::zero();
                    let mut mean_dxhat_xhat = F::zero();
                    for j in 0..n {
                        let xhat = (row[j] - mean) / std;
                        let dxhat = grow[j] * gv.data()[j];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                    }
                    mean_dxhat = mean_dxhat / nf;
                    mean_dxhat_xhat = mean_dxhat_xhat / nf;
                    let gx = &mut grads[x.0];
                    for j in 0..n {
                        let xhat = (row[j] - mean) / std;
                        let dxhat = grow[j] * gv.data()[j];
                        gx.data_mut()[i * n + j] +=
                            (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) / std;
                    }
                }
            })),
        )
    }

    /// Inverted dropout with the given keep mask already drawn; rate 0 is
    /// the identity. The mask is drawn here so that callers share one RNG
    /// stream in a fixed order.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut impl Rng) -> Var {
        if rate == 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let scale = F::from_f64(1.0 / keep);
        let x = &self.values[a.0];
        let mask: Vec<F> = (0..x.len())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    scale
                } else {
                    F::zero()
                }
            })
            .collect();
        let mask = Tensor::from_vec(x.shape().to_vec(), mask).unwrap();
        let value = x.mul_elem(&mask);
        self.push(
            value,
            Some(Box::new(move |g, _, grads| {
                grads[a.0].add_assign(&g.mul_elem(&mask));
            })),
        )
    }

    /// Label-smoothed cross entropy over non-pad target positions. With
    /// smoothing 0 this is exactly the summed negative log-likelihood.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        pad_id: u32,
        smoothing: f64,
        reduction: Reduction,
    ) -> Result<Var> {
        let x = &self.values[logits.0];
        let (t_len, vocab) = (x.rows(), x.cols());
        assert_eq!(targets.len(), t_len, "target length");
        let non_pad = targets.iter().filter(|&&t| t != pad_id).count();
        if non_pad == 0 {
            return Err(Error::AllPadTarget);
        }
        let smooth = F::from_f64(smoothing / vocab as f64);
        let confident = F::from_f64(1.0 - smoothing);
        let mut total = F::zero();
        for (i, &target) in targets.iter().enumerate() {
            if target == pad_id {
                continue;
            }
            let row = x.row(i);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max
                + row
                    .iter()
                    .map(|&v| (v - max).exp())
                    .sum::<F>()
                    .ln();
            // -sum_k q_k * (x_k - lse), q = smooth + confident * onehot
            let mut loss = confident * (lse - row[target as usize]);
            if smoothing > 0.0 {
                for &v in row {
                    loss += smooth * (lse - v);
                }
            }
            total += loss;
        }
        let denom = match reduction {
            Reduction::Sum => F::one(),
            Reduction::MeanPerToken => F::from_f64(non_pad as f64),
        };
        let value = Tensor::scalar(total / denom);
        let targets = targets.to_vec();
        Ok(self.push(
            value,
            Some(Box::new(move |g, values, grads| {
                let factor = g.data()[0] / denom;
                let x = &values[logits.0];
                let gl = &mut grads[logits.0];
                for (i, &target) in targets.iter().enumerate() {
                    if target == pad_id {
                        continue;
                    }
                    let row = x.row(i);
                    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                    let denom_sm: F = row.iter().map(|&v| (v - max).exp()).sum();
                    for j in 0..vocab {
                        let p = (row[j] - max).exp() / denom_sm;
                        let mut q = smooth;
                        if j == target as usize {
                            q += confident;
                        }
                        gl.data_mut()[i * vocab + j] += factor * (p - q);
                    }
                }
            })),
        ))
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Graph::new()
    }
}

/// Gradient of every node in a graph, indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Tensor<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> &Tensor<F> {
        &self.grads[v.0]
    }
}
