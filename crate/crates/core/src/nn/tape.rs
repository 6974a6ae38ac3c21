//! Reverse-mode differentiation over a linear record of tensor ops.
//!
//! Each forward call appends a node holding its output value (and whatever
//! the backward rule needs). `backward` walks the nodes in reverse and
//! accumulates gradients for every parameter leaf.

use std::collections::BTreeMap;

use super::ops::{self, LAYER_NORM_EPS};
use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor2D};
use crate::error::{Error, Result};

/// Node handle on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Relu(Var),
    Silu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        normalized: Tensor2D,
        inv_std: Vec<f64>,
        beta: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        weights: Tensor2D,
    },
    Interleave(Vec<Var>),
    TokenSlice {
        x: Var,
        group: usize,
        index: usize,
    },
    Sum(Var),
    MseMean {
        pred: Var,
        target: Tensor2D,
    },
    SoftmaxCe {
        logits: Var,
        probs: Tensor2D,
        targets: Vec<usize>,
    },
    KlMean {
        mu: Var,
        log_sigma: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor2D,
    op: Op,
}

/// Probability floor inside the cross-entropy log.
pub const CE_PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by parameter. Parameters the loss never touched are absent
/// and read back as zero.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor2D>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor2D> {
        self.grads.get(&id)
    }

    /// Gradient for `id`, zero-filled with the parameter's shape if untouched.
    pub fn get_or_zero(&self, store: &ParamStore, id: ParamId) -> Tensor2D {
        self.grads.get(&id).cloned().unwrap_or_else(|| {
            let (r, c) = store.get(id).shape();
            Tensor2D::zeros(r, c)
        })
    }

    pub fn insert(&mut self, id: ParamId, g: Tensor2D) {
        self.grads.insert(id, g);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor2D)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    fn accumulate(&mut self, id: ParamId, g: Tensor2D) {
        match self.grads.get_mut(&id) {
            Some(acc) => acc.add_assign(&g).expect("parameter gradients share a shape"),
            None => {
                self.grads.insert(id, g);
            }
        }
    }
}

fn check_same(a: &Tensor2D, b: &Tensor2D, what: &str) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::dim(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2D, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor2D {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor2D) -> Var {
        self.push(t, Op::Constant)
    }

    /// Leaf holding a copy of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `x + b` with the `1 x cols` row `b` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::dim(format!(
                "row broadcast of {:?} onto {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        ops::add_row_in_place(&mut out, bv.data());
        Ok(self.push(out, Op::AddRow(x, b)))
    }

    /// Affine layer `x · w + b`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(ops::relu);
        self.push(out, Op::Relu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(ops::silu);
        self.push(out, Op::Silu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).rows() != 1 {
                return Err(Error::dim(format!(
                    "layer norm {name} must be a row vector, got {:?}",
                    self.value(p).shape()
                )));
            }
        }
        let (out, cache) = ops::layer_norm_cached(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            LAYER_NORM_EPS,
        )?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                normalized: cache.normalized,
                inv_std: cache.inv_std,
                beta,
            },
        ))
    }

    /// Attention within consecutive blocks of `group` rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, group: usize) -> Result<Var> {
        let (out, weights) = ops::grouped_attention(self.value(q), self.value(k), self.value(v), group)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                group,
                weights,
            },
        ))
    }

    /// Stacks `parts` (each `B x d`) so that row `b * parts.len() + j` of the
    /// output is row `b` of `parts[j]`.
    pub fn interleave(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("interleave of zero tensors"))?;
        let (b, d) = self.value(*first).shape();
        for p in parts {
            if self.value(*p).shape() != (b, d) {
                return Err(Error::dim(format!(
                    "interleave part {:?} vs {:?}",
                    self.value(*p).shape(),
                    (b, d)
                )));
            }
        }
        let m = parts.len();
        let mut out = Tensor2D::zeros(b * m, d);
        for (j, p) in parts.iter().enumerate() {
            let pv = &self.nodes[p.0].value;
            for r in 0..b {
                out.row_mut(r * m + j).copy_from_slice(pv.row(r));
            }
        }
        Ok(self.push(out, Op::Interleave(parts.to_vec())))
    }

    /// Rows `b * group + index` for every `b`: the inverse view of `interleave`.
    pub fn token_slice(&mut self, x: Var, group: usize, index: usize) -> Result<Var> {
        let xv = self.value(x);
        if group == 0 || index >= group || !xv.rows().is_multiple_of(group) {
            return Err(Error::dim(format!(
                "slice {index} of group {group} from {:?}",
                xv.shape()
            )));
        }
        let b = xv.rows() / group;
        let mut out = Tensor2D::zeros(b, xv.cols());
        for r in 0..b {
            out.row_mut(r).copy_from_slice(xv.row(r * group + index));
        }
        Ok(self.push(out, Op::TokenSlice { x, group, index }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor2D::scalar(s), Op::Sum(a))
    }

    /// Mean over rows of the row-wise squared error `Σ_c (pred - target)²`.
    pub fn mse_mean(&mut self, pred: Var, target: Tensor2D) -> Result<Var> {
        let pv = self.value(pred);
        check_same(pv, &target, "mse target")?;
        if pv.rows() == 0 {
            return Err(Error::dim("mse over zero rows"));
        }
        let total: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let loss = total / pv.rows() as f64;
        Ok(self.push(Tensor2D::scalar(loss), Op::MseMean { pred, target }))
    }

    /// Mean cross-entropy of `softmax(logits)` against class indices, with
    /// the probability clamped below at [`CE_PROB_FLOOR`].
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != targets.len() || lv.rows() == 0 {
            return Err(Error::dim(format!(
                "{} target labels for logits {:?}",
                targets.len(),
                lv.shape()
            )));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= lv.cols()) {
            return Err(Error::dim(format!("class index {bad} for {} classes", lv.cols())));
        }
        let probs = ops::softmax_rows(lv);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -probs.get(r, t).max(CE_PROB_FLOOR).ln())
            .sum::<f64>()
            / targets.len() as f64;
        Ok(self.push(
            Tensor2D::scalar(loss),
            Op::SoftmaxCe {
                logits,
                probs,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean over all entries of `½(μ² + σ² − log σ² − 1)` with `σ = exp(log_sigma)`.
    pub fn kl_mean(&mut self, mu: Var, log_sigma: Var) -> Result<Var> {
        let (m, s) = (self.value(mu), self.value(log_sigma));
        check_same(m, s, "kl")?;
        let n = m.data().len();
        if n == 0 {
            return Err(Error::dim("kl over an empty tensor"));
        }
        let total: f64 = m.data().iter().zip(s.data()).map(|(&mu, &ls)| kl_term(mu, ls)).sum();
        Ok(self.push(Tensor2D::scalar(total / n as f64), Op::KlMean { mu, log_sigma }))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State(
                "backward called before a forward pass was recorded".into(),
            ));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::dim(format!(
                "loss must be a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor2D>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(Tensor2D::scalar(1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut send = |v: Var, contrib: Tensor2D| match &mut adj[v.0] {
                Some(acc) => acc.add_assign(&contrib).expect("adjoint shapes agree"),
                slot @ None => *slot = Some(contrib),
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.accumulate(*id, g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    send(*a, matmul_nt(&g, bv));
                    send(*b, matmul_tn(av, &g));
                }
                Op::AddRow(x, b) => {
                    send(*b, g.col_sums());
                    send(*x, g);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|v| -v));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    send(*a, g.zip_map(bv, |x, y| x * y)?);
                    send(*b, g.zip_map(av, |x, y| x * y)?);
                }
                Op::Scale(a, s) => send(*a, g.map(|v| v * s)),
                Op::Exp(a) => send(*a, g.zip_map(&node.value, |x, y| x * y)?),
                Op::Relu(a) => {
                    let av = self.value(*a);
                    send(*a, g.zip_map(av, |x, y| if y > 0.0 { x } else { 0.0 })?);
                }
                Op::Silu(a) => {
                    let av = self.value(*a);
                    send(*a, g.zip_map(av, |x, y| x * ops::silu_grad(y))?);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    normalized,
                    inv_std,
                    beta,
                } => {
                    let gv = self.value(*gamma).data();
                    let cols = g.cols();
                    let n = cols as f64;
                    let mut d_gamma = vec![0.0; cols];
                    let mut dx = Tensor2D::zeros(g.rows(), cols);
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let xr = normalized.row(r);
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for c in 0..cols {
                            d_gamma[c] += gr[c] * xr[c];
                            let dxh = gr[c] * gv[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xr[c];
                        }
                        mean_dxh /= n;
                        mean_dxh_xh /= n;
                        let out_row = dx.row_mut(r);
                        for c in 0..cols {
                            let dxh = gr[c] * gv[c];
                            out_row[c] = inv_std[r] * (dxh - mean_dxh - xr[c] * mean_dxh_xh);
                        }
                    }
                    send(*gamma, Tensor2D::row_vector(d_gamma));
                    send(*beta, g.col_sums());
                    send(*x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    group,
                    weights,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (dq, dk, dvv) = attention_backward(&g, qv, kv, vv, weights, *group);
                    send(*q, dq);
                    send(*k, dk);
                    send(*v, dvv);
                }
                Op::Interleave(parts) => {
                    let m = parts.len();
                    let b = g.rows() / m;
                    for (j, p) in parts.iter().enumerate() {
                        let mut part = Tensor2D::zeros(b, g.cols());
                        for r in 0..b {
                            part.row_mut(r).copy_from_slice(g.row(r * m + j));
                        }
                        send(*p, part);
                    }
                }
                Op::TokenSlice { x, group, index } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor2D::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        dx.row_mut(r * group + index).copy_from_slice(g.row(r));
                    }
                    send(*x, dx);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    send(*a, Tensor2D::filled(r, c, g.get(0, 0)));
                }
                Op::MseMean { pred, target } => {
                    let pv = self.value(*pred);
                    let k = 2.0 * g.get(0, 0) / pv.rows() as f64;
                    send(*pred, pv.zip_map(target, |p, t| k * (p - t))?);
                }
                Op::SoftmaxCe { logits, probs, targets } => {
                    let k = g.get(0, 0) / targets.len() as f64;
                    let mut d = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        if probs.get(r, t) < CE_PROB_FLOOR {
                            // clamped branch is flat
                            d.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let row = d.row_mut(r);
                        row[t] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= k);
                    }
                    send(*logits, d);
                }
                Op::KlMean { mu, log_sigma } => {
                    let (m, s) = (self.value(*mu), self.value(*log_sigma));
                    let k = g.get(0, 0) / m.data().len() as f64;
                    send(*mu, m.map(|v| k * v));
                    send(*log_sigma, s.map(|v| k * ((2.0 * v).exp() - 1.0)));
                }
            }
        }
        Ok(out)
    }
}

pub(crate) fn kl_term(mu: f64, log_sigma: f64) -> f64 {
    0.5 * (mu * mu + (2.0 * log_sigma).exp() - 2.0 * log_sigma - 1.0)
}

fn attention_backward(
    g: &Tensor2D,
    q: &Tensor2D,
    k: &Tensor2D,
    v: &Tensor2D,
    weights: &Tensor2D,
    group: usize,
) -> (Tensor2D, Tensor2D, Tensor2D) {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut dq = Tensor2D::zeros(q.rows(), q.cols());
    let mut dk = Tensor2D::zeros(k.rows(), k.cols());
    let mut dv = Tensor2D::zeros(v.rows(), v.cols());
    let mut ds = vec![0.0; group * group];
    for blk in 0..q.rows() / group {
        let base = blk * group;
        for i in 0..group {
            let w = weights.row(base + i);
            let gi = g.row(base + i);
            // dV_j += P_ij g_i ; dP_ij = g_i · v_j
            let mut dp = vec![0.0; group];
            for j in 0..group {
                let vj = v.row(base + j);
                dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                for (o, gv) in dv.row_mut(base + j).iter_mut().zip(gi) {
                    *o += w[j] * gv;
                }
            }
            let dot: f64 = dp.iter().zip(w).map(|(a, b)| a * b).sum();
            for j in 0..group {
                ds[i * group + j] = w[j] * (dp[j] - dot) * scale;
            }
        }
        for i in 0..group {
            for j in 0..group {
                let s = ds[i * group + j];
                if s == 0.0 {
                    continue;
                }
                let kj = k.row(base + j).to_vec();
                for (o, kv) in dq.row_mut(base + i).iter_mut().zip(&kj) {
                    *o += s * kv;
                }
                let qi = q.row(base + i).to_vec();
                for (o, qv) in dk.row_mut(base + j).iter_mut().zip(&qi) {
                    *o += s * qv;
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Plain `x · w` product, exposed for inference paths that skip the tape.
pub fn product(x: &Tensor2D, w: &Tensor2D) -> Result<Tensor2D> {
    if x.cols() != w.rows() {
        return Err(Error::dim(format!("{:?} x {:?}", x.shape(), w.shape())));
    }
    Ok(matmul_nn(x, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_gradient_is_input() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor2D::scalar(0.7));
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let x = tape.constant(Tensor2D::scalar(3.0));
        let y = tape.mul(wv, x).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().get(0, 0), 3.0);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor2D::scalar(0.7));
        let mut tape = Tape::new();
        let _unused = tape.param(&store, w);
        let c = tape.constant(Tensor2D::scalar(5.0));
        let loss = tape.sum(c);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get_or_zero(&store, w).get(0, 0), 0.0);
    }

    #[test]
    fn backward_without_forward_is_a_state_error() {
        let tape = Tape::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::State(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor2D::zeros(2, 2));
        assert!(matches!(tape.backward(c), Err(Error::Dimension(_))));
    }

    #[test]
    fn interleave_and_slice_are_inverse() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor2D::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        let b = tape.constant(Tensor2D::from_rows(&[[5.0, 6.0], [7.0, 8.0]]).unwrap());
        let s = tape.interleave(&[a, b]).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
        let back = tape.token_slice(s, 2, 1).unwrap();
        assert_eq!(tape.value(back), tape.value(b));
    }
}
