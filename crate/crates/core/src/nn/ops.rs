//! Pure forward kernels. The tape records these and adds the matching
//! backward rules; everything here is deterministic and allocation-only.

use super::tensor::{matmul_nn, Tensor2D};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x · w + b`, with `b` broadcast over rows.
pub fn dense_forward(x: &Tensor2D, w: &Tensor2D, b: &[f64]) -> Result<Tensor2D> {
    if x.cols() != w.rows() {
        return Err(Error::dim(format!(
            "dense input {:?} against weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    if b.len() != w.cols() {
        return Err(Error::dim(format!(
            "bias of length {} for {} outputs",
            b.len(),
            w.cols()
        )));
    }
    let mut y = matmul_nn(x, w);
    add_row_in_place(&mut y, b);
    Ok(y)
}

pub(crate) fn add_row_in_place(y: &mut Tensor2D, b: &[f64]) {
    for r in 0..y.rows() {
        for (v, bv) in y.row_mut(r).iter_mut().zip(b) {
            *v += bv;
        }
    }
}

/// Row statistics kept around for the backward pass.
pub(crate) struct LayerNormCache {
    pub normalized: Tensor2D,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_cached(
    x: &Tensor2D,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Tensor2D, LayerNormCache)> {
    if gamma.len() != x.cols() || beta.len() != x.cols() {
        return Err(Error::dim(format!(
            "layer norm over {} columns with gamma {} / beta {}",
            x.cols(),
            gamma.len(),
            beta.len()
        )));
    }
    let n = x.cols() as f64;
    let mut normalized = Tensor2D::zeros(x.rows(), x.cols());
    let mut y = Tensor2D::zeros(x.rows(), x.cols());
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / (var + eps).sqrt();
        inv_std.push(rstd);
        let nrow = normalized.row_mut(r);
        for (o, v) in nrow.iter_mut().zip(row) {
            *o = (v - mean) * rstd;
        }
        let nrow = normalized.row(r).to_vec();
        for (c, o) in y.row_mut(r).iter_mut().enumerate() {
            *o = gamma[c] * nrow[c] + beta[c];
        }
    }
    Ok((y, LayerNormCache { normalized, inv_std }))
}

/// Per-row normalization with population variance, then `gamma ⊙ x̂ + beta`.
pub fn layer_norm(x: &Tensor2D, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Tensor2D> {
    if eps < 0.0 || !eps.is_finite() {
        return Err(Error::Domain(format!("layer norm eps must be >= 0, got {eps}")));
    }
    layer_norm_cached(x, gamma, beta, eps).map(|(y, _)| y)
}

/// Numerically stable softmax of each row, in place.
pub(crate) fn softmax_rows_in_place(x: &mut [f64], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

pub fn softmax_rows(x: &Tensor2D) -> Tensor2D {
    let mut out = x.clone();
    let cols = out.cols();
    if cols > 0 {
        softmax_rows_in_place(out.data_mut(), cols);
    }
    out
}

/// Scaled dot-product attention applied independently to consecutive blocks
/// of `group` rows. Returns the output and the stacked attention weights
/// (`rows x group`, one `group x group` block per sample).
pub(crate) fn grouped_attention(
    q: &Tensor2D,
    k: &Tensor2D,
    v: &Tensor2D,
    group: usize,
) -> Result<(Tensor2D, Tensor2D)> {
    if group == 0 || !q.rows().is_multiple_of(group) {
        return Err(Error::dim(format!(
            "{} rows cannot be split into groups of {group}",
            q.rows()
        )));
    }
    if !q.same_shape(k) || q.rows() != v.rows() {
        return Err(Error::dim(format!(
            "attention q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let dv = v.cols();
    let mut weights = Tensor2D::zeros(q.rows(), group);
    let mut out = Tensor2D::zeros(q.rows(), dv);
    for g in 0..q.rows() / group {
        let base = g * group;
        for i in 0..group {
            let qi = q.row(base + i);
            let w = weights.row_mut(base + i);
            for (j, wj) in w.iter_mut().enumerate() {
                let kj = k.row(base + j);
                *wj = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_rows_in_place(w, group);
        }
        for i in 0..group {
            let w = weights.row(base + i).to_vec();
            let o = out.row_mut(base + i);
            for (j, wj) in w.iter().enumerate() {
                for (oc, vc) in o.iter_mut().zip(v.row(base + j)) {
                    *oc += wj * vc;
                }
            }
        }
    }
    Ok((out, weights))
}

/// Single-head self-attention `softmax(QKᵀ/√d) V` over the rows of `h`.
pub fn self_attention(h: &Tensor2D, wq: &Tensor2D, wk: &Tensor2D, wv: &Tensor2D) -> Result<Tensor2D> {
    attention_with_weights(h, wq, wk, wv).map(|(out, _)| out)
}

/// Like [`self_attention`] but also returns the `M x M` weight matrix.
pub fn attention_with_weights(
    h: &Tensor2D,
    wq: &Tensor2D,
    wk: &Tensor2D,
    wv: &Tensor2D,
) -> Result<(Tensor2D, Tensor2D)> {
    let d = h.cols();
    for (name, w) in [("Wq", wq), ("Wk", wk), ("Wv", wv)] {
        if w.shape() != (d, d) {
            return Err(Error::dim(format!("{name} is {:?}, expected ({d}, {d})", w.shape())));
        }
    }
    let q = matmul_nn(h, wq);
    let k = matmul_nn(h, wk);
    let v = matmul_nn(h, wv);
    grouped_attention(&q, &k, &v, h.rows())
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor2D {
        Tensor2D::from_rows(rows).unwrap()
    }

    #[test]
    fn dense_identity_and_zero_input() {
        let y = dense_forward(&t(&[&[1.0, 2.0]]), &Tensor2D::identity(2), &[0.0, 0.0]).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);

        let w = t(&[&[0.3, -7.0], &[2.5, 1.0]]);
        let y = dense_forward(&t(&[&[0.0, 0.0]]), &w, &[3.0, 4.0]).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
    }

    #[test]
    fn dense_hand_multiply() {
        let w = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let y = dense_forward(&t(&[&[1.0, 1.0]]), &w, &[0.0, 0.0]).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0]);
    }

    #[test]
    fn dense_shape_errors() {
        let w = Tensor2D::identity(2);
        assert!(matches!(
            dense_forward(&t(&[&[1.0, 2.0, 3.0]]), &w, &[0.0, 0.0]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            dense_forward(&t(&[&[1.0, 2.0]]), &w, &[0.0]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let y = layer_norm(&t(&[&[5.0, 5.0, 5.0]]), &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        let y = layer_norm(&t(&[&[1.0, -1.0]]), &[1.0; 2], &[0.0; 2], 1e-14).unwrap();
        assert!((y.get(0, 0) - 1.0).abs() < 1e-12 && (y.get(0, 1) + 1.0).abs() < 1e-12);

        // mean 1, population variance 1 -> normalized [-1, 1] -> 2x + 1
        let y = layer_norm(&t(&[&[0.0, 2.0]]), &[2.0, 2.0], &[1.0, 1.0], 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 3.0]);

        assert!(matches!(
            layer_norm(&t(&[&[0.0, 2.0]]), &[1.0], &[0.0, 0.0], 1e-5),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn attention_single_token_is_value_row() {
        let h = t(&[&[0.4, -1.2]]);
        let wq = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let wk = t(&[&[-1.0, 0.5], &[0.2, 0.1]]);
        let wv = t(&[&[0.7, 0.0], &[1.0, -2.0]]);
        let (out, w) = attention_with_weights(&h, &wq, &wk, &wv).unwrap();
        assert_eq!(w.data(), &[1.0]);
        assert_eq!(out, h.matmul(&wv).unwrap());
    }

    #[test]
    fn attention_zero_logits_average_values() {
        let h = t(&[&[1.0, 2.0], &[3.0, -1.0], &[0.5, 0.5]]);
        let z = Tensor2D::zeros(2, 2);
        let wv = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let (out, w) = attention_with_weights(&h, &z, &z, &wv).unwrap();
        for v in w.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let mean = [1.5, 0.5];
        for r in 0..3 {
            for c in 0..2 {
                assert!((out.get(r, c) - mean[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_hand_computed_scalar_case() {
        // d = 1: q = 2h, k = h, v = 3h with h = [1, -1].
        let h = t(&[&[1.0], &[-1.0]]);
        let out = self_attention(&h, &t(&[&[2.0]]), &t(&[&[1.0]]), &t(&[&[3.0]])).unwrap();
        // row 0 logits: [2, -2]; row 1 logits: [-2, 2]
        let p = 1.0 / (1.0 + (-4.0f64).exp());
        let expected0 = p * 3.0 + (1.0 - p) * -3.0;
        assert!((out.get(0, 0) - expected0).abs() < 1e-14);
        assert!((out.get(1, 0) + expected0).abs() < 1e-14);
    }

    #[test]
    fn attention_rejects_bad_projection() {
        let h = Tensor2D::zeros(2, 3);
        let bad = Tensor2D::zeros(2, 2);
        let ok = Tensor2D::zeros(3, 3);
        assert!(self_attention(&h, &bad, &ok, &ok).is_err());
    }
}
