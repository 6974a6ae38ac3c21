use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{fan_in_bound, ParamId, ParamStore, Tape, Tensor2D, Var};

#[derive(Clone, Debug)]
struct LayerParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
}

const LAYER_FIELDS: [&str; 11] = [
    "wq",
    "wk",
    "wv",
    "ln1.gamma",
    "ln1.beta",
    "ffn.w1",
    "ffn.b1",
    "ffn.w2",
    "ffn.b2",
    "ln2.gamma",
    "ln2.beta",
];

/// Post-norm transformer stack operating on blocks of `M` tokens of width `d`.
///
/// Each layer computes `H ← LN(H + Attn(H))` then `H ← LN(H + FFN(H))` with a
/// single attention head and a ReLU feed-forward `d → D → d`.
#[derive(Clone, Debug)]
pub struct TransformerStack {
    layers: Vec<LayerParams>,
}

impl TransformerStack {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        n_layers: usize,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bd = fan_in_bound(d);
        let bh = fan_in_bound(hidden);
        let layers = (0..n_layers)
            .map(|l| {
                let n = |f: &str| format!("{prefix}.{l}.{f}");
                LayerParams {
                    wq: store.add_uniform(n("wq"), d, d, bd, rng),
                    wk: store.add_uniform(n("wk"), d, d, bd, rng),
                    wv: store.add_uniform(n("wv"), d, d, bd, rng),
                    ln1_gamma: store.add(n("ln1.gamma"), Tensor2D::filled(1, d, 1.0)),
                    ln1_beta: store.add(n("ln1.beta"), Tensor2D::zeros(1, d)),
                    ffn_w1: store.add_uniform(n("ffn.w1"), d, hidden, bd, rng),
                    ffn_b1: store.add_uniform(n("ffn.b1"), 1, hidden, bd, rng),
                    ffn_w2: store.add_uniform(n("ffn.w2"), hidden, d, bh, rng),
                    ffn_b2: store.add_uniform(n("ffn.b2"), 1, d, bh, rng),
                    ln2_gamma: store.add(n("ln2.gamma"), Tensor2D::filled(1, d, 1.0)),
                    ln2_beta: store.add(n("ln2.beta"), Tensor2D::zeros(1, d)),
                }
            })
            .collect();
        Self { layers }
    }

    /// Re-binds a stack of `n_layers` layers stored under `prefix`.
    pub fn bind(store: &ParamStore, prefix: &str, n_layers: usize) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|l| {
                let ids: Vec<ParamId> = LAYER_FIELDS
                    .iter()
                    .map(|f| {
                        let name = format!("{prefix}.{l}.{f}");
                        store
                            .id_of(&name)
                            .ok_or_else(|| Error::Integrity(format!("missing parameter {name}")))
                    })
                    .collect::<Result<_>>()?;
                Ok(LayerParams {
                    wq: ids[0],
                    wk: ids[1],
                    wv: ids[2],
                    ln1_gamma: ids[3],
                    ln1_beta: ids[4],
                    ffn_w1: ids[5],
                    ffn_b1: ids[6],
                    ffn_w2: ids[7],
                    ffn_b2: ids[8],
                    ln2_gamma: ids[9],
                    ln2_beta: ids[10],
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Records the stack on `h`, a `(B·M) x d` matrix whose consecutive blocks
    /// of `group` rows are independent samples.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var, group: usize) -> Result<Var> {
        let mut h = h;
        for p in &self.layers {
            let wq = tape.param(store, p.wq);
            let wk = tape.param(store, p.wk);
            let wv = tape.param(store, p.wv);
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let a = tape.attention(q, k, v, group)?;
            let r = tape.add(h, a)?;
            let g1 = tape.param(store, p.ln1_gamma);
            let b1 = tape.param(store, p.ln1_beta);
            h = tape.layer_norm(r, g1, b1)?;

            let w1 = tape.param(store, p.ffn_w1);
            let c1 = tape.param(store, p.ffn_b1);
            let f = tape.dense(h, w1, c1)?;
            let f = tape.relu(f);
            let w2 = tape.param(store, p.ffn_w2);
            let c2 = tape.param(store, p.ffn_b2);
            let f = tape.dense(f, w2, c2)?;
            let r = tape.add(h, f)?;
            let g2 = tape.param(store, p.ln2_gamma);
            let b2 = tape.param(store, p.ln2_beta);
            h = tape.layer_norm(r, g2, b2)?;
        }
        Ok(h)
    }

    /// Forward pass without recording gradients.
    pub fn apply(&self, store: &ParamStore, h: &Tensor2D, group: usize) -> Result<Tensor2D> {
        let mut tape = Tape::new();
        let x = tape.constant(h.clone());
        let y = self.forward(&mut tape, store, x, group)?;
        let out = tape.value(y).clone();
        if !out.is_finite() {
            return Err(Error::Numeric("transformer produced a non-finite activation".into()));
        }
        Ok(out)
    }
}
