//! Column tokenizer and detokenizer.
//!
//! Every column gets its own `d`-dimensional token: numerical columns through
//! a per-column affine map `x·w + b`, categorical columns through a per-column
//! embedding table applied to a one-hot (or soft) vector. The detokenizer
//! mirrors this with a per-column linear read-out and a softmax head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ops, ParamId, ParamStore, Tape, Tensor2D, Var};
use crate::table::{EncodedTable, PreprocessState};

/// How many tokens a row produces and the width of each categorical head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnLayout {
    pub n_numerical: usize,
    pub cardinalities: Vec<usize>,
}

impl ColumnLayout {
    pub fn new(n_numerical: usize, cardinalities: Vec<usize>) -> Result<Self> {
        if n_numerical + cardinalities.len() == 0 {
            return Err(Error::Schema("layout has no columns".into()));
        }
        if let Some(i) = cardinalities.iter().position(|&c| c == 0) {
            return Err(Error::Schema(format!("categorical column {i} has no categories")));
        }
        Ok(Self {
            n_numerical,
            cardinalities,
        })
    }

    pub fn from_state(state: &PreprocessState) -> Result<Self> {
        Self::new(state.numerical.len(), state.cardinalities())
    }

    pub fn n_categorical(&self) -> usize {
        self.cardinalities.len()
    }

    /// `M`, the number of tokens per row.
    pub fn n_tokens(&self) -> usize {
        self.n_numerical + self.cardinalities.len()
    }
}

/// Tokenizer input for `B` rows: processed numericals and one (possibly soft)
/// one-hot matrix per categorical column.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub numerical: Tensor2D,
    pub categorical: Vec<Tensor2D>,
}

impl TokenBatch {
    pub fn len(&self) -> usize {
        self.numerical.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One-hot encodes `rows` of an encoded table.
    pub fn from_encoded(enc: &EncodedTable, rows: &[usize], layout: &ColumnLayout) -> Result<Self> {
        if enc.n_numerical != layout.n_numerical || enc.n_categorical != layout.n_categorical() {
            return Err(Error::dim("encoded table does not match the column layout"));
        }
        let b = rows.len();
        let mut numerical = Tensor2D::zeros(b, layout.n_numerical);
        let mut categorical: Vec<Tensor2D> = layout.cardinalities.iter().map(|&c| Tensor2D::zeros(b, c)).collect();
        for (i, &r) in rows.iter().enumerate() {
            numerical.row_mut(i).copy_from_slice(enc.numerical_row(r));
            for (j, &k) in enc.categorical_row(r).iter().enumerate() {
                if k >= layout.cardinalities[j] {
                    return Err(Error::Input(format!("category index {k} out of range for column {j}")));
                }
                categorical[j].set(i, k, 1.0);
            }
        }
        Ok(Self { numerical, categorical })
    }

    fn check(&self, layout: &ColumnLayout) -> Result<()> {
        let b = self.len();
        if self.numerical.cols() != layout.n_numerical || self.categorical.len() != layout.n_categorical() {
            return Err(Error::dim("token batch does not match the column layout"));
        }
        for (j, (m, &c)) in self.categorical.iter().zip(&layout.cardinalities).enumerate() {
            if m.shape() != (b, c) {
                return Err(Error::dim(format!(
                    "categorical input {j} is {:?}, expected ({b}, {c})",
                    m.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Per-column token parameters.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    d: usize,
    num_weight: Vec<ParamId>,
    num_bias: Vec<ParamId>,
    cat_weight: Vec<ParamId>,
    cat_bias: Vec<ParamId>,
}

impl Tokenizer {
    /// Weights uniform in `±1/√d`, biases zero.
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, layout: &ColumnLayout, d: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut t = Tokenizer {
            d,
            num_weight: Vec::new(),
            num_bias: Vec::new(),
            cat_weight: Vec::new(),
            cat_bias: Vec::new(),
        };
        for i in 0..layout.n_numerical {
            t.num_weight
                .push(store.add_uniform(format!("tokenizer.num.{i}.weight"), 1, d, bound, rng));
            t.num_bias
                .push(store.add(format!("tokenizer.num.{i}.bias"), Tensor2D::zeros(1, d)));
        }
        for (i, &c) in layout.cardinalities.iter().enumerate() {
            t.cat_weight
                .push(store.add_uniform(format!("tokenizer.cat.{i}.weight"), c, d, bound, rng));
            t.cat_bias
                .push(store.add(format!("tokenizer.cat.{i}.bias"), Tensor2D::zeros(1, d)));
        }
        t
    }

    /// Re-binds parameter handles by name (for loaded models).
    pub fn bind(store: &ParamStore, layout: &ColumnLayout, d: usize) -> Result<Self> {
        let find = |n: String| {
            store
                .id_of(&n)
                .ok_or_else(|| Error::Integrity(format!("missing parameter {n}")))
        };
        Ok(Tokenizer {
            d,
            num_weight: (0..layout.n_numerical)
                .map(|i| find(format!("tokenizer.num.{i}.weight")))
                .collect::<Result<_>>()?,
            num_bias: (0..layout.n_numerical)
                .map(|i| find(format!("tokenizer.num.{i}.bias")))
                .collect::<Result<_>>()?,
            cat_weight: (0..layout.n_categorical())
                .map(|i| find(format!("tokenizer.cat.{i}.weight")))
                .collect::<Result<_>>()?,
            cat_bias: (0..layout.n_categorical())
                .map(|i| find(format!("tokenizer.cat.{i}.bias")))
                .collect::<Result<_>>()?,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Records tokenization of a batch; the result is `(B·M) x d` with the
    /// `M` tokens of each row stored consecutively.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, batch: &TokenBatch) -> Result<Var> {
        let layout = ColumnLayout {
            n_numerical: self.num_weight.len(),
            cardinalities: self.cat_weight.iter().map(|&w| store.get(w).rows()).collect(),
        };
        batch.check(&layout)?;
        let b = batch.len();
        let mut tokens = Vec::with_capacity(layout.n_tokens());
        for i in 0..layout.n_numerical {
            let col: Vec<f64> = (0..b).map(|r| batch.numerical.get(r, i)).collect();
            let x = tape.constant(Tensor2D::new(b, 1, col)?);
            let w = tape.param(store, self.num_weight[i]);
            let bias = tape.param(store, self.num_bias[i]);
            tokens.push(tape.dense(x, w, bias)?);
        }
        for (i, oh) in batch.categorical.iter().enumerate() {
            let x = tape.constant(oh.clone());
            let w = tape.param(store, self.cat_weight[i]);
            let bias = tape.param(store, self.cat_bias[i]);
            tokens.push(tape.dense(x, w, bias)?);
        }
        tape.interleave(&tokens)
    }

    /// Token matrix for a batch without recording gradients.
    pub fn tokenize(&self, store: &ParamStore, batch: &TokenBatch) -> Result<Tensor2D> {
        let mut tape = Tape::new();
        let v = self.forward(&mut tape, store, batch)?;
        Ok(tape.value(v).clone())
    }
}

/// Read-out heads: one scalar per numerical column, one logit vector per
/// categorical column.
#[derive(Clone, Debug)]
pub struct Detokenizer {
    num_weight: Vec<ParamId>,
    num_bias: Vec<ParamId>,
    cat_weight: Vec<ParamId>,
    cat_bias: Vec<ParamId>,
}

/// Tape handles of detokenizer outputs.
#[derive(Clone, Debug)]
pub struct DetokenizedVars {
    /// `B x 1` per numerical column.
    pub numerical: Vec<Var>,
    /// `B x C_j` logits per categorical column.
    pub logits: Vec<Var>,
}

/// Detokenized batch: numerical predictions plus per-column class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Detokenized {
    /// `B x M_num`.
    pub numerical: Tensor2D,
    /// `B x C_j` per categorical column; rows sum to one.
    pub probabilities: Vec<Tensor2D>,
}

impl Detokenized {
    /// Hard labels (first maximum wins), `B x M_cat` row-major.
    pub fn argmax(&self) -> Vec<usize> {
        let b = self.numerical.rows();
        let mut out = Vec::with_capacity(b * self.probabilities.len());
        for r in 0..b {
            for p in &self.probabilities {
                out.push(argmax(p.row(r)));
            }
        }
        out
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl Detokenizer {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, layout: &ColumnLayout, d: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut t = Detokenizer {
            num_weight: Vec::new(),
            num_bias: Vec::new(),
            cat_weight: Vec::new(),
            cat_bias: Vec::new(),
        };
        for i in 0..layout.n_numerical {
            t.num_weight
                .push(store.add_uniform(format!("detokenizer.num.{i}.weight"), d, 1, bound, rng));
            t.num_bias
                .push(store.add(format!("detokenizer.num.{i}.bias"), Tensor2D::zeros(1, 1)));
        }
        for (i, &c) in layout.cardinalities.iter().enumerate() {
            t.cat_weight
                .push(store.add_uniform(format!("detokenizer.cat.{i}.weight"), d, c, bound, rng));
            t.cat_bias
                .push(store.add(format!("detokenizer.cat.{i}.bias"), Tensor2D::zeros(1, c)));
        }
        t
    }

    pub fn bind(store: &ParamStore, layout: &ColumnLayout) -> Result<Self> {
        let find = |n: String| {
            store
                .id_of(&n)
                .ok_or_else(|| Error::Integrity(format!("missing parameter {n}")))
        };
        Ok(Detokenizer {
            num_weight: (0..layout.n_numerical)
                .map(|i| find(format!("detokenizer.num.{i}.weight")))
                .collect::<Result<_>>()?,
            num_bias: (0..layout.n_numerical)
                .map(|i| find(format!("detokenizer.num.{i}.bias")))
                .collect::<Result<_>>()?,
            cat_weight: (0..layout.n_categorical())
                .map(|i| find(format!("detokenizer.cat.{i}.weight")))
                .collect::<Result<_>>()?,
            cat_bias: (0..layout.n_categorical())
                .map(|i| find(format!("detokenizer.cat.{i}.bias")))
                .collect::<Result<_>>()?,
        })
    }

    fn n_tokens(&self) -> usize {
        self.num_weight.len() + self.cat_weight.len()
    }

    /// Records the read-out of a `(B·M) x d` token matrix.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tokens: Var) -> Result<DetokenizedVars> {
        let m = self.n_tokens();
        let mut numerical = Vec::with_capacity(self.num_weight.len());
        for i in 0..self.num_weight.len() {
            let e = tape.token_slice(tokens, m, i)?;
            let w = tape.param(store, self.num_weight[i]);
            let b = tape.param(store, self.num_bias[i]);
            numerical.push(tape.dense(e, w, b)?);
        }
        let mut logits = Vec::with_capacity(self.cat_weight.len());
        for i in 0..self.cat_weight.len() {
            let e = tape.token_slice(tokens, m, self.num_weight.len() + i)?;
            let w = tape.param(store, self.cat_weight[i]);
            let b = tape.param(store, self.cat_bias[i]);
            logits.push(tape.dense(e, w, b)?);
        }
        Ok(DetokenizedVars { numerical, logits })
    }

    /// Read-out without recording gradients.
    pub fn detokenize(&self, store: &ParamStore, tokens: &Tensor2D) -> Result<Detokenized> {
        let m = self.n_tokens();
        if !tokens.rows().is_multiple_of(m) {
            return Err(Error::dim(format!(
                "{} token rows are not a multiple of {m} columns",
                tokens.rows()
            )));
        }
        let mut tape = Tape::new();
        let t = tape.constant(tokens.clone());
        let vars = self.forward(&mut tape, store, t)?;
        let b = tokens.rows() / m;
        let mut numerical = Tensor2D::zeros(b, vars.numerical.len());
        for (j, v) in vars.numerical.iter().enumerate() {
            for r in 0..b {
                numerical.set(r, j, tape.value(*v).get(r, 0));
            }
        }
        let probabilities = vars.logits.iter().map(|v| ops::softmax_rows(tape.value(*v))).collect();
        Ok(Detokenized {
            numerical,
            probabilities,
        })
    }
}

/// Row-major flatten of an `M x d` token matrix into `1 x (M·d)`.
pub fn flatten_latent(z: &Tensor2D) -> Tensor2D {
    Tensor2D::row_vector(z.data().to_vec())
}

/// Inverse of [`flatten_latent`].
pub fn unflatten_latent(z: &[f64], d: usize) -> Result<Tensor2D> {
    if d == 0 || !z.len().is_multiple_of(d) {
        return Err(Error::dim(format!(
            "latent of length {} is not divisible by token width {d}",
            z.len()
        )));
    }
    Tensor2D::new(z.len() / d, d, z.to_vec())
}

/// Position in the flattened latent of dimension `k` of token `token`.
pub fn latent_index(token: usize, k: usize, d: usize) -> usize {
    token * d + k
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(layout: &ColumnLayout, d: usize) -> (ParamStore, Tokenizer, Detokenizer) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let t = Tokenizer::init(&mut store, layout, d, &mut rng);
        let dt = Detokenizer::init(&mut store, layout, d, &mut rng);
        (store, t, dt)
    }

    fn single_row(num: &[f64], cats: &[Vec<f64>]) -> TokenBatch {
        TokenBatch {
            numerical: Tensor2D::row_vector(num.to_vec()),
            categorical: cats.iter().map(|c| Tensor2D::row_vector(c.clone())).collect(),
        }
    }

    #[test]
    fn zero_numerical_input_yields_bias() {
        let layout = ColumnLayout::new(1, vec![]).unwrap();
        let (mut store, t, _) = setup(&layout, 4);
        let bias = store.id_of("tokenizer.num.0.bias").unwrap();
        *store.get_mut(bias) = Tensor2D::row_vector(vec![0.1, -0.2, 0.3, 0.5]);
        let e = t.tokenize(&store, &single_row(&[0.0], &[])).unwrap();
        assert_eq!(e.data(), &[0.1, -0.2, 0.3, 0.5]);
    }

    #[test]
    fn one_hot_selects_embedding_row() {
        let layout = ColumnLayout::new(0, vec![3]).unwrap();
        let (mut store, t, _) = setup(&layout, 4);
        let bias = store.id_of("tokenizer.cat.0.bias").unwrap();
        *store.get_mut(bias) = Tensor2D::row_vector(vec![1.0, 2.0, 3.0, 4.0]);
        let w = store.get(store.id_of("tokenizer.cat.0.weight").unwrap()).clone();
        for k in 0..3 {
            let mut oh = vec![0.0; 3];
            oh[k] = 1.0;
            let e = t.tokenize(&store, &single_row(&[], &[oh])).unwrap();
            let expected: Vec<f64> = w.row(k).iter().zip([1.0, 2.0, 3.0, 4.0]).map(|(a, b)| a + b).collect();
            assert_eq!(e.data(), expected.as_slice());
        }
    }

    #[test]
    fn hand_evaluated_numerical_token() {
        let layout = ColumnLayout::new(1, vec![]).unwrap();
        let (mut store, t, _) = setup(&layout, 4);
        let w = store.id_of("tokenizer.num.0.weight").unwrap();
        *store.get_mut(w) = Tensor2D::row_vector(vec![1.0, 0.0, 0.0, 0.0]);
        let e = t.tokenize(&store, &single_row(&[2.0], &[])).unwrap();
        assert_eq!(e.data(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_logits_are_uniform() {
        let layout = ColumnLayout::new(0, vec![4]).unwrap();
        let (store, _, dt) = setup(&layout, 4);
        let out = dt.detokenize(&store, &Tensor2D::zeros(1, 4)).unwrap();
        for p in out.probabilities[0].data() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_logits() {
        let layout = ColumnLayout::new(0, vec![2]).unwrap();
        let (mut store, _, dt) = setup(&layout, 2);
        let w = store.id_of("detokenizer.cat.0.weight").unwrap();
        *store.get_mut(w) = Tensor2D::from_rows(&[[10.0, -10.0], [0.0, 0.0]]).unwrap();
        let out = dt.detokenize(&store, &Tensor2D::row_vector(vec![1.0, 0.0])).unwrap();
        let p = &out.probabilities[0];
        assert!(p.get(0, 0) > 1.0 - 1e-8 && p.get(0, 1) < 1e-8);
        assert_eq!(out.argmax(), vec![0]);
    }

    #[test]
    fn hand_evaluated_softmax() {
        let layout = ColumnLayout::new(0, vec![3]).unwrap();
        let (mut store, _, dt) = setup(&layout, 2);
        let w = store.id_of("detokenizer.cat.0.weight").unwrap();
        *store.get_mut(w) = Tensor2D::from_rows(&[[1.0, 0.0, -1.0], [0.5, 2.0, 0.0]]).unwrap();
        let b = store.id_of("detokenizer.cat.0.bias").unwrap();
        *store.get_mut(b) = Tensor2D::row_vector(vec![0.0, 0.0, 1.0]);
        let e = Tensor2D::row_vector(vec![2.0, 1.0]);
        // logits: [2+0.5, 0+2, -2+0+1] = [2.5, 2, -1]
        let z = [2.5f64.exp(), 2f64.exp(), (-1f64).exp()];
        let total: f64 = z.iter().sum();
        let out = dt.detokenize(&store, &e).unwrap();
        for k in 0..3 {
            assert!((out.probabilities[0].get(0, k) - z[k] / total).abs() < 1e-15);
        }
    }

    #[test]
    fn numerical_readout_and_probability_sums() {
        let layout = ColumnLayout::new(2, vec![3, 5]).unwrap();
        let (store, _, dt) = setup(&layout, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tokens = Tensor2D::new(3 * 4, 4, (0..48).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let out = dt.detokenize(&store, &tokens).unwrap();
        assert_eq!(out.numerical.shape(), (3, 2));
        for p in &out.probabilities {
            for r in 0..3 {
                assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        // numerical column 1 of row 2 reads token 2*4+1
        let w = store.get(store.id_of("detokenizer.num.1.weight").unwrap());
        let e = tokens.row(9);
        let expected: f64 = e.iter().zip(w.data()).map(|(a, b)| a * b).sum();
        assert!((out.numerical.get(2, 1) - expected).abs() < 1e-14);
    }

    #[test]
    fn flatten_examples() {
        let z = Tensor2D::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let flat = flatten_latent(&z);
        assert_eq!(flat.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(unflatten_latent(flat.data(), 2).unwrap(), z);
        assert!(matches!(
            unflatten_latent(&[1.0, 2.0, 3.0], 2),
            Err(Error::Dimension(_))
        ));
    }

    proptest::proptest! {
        #[test]
        fn flatten_round_trip(m in 1usize..6, d in 1usize..6, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = Tensor2D::new(m, d, (0..m * d).map(|_| rng.random::<f64>()).collect()).unwrap();
            proptest::prop_assert_eq!(unflatten_latent(flatten_latent(&z).data(), d).unwrap(), z);
        }
    }
}
