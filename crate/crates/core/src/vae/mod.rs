//! Transformer β-VAE over column tokens.
//!
//! Rows are tokenized into `M x d` matrices, encoded by two independent
//! transformer stacks into `μ` and `log σ`, reparameterized, decoded by a
//! third stack and read out by the detokenizer. The flattened encoder means
//! form the training set of the latent diffusion model.

mod beta;
mod transformer;

pub use beta::BetaScheduler;
pub use transformer::TransformerStack;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tape::CE_PROB_FLOOR;
use crate::nn::{AdamConfig, ParamStore, Tape, Tensor2D, Var};
use crate::table::EncodedTable;
use crate::tokenizer::{argmax, ColumnLayout, Detokenized, Detokenizer, TokenBatch, Tokenizer};

/// Rows processed per chunk by the no-gradient helpers.
const INFERENCE_CHUNK: usize = 1024;

/// Which encoder output becomes diffusion training data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentSource {
    #[default]
    Mean,
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub d: usize,
    pub hidden: usize,
    pub n_layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta_max: f64,
    pub beta_min: f64,
    pub lambda: f64,
    pub patience: usize,
    pub latent_source: LatentSource,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            d: 4,
            hidden: 128,
            n_layers: 2,
            epochs: 200,
            batch_size: 256,
            lr: 1e-3,
            beta_max: 1e-2,
            beta_min: 1e-5,
            lambda: 0.7,
            patience: 10,
            latent_source: LatentSource::Mean,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.hidden == 0 || self.n_layers == 0 {
            return Err(Error::Config("vae d, hidden and n_layers must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("vae batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("vae lr must be positive, got {}", self.lr)));
        }
        BetaScheduler::new(self.beta_max, self.beta_min, self.lambda, self.patience)?;
        Ok(())
    }
}

/// The three loss terms of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeLoss {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Tape handles of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct VaeLossVars {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
}

#[derive(Clone, Debug)]
pub struct VaeModel {
    layout: ColumnLayout,
    d: usize,
    hidden: usize,
    n_layers: usize,
    store: ParamStore,
    tokenizer: Tokenizer,
    mu_encoder: TransformerStack,
    log_sigma_encoder: TransformerStack,
    decoder: TransformerStack,
    detokenizer: Detokenizer,
}

impl VaeModel {
    pub fn new<R: Rng + ?Sized>(layout: ColumnLayout, d: usize, hidden: usize, n_layers: usize, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let tokenizer = Tokenizer::init(&mut store, &layout, d, rng);
        let mu_encoder = TransformerStack::init(&mut store, "encoder_mu", n_layers, d, hidden, rng);
        let log_sigma_encoder = TransformerStack::init(&mut store, "encoder_logsigma", n_layers, d, hidden, rng);
        let decoder = TransformerStack::init(&mut store, "decoder", n_layers, d, hidden, rng);
        let detokenizer = Detokenizer::init(&mut store, &layout, d, rng);
        Self {
            layout,
            d,
            hidden,
            n_layers,
            store,
            tokenizer,
            mu_encoder,
            log_sigma_encoder,
            decoder,
            detokenizer,
        }
    }

    /// Rebuilds a model around loaded parameters, checking every expected
    /// tensor is present with the right shape.
    pub fn from_store(
        layout: ColumnLayout,
        d: usize,
        hidden: usize,
        n_layers: usize,
        store: ParamStore,
    ) -> Result<Self> {
        let reference = Self::new(layout.clone(), d, hidden, n_layers, &mut ChaCha8Rng::seed_from_u64(0));
        if reference.store.len() != store.len() {
            return Err(Error::Integrity(format!(
                "expected {} parameter tensors, found {}",
                reference.store.len(),
                store.len()
            )));
        }
        for (_, name, value) in reference.store.iter() {
            let id = store
                .id_of(name)
                .ok_or_else(|| Error::Integrity(format!("missing parameter {name}")))?;
            if store.get(id).shape() != value.shape() {
                return Err(Error::Integrity(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    store.get(id).shape(),
                    value.shape()
                )));
            }
        }
        Ok(Self {
            tokenizer: Tokenizer::bind(&store, &layout, d)?,
            mu_encoder: TransformerStack::bind(&store, "encoder_mu", n_layers)?,
            log_sigma_encoder: TransformerStack::bind(&store, "encoder_logsigma", n_layers)?,
            decoder: TransformerStack::bind(&store, "decoder", n_layers)?,
            detokenizer: Detokenizer::bind(&store, &layout)?,
            layout,
            d,
            hidden,
            n_layers,
            store,
        })
    }

    pub fn layout(&self) -> &ColumnLayout {
        &self.layout
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_tokens(&self) -> usize {
        self.layout.n_tokens()
    }

    /// Width `M·d` of a flattened latent row.
    pub fn latent_dim(&self) -> usize {
        self.n_tokens() * self.d
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn tokenize(&self, batch: &TokenBatch) -> Result<Tensor2D> {
        self.tokenizer.tokenize(&self.store, batch)
    }

    /// `(μ, log σ)` for a `(B·M) x d` token matrix.
    pub fn encode(&self, tokens: &Tensor2D) -> Result<(Tensor2D, Tensor2D)> {
        self.check_tokens(tokens)?;
        let m = self.n_tokens();
        let mu = self.mu_encoder.apply(&self.store, tokens, m)?;
        let ls = self.log_sigma_encoder.apply(&self.store, tokens, m)?;
        Ok((mu, ls))
    }

    /// Decoded token matrix for latents shaped `(B·M) x d`.
    pub fn decode(&self, z: &Tensor2D) -> Result<Tensor2D> {
        self.check_tokens(z)?;
        self.decoder.apply(&self.store, z, self.n_tokens())
    }

    pub fn detokenize(&self, tokens: &Tensor2D) -> Result<Detokenized> {
        self.detokenizer.detokenize(&self.store, tokens)
    }

    fn check_tokens(&self, t: &Tensor2D) -> Result<()> {
        if t.cols() != self.d || !t.rows().is_multiple_of(self.n_tokens()) {
            return Err(Error::dim(format!(
                "token matrix {:?} does not fit {} tokens of width {}",
                t.shape(),
                self.n_tokens(),
                self.d
            )));
        }
        Ok(())
    }

    /// Encoder means of every row, flattened to `n x (M·d)`.
    pub fn encode_means(&self, enc: &EncodedTable) -> Result<Tensor2D> {
        self.encode_latents(enc, None)
    }

    fn encode_latents(&self, enc: &EncodedTable, mut rng: Option<&mut ChaCha8Rng>) -> Result<Tensor2D> {
        let md = self.latent_dim();
        let mut out = Vec::with_capacity(enc.n_rows * md);
        let rows: Vec<usize> = (0..enc.n_rows).collect();
        for chunk in rows.chunks(INFERENCE_CHUNK) {
            let batch = TokenBatch::from_encoded(enc, chunk, &self.layout)?;
            let (mu, ls) = self.encode(&self.tokenize(&batch)?)?;
            match rng.as_deref_mut() {
                None => out.extend_from_slice(mu.data()),
                Some(r) => {
                    let eps = standard_normal(mu.rows(), mu.cols(), r);
                    out.extend_from_slice(reparameterize(&mu, &ls, &eps)?.data());
                }
            }
        }
        Tensor2D::new(enc.n_rows, md, out)
    }

    /// Decodes flattened latents (`n x (M·d)`) into detokenized outputs.
    pub fn decode_latents(&self, latents: &Tensor2D) -> Result<Detokenized> {
        if latents.cols() != self.latent_dim() {
            return Err(Error::dim(format!(
                "latent width {} does not match model width {}",
                latents.cols(),
                self.latent_dim()
            )));
        }
        let z = latents.clone().reshape(latents.rows() * self.n_tokens(), self.d)?;
        self.detokenize(&self.decode(&z)?)
    }

    /// Records the full loss for a batch with reparameterization noise `eps`
    /// shaped like the token matrix.
    pub fn forward_loss(&self, tape: &mut Tape, batch: &TokenBatch, eps: &Tensor2D, beta: f64) -> Result<VaeLossVars> {
        let m = self.n_tokens();
        let tokens = self.tokenizer.forward(tape, &self.store, batch)?;
        let mu = self.mu_encoder.forward(tape, &self.store, tokens, m)?;
        let ls = self.log_sigma_encoder.forward(tape, &self.store, tokens, m)?;
        let sigma = tape.exp(ls);
        let e = tape.constant(eps.clone());
        let noise = tape.mul(sigma, e)?;
        let z = tape.add(mu, noise)?;
        let dec = self.decoder.forward(tape, &self.store, z, m)?;
        let out = self.detokenizer.forward(tape, &self.store, dec)?;

        let mut terms = Vec::new();
        for (j, v) in out.numerical.iter().enumerate() {
            let target = Tensor2D::new(
                batch.len(),
                1,
                (0..batch.len()).map(|r| batch.numerical.get(r, j)).collect(),
            )?;
            terms.push(tape.mse_mean(*v, target)?);
        }
        for (j, v) in out.logits.iter().enumerate() {
            let labels: Vec<usize> = (0..batch.len()).map(|r| argmax(batch.categorical[j].row(r))).collect();
            terms.push(tape.softmax_cross_entropy(*v, &labels)?);
        }
        let mut recon = terms[0];
        for t in &terms[1..] {
            recon = tape.add(recon, *t)?;
        }
        let kl = tape.kl_mean(mu, ls)?;
        let weighted = tape.scale(kl, beta);
        let total = tape.add(recon, weighted)?;
        Ok(VaeLossVars { total, recon, kl })
    }
}

fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor2D {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor2D::new(rows, cols, data).expect("sized buffer")
}

/// `ẑ = μ + exp(log σ) ⊙ ε`.
pub fn reparameterize(mu: &Tensor2D, log_sigma: &Tensor2D, eps: &Tensor2D) -> Result<Tensor2D> {
    if !mu.same_shape(log_sigma) || !mu.same_shape(eps) {
        return Err(Error::dim(format!(
            "reparameterize shapes {:?}, {:?}, {:?}",
            mu.shape(),
            log_sigma.shape(),
            eps.shape()
        )));
    }
    let data = mu
        .data()
        .iter()
        .zip(log_sigma.data())
        .zip(eps.data())
        .map(|((m, s), e)| m + s.exp() * e)
        .collect();
    Tensor2D::new(mu.rows(), mu.cols(), data)
}

/// Loss from already-evaluated outputs.
///
/// `num_pred`/`num_target` are `B x M_num`; `cat_probs[j]` is `B x C_j` and
/// `cat_targets` is `B x M_cat` row-major class indices. The reconstruction is
/// the sum over columns of per-column batch-mean squared error and
/// cross-entropy; KL is averaged over every entry of `mu`.
pub fn vae_loss(
    num_target: &Tensor2D,
    num_pred: &Tensor2D,
    cat_targets: &[usize],
    cat_probs: &[Tensor2D],
    mu: &Tensor2D,
    log_sigma: &Tensor2D,
    beta: f64,
) -> Result<VaeLoss> {
    if !num_target.same_shape(num_pred) {
        return Err(Error::dim("numerical prediction and target differ in shape"));
    }
    if !mu.same_shape(log_sigma) || mu.data().is_empty() {
        return Err(Error::dim("mu and log sigma differ in shape"));
    }
    let b = num_target.rows().max(cat_probs.first().map_or(0, Tensor2D::rows));
    if b == 0 || cat_targets.len() != b * cat_probs.len() {
        return Err(Error::dim("categorical targets do not match the batch"));
    }
    let se: f64 = num_target
        .data()
        .iter()
        .zip(num_pred.data())
        .map(|(t, p)| (t - p) * (t - p))
        .sum();
    let mut ce = 0.0;
    for r in 0..b {
        for (j, p) in cat_probs.iter().enumerate() {
            let k = cat_targets[r * cat_probs.len() + j];
            if p.rows() != b || k >= p.cols() {
                return Err(Error::dim(format!("categorical column {j} target out of range")));
            }
            ce -= p.get(r, k).max(CE_PROB_FLOOR).ln();
        }
    }
    let recon = (se + ce) / b as f64;
    let kl = mu
        .data()
        .iter()
        .zip(log_sigma.data())
        .map(|(&m, &s)| 0.5 * (m * m + (2.0 * s).exp() - 2.0 * s - 1.0))
        .sum::<f64>()
        / mu.data().len() as f64;
    Ok(VaeLoss {
        total: recon + beta * kl,
        recon,
        kl,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub beta: f64,
}

pub fn write_epoch_log<W: Write>(log: &[EpochLog], mut w: W) -> Result<()> {
    writeln!(w, "epoch,recon,kl,beta")?;
    for e in log {
        writeln!(w, "{},{},{},{}", e.epoch, e.recon, e.kl, e.beta)?;
    }
    Ok(())
}

/// Trained model, its epoch log and the diffusion training set.
#[derive(Clone, Debug)]
pub struct VaeTraining {
    pub model: VaeModel,
    pub log: Vec<EpochLog>,
    pub latents: Tensor2D,
}

pub fn train_vae(enc: &EncodedTable, layout: &ColumnLayout, cfg: &VaeConfig, seed: u64) -> Result<VaeTraining> {
    cfg.validate()?;
    if enc.n_rows == 0 {
        return Err(Error::Input("cannot train on an empty table".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = VaeModel::new(layout.clone(), cfg.d, cfg.hidden, cfg.n_layers, &mut rng);
    let mut scheduler = BetaScheduler::new(cfg.beta_max, cfg.beta_min, cfg.lambda, cfg.patience)?;
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let batch_size = cfg.batch_size.min(enc.n_rows);
    let mut order: Vec<usize> = (0..enc.n_rows).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let beta = scheduler.beta();
        order.shuffle(&mut rng);
        let (mut recon_sum, mut kl_sum) = (0.0, 0.0);
        for chunk in order.chunks(batch_size) {
            let batch = TokenBatch::from_encoded(enc, chunk, layout)?;
            let eps = standard_normal(chunk.len() * model.n_tokens(), cfg.d, &mut rng);
            let mut tape = Tape::new();
            let loss = model.forward_loss(&mut tape, &batch, &eps, beta)?;
            let (recon, kl) = (tape.value(loss.recon).get(0, 0), tape.value(loss.kl).get(0, 0));
            if !(recon.is_finite() && kl.is_finite()) {
                return Err(Error::Numeric(format!(
                    "vae loss diverged at epoch {epoch}: recon {recon}, kl {kl}, beta {beta}"
                )));
            }
            let grads = tape.backward(loss.total)?;
            model.store.adam_step(&grads, &adam)?;
            recon_sum += recon * chunk.len() as f64;
            kl_sum += kl * chunk.len() as f64;
        }
        let entry = EpochLog {
            epoch,
            recon: recon_sum / enc.n_rows as f64,
            kl: kl_sum / enc.n_rows as f64,
            beta,
        };
        log::debug!(
            "vae epoch {epoch}: recon {:.6} kl {:.6} beta {:.3e}",
            entry.recon,
            entry.kl,
            beta
        );
        scheduler.step(entry.recon);
        log.push(entry);
    }

    let latents = match cfg.latent_source {
        LatentSource::Mean => model.encode_means(enc)?,
        LatentSource::Sample => model.encode_latents(enc, Some(&mut rng))?,
    };
    Ok(VaeTraining { model, log, latents })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reparameterize_examples() {
        let mu = Tensor2D::row_vector(vec![1.0, -2.0]);
        let ls = Tensor2D::row_vector(vec![2f64.ln(), f64::NEG_INFINITY]);
        let eps = Tensor2D::row_vector(vec![0.5, 3.0]);
        let z = reparameterize(&mu, &ls, &eps).unwrap();
        assert_eq!(z.data(), &[2.0, -2.0]);
        let z0 = reparameterize(&mu, &ls, &Tensor2D::zeros(1, 2)).unwrap();
        assert_eq!(z0, mu);
    }

    #[test]
    fn loss_examples() {
        let zero = Tensor2D::zeros(1, 2);
        let l = vae_loss(
            &Tensor2D::row_vector(vec![1.0]),
            &Tensor2D::row_vector(vec![0.0]),
            &[],
            &[],
            &zero,
            &zero,
            0.0,
        )
        .unwrap();
        assert_eq!(l.total, 1.0);
        assert_eq!(l.kl, 0.0);

        let perfect = vae_loss(
            &Tensor2D::row_vector(vec![0.3]),
            &Tensor2D::row_vector(vec![0.3]),
            &[1],
            &[Tensor2D::row_vector(vec![0.0, 1.0])],
            &zero,
            &zero,
            0.5,
        )
        .unwrap();
        assert_eq!(perfect.total, 0.0);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let zero = Tensor2D::zeros(1, 1);
        let l = vae_loss(
            &Tensor2D::zeros(1, 0),
            &Tensor2D::zeros(1, 0),
            &[0],
            &[Tensor2D::row_vector(vec![0.0, 1.0])],
            &zero,
            &zero,
            0.0,
        )
        .unwrap();
        assert!((l.recon + CE_PROB_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn tape_loss_matches_direct_evaluation() {
        let layout = ColumnLayout::new(2, vec![3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = VaeModel::new(layout.clone(), 2, 4, 2, &mut rng);
        let enc = EncodedTable {
            n_rows: 3,
            n_numerical: 2,
            n_categorical: 1,
            numerical: vec![0.1, -1.0, 0.4, 0.0, 2.0, 1.5],
            categorical: vec![2, 0, 1],
        };
        let batch = TokenBatch::from_encoded(&enc, &[0, 1, 2], &layout).unwrap();
        let eps = standard_normal(9, 2, &mut rng);
        let mut tape = Tape::new();
        let vars = model.forward_loss(&mut tape, &batch, &eps, 0.3).unwrap();

        let (mu, ls) = model.encode(&model.tokenize(&batch).unwrap()).unwrap();
        let z = reparameterize(&mu, &ls, &eps).unwrap();
        let out = model.detokenize(&model.decode(&z).unwrap()).unwrap();
        let direct = vae_loss(
            &batch.numerical,
            &out.numerical,
            &enc.categorical,
            &out.probabilities,
            &mu,
            &ls,
            0.3,
        )
        .unwrap();
        assert!((tape.value(vars.total).get(0, 0) - direct.total).abs() < 1e-12);
        assert!((tape.value(vars.kl).get(0, 0) - direct.kl).abs() < 1e-12);
    }

    #[test]
    fn encode_is_deterministic_and_finite() {
        let layout = ColumnLayout::new(1, vec![2]).unwrap();
        let model = VaeModel::new(layout, 4, 8, 2, &mut ChaCha8Rng::seed_from_u64(1));
        let e = Tensor2D::filled(2, 4, 0.25);
        let a = model.encode(&e).unwrap();
        let b = model.encode(&e).unwrap();
        assert_eq!(a, b);
        assert!(a.0.is_finite() && a.1.is_finite());
        assert!(model.encode(&Tensor2D::zeros(3, 4)).is_err());
    }

    #[test]
    fn from_store_round_trips_and_rejects_missing() {
        let layout = ColumnLayout::new(1, vec![2]).unwrap();
        let model = VaeModel::new(layout.clone(), 2, 4, 2, &mut ChaCha8Rng::seed_from_u64(1));
        let rebuilt = VaeModel::from_store(layout.clone(), 2, 4, 2, model.store().clone()).unwrap();
        let z = Tensor2D::filled(4, 2, 0.5);
        assert_eq!(model.decode(&z).unwrap(), rebuilt.decode(&z).unwrap());
        assert!(VaeModel::from_store(layout, 2, 4, 1, model.store().clone()).is_err());
    }

    #[test]
    fn epoch_log_csv() {
        let mut buf = Vec::new();
        write_epoch_log(
            &[EpochLog {
                epoch: 1,
                recon: 0.5,
                kl: 0.25,
                beta: 0.01,
            }],
            &mut buf,
        )
        .unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,recon,kl,beta\n1,0.5,0.25,0.01\n"
        );
    }
}
