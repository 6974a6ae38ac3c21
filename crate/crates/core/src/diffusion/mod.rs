//! Score-based diffusion over flattened VAE latents.
//!
//! Forward process `z_t = z_0 + σ(t)·ε` with the linear schedule `σ(t) = t`;
//! a noise-prediction MLP trained by denoising score matching supplies the
//! score `−ε̂/σ(t)` for the reverse-time solvers.

mod denoiser;

pub use denoiser::{input_scale, output_mix, time_embedding, DenoiserMlp};

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamConfig, ParamStore, Tape, Tensor2D};

/// Time-dependent noise level of a variance-exploding forward process.
pub trait NoiseSchedule: Sync {
    fn sigma(&self, t: f64) -> f64;
    fn sigma_dot(&self, t: f64) -> f64;

    /// Diffusion coefficient `g(t) = √(2 σ̇ σ)`.
    fn diffusion(&self, t: f64) -> f64 {
        (2.0 * self.sigma_dot(t) * self.sigma(t)).sqrt()
    }

    /// Coefficient of the score in the reverse-time SDE drift, `−2 σ̇ σ`.
    fn reverse_drift(&self, t: f64) -> f64 {
        -2.0 * self.sigma_dot(t) * self.sigma(t)
    }
}

/// `σ(t) = t`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LinearSchedule;

impl NoiseSchedule for LinearSchedule {
    fn sigma(&self, t: f64) -> f64 {
        t
    }

    fn sigma_dot(&self, _t: f64) -> f64 {
        1.0
    }
}

/// Noise level of the linear schedule; negative times are rejected.
pub fn sigma(t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("time must be non-negative, got {t}")));
    }
    Ok(LinearSchedule.sigma(t))
}

pub fn sigma_dot(_t: f64) -> f64 {
    1.0
}

/// `z_t = z_0 + σ(t)·ε`.
pub fn perturb(z0: &[f64], t: f64, eps: &[f64]) -> Result<Vec<f64>> {
    if z0.len() != eps.len() {
        return Err(Error::dim(format!(
            "latent of length {} with noise of length {}",
            z0.len(),
            eps.len()
        )));
    }
    let s = sigma(t)?;
    Ok(z0.iter().zip(eps).map(|(z, e)| z + s * e).collect())
}

/// `−ε̂ / σ(t)`.
pub fn score_from_eps(eps_hat: &[f64], t: f64) -> Result<Vec<f64>> {
    let s = sigma(t)?;
    if s == 0.0 {
        return Err(Error::Domain("score is undefined at zero noise".into()));
    }
    Ok(eps_hat.iter().map(|e| -e / s).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            hidden: 1024,
            steps: 4000,
            batch_size: 256,
            lr: 1e-3,
            sigma_min: 0.002,
            sigma_max: 80.0,
            p_mean: -1.2,
            p_std: 1.2,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::Config("diffusion hidden and batch_size must be positive".into()));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("diffusion lr must be positive, got {}", self.lr)));
        }
        if !(self.p_std > 0.0 && self.p_mean.is_finite() && self.p_std.is_finite()) {
            return Err(Error::Config("p_std must be positive and p_mean finite".into()));
        }
        Ok(())
    }
}

/// Training-time draw `t = exp(N(p_mean, p_std²))` clipped to `[σ_min, σ_max]`.
pub fn sample_time<R: Rng + ?Sized>(rng: &mut R, cfg: &DiffusionConfig) -> f64 {
    let dist = LogNormal::new(cfg.p_mean, cfg.p_std).expect("validated log-normal parameters");
    dist.sample(rng).clamp(cfg.sigma_min, cfg.sigma_max)
}

/// Per-dimension standardization of latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Lower bound on the stored per-dimension standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

impl LatentNormalizer {
    /// Mean and population standard deviation of each column.
    pub fn fit(latents: &Tensor2D) -> Result<Self> {
        let n = latents.rows();
        if n == 0 {
            return Err(Error::Input("cannot normalize zero latents".into()));
        }
        let mean: Vec<f64> = latents.col_sums().data().iter().map(|s| s / n as f64).collect();
        let mut var = vec![0.0; latents.cols()];
        for r in 0..n {
            for (c, v) in latents.row(r).iter().enumerate() {
                var[c] += (v - mean[c]).powi(2);
            }
        }
        let std = var.iter().map(|v| (v / n as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, latents: &Tensor2D) -> Result<Tensor2D> {
        self.check(latents)?;
        let mut out = latents.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        Ok(out)
    }

    pub fn denormalize(&self, latents: &Tensor2D) -> Result<Tensor2D> {
        self.check(latents)?;
        let mut out = latents.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = *v * self.std[c] + self.mean[c];
            }
        }
        Ok(out)
    }

    fn check(&self, latents: &Tensor2D) -> Result<()> {
        if latents.cols() != self.dim() {
            return Err(Error::dim(format!(
                "latent width {} vs normalizer width {}",
                latents.cols(),
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Trained noise predictor together with its latent statistics. Inputs and
/// outputs of [`DiffusionModel::predict_eps`] live in normalized space.
#[derive(Clone, Debug)]
pub struct DiffusionModel {
    store: ParamStore,
    denoiser: DenoiserMlp,
    normalizer: LatentNormalizer,
    sigma_min: f64,
    sigma_max: f64,
}

impl DiffusionModel {
    pub fn new<R: Rng + ?Sized>(
        normalizer: LatentNormalizer,
        hidden: usize,
        sigma_min: f64,
        sigma_max: f64,
        rng: &mut R,
    ) -> Self {
        let mut store = ParamStore::new();
        let denoiser = DenoiserMlp::init(&mut store, normalizer.dim(), hidden, rng);
        Self {
            store,
            denoiser,
            normalizer,
            sigma_min,
            sigma_max,
        }
    }

    pub fn from_store(
        store: ParamStore,
        normalizer: LatentNormalizer,
        hidden: usize,
        sigma_min: f64,
        sigma_max: f64,
    ) -> Result<Self> {
        if store.len() != 10 {
            return Err(Error::Integrity(format!(
                "denoiser expects 10 parameter tensors, found {}",
                store.len()
            )));
        }
        let denoiser = DenoiserMlp::bind(&store, normalizer.dim(), hidden)?;
        Ok(Self {
            store,
            denoiser,
            normalizer,
            sigma_min,
            sigma_max,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.denoiser.latent_dim()
    }

    pub fn hidden(&self) -> usize {
        self.denoiser.hidden()
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn normalizer(&self) -> &LatentNormalizer {
        &self.normalizer
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn denoiser(&self) -> &DenoiserMlp {
        &self.denoiser
    }

    /// `ε̂` for normalized noisy latents with per-row times: the MLP output
    /// blended with the input through [`output_mix`].
    pub fn predict_eps_at(&self, z: &Tensor2D, t: &[f64]) -> Result<Tensor2D> {
        let mut f = self.denoiser.predict(&self.store, z, t)?;
        for (r, &tr) in t.iter().enumerate() {
            let (skip, out) = output_mix(tr);
            for (o, zv) in f.row_mut(r).iter_mut().zip(z.row(r)) {
                *o = skip * zv + out * *o;
            }
        }
        Ok(f)
    }

    /// `ε̂` for normalized noisy latents all at time `t`.
    pub fn predict_eps(&self, z: &Tensor2D, t: f64) -> Result<Tensor2D> {
        self.predict_eps_at(z, &vec![t; z.rows()])
    }

    /// Score estimate `−ε̂/σ(t)` in normalized space.
    pub fn score(&self, z: &Tensor2D, t: f64) -> Result<Tensor2D> {
        let eps = self.predict_eps(z, t)?;
        let data = score_from_eps(eps.data(), t)?;
        Tensor2D::new(eps.rows(), eps.cols(), data)
    }
}

/// Denoising score-matching loss for given clean latents, times and noise:
/// the batch mean of `‖ε̂(z_0 + σ(t)ε, t) − ε‖²`.
pub fn diffusion_loss_with(model: &DiffusionModel, z0: &Tensor2D, t: &[f64], eps: &Tensor2D) -> Result<f64> {
    let zt = noisy_batch(z0, t, eps)?;
    let pred = model.predict_eps_at(&zt, t)?;
    let se: f64 = pred.data().iter().zip(eps.data()).map(|(p, e)| (p - e) * (p - e)).sum();
    Ok(se / z0.rows() as f64)
}

/// [`diffusion_loss_with`] with times and noise drawn from `rng`.
pub fn diffusion_loss<R: Rng + ?Sized>(
    model: &DiffusionModel,
    z0: &Tensor2D,
    cfg: &DiffusionConfig,
    rng: &mut R,
) -> Result<f64> {
    if z0.rows() == 0 {
        return Err(Error::Input("loss over an empty batch".into()));
    }
    let (t, eps) = draw_noise(z0.rows(), z0.cols(), cfg, rng);
    diffusion_loss_with(model, z0, &t, &eps)
}

fn draw_noise<R: Rng + ?Sized>(rows: usize, cols: usize, cfg: &DiffusionConfig, rng: &mut R) -> (Vec<f64>, Tensor2D) {
    let t: Vec<f64> = (0..rows).map(|_| sample_time(rng, cfg)).collect();
    let eps = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    (t, Tensor2D::new(rows, cols, eps).expect("sized buffer"))
}

fn noisy_batch(z0: &Tensor2D, t: &[f64], eps: &Tensor2D) -> Result<Tensor2D> {
    if !z0.same_shape(eps) || t.len() != z0.rows() || z0.rows() == 0 {
        return Err(Error::dim(format!(
            "latents {:?}, noise {:?}, {} times",
            z0.shape(),
            eps.shape(),
            t.len()
        )));
    }
    let mut zt = z0.clone();
    for (r, &tr) in t.iter().enumerate() {
        let s = sigma(tr)?;
        for (z, e) in zt.row_mut(r).iter_mut().zip(eps.row(r)) {
            *z += s * e;
        }
    }
    Ok(zt)
}

/// Records the loss on a tape for gradient computation.
pub fn diffusion_loss_tape(
    tape: &mut Tape,
    model: &DiffusionModel,
    z0: &Tensor2D,
    t: &[f64],
    eps: &Tensor2D,
) -> Result<crate::nn::Var> {
    let zt = noisy_batch(z0, t, eps)?;
    let f = model.denoiser.forward(tape, &model.store, &zt, t)?;
    let (rows, cols) = zt.shape();
    let mut skip = Vec::with_capacity(rows * cols);
    let mut out = Vec::with_capacity(rows * cols);
    for (r, &tr) in t.iter().enumerate() {
        let (a, b) = output_mix(tr);
        skip.extend(zt.row(r).iter().map(|z| a * z));
        out.extend(std::iter::repeat_n(b, cols));
    }
    let out = tape.constant(Tensor2D::new(rows, cols, out)?);
    let scaled = tape.mul(f, out)?;
    let skip = tape.constant(Tensor2D::new(rows, cols, skip)?);
    let pred = tape.add(scaled, skip)?;
    tape.mse_mean(pred, eps.clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
}

pub fn write_step_log<W: Write>(log: &[StepLog], mut w: W) -> Result<()> {
    writeln!(w, "step,loss")?;
    for s in log {
        writeln!(w, "{},{}", s.step, s.loss)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct DiffusionTraining {
    pub model: DiffusionModel,
    pub log: Vec<StepLog>,
}

/// Fits latent statistics, then trains the noise predictor with Adam on
/// shuffled mini-batches of the normalized latents.
pub fn train_diffusion(latents: &Tensor2D, cfg: &DiffusionConfig, seed: u64) -> Result<DiffusionTraining> {
    cfg.validate()?;
    if latents.rows() == 0 || latents.cols() == 0 {
        return Err(Error::Input("cannot train diffusion on zero latents".into()));
    }
    if !latents.is_finite() {
        return Err(Error::Numeric("training latents contain non-finite values".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normalizer = LatentNormalizer::fit(latents)?;
    let data = normalizer.normalize(latents)?;
    let mut model = DiffusionModel::new(normalizer, cfg.hidden, cfg.sigma_min, cfg.sigma_max, &mut rng);
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let batch = cfg.batch_size.min(data.rows());
    let mut order: Vec<usize> = (0..data.rows()).collect();
    let mut cursor = order.len();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        if cursor + batch > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let rows = &order[cursor..cursor + batch];
        cursor += batch;
        let mut z0 = Tensor2D::zeros(batch, data.cols());
        for (i, &r) in rows.iter().enumerate() {
            z0.row_mut(i).copy_from_slice(data.row(r));
        }
        let (t, eps) = draw_noise(batch, data.cols(), cfg, &mut rng);
        let mut tape = Tape::new();
        let loss = diffusion_loss_tape(&mut tape, &model, &z0, &t, &eps)?;
        let value = tape.value(loss).get(0, 0);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("diffusion loss diverged at step {step}")));
        }
        let grads = tape.backward(loss)?;
        model.store.adam_step(&grads, &adam)?;
        if step % 500 == 0 {
            log::debug!("diffusion step {step}: loss {value:.6}");
        }
        log.push(StepLog { step, loss: value });
    }
    Ok(DiffusionTraining { model, log })
}
