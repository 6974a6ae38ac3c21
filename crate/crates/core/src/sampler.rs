//! Reverse-time solvers and the noise-to-table generation pipeline.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionModel, LinearSchedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::Tensor2D;
use crate::table::{invert_preprocess, EncodedTable, PreprocessState, Table};
use crate::tokenizer::{ColumnLayout, Detokenized};
use crate::vae::VaeModel;

/// Rows generated per independently seeded chunk.
pub const CHUNK_ROWS: usize = 512;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    /// Euler steps of the probability-flow ODE.
    #[default]
    Ode,
    /// Euler–Maruyama steps of the reverse SDE.
    Sde,
}

impl FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ode" => Ok(SamplerMode::Ode),
            "sde" => Ok(SamplerMode::Sde),
            other => Err(Error::Config(format!("unknown sampler mode {other:?}"))),
        }
    }
}

impl fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerMode::Ode => "ode",
            SamplerMode::Sde => "sde",
        })
    }
}

/// Strictly decreasing solver times, ending at exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of solver steps (one model evaluation each).
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn t_max(&self) -> f64 {
        self.times[0]
    }

    /// Consecutive `(t_hi, t_lo)` pairs.
    pub fn intervals(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.windows(2).map(|w| (w[0], w[1]))
    }
}

/// `N` times interpolated in `σ^{1/ρ}` space from `σ_max` down to `σ_min`,
/// followed by a final zero.
pub fn time_grid(n: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<TimeGrid> {
    if n == 0 {
        return Err(Error::Input("time grid needs at least one step".into()));
    }
    if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite() && rho > 0.0) {
        return Err(Error::Input(format!(
            "invalid grid bounds sigma_min {sigma_min}, sigma_max {sigma_max}, rho {rho}"
        )));
    }
    let mut times = Vec::with_capacity(n + 1);
    if n == 1 {
        times.push(sigma_max);
    } else {
        let (lo, hi) = (sigma_min.powf(1.0 / rho), sigma_max.powf(1.0 / rho));
        for i in (0..n).rev() {
            let frac = 1.0 - i as f64 / (n - 1) as f64;
            times.push((hi + frac * (lo - hi)).powf(rho));
        }
    }
    times.push(0.0);
    Ok(TimeGrid { times })
}

/// Source of noise predictions `ε̂(z, t)` for a batch of latents.
pub trait EpsPredictor: Sync {
    fn predict_eps(&self, z: &Tensor2D, t: f64) -> Result<Tensor2D>;
}

impl EpsPredictor for DiffusionModel {
    fn predict_eps(&self, z: &Tensor2D, t: f64) -> Result<Tensor2D> {
        DiffusionModel::predict_eps(self, z, t)
    }
}

/// One reverse step from `t_hi` to `t_lo` under schedule `schedule`.
///
/// With `s = −ε̂/σ(t_hi)` the ODE update is `z − (t_lo − t_hi)·σ̇σ·s` and the
/// SDE update is `z + 2σ̇σ·s·(t_hi − t_lo) + √(2σ̇σ)·√(t_hi − t_lo)·ξ`.
pub fn reverse_step_with<S, P, R>(
    schedule: &S,
    predictor: &P,
    z: &Tensor2D,
    t_hi: f64,
    t_lo: f64,
    mode: SamplerMode,
    rng: &mut R,
) -> Result<Tensor2D>
where
    S: NoiseSchedule + ?Sized,
    P: EpsPredictor + ?Sized,
    R: Rng + ?Sized,
{
    if !(t_hi > t_lo && t_lo >= 0.0) {
        return Err(Error::Input(format!(
            "reverse step needs t_hi > t_lo >= 0, got {t_hi} and {t_lo}"
        )));
    }
    let sigma = schedule.sigma(t_hi);
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("noise level {sigma} at t = {t_hi}")));
    }
    let eps = predictor.predict_eps(z, t_hi)?;
    if !eps.same_shape(z) {
        return Err(Error::dim("noise prediction shape differs from latent shape"));
    }
    let sd = schedule.sigma_dot(t_hi) * sigma;
    let dt = t_hi - t_lo;
    let mut out = z.clone();
    match mode {
        SamplerMode::Ode => {
            for (o, e) in out.data_mut().iter_mut().zip(eps.data()) {
                let score = -e / sigma;
                *o -= (t_lo - t_hi) * sd * score;
            }
        }
        SamplerMode::Sde => {
            let g = (2.0 * sd).sqrt() * dt.sqrt();
            for (o, e) in out.data_mut().iter_mut().zip(eps.data()) {
                let score = -e / sigma;
                let xi: f64 = rng.sample(StandardNormal);
                *o += 2.0 * sd * score * dt + g * xi;
            }
        }
    }
    if !out.is_finite() {
        return Err(Error::Numeric(format!("reverse step {t_hi} -> {t_lo} diverged")));
    }
    Ok(out)
}

/// [`reverse_step_with`] under the linear schedule.
pub fn reverse_step<P, R>(
    predictor: &P,
    z: &Tensor2D,
    t_hi: f64,
    t_lo: f64,
    mode: SamplerMode,
    rng: &mut R,
) -> Result<Tensor2D>
where
    P: EpsPredictor + ?Sized,
    R: Rng + ?Sized,
{
    reverse_step_with(&LinearSchedule, predictor, z, t_hi, t_lo, mode, rng)
}

/// Runs the full grid from a prior draw `z_T ~ N(0, σ(t_max)² I)`.
pub fn solve<P, R>(
    predictor: &P,
    grid: &TimeGrid,
    n: usize,
    dim: usize,
    mode: SamplerMode,
    rng: &mut R,
) -> Result<Tensor2D>
where
    P: EpsPredictor + ?Sized,
    R: Rng + ?Sized,
{
    let s = LinearSchedule.sigma(grid.t_max());
    let data = (0..n * dim).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut z = Tensor2D::new(n, dim, data)?;
    for (hi, lo) in grid.intervals() {
        z = reverse_step(predictor, &z, hi, lo, mode, rng)?;
    }
    Ok(z)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub mode: SamplerMode,
    pub rho: f64,
    /// Draw categories from the decoded probabilities instead of taking the argmax.
    pub stochastic_decode: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            mode: SamplerMode::Ode,
            rho: 7.0,
            stochastic_decode: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler steps must be at least 1".into()));
        }
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(Error::Config(format!("sampler rho must be positive, got {}", self.rho)));
        }
        Ok(())
    }
}

/// Checks that the three artifacts describe the same table layout.
pub fn check_compatible(vae: &VaeModel, diffusion: &DiffusionModel, state: &PreprocessState) -> Result<()> {
    let layout = ColumnLayout::from_state(state)?;
    if &layout != vae.layout() {
        return Err(Error::Compatibility(format!(
            "preprocessing layout {layout:?} differs from the VAE layout {:?}",
            vae.layout()
        )));
    }
    if vae.latent_dim() != diffusion.latent_dim() {
        return Err(Error::Compatibility(format!(
            "VAE latent width {} differs from diffusion width {}",
            vae.latent_dim(),
            diffusion.latent_dim()
        )));
    }
    Ok(())
}

/// Per-chunk generator: the base seed with the chunk index as stream id.
pub fn chunk_rng(seed: u64, chunk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk as u64);
    rng
}

/// Samples `n_rows` latents (de-standardized) in parallel chunks.
pub fn sample_latents(diffusion: &DiffusionModel, n_rows: usize, cfg: &SamplerConfig, seed: u64) -> Result<Tensor2D> {
    let grid = time_grid(cfg.steps, diffusion.sigma_min(), diffusion.sigma_max(), cfg.rho)?;
    let dim = diffusion.latent_dim();
    let parts = chunk_sizes(n_rows)
        .par_iter()
        .map(|&(chunk, len)| {
            let mut rng = chunk_rng(seed, chunk);
            let z = solve(diffusion, &grid, len, dim, cfg.mode, &mut rng)?;
            diffusion.normalizer().denormalize(&z)
        })
        .collect::<Result<Vec<_>>>()?;
    concat_rows(parts, dim)
}

fn chunk_sizes(n_rows: usize) -> Vec<(usize, usize)> {
    (0..n_rows.div_ceil(CHUNK_ROWS))
        .map(|c| (c, CHUNK_ROWS.min(n_rows - c * CHUNK_ROWS)))
        .collect()
}

fn concat_rows(parts: Vec<Tensor2D>, cols: usize) -> Result<Tensor2D> {
    let rows = parts.iter().map(Tensor2D::rows).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend(p.into_data());
    }
    Tensor2D::new(rows, cols, data)
}

/// Hard or sampled class indices from detokenized probabilities.
pub fn decode_categories<R: Rng + ?Sized>(out: &Detokenized, stochastic: bool, rng: &mut R) -> Vec<usize> {
    if !stochastic {
        return out.argmax();
    }
    let b = out.numerical.rows();
    let mut labels = Vec::with_capacity(b * out.probabilities.len());
    for r in 0..b {
        for p in &out.probabilities {
            let u: f64 = rng.random();
            let row = p.row(r);
            let mut acc = 0.0;
            let mut pick = row.len() - 1;
            for (k, &q) in row.iter().enumerate() {
                acc += q;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            labels.push(pick);
        }
    }
    labels
}

/// Decodes de-standardized latents into an encoded table.
pub fn decode_to_encoded<R: Rng + ?Sized>(
    vae: &VaeModel,
    latents: &Tensor2D,
    stochastic: bool,
    rng: &mut R,
) -> Result<EncodedTable> {
    let out = vae.decode_latents(latents)?;
    let categorical = decode_categories(&out, stochastic, rng);
    Ok(EncodedTable {
        n_rows: latents.rows(),
        n_numerical: out.numerical.cols(),
        n_categorical: out.probabilities.len(),
        numerical: out.numerical.into_data(),
        categorical,
    })
}

/// Generates `n_rows` synthetic rows.
pub fn generate(
    vae: &VaeModel,
    diffusion: &DiffusionModel,
    state: &PreprocessState,
    n_rows: usize,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Table> {
    cfg.validate()?;
    check_compatible(vae, diffusion, state)?;
    let grid = time_grid(cfg.steps, diffusion.sigma_min(), diffusion.sigma_max(), cfg.rho)?;
    let dim = diffusion.latent_dim();
    let tables = chunk_sizes(n_rows)
        .par_iter()
        .map(|&(chunk, len)| {
            let mut rng = chunk_rng(seed, chunk);
            let z = solve(diffusion, &grid, len, dim, cfg.mode, &mut rng)?;
            let z = diffusion.normalizer().denormalize(&z)?;
            let enc = decode_to_encoded(vae, &z, cfg.stochastic_decode, &mut rng)?;
            invert_preprocess(&enc, state)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Table::empty(state.schema.clone());
    for t in &tables {
        out.append(t)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Zero;
    impl EpsPredictor for Zero {
        fn predict_eps(&self, z: &Tensor2D, _t: f64) -> Result<Tensor2D> {
            Ok(Tensor2D::zeros(z.rows(), z.cols()))
        }
    }

    struct Dirac(Vec<f64>);
    impl EpsPredictor for Dirac {
        fn predict_eps(&self, z: &Tensor2D, t: f64) -> Result<Tensor2D> {
            let mut out = z.clone();
            for r in 0..z.rows() {
                for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                    *v = (*v - self.0[c]) / t;
                }
            }
            Ok(out)
        }
    }

    #[test]
    fn grid_examples() {
        assert_eq!(time_grid(1, 0.002, 80.0, 7.0).unwrap().times(), &[80.0, 0.0]);
        let g = time_grid(3, 0.002, 80.0, 7.0).unwrap();
        let mid = ((80f64.powf(1.0 / 7.0) + 0.002f64.powf(1.0 / 7.0)) / 2.0).powi(7);
        let expected = [80.0, mid, 0.002, 0.0];
        for (a, b) in g.times().iter().zip(expected) {
            assert!((a - b).abs() <= 1e-12 * b.max(1.0), "{a} vs {b}");
        }
        let lin = time_grid(5, 1.0, 5.0, 1.0).unwrap();
        for (a, b) in lin.times().iter().zip([5.0, 4.0, 3.0, 2.0, 1.0, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(time_grid(0, 0.002, 80.0, 7.0), Err(Error::Input(_))));
    }

    #[test]
    fn grid_is_strictly_decreasing() {
        for n in 1..50 {
            let g = time_grid(n, 0.002, 80.0, 7.0).unwrap();
            assert_eq!(g.steps(), n);
            assert!(g.times().windows(2).all(|w| w[0] > w[1]));
        }
    }

    #[test]
    fn zero_score_leaves_latent() {
        let z = Tensor2D::row_vector(vec![0.3, -2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = reverse_step(&Zero, &z, 2.0, 1.0, SamplerMode::Ode, &mut rng).unwrap();
        assert_eq!(out, z);
        assert!(matches!(
            reverse_step(&Zero, &z, 1.0, 1.0, SamplerMode::Ode, &mut rng),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn ode_over_any_grid_recovers_dirac_point() {
        let z0 = vec![1.5, -0.25, 3.0];
        for n in [1, 2, 7, 20] {
            let grid = time_grid(n, 0.002, 80.0, 7.0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
            let z = solve(&Dirac(z0.clone()), &grid, 4, 3, SamplerMode::Ode, &mut rng).unwrap();
            for r in 0..4 {
                for c in 0..3 {
                    assert!((z.get(r, c) - z0[c]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn sde_is_reproducible() {
        let z = Tensor2D::row_vector(vec![0.5, 0.1]);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            reverse_step(&Dirac(vec![0.0, 0.0]), &z, 1.0, 0.5, SamplerMode::Sde, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("ODE".parse::<SamplerMode>().unwrap(), SamplerMode::Ode);
        assert_eq!("sde".parse::<SamplerMode>().unwrap().to_string(), "sde");
        assert!("heun".parse::<SamplerMode>().is_err());
    }

    #[test]
    fn chunking_covers_rows() {
        assert!(chunk_sizes(0).is_empty());
        assert_eq!(chunk_sizes(1030), vec![(0, 512), (1, 512), (2, 6)]);
    }
}
