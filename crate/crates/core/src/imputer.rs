//! Missing-value imputation by masked reverse diffusion.
//!
//! Rows are encoded with placeholders in the missing cells. At every reverse
//! step the known latent dimensions are re-noised from the clean encoding,
//! the unknown ones are denoised by the solver, and the two are blended
//! through a block mask. Each step can be repeated with re-noising to
//! harmonize the two parts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionModel;
use crate::error::{Error, Result};
use crate::nn::Tensor2D;
use crate::sampler::{check_compatible, reverse_step, time_grid, EpsPredictor, SamplerMode, TimeGrid, CHUNK_ROWS};
use crate::table::{ColumnData, ColumnKind, PreprocessState, Table};
use crate::tokenizer::{ColumnLayout, TokenBatch};
use crate::vae::VaeModel;

/// Known/unknown flags over the flattened latent; `true` marks a known dimension.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentMask {
    known: Vec<bool>,
}

impl LatentMask {
    pub fn known(&self) -> &[bool] {
        &self.known
    }

    pub fn len(&self) -> usize {
        self.known.len()
    }

    pub fn is_empty(&self) -> bool {
        self.known.is_empty()
    }

    /// The mask as 0/1 values.
    pub fn to_f64(&self) -> Vec<f64> {
        self.known.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()
    }
}

/// Mask for missing numerical columns `missing_num` and categorical columns
/// `missing_cat` (indices within each block). Latent entry `j` belongs to
/// token `⌊j/d⌋`; categorical tokens follow the numerical block.
pub fn build_mask(layout: &ColumnLayout, missing_num: &[usize], missing_cat: &[usize], d: usize) -> Result<LatentMask> {
    if let Some(&bad) = missing_num.iter().find(|&&j| j >= layout.n_numerical) {
        return Err(Error::Input(format!("numerical column index {bad} out of range")));
    }
    if let Some(&bad) = missing_cat.iter().find(|&&j| j >= layout.n_categorical()) {
        return Err(Error::Input(format!("categorical column index {bad} out of range")));
    }
    let m_num = layout.n_numerical;
    let known = (0..layout.n_tokens() * d)
        .map(|j| {
            let token = j / d;
            let missing = if token < m_num {
                missing_num.contains(&token)
            } else {
                missing_cat.contains(&(token - m_num))
            };
            !missing
        })
        .collect();
    Ok(LatentMask { known })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImputeConfig {
    /// Repeats `U` of every reverse step.
    pub resample: usize,
    pub steps: usize,
    pub rho: f64,
    pub mode: SamplerMode,
    /// Independent imputations averaged into the output.
    pub draws: usize,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        Self {
            resample: 5,
            steps: 20,
            rho: 7.0,
            mode: SamplerMode::Sde,
            draws: 5,
        }
    }
}

impl ImputeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resample == 0 {
            return Err(Error::Config("resample count U must be at least 1".into()));
        }
        if self.steps == 0 || self.draws == 0 {
            return Err(Error::Config("imputation steps and draws must be positive".into()));
        }
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(Error::Config(format!(
                "imputation rho must be positive, got {}",
                self.rho
            )));
        }
        Ok(())
    }
}

/// Model-space row with placeholders: processed numericals (missing ones at
/// the transformed training mean) and one-hot categoricals (missing ones
/// uniform over all categories).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedRow {
    pub numerical: Vec<f64>,
    pub categorical: Vec<Vec<f64>>,
}

/// Placeholder-filled model input for `row`; `missing[p]` flags schema position `p`.
pub fn prepare_masked_row(table: &Table, row: usize, missing: &[bool], state: &PreprocessState) -> MaskedRow {
    let schema = table.schema();
    let mut numerical = Vec::with_capacity(state.numerical.len());
    let mut categorical = Vec::with_capacity(state.categorical.len());
    for (pos, spec) in schema.columns().iter().enumerate() {
        let j = schema.block_index(pos);
        match spec.kind {
            ColumnKind::Numerical => {
                let cell = if missing[pos] { None } else { table.numerical(pos)[row] };
                numerical.push(state.transform_numerical(j, cell));
            }
            ColumnKind::Categorical => {
                let s = &state.categorical[j];
                let c = s.cardinality();
                if missing[pos] {
                    categorical.push(vec![1.0 / c as f64; c]);
                } else {
                    let (k, _) = s.encode(table.categorical(pos)[row].as_deref());
                    let mut oh = vec![0.0; c];
                    oh[k] = 1.0;
                    categorical.push(oh);
                }
            }
        }
    }
    MaskedRow { numerical, categorical }
}

fn batch_of(rows: &[MaskedRow], layout: &ColumnLayout) -> Result<TokenBatch> {
    let b = rows.len();
    let mut numerical = Tensor2D::zeros(b, layout.n_numerical);
    let mut categorical: Vec<Tensor2D> = layout.cardinalities.iter().map(|&c| Tensor2D::zeros(b, c)).collect();
    for (i, r) in rows.iter().enumerate() {
        numerical.row_mut(i).copy_from_slice(&r.numerical);
        for (j, oh) in r.categorical.iter().enumerate() {
            categorical[j].row_mut(i).copy_from_slice(oh);
        }
    }
    Ok(TokenBatch { numerical, categorical })
}

/// `z + √(σ²(t_hi) − σ²(t_lo))·ξ`: moves a sample at `t_lo` back up to `t_hi`.
pub fn renoise<R: Rng + ?Sized>(z: &Tensor2D, t_hi: f64, t_lo: f64, rng: &mut R) -> Tensor2D {
    add_noise(z, (t_hi * t_hi - t_lo * t_lo).sqrt(), rng)
}

fn add_noise<R: Rng + ?Sized>(z: &Tensor2D, scale: f64, rng: &mut R) -> Tensor2D {
    let mut out = z.clone();
    for v in out.data_mut() {
        *v += scale * rng.sample::<f64, _>(StandardNormal);
    }
    out
}

/// Masked reverse pass in normalized latent space.
///
/// `z` holds the clean encodings and `known` the per-row 0/1 masks (both
/// `B x Md`). Returns the blended sample at `t = 0`.
pub fn impute_latents<P, R>(
    predictor: &P,
    z: &Tensor2D,
    known: &Tensor2D,
    grid: &TimeGrid,
    resample: usize,
    mode: SamplerMode,
    rng: &mut R,
) -> Result<Tensor2D>
where
    P: EpsPredictor + ?Sized,
    R: Rng + ?Sized,
{
    if !z.same_shape(known) {
        return Err(Error::dim("latents and mask differ in shape"));
    }
    if resample == 0 {
        return Err(Error::Config("resample count U must be at least 1".into()));
    }
    let mut cur = add_noise(z, grid.t_max(), rng);
    for (hi, lo) in grid.intervals() {
        for u in 1..=resample {
            let known_part = add_noise(z, lo, rng);
            let unknown_part = reverse_step(predictor, &cur, hi, lo, mode, rng)?;
            let mut blended = unknown_part;
            for ((b, k), m) in blended.data_mut().iter_mut().zip(known_part.data()).zip(known.data()) {
                *b = m * k + (1.0 - m) * *b;
            }
            if u < resample && lo > 0.0 {
                cur = renoise(&blended, hi, lo, rng);
            } else {
                cur = blended;
                break;
            }
        }
    }
    Ok(cur)
}

/// Fills missing cells of `table`. Cells that are empty, or that sit in one
/// of the schema positions `mask_cols`, are imputed; every other cell is
/// copied verbatim.
pub fn impute(
    vae: &VaeModel,
    diffusion: &DiffusionModel,
    state: &PreprocessState,
    table: &Table,
    mask_cols: &[usize],
    cfg: &ImputeConfig,
    seed: u64,
) -> Result<Table> {
    cfg.validate()?;
    check_compatible(vae, diffusion, state)?;
    if table.schema() != &state.schema {
        return Err(Error::Schema("table schema differs from the model schema".into()));
    }
    let schema = table.schema();
    if let Some(&bad) = mask_cols.iter().find(|&&p| p >= schema.len()) {
        return Err(Error::Input(format!("mask column {bad} out of range")));
    }
    let n = table.n_rows();
    let missing: Vec<Vec<bool>> = (0..n)
        .map(|r| {
            (0..schema.len())
                .map(|p| mask_cols.contains(&p) || table.column(p).is_missing(r))
                .collect()
        })
        .collect();
    let grid = time_grid(cfg.steps, diffusion.sigma_min(), diffusion.sigma_max(), cfg.rho)?;
    let layout = vae.layout().clone();
    let d = vae.d();

    let chunks: Vec<(usize, Vec<usize>)> = (0..n)
        .collect::<Vec<_>>()
        .chunks(CHUNK_ROWS)
        .enumerate()
        .map(|(c, rows)| (c, rows.to_vec()))
        .collect();
    let decoded = chunks
        .par_iter()
        .map(|(chunk, rows)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(*chunk as u64);
            impute_chunk(
                vae, diffusion, state, table, rows, &missing, &layout, d, &grid, cfg, &mut rng,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut columns: Vec<ColumnData> = table.columns().to_vec();
    for ((_, rows), out) in chunks.iter().zip(decoded) {
        for (i, &r) in rows.iter().enumerate() {
            for (pos, col) in columns.iter_mut().enumerate() {
                if !missing[r][pos] {
                    continue;
                }
                let j = schema.block_index(pos);
                match col {
                    ColumnData::Numerical(v) => {
                        let y = out.numerical.get(i, j);
                        v[r] = Some(state.numerical[j].transform.inverse(y)?);
                    }
                    ColumnData::Categorical(v) => {
                        let s = &state.categorical[j];
                        let probs = out.probabilities[j].row(i);
                        let k = (0..s.labels.len())
                            .max_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(b.cmp(&a)))
                            .ok_or_else(|| Error::Input(format!("column {:?} has no labels", s.name)))?;
                        v[r] = Some(s.labels[k].clone());
                    }
                }
            }
        }
    }
    Table::new(schema.clone(), columns)
}

struct ChunkOutput {
    /// Averaged model-space numericals, `rows x M_num`.
    numerical: Tensor2D,
    /// Averaged probabilities per categorical column.
    probabilities: Vec<Tensor2D>,
}

#[allow(clippy::too_many_arguments)]
fn impute_chunk(
    vae: &VaeModel,
    diffusion: &DiffusionModel,
    state: &PreprocessState,
    table: &Table,
    rows: &[usize],
    missing: &[Vec<bool>],
    layout: &ColumnLayout,
    d: usize,
    grid: &TimeGrid,
    cfg: &ImputeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ChunkOutput> {
    let schema = table.schema();
    let prepared: Vec<MaskedRow> = rows
        .iter()
        .map(|&r| prepare_masked_row(table, r, &missing[r], state))
        .collect();
    let batch = batch_of(&prepared, layout)?;
    let (mu, _) = vae.encode(&vae.tokenize(&batch)?)?;
    let md = vae.latent_dim();
    let z = diffusion.normalizer().normalize(&mu.reshape(rows.len(), md)?)?;

    let mut known = Tensor2D::zeros(rows.len(), md);
    for (i, &r) in rows.iter().enumerate() {
        let (mut miss_num, mut miss_cat) = (Vec::new(), Vec::new());
        for (pos, spec) in schema.columns().iter().enumerate() {
            if missing[r][pos] {
                match spec.kind {
                    ColumnKind::Numerical => miss_num.push(schema.block_index(pos)),
                    ColumnKind::Categorical => miss_cat.push(schema.block_index(pos)),
                }
            }
        }
        let mask = build_mask(layout, &miss_num, &miss_cat, d)?;
        known.row_mut(i).copy_from_slice(&mask.to_f64());
    }

    let mut acc: Option<ChunkOutput> = None;
    for _ in 0..cfg.draws {
        let z0 = impute_latents(diffusion, &z, &known, grid, cfg.resample, cfg.mode, rng)?;
        let out = vae.decode_latents(&diffusion.normalizer().denormalize(&z0)?)?;
        match &mut acc {
            None => {
                acc = Some(ChunkOutput {
                    numerical: out.numerical,
                    probabilities: out.probabilities,
                })
            }
            Some(a) => {
                a.numerical.add_assign(&out.numerical)?;
                for (p, q) in a.probabilities.iter_mut().zip(&out.probabilities) {
                    p.add_assign(q)?;
                }
            }
        }
    }
    let mut out = acc.expect("at least one draw");
    let scale = 1.0 / cfg.draws as f64;
    out.numerical = out.numerical.map(|v| v * scale);
    for p in &mut out.probabilities {
        *p = p.map(|v| v * scale);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::{fit_preprocess, ColumnSpec, TableSchema};
    use crate::tokenizer::{flatten_latent, unflatten_latent};

    #[test]
    fn mask_examples() {
        let layout = ColumnLayout::new(1, vec![3]).unwrap();
        assert!(build_mask(&layout, &[], &[], 2).unwrap().known().iter().all(|&k| k));
        assert_eq!(
            build_mask(&layout, &[0], &[], 2).unwrap().known(),
            &[false, false, true, true]
        );
        assert!(build_mask(&layout, &[0], &[0], 2).unwrap().known().iter().all(|&k| !k));
        assert!(matches!(build_mask(&layout, &[1], &[], 2), Err(Error::Input(_))));
        assert!(matches!(build_mask(&layout, &[], &[1], 2), Err(Error::Input(_))));
    }

    #[test]
    fn mask_blocks_follow_flatten_order() {
        // mark each token's entries with its index, flatten, and compare
        for m_num in 0..3 {
            for m_cat in 0..3 {
                if m_num + m_cat == 0 {
                    continue;
                }
                let layout = ColumnLayout::new(m_num, vec![2; m_cat]).unwrap();
                for d in 1..4 {
                    let m = layout.n_tokens();
                    let tokens = Tensor2D::new(m, d, (0..m * d).map(|i| (i / d) as f64).collect()).unwrap();
                    let flat = flatten_latent(&tokens);
                    assert_eq!(unflatten_latent(flat.data(), d).unwrap(), tokens);
                    for subset in 0..(1u32 << m) {
                        let miss: Vec<usize> = (0..m).filter(|t| subset >> t & 1 == 1).collect();
                        let mn: Vec<usize> = miss.iter().copied().filter(|&t| t < m_num).collect();
                        let mc: Vec<usize> = miss.iter().filter(|&&t| t >= m_num).map(|t| t - m_num).collect();
                        let mask = build_mask(&layout, &mn, &mc, d).unwrap();
                        for (j, &k) in mask.known().iter().enumerate() {
                            let token = flat.data()[j] as usize;
                            assert_eq!(k, !miss.contains(&token));
                        }
                    }
                }
            }
        }
    }

    fn table() -> Table {
        let schema = TableSchema::new(vec![ColumnSpec::numerical("x"), ColumnSpec::categorical("c")]).unwrap();
        Table::read_csv("x,c\n1,A\n3,B\n2,C\n,D\n".as_bytes(), &schema).unwrap()
    }

    #[test]
    fn placeholders() {
        let t = table();
        let state = fit_preprocess(&t).unwrap();
        let row = prepare_masked_row(&t, 0, &[true, true], &state);
        assert_eq!(state.numerical[0].fill, 2.0);
        assert_eq!(row.numerical[0], state.numerical[0].transform.forward(2.0));
        assert_eq!(row.categorical[0], vec![0.25; 4]);

        let plain = prepare_masked_row(&t, 1, &[false, false], &state);
        assert_eq!(plain.numerical[0], state.transform_numerical(0, Some(3.0)));
        assert_eq!(plain.categorical[0], vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn renoise_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (hi, lo) = (1.3, 0.7);
        let z = Tensor2D::zeros(1, 100_000);
        let out = renoise(&z, hi, lo, &mut rng);
        let var = out.data().iter().map(|v| v * v).sum::<f64>() / 100_000.0;
        let expected = hi * hi - lo * lo;
        assert!((var / expected - 1.0).abs() < 0.02, "{var} vs {expected}");
    }

    struct Zero;
    impl EpsPredictor for Zero {
        fn predict_eps(&self, z: &Tensor2D, _t: f64) -> Result<Tensor2D> {
            Ok(Tensor2D::zeros(z.rows(), z.cols()))
        }
    }

    #[test]
    fn fully_known_mask_returns_encoding() {
        let z = Tensor2D::from_rows(&[[0.5, -1.0, 2.0], [0.0, 0.1, 0.2]]).unwrap();
        let known = Tensor2D::filled(2, 3, 1.0);
        let grid = time_grid(6, 0.002, 80.0, 7.0).unwrap();
        for u in [1, 3] {
            let mut rng = ChaCha8Rng::seed_from_u64(u as u64);
            let out = impute_latents(&Zero, &z, &known, &grid, u, SamplerMode::Sde, &mut rng).unwrap();
            assert_eq!(out, z);
        }
    }
}
