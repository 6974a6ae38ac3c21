//! Mean filling, quantile-to-normal transform for numerical columns and
//! vocabulary indexing for categorical columns, plus the exact inverse.

use serde::{Deserialize, Serialize};

use super::frame::{ColumnData, Table};
use super::normal;
use super::schema::{ColumnKind, TableSchema};
use crate::error::{Error, Result};

/// Transformed values are clipped to `[-NORMAL_CLIP, NORMAL_CLIP]`.
pub const NORMAL_CLIP: f64 = 5.2;
/// Upper bound on quantile knots per column.
pub const MAX_QUANTILE_KNOTS: usize = 1000;

/// Piecewise-linear empirical CDF composed with the standard normal
/// quantile function. Knot values and CDF levels are both strictly increasing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileTransform {
    values: Vec<f64>,
    levels: Vec<f64>,
}

fn interpolated_quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

impl QuantileTransform {
    /// Fits on finite values; at least one is required.
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Fit("no values to fit a quantile grid".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut distinct = 1;
        for w in sorted.windows(2) {
            if w[1] != w[0] {
                distinct += 1;
            }
        }
        let k = distinct.min(MAX_QUANTILE_KNOTS);
        if k == 1 {
            return Ok(Self {
                values: vec![sorted[0]],
                levels: vec![0.5],
            });
        }
        let raw: Vec<(f64, f64)> = (0..k)
            .map(|i| {
                let p = i as f64 / (k - 1) as f64;
                (interpolated_quantile(&sorted, p), p)
            })
            .collect();
        // collapse runs of equal knot values onto their mean level
        let mut values = Vec::with_capacity(k);
        let mut levels = Vec::with_capacity(k);
        let mut i = 0;
        while i < raw.len() {
            let mut j = i;
            let mut level_sum = 0.0;
            while j < raw.len() && raw[j].0 == raw[i].0 {
                level_sum += raw[j].1;
                j += 1;
            }
            values.push(raw[i].0);
            levels.push(level_sum / (j - i) as f64);
            i = j;
        }
        Ok(Self { values, levels })
    }

    pub fn knot_values(&self) -> &[f64] {
        &self.values
    }

    pub fn knot_levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// Empirical CDF level of `x`, linear between knots and clamped outside.
    pub fn level(&self, x: f64) -> f64 {
        let n = self.values.len();
        if x <= self.values[0] {
            return self.levels[0];
        }
        if x >= self.values[n - 1] {
            return self.levels[n - 1];
        }
        let hi = self.values.partition_point(|&v| v <= x);
        let lo = hi - 1;
        let frac = (x - self.values[lo]) / (self.values[hi] - self.values[lo]);
        self.levels[lo] + frac * (self.levels[hi] - self.levels[lo])
    }

    pub fn forward(&self, x: f64) -> f64 {
        if self.values.len() == 1 {
            return 0.0;
        }
        normal::quantile(self.level(x)).clamp(-NORMAL_CLIP, NORMAL_CLIP)
    }

    pub fn inverse(&self, y: f64) -> Result<f64> {
        if !y.is_finite() {
            return Err(Error::Numeric(format!("cannot invert transformed value {y}")));
        }
        let n = self.values.len();
        if n == 1 || y <= -NORMAL_CLIP {
            return Ok(self.values[0]);
        }
        if y >= NORMAL_CLIP {
            return Ok(self.values[n - 1]);
        }
        let p = normal::cdf(y);
        if p <= self.levels[0] {
            return Ok(self.values[0]);
        }
        if p >= self.levels[n - 1] {
            return Ok(self.values[n - 1]);
        }
        let hi = self.levels.partition_point(|&l| l <= p);
        let lo = hi - 1;
        let frac = (p - self.levels[lo]) / (self.levels[hi] - self.levels[lo]);
        Ok(self.values[lo] + frac * (self.values[hi] - self.values[lo]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumericalState {
    pub name: String,
    /// Training mean over non-missing cells.
    pub fill: f64,
    pub transform: QuantileTransform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalState {
    pub name: String,
    /// Labels in order of first appearance.
    pub labels: Vec<String>,
    /// Whether an extra trailing category stands for "missing".
    pub has_missing: bool,
    /// Most frequent category index, used for unknown labels.
    pub majority: usize,
}

impl CategoricalState {
    pub fn cardinality(&self) -> usize {
        self.labels.len() + usize::from(self.has_missing)
    }

    pub fn missing_index(&self) -> Option<usize> {
        self.has_missing.then_some(self.labels.len())
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn label(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }

    /// Maps a cell to its category index, falling back to the majority class
    /// for labels never seen during fitting. The flag reports the fallback.
    pub fn encode(&self, cell: Option<&str>) -> (usize, bool) {
        match cell {
            Some(label) => match self.index_of(label) {
                Some(i) => (i, false),
                None => (self.majority, true),
            },
            None => match self.missing_index() {
                Some(i) => (i, false),
                None => (self.majority, true),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessState {
    pub schema: TableSchema,
    pub numerical: Vec<NumericalState>,
    pub categorical: Vec<CategoricalState>,
}

/// Model-space view of a table: transformed numericals (`rows x M_num`,
/// row-major) and category indices (`rows x M_cat`, row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedTable {
    pub n_rows: usize,
    pub n_numerical: usize,
    pub n_categorical: usize,
    pub numerical: Vec<f64>,
    pub categorical: Vec<usize>,
}

impl EncodedTable {
    pub fn numerical_row(&self, r: usize) -> &[f64] {
        &self.numerical[r * self.n_numerical..(r + 1) * self.n_numerical]
    }

    pub fn categorical_row(&self, r: usize) -> &[usize] {
        &self.categorical[r * self.n_categorical..(r + 1) * self.n_categorical]
    }

    pub fn select_rows(&self, rows: &[usize]) -> EncodedTable {
        let mut numerical = Vec::with_capacity(rows.len() * self.n_numerical);
        let mut categorical = Vec::with_capacity(rows.len() * self.n_categorical);
        for &r in rows {
            numerical.extend_from_slice(self.numerical_row(r));
            categorical.extend_from_slice(self.categorical_row(r));
        }
        EncodedTable {
            n_rows: rows.len(),
            n_numerical: self.n_numerical,
            n_categorical: self.n_categorical,
            numerical,
            categorical,
        }
    }
}

/// Fits fill values, quantile grids and vocabularies on `table`.
pub fn fit_preprocess(table: &Table) -> Result<PreprocessState> {
    if table.n_rows() == 0 {
        return Err(Error::Fit("cannot fit on an empty table".into()));
    }
    let schema = table.schema().clone();
    let mut numerical = Vec::new();
    let mut categorical = Vec::new();
    for (pos, spec) in schema.columns().iter().enumerate() {
        match table.column(pos) {
            ColumnData::Numerical(cells) => {
                let present: Vec<f64> = cells.iter().flatten().copied().collect();
                if present.is_empty() {
                    return Err(Error::Fit(format!("numerical column {:?} has no values", spec.name)));
                }
                let fill = present.iter().sum::<f64>() / present.len() as f64;
                numerical.push(NumericalState {
                    name: spec.name.clone(),
                    fill,
                    transform: QuantileTransform::fit(&present)?,
                });
            }
            ColumnData::Categorical(cells) => {
                let mut labels: Vec<String> = Vec::new();
                let mut counts: Vec<usize> = Vec::new();
                let mut missing = 0usize;
                for cell in cells {
                    match cell {
                        Some(l) => match labels.iter().position(|x| x == l) {
                            Some(i) => counts[i] += 1,
                            None => {
                                labels.push(l.clone());
                                counts.push(1);
                            }
                        },
                        None => missing += 1,
                    }
                }
                let has_missing = missing > 0;
                if has_missing {
                    counts.push(missing);
                }
                // first index wins ties, so the choice is stable
                let majority = counts
                    .iter()
                    .enumerate()
                    .fold((0, 0), |best, (i, &c)| if c > best.1 { (i, c) } else { best })
                    .0;
                categorical.push(CategoricalState {
                    name: spec.name.clone(),
                    labels,
                    has_missing,
                    majority,
                });
            }
        }
    }
    Ok(PreprocessState {
        schema,
        numerical,
        categorical,
    })
}

impl PreprocessState {
    pub fn cardinalities(&self) -> Vec<usize> {
        self.categorical.iter().map(CategoricalState::cardinality).collect()
    }

    fn check_schema(&self, schema: &TableSchema) -> Result<()> {
        if schema != &self.schema {
            return Err(Error::Schema(
                "table schema differs from the fitted preprocessing schema".into(),
            ));
        }
        Ok(())
    }

    /// Fills (if missing) and transforms one numerical cell of block column `j`.
    pub fn transform_numerical(&self, j: usize, cell: Option<f64>) -> f64 {
        let s = &self.numerical[j];
        s.transform.forward(cell.unwrap_or(s.fill))
    }

    pub fn apply(&self, table: &Table) -> Result<EncodedTable> {
        apply_preprocess(table, self)
    }

    pub fn invert(&self, encoded: &EncodedTable) -> Result<Table> {
        invert_preprocess(encoded, self)
    }
}

pub fn apply_preprocess(table: &Table, state: &PreprocessState) -> Result<EncodedTable> {
    state.check_schema(table.schema())?;
    let schema = table.schema();
    let (n, n_num, n_cat) = (table.n_rows(), schema.n_numerical(), schema.n_categorical());
    let mut numerical = vec![0.0; n * n_num];
    let mut categorical = vec![0usize; n * n_cat];
    for (j, pos) in schema.numerical_positions().into_iter().enumerate() {
        for (r, cell) in table.numerical(pos).iter().enumerate() {
            numerical[r * n_num + j] = state.transform_numerical(j, *cell);
        }
    }
    for (j, pos) in schema.categorical_positions().into_iter().enumerate() {
        let s = &state.categorical[j];
        let mut fallbacks = 0;
        for (r, cell) in table.categorical(pos).iter().enumerate() {
            let (idx, fallback) = s.encode(cell.as_deref());
            fallbacks += usize::from(fallback);
            categorical[r * n_cat + j] = idx;
        }
        if fallbacks > 0 {
            log::warn!(
                "column {:?}: {fallbacks} unseen or missing value(s) mapped to majority category {:?}",
                s.name,
                s.label(s.majority).unwrap_or("<missing>")
            );
        }
    }
    Ok(EncodedTable {
        n_rows: n,
        n_numerical: n_num,
        n_categorical: n_cat,
        numerical,
        categorical,
    })
}

pub fn invert_preprocess(encoded: &EncodedTable, state: &PreprocessState) -> Result<Table> {
    let schema = &state.schema;
    if encoded.n_numerical != schema.n_numerical() || encoded.n_categorical != schema.n_categorical() {
        return Err(Error::dim(format!(
            "encoded table has {}+{} columns, schema expects {}+{}",
            encoded.n_numerical,
            encoded.n_categorical,
            schema.n_numerical(),
            schema.n_categorical()
        )));
    }
    let n = encoded.n_rows;
    let mut columns = Vec::with_capacity(schema.len());
    for (pos, spec) in schema.columns().iter().enumerate() {
        let j = schema.block_index(pos);
        match spec.kind {
            ColumnKind::Numerical => {
                let t = &state.numerical[j].transform;
                let cells = (0..n)
                    .map(|r| t.inverse(encoded.numerical[r * encoded.n_numerical + j]).map(Some))
                    .collect::<Result<Vec<_>>>()?;
                columns.push(ColumnData::Numerical(cells));
            }
            ColumnKind::Categorical => {
                let s = &state.categorical[j];
                let cells = (0..n)
                    .map(|r| {
                        let idx = encoded.categorical[r * encoded.n_categorical + j];
                        if idx >= s.cardinality() {
                            return Err(Error::Input(format!(
                                "category index {idx} out of range for column {:?}",
                                s.name
                            )));
                        }
                        Ok(s.label(idx).map(str::to_string))
                    })
                    .collect::<Result<Vec<_>>>()?;
                columns.push(ColumnData::Categorical(cells));
            }
        }
    }
    Table::new(schema.clone(), columns)
}
