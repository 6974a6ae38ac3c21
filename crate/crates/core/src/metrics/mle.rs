use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::{ColumnData, ColumnKind, QuantileTransform, Table};

/// L2 penalty (on weights, not the intercept) for both built-in models.
const RIDGE: f64 = 1.0;
const NEWTON_ITERS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MleTask {
    Classification,
    Regression,
}

/// Real-trained versus synthetic-trained scores on a held-out real table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MleReport {
    pub task: MleTask,
    pub target: String,
    /// `auc` (higher is better) or `rmse` on the standardized target.
    pub metric: String,
    pub real_score: f64,
    pub synth_score: f64,
    pub gap: f64,
}

enum FeatureColumn {
    Numerical {
        pos: usize,
        fill: f64,
        transform: QuantileTransform,
    },
    Categorical {
        pos: usize,
        labels: Vec<Option<String>>,
    },
}

/// Quantile-normal numericals and one-hot categoricals, fitted on one table
/// and applied unchanged to others. The target column is excluded.
pub struct Featurizer {
    columns: Vec<FeatureColumn>,
    width: usize,
}

impl Featurizer {
    pub fn fit(table: &Table, target: usize) -> Result<Self> {
        let mut columns = Vec::new();
        let mut width = 0;
        for (pos, col) in table.columns().iter().enumerate() {
            if pos == target {
                continue;
            }
            match col {
                ColumnData::Numerical(v) => {
                    let present: Vec<f64> = v.iter().flatten().copied().collect();
                    if present.is_empty() {
                        return Err(Error::Fit(format!("feature column {pos} is entirely missing")));
                    }
                    let fill = present.iter().sum::<f64>() / present.len() as f64;
                    columns.push(FeatureColumn::Numerical {
                        pos,
                        fill,
                        transform: QuantileTransform::fit(&present)?,
                    });
                    width += 1;
                }
                ColumnData::Categorical(v) => {
                    let mut labels: Vec<Option<String>> = Vec::new();
                    for x in v {
                        if !labels.contains(x) {
                            labels.push(x.clone());
                        }
                    }
                    width += labels.len();
                    columns.push(FeatureColumn::Categorical { pos, labels });
                }
            }
        }
        Ok(Self { columns, width })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Row-major design matrix `rows x width`.
    pub fn transform(&self, table: &Table) -> Vec<f64> {
        let n = table.n_rows();
        let mut x = vec![0.0; n * self.width];
        let mut offset = 0;
        for c in &self.columns {
            match c {
                FeatureColumn::Numerical { pos, fill, transform } => {
                    for (r, v) in table.numerical(*pos).iter().enumerate() {
                        x[r * self.width + offset] = transform.forward(v.unwrap_or(*fill));
                    }
                    offset += 1;
                }
                FeatureColumn::Categorical { pos, labels } => {
                    for (r, v) in table.categorical(*pos).iter().enumerate() {
                        if let Some(k) = labels.iter().position(|l| l == v) {
                            x[r * self.width + offset + k] = 1.0;
                        }
                    }
                    offset += labels.len();
                }
            }
        }
        x
    }
}

/// Solves `a x = b` for symmetric positive definite `a` (`p x p`, row-major).
fn solve_spd(mut a: Vec<f64>, p: usize, b: &[f64]) -> Result<Vec<f64>> {
    for j in 0..p {
        let mut d = a[j * p + j];
        for k in 0..j {
            d -= a[j * p + k] * a[j * p + k];
        }
        if !(d > 0.0) {
            return Err(Error::Numeric("normal equations are not positive definite".into()));
        }
        let d = d.sqrt();
        a[j * p + j] = d;
        for i in j + 1..p {
            let mut s = a[i * p + j];
            for k in 0..j {
                s -= a[i * p + k] * a[j * p + k];
            }
            a[i * p + j] = s / d;
        }
    }
    let mut y = b.to_vec();
    for i in 0..p {
        for k in 0..i {
            y[i] -= a[i * p + k] * y[k];
        }
        y[i] /= a[i * p + i];
    }
    for i in (0..p).rev() {
        for k in i + 1..p {
            y[i] -= a[k * p + i] * y[k];
        }
        y[i] /= a[i * p + i];
    }
    Ok(y)
}

fn with_intercept(x: &[f64], n: usize, width: usize) -> Vec<f64> {
    let p = width + 1;
    let mut out = vec![1.0; n * p];
    for r in 0..n {
        out[r * p + 1..(r + 1) * p].copy_from_slice(&x[r * width..(r + 1) * width]);
    }
    out
}

/// Weighted normal matrix `Xᵀ diag(w) X` plus the ridge term.
fn normal_matrix(x: &[f64], n: usize, p: usize, w: Option<&[f64]>) -> Vec<f64> {
    let mut a = vec![0.0; p * p];
    for r in 0..n {
        let row = &x[r * p..(r + 1) * p];
        let wr = w.map_or(1.0, |w| w[r]);
        for i in 0..p {
            let xi = wr * row[i];
            for j in 0..=i {
                a[i * p + j] += xi * row[j];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            a[j * p + i] = a[i * p + j];
        }
        if i > 0 {
            a[i * p + i] += RIDGE;
        }
    }
    a
}

/// L2-penalized logistic regression fitted by Newton's method.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticModel {
    /// Intercept first.
    pub weights: Vec<f64>,
}

impl LogisticModel {
    pub fn fit(x: &[f64], y: &[bool], width: usize) -> Result<Self> {
        let n = y.len();
        let p = width + 1;
        let xi = with_intercept(x, n, width);
        let mut beta = vec![0.0; p];
        let positives = y.iter().filter(|&&v| v).count();
        if positives == 0 || positives == n {
            // one class only: a constant scorer
            return Ok(Self { weights: vec![0.0; p] });
        }
        for _ in 0..NEWTON_ITERS {
            let mut w = vec![0.0; n];
            let mut grad = vec![0.0; p];
            for r in 0..n {
                let row = &xi[r * p..(r + 1) * p];
                let z: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum();
                let prob = crate::nn::ops::sigmoid(z);
                w[r] = (prob * (1.0 - prob)).max(1e-12);
                let resid = prob - f64::from(u8::from(y[r]));
                for (g, v) in grad.iter_mut().zip(row) {
                    *g += resid * v;
                }
            }
            for i in 1..p {
                grad[i] += RIDGE * beta[i];
            }
            let step = solve_spd(normal_matrix(&xi, n, p, Some(&w)), p, &grad)?;
            let mut size = 0.0f64;
            for (b, s) in beta.iter_mut().zip(&step) {
                *b -= s;
                size = size.max(s.abs());
            }
            if size < 1e-10 {
                break;
            }
        }
        Ok(Self { weights: beta })
    }

    /// Linear scores (log-odds) for a design matrix without intercept column.
    pub fn decision(&self, x: &[f64], width: usize) -> Vec<f64> {
        x.chunks(width.max(1))
            .take(x.len().checked_div(width).unwrap_or(0))
            .map(|row| self.weights[0] + row.iter().zip(&self.weights[1..]).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }
}

/// Ridge regression solved in closed form.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeModel {
    pub weights: Vec<f64>,
}

impl RidgeModel {
    pub fn fit(x: &[f64], y: &[f64], width: usize) -> Result<Self> {
        let n = y.len();
        let p = width + 1;
        let xi = with_intercept(x, n, width);
        let mut rhs = vec![0.0; p];
        for r in 0..n {
            for (j, v) in xi[r * p..(r + 1) * p].iter().enumerate() {
                rhs[j] += v * y[r];
            }
        }
        let weights = solve_spd(normal_matrix(&xi, n, p, None), p, &rhs)?;
        Ok(Self { weights })
    }

    pub fn predict(&self, x: &[f64], n: usize, width: usize) -> Vec<f64> {
        (0..n)
            .map(|r| {
                self.weights[0]
                    + x[r * width..(r + 1) * width]
                        .iter()
                        .zip(&self.weights[1..])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect()
    }
}

/// Area under the ROC curve via the rank-sum statistic; tied scores share
/// their average rank.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("scores and labels differ in length"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Input("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let (p, q) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::dim("rmse over mismatched or empty vectors"));
    }
    let se: f64 = pred.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((se / pred.len() as f64).sqrt())
}

/// Rows whose target cell is present.
fn labelled(t: &Table, target: usize) -> Table {
    let rows: Vec<usize> = (0..t.n_rows()).filter(|&r| !t.column(target).is_missing(r)).collect();
    t.select_rows(&rows)
}

/// Trains the same built-in model on `real_train` and on `synth_train` and
/// scores both on `real_test`. Classification (categorical target) reports
/// one-vs-rest macro AUC; regression reports RMSE of the target standardized
/// with `real_train` statistics.
pub fn mle_lite(real_train: &Table, synth_train: &Table, real_test: &Table) -> Result<MleReport> {
    let schema = real_train.schema();
    if synth_train.schema() != schema || real_test.schema() != schema {
        return Err(Error::Input("MLE tables have different schemas".into()));
    }
    let (target, spec) = schema
        .target()
        .ok_or_else(|| Error::Input("schema declares no target column".into()))?;
    let real_train = labelled(real_train, target);
    let synth_train = labelled(synth_train, target);
    let real_test = labelled(real_test, target);
    if real_train.n_rows() == 0 || synth_train.n_rows() == 0 || real_test.n_rows() == 0 {
        return Err(Error::Input("MLE needs labelled rows in every table".into()));
    }
    let feats = Featurizer::fit(&real_train, target)?;
    let w = feats.width();
    let x_real = feats.transform(&real_train);
    let x_synth = feats.transform(&synth_train);
    let x_test = feats.transform(&real_test);

    let (task, metric, real_score, synth_score) = match spec.kind {
        ColumnKind::Categorical => {
            let labels_of = |t: &Table| -> Vec<String> {
                t.categorical(target)
                    .iter()
                    .map(|v| v.clone().unwrap_or_default())
                    .collect()
            };
            let (yr, ys, yt) = (labels_of(&real_train), labels_of(&synth_train), labels_of(&real_test));
            let mut classes = yr.clone();
            classes.sort();
            classes.dedup();
            if classes.len() < 2 {
                return Err(Error::Input(format!(
                    "target {:?} has a single class in the real training data",
                    spec.name
                )));
            }
            let positives: Vec<&String> = if classes.len() == 2 {
                vec![&classes[1]]
            } else {
                classes.iter().collect()
            };
            let score = |x: &[f64], y: &[String]| -> Result<f64> {
                let mut total = 0.0;
                let mut counted = 0;
                for c in &positives {
                    let truth: Vec<bool> = yt.iter().map(|v| v == *c).collect();
                    if truth.iter().all(|&b| b) || truth.iter().all(|&b| !b) {
                        continue;
                    }
                    let yb: Vec<bool> = y.iter().map(|v| v == *c).collect();
                    let model = LogisticModel::fit(x, &yb, w)?;
                    total += auc(&model.decision(&x_test, w), &truth)?;
                    counted += 1;
                }
                if counted == 0 {
                    return Err(Error::Input("test target has a single class".into()));
                }
                Ok(total / counted as f64)
            };
            (
                MleTask::Classification,
                "auc",
                score(&x_real, &yr)?,
                score(&x_synth, &ys)?,
            )
        }
        ColumnKind::Numerical => {
            let values = |t: &Table| -> Vec<f64> { t.numerical(target).iter().flatten().copied().collect() };
            let (yr, ys, yt) = (values(&real_train), values(&synth_train), values(&real_test));
            let n = yr.len() as f64;
            let mean = yr.iter().sum::<f64>() / n;
            let std = (yr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
                .sqrt()
                .max(1e-12);
            let z = |v: &[f64]| v.iter().map(|x| (x - mean) / std).collect::<Vec<_>>();
            let zt = z(&yt);
            let fit_score = |x: &[f64], y: &[f64]| -> Result<f64> {
                let m = RidgeModel::fit(x, &z(y), w)?;
                rmse(&m.predict(&x_test, zt.len(), w), &zt)
            };
            (
                MleTask::Regression,
                "rmse",
                fit_score(&x_real, &yr)?,
                fit_score(&x_synth, &ys)?,
            )
        }
    };
    Ok(MleReport {
        task,
        target: spec.name.clone(),
        metric: metric.into(),
        real_score,
        synth_score,
        gap: (real_score - synth_score).abs(),
    })
}
