//! Fidelity metrics for synthetic tables: per-column distribution distances,
//! pairwise correlation distances and a small train-on-synthetic harness.

mod mle;

pub use mle::{auc, mle_lite, rmse, Featurizer, LogisticModel, MleReport, MleTask, RidgeModel};

use std::collections::HashMap;
use std::hash::Hash;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::{ColumnData, ColumnKind, Table};

/// Default bucket count for numerical columns in mixed pairs.
pub const DEFAULT_BUCKETS: usize = 20;

/// Kolmogorov–Smirnov statistic `sup_x |F_r(x) − F_s(x)|`, evaluated exactly
/// at every jump of either empirical CDF.
pub fn kst(real: &[f64], synth: &[f64]) -> Result<f64> {
    if real.is_empty() || synth.is_empty() {
        return Err(Error::Input("KS statistic needs two non-empty samples".into()));
    }
    if real.iter().chain(synth).any(|v| v.is_nan()) {
        return Err(Error::Numeric("KS statistic over NaN values".into()));
    }
    let mut a = real.to_vec();
    let mut b = synth.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut best = 0.0f64;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&p), Some(&q)) => p.min(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => unreachable!(),
        };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        best = best.max((i as f64 / n - j as f64 / m).abs());
    }
    Ok(best)
}

fn frequencies<T: Hash + Eq + Clone>(xs: &[T]) -> HashMap<T, f64> {
    let mut counts: HashMap<T, f64> = HashMap::new();
    for x in xs {
        *counts.entry(x.clone()).or_default() += 1.0;
    }
    let n = xs.len() as f64;
    counts.values_mut().for_each(|c| *c /= n);
    counts
}

fn half_l1<T: Hash + Eq + Clone>(r: &HashMap<T, f64>, s: &HashMap<T, f64>) -> f64 {
    let mut total = 0.0;
    for (k, p) in r {
        total += (p - s.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, q) in s {
        if !r.contains_key(k) {
            total += q;
        }
    }
    (0.5 * total).min(1.0)
}

/// Total variation distance `½ Σ_ω |R(ω) − S(ω)|` over the union of categories.
pub fn tvd<T: Hash + Eq + Clone>(real: &[T], synth: &[T]) -> Result<f64> {
    if real.is_empty() || synth.is_empty() {
        return Err(Error::Input("TVD needs two non-empty samples".into()));
    }
    Ok(half_l1(&frequencies(real), &frequencies(synth)))
}

/// Half the L1 distance between the joint frequency tables of two column pairs.
pub fn contingency_error<A, B>(real_a: &[A], real_b: &[B], synth_a: &[A], synth_b: &[B]) -> Result<f64>
where
    A: Hash + Eq + Clone,
    B: Hash + Eq + Clone,
{
    if real_a.len() != real_b.len() || synth_a.len() != synth_b.len() {
        return Err(Error::dim("paired columns differ in length"));
    }
    let r: Vec<(A, B)> = real_a.iter().cloned().zip(real_b.iter().cloned()).collect();
    let s: Vec<(A, B)> = synth_a.iter().cloned().zip(synth_b.iter().cloned()).collect();
    tvd(&r, &s)
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim("correlated columns differ in length"));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two paired values".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::UndefinedCorrelation("a column has zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// `|ρ_R − ρ_S| / 2`.
pub fn pearson_error(real_a: &[f64], real_b: &[f64], synth_a: &[f64], synth_b: &[f64]) -> Result<f64> {
    Ok((pearson(real_a, real_b)? - pearson(synth_a, synth_b)?).abs() / 2.0)
}

/// Bucket boundaries fitted on a reference column.
#[derive(Clone, Debug, PartialEq)]
pub struct Buckets {
    edges: Vec<f64>,
}

impl Buckets {
    /// Edges at the `k/n` quantiles (`k = 1..n`, linear interpolation between
    /// order statistics), with duplicates removed.
    pub fn fit(values: &[f64], n_buckets: usize) -> Result<Self> {
        if n_buckets < 2 {
            return Err(Error::Input(format!("need at least 2 buckets, got {n_buckets}")));
        }
        if values.is_empty() {
            return Err(Error::Input("cannot bucket an empty column".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut distinct = sorted.clone();
        distinct.dedup();
        if distinct.len() < n_buckets {
            log::warn!(
                "only {} distinct values for {n_buckets} buckets; using fewer buckets",
                distinct.len()
            );
        }
        let last = (sorted.len() - 1) as f64;
        let mut edges: Vec<f64> = (1..n_buckets)
            .map(|k| {
                let pos = k as f64 / n_buckets as f64 * last;
                let lo = pos.floor() as usize;
                let hi = pos.ceil() as usize;
                sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
            })
            .collect();
        edges.dedup();
        Ok(Self { edges })
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn n_buckets(&self) -> usize {
        self.edges.len() + 1
    }

    /// Number of edges strictly below `x`; a value equal to an edge lands in
    /// the lower-indexed of the two adjacent buckets.
    pub fn index(&self, x: f64) -> usize {
        self.edges.partition_point(|&e| e < x)
    }
}

/// Buckets `values` with edges fitted on `reference`.
pub fn bucketize(reference: &[f64], values: &[f64], n_buckets: usize) -> Result<Vec<usize>> {
    let b = Buckets::fit(reference, n_buckets)?;
    Ok(values.iter().map(|&v| b.index(v)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Numerical,
    Categorical,
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnScore {
    pub column: String,
    pub kind: ColumnKind,
    pub metric: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnDensityError {
    pub columns: Vec<ColumnScore>,
    /// Mean score ×100.
    pub error_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub a: String,
    pub b: String,
    pub kind: PairKind,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCorrelationError {
    pub pairs: Vec<PairScore>,
    /// Mean score ×100.
    pub error_pct: f64,
}

fn check_schemas(real: &Table, synth: &Table) -> Result<()> {
    if real.schema() != synth.schema() {
        return Err(Error::Input("real and synthetic tables have different schemas".into()));
    }
    if real.n_rows() == 0 || synth.n_rows() == 0 {
        return Err(Error::Input("metrics need non-empty tables".into()));
    }
    Ok(())
}

fn present(col: &[Option<f64>]) -> Vec<f64> {
    col.iter().flatten().copied().collect()
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// KS distance per numerical column and TVD per categorical column.
pub fn column_density_report(real: &Table, synth: &Table) -> Result<ColumnDensityError> {
    check_schemas(real, synth)?;
    let mut columns = Vec::with_capacity(real.schema().len());
    for (pos, spec) in real.schema().columns().iter().enumerate() {
        let (metric, score) = match spec.kind {
            ColumnKind::Numerical => (
                "ks",
                kst(&present(real.numerical(pos)), &present(synth.numerical(pos)))?,
            ),
            ColumnKind::Categorical => ("tvd", tvd(real.categorical(pos), synth.categorical(pos))?),
        };
        columns.push(ColumnScore {
            column: spec.name.clone(),
            kind: spec.kind,
            metric: metric.into(),
            score,
        });
    }
    let error_pct = 100.0 * mean(&columns.iter().map(|c| c.score).collect::<Vec<_>>());
    Ok(ColumnDensityError { columns, error_pct })
}

/// Pearson error of two numerical columns over rows where both are present.
pub fn pearson_pair_error(real: &Table, synth: &Table, a: usize, b: usize) -> Result<f64> {
    let pairs = |t: &Table| -> (Vec<f64>, Vec<f64>) {
        t.numerical(a)
            .iter()
            .zip(t.numerical(b))
            .filter_map(|(x, y)| Some((((*x)?), (*y)?)))
            .unzip()
    };
    let (ra, rb) = pairs(real);
    let (sa, sb) = pairs(synth);
    pearson_error(&ra, &rb, &sa, &sb)
}

/// Column as categorical keys: labels for categorical columns, buckets fitted
/// on the real column for numerical ones (missing cells get their own key).
fn as_keys(real: &Table, t: &Table, pos: usize, n_buckets: usize) -> Result<Vec<Option<String>>> {
    match t.column(pos) {
        ColumnData::Categorical(v) => Ok(v.clone()),
        ColumnData::Numerical(v) => {
            let b = Buckets::fit(&present(real.numerical(pos)), n_buckets)?;
            Ok(v.iter().map(|x| x.map(|x| format!("b{}", b.index(x)))).collect())
        }
    }
}

/// Contingency error of any two columns, bucketing numerical ones.
pub fn contingency_pair_error(real: &Table, synth: &Table, a: usize, b: usize, n_buckets: usize) -> Result<f64> {
    contingency_error(
        &as_keys(real, real, a, n_buckets)?,
        &as_keys(real, real, b, n_buckets)?,
        &as_keys(real, synth, a, n_buckets)?,
        &as_keys(real, synth, b, n_buckets)?,
    )
}

/// Pearson error for numerical pairs, contingency error otherwise.
pub fn pair_correlation_report(real: &Table, synth: &Table, n_buckets: usize) -> Result<PairCorrelationError> {
    check_schemas(real, synth)?;
    let cols = real.schema().columns();
    if cols.len() < 2 {
        return Err(Error::Input("pair correlation needs at least two columns".into()));
    }
    let mut pairs = Vec::new();
    for a in 0..cols.len() {
        for b in a + 1..cols.len() {
            let (kind, score) = match (cols[a].kind, cols[b].kind) {
                (ColumnKind::Numerical, ColumnKind::Numerical) => {
                    (PairKind::Numerical, pearson_pair_error(real, synth, a, b)?)
                }
                (ColumnKind::Categorical, ColumnKind::Categorical) => (
                    PairKind::Categorical,
                    contingency_pair_error(real, synth, a, b, n_buckets)?,
                ),
                _ => (PairKind::Mixed, contingency_pair_error(real, synth, a, b, n_buckets)?),
            };
            pairs.push(PairScore {
                a: cols[a].name.clone(),
                b: cols[b].name.clone(),
                kind,
                score,
            });
        }
    }
    let error_pct = 100.0 * mean(&pairs.iter().map(|p| p.score).collect::<Vec<_>>());
    Ok(PairCorrelationError { pairs, error_pct })
}

/// Everything `eval` reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub density: ColumnDensityError,
    pub pairs: PairCorrelationError,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mle: Option<MleReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Flat `metric,target,score` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["metric", "target", "score"]).map_err(io)?;
        for c in &self.density.columns {
            w.write_record([c.metric.as_str(), &c.column, &c.score.to_string()])
                .map_err(io)?;
        }
        w.write_record(["density_error_pct", "all", &self.density.error_pct.to_string()])
            .map_err(io)?;
        for p in &self.pairs.pairs {
            let metric = match p.kind {
                PairKind::Numerical => "pearson",
                PairKind::Categorical => "contingency",
                PairKind::Mixed => "contingency_bucketed",
            };
            w.write_record([metric, &format!("{}|{}", p.a, p.b), &p.score.to_string()])
                .map_err(io)?;
        }
        w.write_record(["pair_error_pct", "all", &self.pairs.error_pct.to_string()])
            .map_err(io)?;
        if let Some(m) = &self.mle {
            let target = m.target.as_str();
            w.write_record([&format!("{}_real", m.metric), target, &m.real_score.to_string()])
                .map_err(io)?;
            w.write_record([&format!("{}_synth", m.metric), target, &m.synth_score.to_string()])
                .map_err(io)?;
            w.write_record(["mle_gap", target, &m.gap.to_string()]).map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Density and pair reports, plus the MLE harness when a test table is given.
pub fn evaluate(real: &Table, synth: &Table, test: Option<&Table>, n_buckets: usize) -> Result<EvalReport> {
    let density = column_density_report(real, synth)?;
    let pairs = pair_correlation_report(real, synth, n_buckets)?;
    let mle = test.map(|t| mle_lite(real, synth, t)).transpose()?;
    Ok(EvalReport { density, pairs, mle })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::{ColumnSpec, TableSchema};

    #[test]
    fn kst_examples() {
        assert_eq!(kst(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(kst(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0]).unwrap(), 1.0);
        assert_eq!(kst(&[1.0, 2.0], &[1.0, 3.0]).unwrap(), 0.5);
        assert!(matches!(kst(&[], &[1.0]), Err(Error::Input(_))));
    }

    #[test]
    fn tvd_examples() {
        assert_eq!(tvd(&["A", "B"], &["B", "A"]).unwrap(), 0.0);
        assert_eq!(tvd(&["A", "B"], &["A", "A", "A", "B"]).unwrap(), 0.25);
        assert_eq!(tvd(&["A"], &["B"]).unwrap(), 1.0);
        assert!(tvd::<&str>(&[], &["B"]).is_err());
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(pearson_error(&x, &x, &x, &x).unwrap(), 0.0);
        let neg = [4.0, 3.0, 2.0, 1.0];
        assert!((pearson_error(&x, &x, &x, &neg).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            pearson_error(&x, &[1.0; 4], &x, &x),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn contingency_examples() {
        let a = ["x", "x", "y", "y"];
        let b = ["p", "q", "p", "q"];
        assert_eq!(contingency_error(&a, &b, &a, &b).unwrap(), 0.0);
        // synth joint: (x,p) ½, (y,q) ½ versus uniform real joint
        let sa = ["x", "y"];
        let sb = ["p", "q"];
        let expected = 0.5 * (0.25 + 0.25 + 0.25 + 0.25);
        assert!((contingency_error(&a, &b, &sa, &sb).unwrap() - expected).abs() < 1e-15);
        assert_eq!(contingency_error(&["x"], &["p"], &["y"], &["q"]).unwrap(), 1.0);
    }

    #[test]
    fn bucket_examples() {
        let v: Vec<f64> = (0..100).map(f64::from).collect();
        let idx = bucketize(&v, &v, 10).unwrap();
        for k in 0..10 {
            assert_eq!(idx.iter().filter(|&&i| i == k).count(), 10);
        }
        let c = Buckets::fit(&[3.0; 10], 5).unwrap();
        assert_eq!(c.n_buckets(), 2);
        assert!([3.0; 10].iter().all(|&x| c.index(x) == 0));
        let b = Buckets::fit(&[0.0, 1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(b.edges(), &[2.0]);
        assert_eq!(b.index(2.0), 0);
        assert_eq!(b.index(2.0 + 1e-12), 1);
        assert!(Buckets::fit(&[1.0], 1).is_err());
    }

    fn two_col(rows: &[(f64, &str)]) -> Table {
        let schema = TableSchema::new(vec![ColumnSpec::numerical("x"), ColumnSpec::categorical("c")]).unwrap();
        Table::new(
            schema,
            vec![
                ColumnData::Numerical(rows.iter().map(|r| Some(r.0)).collect()),
                ColumnData::Categorical(rows.iter().map(|r| Some(r.1.to_string())).collect()),
            ],
        )
        .unwrap()
    }

    #[test]
    fn reports_on_identical_tables_are_zero() {
        let t = two_col(&[(1.0, "a"), (2.0, "b"), (3.0, "a"), (0.5, "b")]);
        let r = evaluate(&t, &t, None, DEFAULT_BUCKETS).unwrap();
        assert_eq!(r.density.error_pct, 0.0);
        assert_eq!(r.pairs.error_pct, 0.0);
        assert_eq!(r.pairs.pairs[0].kind, PairKind::Mixed);
    }

    #[test]
    fn density_mean_arithmetic() {
        let schema = TableSchema::new((0..4).map(|i| ColumnSpec::categorical(format!("c{i}"))).collect()).unwrap();
        let col = |v: &[&str]| ColumnData::Categorical(v.iter().map(|s| Some(s.to_string())).collect());
        let real = Table::new(schema.clone(), vec![col(&["A", "B", "A", "B"]); 4]).unwrap();
        let mut cols = vec![col(&["A", "B", "A", "B"]); 4];
        cols[2] = col(&["A", "A", "A", "B"]);
        let synth = Table::new(schema, cols).unwrap();
        let r = column_density_report(&real, &synth).unwrap();
        assert!((r.error_pct - 6.25).abs() < 1e-12);
    }

    #[test]
    fn csv_output_has_all_rows() {
        let t = two_col(&[(1.0, "a"), (2.0, "b"), (3.0, "a")]);
        let r = evaluate(&t, &t, None, 4).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 + 1 + 1 + 1);
        assert!(text.contains("contingency_bucketed,x|c,0"));
    }
}
