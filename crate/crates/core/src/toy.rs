//! Small synthetic tables with known structure, used by examples, the CLI's
//! bundled data and end-to-end tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::table::{ColumnData, ColumnSpec, Table, TableSchema};

/// Two correlated numerical columns from a 2-component Gaussian mixture and
/// a categorical target that follows the sign of the first column.
pub fn mixture_schema() -> TableSchema {
    TableSchema::new(vec![
        ColumnSpec::numerical("x1"),
        ColumnSpec::numerical("x2"),
        ColumnSpec::categorical("label").as_target(),
    ])
    .expect("static schema")
}

pub const MIXTURE_MEANS: [[f64; 2]; 2] = [[-2.0, -1.0], [2.0, 1.5]];
pub const MIXTURE_RHO: f64 = 0.6;
/// Probability that the label agrees with the sign of `x1`.
pub const LABEL_AGREEMENT: f64 = 0.9;

pub fn mixture_table(n: usize, seed: u64) -> Table {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x1 = Vec::with_capacity(n);
    let mut x2 = Vec::with_capacity(n);
    let mut label = Vec::with_capacity(n);
    let c = (1.0 - MIXTURE_RHO * MIXTURE_RHO).sqrt();
    for _ in 0..n {
        let m = MIXTURE_MEANS[usize::from(rng.random::<bool>())];
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        let (u, v) = (m[0] + a, m[1] + MIXTURE_RHO * a + c * b);
        let agree = rng.random::<f64>() < LABEL_AGREEMENT;
        let positive = (u > 0.0) == agree;
        x1.push(Some(u));
        x2.push(Some(v));
        label.push(Some(if positive { "pos" } else { "neg" }.to_string()));
    }
    Table::new(
        mixture_schema(),
        vec![
            ColumnData::Numerical(x1),
            ColumnData::Numerical(x2),
            ColumnData::Categorical(label),
        ],
    )
    .expect("consistent columns")
}

/// Standard bivariate normal `(x, y)` with correlation `rho`.
pub fn bivariate_gaussian(n: usize, rho: f64, seed: u64) -> Table {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = (1.0 - rho * rho).sqrt();
    let (mut x, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        x.push(Some(a));
        y.push(Some(rho * a + c * b));
    }
    let schema = TableSchema::new(vec![ColumnSpec::numerical("x"), ColumnSpec::numerical("y")]).expect("static schema");
    Table::new(schema, vec![ColumnData::Numerical(x), ColumnData::Numerical(y)]).expect("consistent columns")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_shape_and_label_link() {
        let t = mixture_table(4000, 1);
        assert_eq!(t.n_rows(), 4000);
        let agree = t
            .numerical(0)
            .iter()
            .zip(t.categorical(2))
            .filter(|(x, l)| (x.unwrap() > 0.0) == (l.as_deref() == Some("pos")))
            .count() as f64
            / 4000.0;
        assert!((agree - LABEL_AGREEMENT).abs() < 0.02, "{agree}");
        assert_eq!(
            mixture_table(10, 5).to_csv_string(),
            mixture_table(10, 5).to_csv_string()
        );
    }

    #[test]
    fn bivariate_correlation() {
        let t = bivariate_gaussian(20000, 0.9, 2);
        let x: Vec<f64> = t.numerical(0).iter().flatten().copied().collect();
        let y: Vec<f64> = t.numerical(1).iter().flatten().copied().collect();
        let r = crate::metrics::pearson(&x, &y).unwrap();
        assert!((r - 0.9).abs() < 0.01, "{r}");
    }
}
