//! CSV ingestion, schemas and the reversible preprocessing pipeline.

mod frame;
pub mod normal;
mod preprocess;
mod schema;

pub use frame::{format_number, ColumnData, Table};
pub use preprocess::{
    apply_preprocess, fit_preprocess, invert_preprocess, CategoricalState, EncodedTable, NumericalState,
    PreprocessState, QuantileTransform, MAX_QUANTILE_KNOTS, NORMAL_CLIP,
};
pub use schema::{ColumnKind, ColumnSpec, TableSchema};
