//! Writes the mixture toy table as `schema.json`, `train.csv` and `test.csv`.
//!
//! ```text
//! cargo run -p tabforge --example toy_data -- data/toy 500
//! ```

use std::path::PathBuf;

use tabforge::toy::{mixture_schema, mixture_table};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "data/toy".into()));
    let rows: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(500);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("schema.json"), mixture_schema().to_json() + "\n")?;
    mixture_table(rows, 1).save_csv(dir.join("train.csv"))?;
    mixture_table(rows, 2).save_csv(dir.join("test.csv"))?;
    Ok(())
}
