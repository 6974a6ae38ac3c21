use std::io::{Read, Write};
use std::path::Path;

use super::schema::{ColumnKind, TableSchema};
use crate::error::{Error, Result};

/// Cell storage for one column; `None` marks a missing cell.
#[derive(Clone, Debug, PartialEq)]
pub enum ColumnData {
    Numerical(Vec<Option<f64>>),
    Categorical(Vec<Option<String>>),
}

impl ColumnData {
    pub fn len(&self) -> usize {
        match self {
            ColumnData::Numerical(v) => v.len(),
            ColumnData::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> ColumnKind {
        match self {
            ColumnData::Numerical(_) => ColumnKind::Numerical,
            ColumnData::Categorical(_) => ColumnKind::Categorical,
        }
    }

    pub fn is_missing(&self, row: usize) -> bool {
        match self {
            ColumnData::Numerical(v) => v[row].is_none(),
            ColumnData::Categorical(v) => v[row].is_none(),
        }
    }

    fn select(&self, rows: &[usize]) -> ColumnData {
        match self {
            ColumnData::Numerical(v) => ColumnData::Numerical(rows.iter().map(|&r| v[r]).collect()),
            ColumnData::Categorical(v) => ColumnData::Categorical(rows.iter().map(|&r| v[r].clone()).collect()),
        }
    }
}

/// Mixed-type table in schema column order.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    schema: TableSchema,
    columns: Vec<ColumnData>,
    n_rows: usize,
}

impl Table {
    pub fn new(schema: TableSchema, columns: Vec<ColumnData>) -> Result<Self> {
        if columns.len() != schema.len() {
            return Err(Error::Schema(format!(
                "{} columns supplied for a schema of {}",
                columns.len(),
                schema.len()
            )));
        }
        let n_rows = columns.first().map_or(0, ColumnData::len);
        for (spec, col) in schema.columns().iter().zip(&columns) {
            if col.kind() != spec.kind {
                return Err(Error::Schema(format!(
                    "column {:?} declared {:?} but holds {:?} data",
                    spec.name,
                    spec.kind,
                    col.kind()
                )));
            }
            if col.len() != n_rows {
                return Err(Error::dim(format!(
                    "column {:?} has {} rows, expected {n_rows}",
                    spec.name,
                    col.len()
                )));
            }
        }
        Ok(Self {
            schema,
            columns,
            n_rows,
        })
    }

    /// A zero-row table with the given schema.
    pub fn empty(schema: TableSchema) -> Self {
        let columns = schema
            .columns()
            .iter()
            .map(|c| match c.kind {
                ColumnKind::Numerical => ColumnData::Numerical(Vec::new()),
                ColumnKind::Categorical => ColumnData::Categorical(Vec::new()),
            })
            .collect();
        Self {
            schema,
            columns,
            n_rows: 0,
        }
    }

    pub fn schema(&self) -> &TableSchema {
        &self.schema
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn columns(&self) -> &[ColumnData] {
        &self.columns
    }

    pub fn column(&self, position: usize) -> &ColumnData {
        &self.columns[position]
    }

    pub fn column_mut(&mut self, position: usize) -> &mut ColumnData {
        &mut self.columns[position]
    }

    pub fn column_by_name(&self, name: &str) -> Option<&ColumnData> {
        self.schema.column(name).map(|(i, _)| &self.columns[i])
    }

    /// Numerical cells of the column at `position`; panics on a categorical column.
    pub fn numerical(&self, position: usize) -> &[Option<f64>] {
        match &self.columns[position] {
            ColumnData::Numerical(v) => v,
            ColumnData::Categorical(_) => panic!("column {position} is categorical"),
        }
    }

    /// Categorical cells of the column at `position`; panics on a numerical column.
    pub fn categorical(&self, position: usize) -> &[Option<String>] {
        match &self.columns[position] {
            ColumnData::Categorical(v) => v,
            ColumnData::Numerical(_) => panic!("column {position} is numerical"),
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Table {
        Table {
            schema: self.schema.clone(),
            columns: self.columns.iter().map(|c| c.select(rows)).collect(),
            n_rows: rows.len(),
        }
    }

    /// Appends the rows of `other`; schemas must be identical.
    pub fn append(&mut self, other: &Table) -> Result<()> {
        if other.schema != self.schema {
            return Err(Error::Schema("cannot append tables with different schemas".into()));
        }
        for (a, b) in self.columns.iter_mut().zip(&other.columns) {
            match (a, b) {
                (ColumnData::Numerical(x), ColumnData::Numerical(y)) => x.extend_from_slice(y),
                (ColumnData::Categorical(x), ColumnData::Categorical(y)) => x.extend(y.iter().cloned()),
                _ => unreachable!("schemas are identical"),
            }
        }
        self.n_rows += other.n_rows;
        Ok(())
    }

    /// Text of one cell as written to CSV (empty for missing).
    pub fn cell_text(&self, row: usize, position: usize) -> String {
        match &self.columns[position] {
            ColumnData::Numerical(v) => v[row].map(format_number).unwrap_or_default(),
            ColumnData::Categorical(v) => v[row].clone().unwrap_or_default(),
        }
    }

    /// Parses comma-separated text with a header row. Schema columns may
    /// appear in any order; extra columns are ignored.
    pub fn read_csv<R: Read>(reader: R, schema: &TableSchema) -> Result<Table> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(reader);
        let headers = rdr.headers().map_err(csv_error)?.clone();
        let mut seen = std::collections::HashSet::new();
        for h in headers.iter() {
            if !seen.insert(h) {
                return Err(Error::Schema(format!("duplicate header column {h:?}")));
            }
        }
        let mut source = Vec::with_capacity(schema.len());
        for spec in schema.columns() {
            let idx = headers
                .iter()
                .position(|h| h == spec.name)
                .ok_or_else(|| Error::Schema(format!("missing column {:?}", spec.name)))?;
            source.push(idx);
        }
        let extra = headers.len() - schema.len();
        if extra > 0 {
            log::warn!("ignoring {extra} CSV column(s) not declared in the schema");
        }

        let mut columns: Vec<ColumnData> = Table::empty(schema.clone()).columns;
        let mut n_rows = 0;
        for record in rdr.records() {
            let record = record.map_err(csv_error)?;
            let line = record.position().map_or(0, |p| p.line());
            if record.len() != headers.len() {
                return Err(Error::Parse {
                    line,
                    message: format!("row has {} fields, header has {}", record.len(), headers.len()),
                });
            }
            for (col, &src) in columns.iter_mut().zip(&source) {
                let cell = &record[src];
                match col {
                    ColumnData::Numerical(v) => v.push(parse_number(cell)),
                    ColumnData::Categorical(v) => v.push((!cell.is_empty()).then(|| cell.to_string())),
                }
            }
            n_rows += 1;
        }
        Ok(Table {
            schema: schema.clone(),
            columns,
            n_rows,
        })
    }

    pub fn load_csv(path: impl AsRef<Path>, schema: &TableSchema) -> Result<Table> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file), schema)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().from_writer(writer);
        w.write_record(self.schema.columns().iter().map(|c| c.name.as_str()))
            .map_err(csv_error)?;
        for r in 0..self.n_rows {
            let cells: Vec<String> = (0..self.columns.len()).map(|c| self.cell_text(r, c)).collect();
            w.write_record(&cells).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("csv output is UTF-8")
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_number(v: f64) -> String {
    format!("{v}")
}

fn parse_number(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}
