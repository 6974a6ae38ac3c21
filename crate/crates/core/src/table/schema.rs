use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    #[serde(alias = "num", alias = "numeric", alias = "continuous")]
    Numerical,
    #[serde(alias = "cat", alias = "discrete")]
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default)]
    pub target: bool,
}

impl ColumnSpec {
    pub fn numerical(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Numerical,
            target: false,
        }
    }

    pub fn categorical(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Categorical,
            target: false,
        }
    }

    pub fn as_target(mut self) -> Self {
        self.target = true;
        self
    }
}

/// Ordered column declarations. Within the token stack numerical columns come
/// first (in schema order), then categorical ones.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TableSchema {
    columns: Vec<ColumnSpec>,
}

#[derive(Deserialize)]
struct SchemaFile {
    columns: Vec<ColumnSpec>,
}

impl<'de> Deserialize<'de> for TableSchema {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = SchemaFile::deserialize(d)?;
        TableSchema::new(raw.columns).map_err(serde::de::Error::custom)
    }
}

impl TableSchema {
    pub fn new(columns: Vec<ColumnSpec>) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::Schema("schema declares no columns".into()));
        }
        let mut seen = HashSet::new();
        for c in &columns {
            if c.name.is_empty() {
                return Err(Error::Schema("empty column name".into()));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column name {:?}", c.name)));
            }
        }
        if columns.iter().filter(|c| c.target).count() > 1 {
            return Err(Error::Schema("more than one target column".into()));
        }
        Ok(Self { columns })
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn columns(&self) -> &[ColumnSpec] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<(usize, &ColumnSpec)> {
        self.columns.iter().enumerate().find(|(_, c)| c.name == name)
    }

    /// Schema positions of numerical columns, in order.
    pub fn numerical_positions(&self) -> Vec<usize> {
        self.positions(ColumnKind::Numerical)
    }

    /// Schema positions of categorical columns, in order.
    pub fn categorical_positions(&self) -> Vec<usize> {
        self.positions(ColumnKind::Categorical)
    }

    fn positions(&self, kind: ColumnKind) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.kind == kind)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn n_numerical(&self) -> usize {
        self.columns.iter().filter(|c| c.kind == ColumnKind::Numerical).count()
    }

    pub fn n_categorical(&self) -> usize {
        self.len() - self.n_numerical()
    }

    /// Index of `position` within its kind's block.
    pub fn block_index(&self, position: usize) -> usize {
        let kind = self.columns[position].kind;
        self.columns[..position].iter().filter(|c| c.kind == kind).count()
    }

    /// Token index (numerical block first) of a schema position.
    pub fn token_index(&self, position: usize) -> usize {
        match self.columns[position].kind {
            ColumnKind::Numerical => self.block_index(position),
            ColumnKind::Categorical => self.n_numerical() + self.block_index(position),
        }
    }

    pub fn target(&self) -> Option<(usize, &ColumnSpec)> {
        self.columns.iter().enumerate().find(|(_, c)| c.target)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_schema_json() {
        let s = TableSchema::from_json_str(
            r#"{"columns":[{"name":"age","kind":"numerical"},
                           {"name":"job","kind":"categorical"},
                           {"name":"income","kind":"categorical","target":true}]}"#,
        )
        .unwrap();
        assert_eq!(s.n_numerical(), 1);
        assert_eq!(s.n_categorical(), 2);
        assert_eq!(s.target().unwrap().1.name, "income");
        assert_eq!(s.token_index(2), 2);
        assert_eq!(s.block_index(2), 1);
    }

    #[test]
    fn rejects_duplicates_and_double_targets() {
        let dup = r#"{"columns":[{"name":"a","kind":"numerical"},{"name":"a","kind":"categorical"}]}"#;
        assert!(matches!(TableSchema::from_json_str(dup), Err(Error::Schema(_))));
        let two = r#"{"columns":[{"name":"a","kind":"numerical","target":true},{"name":"b","kind":"numerical","target":true}]}"#;
        assert!(matches!(TableSchema::from_json_str(two), Err(Error::Schema(_))));
        assert!(TableSchema::from_json_str(r#"{"columns":[]}"#).is_err());
    }

    #[test]
    fn json_round_trip() {
        let s = TableSchema::new(vec![
            ColumnSpec::categorical("c"),
            ColumnSpec::numerical("x").as_target(),
        ])
        .unwrap();
        assert_eq!(TableSchema::from_json_str(&s.to_json()).unwrap(), s);
        // categorical declared first still tokenizes after the numerical block
        assert_eq!(s.token_index(0), 1);
        assert_eq!(s.token_index(1), 0);
    }
}
