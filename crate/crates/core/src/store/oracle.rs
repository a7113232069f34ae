//! Host-state sources for set-query rules.
//!
//! Fixture files are tab-separated text: the first line names the columns,
//! every further non-empty line is one row. A file `stock.tsv` defines the
//! table `stock`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::rule::{HostState, OracleUnavailable};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FixtureError {
    #[error("table `{table}` has no header line")]
    MissingHeader { table: String },
    #[error("table `{table}` line {line}: expected {expected} fields, found {found}")]
    RaggedRow {
        table: String,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("table `{table}` repeats column `{column}`")]
    DuplicateColumn { table: String, column: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Table {
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn col(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

/// In-memory snapshot of host tables.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TableSnapshot {
    tables: BTreeMap<String, Table>,
}

impl TableSnapshot {
    /// Adds or replaces a table. Every row must have one value per column.
    pub fn insert_table<R, V>(
        &mut self,
        name: &str,
        columns: &[&str],
        rows: R,
    ) -> Result<(), FixtureError>
    where
        R: IntoIterator<Item = Vec<V>>,
        V: Into<String>,
    {
        let columns: Vec<String> = columns.iter().map(|c| c.to_string()).collect();
        check_columns(name, &columns)?;
        let mut table = Table {
            columns,
            rows: Vec::new(),
        };
        for (i, row) in rows.into_iter().enumerate() {
            let row: Vec<String> = row.into_iter().map(Into::into).collect();
            if row.len() != table.columns.len() {
                return Err(FixtureError::RaggedRow {
                    table: name.to_string(),
                    line: i + 2,
                    expected: table.columns.len(),
                    found: row.len(),
                });
            }
            table.rows.push(row);
        }
        self.tables.insert(name.to_string(), table);
        Ok(())
    }

    /// Parses one tab-separated table.
    pub fn load_tsv(&mut self, name: &str, text: &str) -> Result<(), FixtureError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| FixtureError::MissingHeader {
            table: name.to_string(),
        })?;
        let columns: Vec<&str> = header.split('\t').map(str::trim).collect();
        let rows: Vec<Vec<String>> = lines
            .map(|l| {
                l.split('\t')
                    .map(|f| f.trim_end_matches('\r').to_string())
                    .collect()
            })
            .collect();
        self.insert_table(name, &columns, rows)
    }

    pub fn table_names(&self) -> impl Iterator<Item = &str> {
        self.tables.keys().map(String::as_str)
    }

    /// Every row as a column map, for tests and inspection.
    pub fn rows(&self, table: &str) -> Vec<BTreeMap<String, String>> {
        self.tables
            .get(table)
            .map(|t| {
                t.rows
                    .iter()
                    .map(|r| t.columns.iter().cloned().zip(r.iter().cloned()).collect())
                    .collect()
            })
            .unwrap_or_default()
    }
}

fn check_columns(table: &str, columns: &[String]) -> Result<(), FixtureError> {
    let mut seen = BTreeSet::new();
    for c in columns {
        if !seen.insert(c) {
            return Err(FixtureError::DuplicateColumn {
                table: table.to_string(),
                column: c.clone(),
            });
        }
    }
    Ok(())
}

impl HostState for TableSnapshot {
    fn select(
        &self,
        table: &str,
        column: &str,
        filters: &[(&str, &str)],
    ) -> Result<BTreeSet<String>, OracleUnavailable> {
        let Some(t) = self.tables.get(table) else {
            return Ok(BTreeSet::new());
        };
        let Some(target) = t.col(column) else {
            return Ok(BTreeSet::new());
        };
        let mut idx = Vec::with_capacity(filters.len());
        for (c, v) in filters {
            match t.col(c) {
                Some(i) => idx.push((i, *v)),
                None => return Ok(BTreeSet::new()),
            }
        }
        Ok(t.rows
            .iter()
            .filter(|row| idx.iter().all(|(i, v)| row[*i] == *v))
            .map(|row| row[target].clone())
            .collect())
    }
}

/// Reads `<dir>/<table>.tsv` on every query, so edits to the fixture files
/// take effect immediately. An unreadable or malformed file makes the oracle
/// unavailable rather than silently empty.
#[derive(Debug, Clone)]
pub struct TsvDirectory {
    dir: PathBuf,
}

impl TsvDirectory {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        TsvDirectory { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl HostState for TsvDirectory {
    fn select(
        &self,
        table: &str,
        column: &str,
        filters: &[(&str, &str)],
    ) -> Result<BTreeSet<String>, OracleUnavailable> {
        // `table` is a checked SQL identifier, so it cannot escape the directory.
        let path = self.dir.join(format!("{table}.tsv"));
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(BTreeSet::new()),
            Err(e) => return Err(OracleUnavailable(format!("{}: {e}", path.display()))),
        };
        let mut snap = TableSnapshot::default();
        snap.load_tsv(table, &text)
            .map_err(|e| OracleUnavailable(e.to_string()))?;
        snap.select(table, column, filters)
    }
}
