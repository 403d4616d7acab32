//! CSV tables and atomic file output.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;

use crate::error::{CliError, CliResult};

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

/// In-memory table of string cells with a header row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: Vec<String>) -> Self {
        Self { header, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> CliResult<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let internal = |e: csv::Error| CliError::Internal(format!("csv: {e}"));
        w.write_record(&self.header).map_err(internal)?;
        for r in &self.rows {
            w.write_record(r).map_err(internal)?;
        }
        w.into_inner().map_err(|e| CliError::Internal(format!("csv: {e}")))
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    pub fn from_bytes(bytes: &[u8], name: &str) -> CliResult<Self> {
        let invalid = |e: csv::Error| CliError::Invalid(format!("{name}: {e}"));
        let mut r = csv::Reader::from_reader(bytes);
        let header = r.headers().map_err(invalid)?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()))
            .collect::<Result<Vec<Vec<String>>, _>>()
            .map_err(invalid)?;
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn require(&self, name: &str) -> CliResult<usize> {
        self.column(name).ok_or_else(|| CliError::Invalid(format!("missing column {name:?}")))
    }

    /// Indices of `{prefix}0`, `{prefix}1`, ... in order.
    pub fn vector_columns(&self, prefix: &str) -> CliResult<Vec<usize>> {
        let cols: Vec<usize> = (0..).map_while(|i| self.column(&format!("{prefix}{i}"))).collect();
        if cols.is_empty() {
            return Err(CliError::Invalid(format!("no {prefix}0.. columns")));
        }
        Ok(cols)
    }

    pub fn f64_at(&self, row: usize, col: usize) -> CliResult<f64> {
        let cell = &self.rows[row][col];
        cell.trim().parse().map_err(|_| {
            CliError::Invalid(format!("row {}, column {:?}: not a number: {cell:?}", row + 1, self.header[col]))
        })
    }

    pub fn u32_at(&self, row: usize, col: usize) -> CliResult<u32> {
        let cell = &self.rows[row][col];
        cell.trim().parse().map_err(|_| {
            CliError::Invalid(format!("row {}, column {:?}: not a label: {cell:?}", row + 1, self.header[col]))
        })
    }

    pub fn vectors(&self, prefix: &str) -> CliResult<Vec<DVector<f64>>> {
        let cols = self.vector_columns(prefix)?;
        (0..self.rows.len())
            .map(|r| cols.iter().map(|&c| self.f64_at(r, c)).collect::<CliResult<Vec<_>>>().map(DVector::from_vec))
            .collect()
    }
}

pub fn vector_header(prefix: &str, d: usize) -> Vec<String> {
    (0..d).map(|i| format!("{prefix}{i}")).collect()
}

pub fn fmt_vec(v: &DVector<f64>) -> impl Iterator<Item = String> + '_ {
    v.iter().map(|x| x.to_string())
}
