//! File writers shared by the subcommands.
//!
//! JSON goes through `serde_json::Value`, whose maps keep keys sorted, so
//! every document has a canonical layout whatever the struct field order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

/// Collects the files a subcommand writes into one output directory.
pub struct OutputDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Names of the files written so far, in write order.
    pub fn files(&self) -> &[String] {
        &self.written
    }

    fn record(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.root.join(name)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let text = to_canonical_json(value)?;
        let path = self.record(name);
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }

    /// Writes a CSV with the given header; each row is already formatted.
    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let path = self.record(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let wrap = |e: csv::Error| CliError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        w.write_record(header).map_err(wrap)?;
        for row in rows {
            w.write_record(row).map_err(wrap)?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))
    }
}

pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    let v = serde_json::to_value(value).map_err(|e| CliError::Validation(e.to_string()))?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| CliError::Validation(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Shortest round-trip decimal form; `NaN` and infinities spelled out.
pub fn num(x: f64) -> String {
    format!("{x}")
}

pub fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

pub fn opt_bool(x: Option<bool>) -> String {
    x.map(|b| b.to_string()).unwrap_or_default()
}
