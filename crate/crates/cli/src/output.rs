//! CSV tables and the `.meta` sidecar.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::error::{CliError, CliResult};

/// A header and rows of already formatted cells.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len(), "row width");
        self.rows.push(row);
    }
}

/// Shortest decimal that parses back to the same `f64`.
pub fn num(x: f64) -> String {
    x.to_string()
}

pub fn write_csv(path: &Path, table: &Table) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&table.header)?;
    for row in &table.rows {
        w.write_record(row)?;
    }
    w.flush().map_err(CliError::Io)
}

pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// `key=value` lines: command, version, the effective config and the wall time.
pub fn write_sidecar(out: &Path, command: &str, config: &BTreeMap<String, String>, wall: Duration) -> CliResult<()> {
    let mut f = std::fs::File::create(sidecar_path(out))?;
    writeln!(f, "command={command}")?;
    writeln!(f, "version={}", env!("CARGO_PKG_VERSION"))?;
    for (k, v) in config {
        writeln!(f, "config.{k}={v}")?;
    }
    writeln!(f, "wall_time_s={}", wall.as_secs_f64())?;
    Ok(())
}
