//! Flat `key = value` configuration with command-line overrides.
//!
//! Every value read is recorded, defaults included, so the sidecar can echo
//! the effective configuration. Keys that are set but never read are errors.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;

use crate::error::{CliError, CliResult};

#[derive(Debug, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
    read: RefCell<BTreeSet<String>>,
    resolved: RefCell<BTreeMap<String, String>>,
}

impl Config {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = Config::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value, got '{raw}'", no + 1)))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(CliError::Config(format!("line {}: empty key", no + 1)));
            }
            cfg.values.insert(key.to_string(), value.trim().to_string());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> CliResult<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects key=value, got '{pair}'")))?;
        self.set(k.trim(), v.trim());
        Ok(())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    fn raw(&self, key: &str) -> Option<String> {
        self.read.borrow_mut().insert(key.to_string());
        self.values.get(key).cloned()
    }

    fn record(&self, key: &str, value: String) {
        self.resolved.borrow_mut().insert(key.to_string(), value);
    }

    pub fn string(&self, key: &str, default: &str) -> String {
        let v = self.raw(key).unwrap_or_else(|| default.to_string());
        self.record(key, v.clone());
        v
    }

    pub fn parsed<T: FromStr + ToString>(&self, key: &str, default: T) -> CliResult<T> {
        let v = match self.raw(key) {
            Some(s) => s
                .parse()
                .map_err(|_| CliError::Config(format!("{key}: cannot parse '{s}'")))?,
            None => default,
        };
        self.record(key, v.to_string());
        Ok(v)
    }

    pub fn flag(&self, key: &str) -> CliResult<bool> {
        let v = match self.raw(key).as_deref() {
            None | Some("false") | Some("0") => false,
            Some("true") | Some("1") | Some("") => true,
            Some(other) => return Err(CliError::Config(format!("{key}: expected true/false, got '{other}'"))),
        };
        self.record(key, v.to_string());
        Ok(v)
    }

    pub fn list<T: FromStr + ToString + Clone>(&self, key: &str, default: &[T]) -> CliResult<Vec<T>> {
        let v: Vec<T> = match self.raw(key) {
            Some(s) => s
                .split(',')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(|p| {
                    p.parse()
                        .map_err(|_| CliError::Config(format!("{key}: cannot parse '{p}'")))
                })
                .collect::<CliResult<_>>()?,
            None => default.to_vec(),
        };
        if v.is_empty() {
            return Err(CliError::Config(format!("{key}: empty list")));
        }
        self.record(key, v.iter().map(T::to_string).collect::<Vec<_>>().join(","));
        Ok(v)
    }

    /// Fails on keys that were set but never read by the command.
    pub fn check_unused(&self) -> CliResult<()> {
        let read = self.read.borrow();
        let unused: Vec<&str> = self
            .values
            .keys()
            .filter(|k| !read.contains(*k))
            .map(String::as_str)
            .collect();
        if unused.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(format!(
                "unknown keys for this command: {}",
                unused.join(", ")
            )))
        }
    }

    /// Effective configuration, defaults included.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        self.resolved.borrow().clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_reads() {
        let cfg = Config::parse("# header\nN = 12\n driver=colehopf # trailing\n\nk_schedule = 2, 4,8\n").unwrap();
        assert_eq!(cfg.parsed::<usize>("N", 4).unwrap(), 12);
        assert_eq!(cfg.string("driver", "zero"), "colehopf");
        assert_eq!(cfg.list::<f64>("k_schedule", &[1.0]).unwrap(), vec![2.0, 4.0, 8.0]);
        assert_eq!(cfg.parsed::<f64>("T", 1.0).unwrap(), 1.0);
        cfg.check_unused().unwrap();
        assert_eq!(cfg.resolved()["T"], "1");
    }

    #[test]
    fn rejects_garbage() {
        assert!(Config::parse("no equals sign").is_err());
        let cfg = Config::parse("N = twelve\ntypo = 1").unwrap();
        assert!(cfg.parsed::<usize>("N", 1).is_err());
        assert!(cfg.check_unused().is_err());
    }
}
