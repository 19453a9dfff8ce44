//! Flat `key = value` experiment configuration.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Later assignments override earlier ones, so command-line flags
//! are applied on top of a loaded file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExperimentConfig {
    entries: BTreeMap<String, String>,
}

impl ExperimentConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::Config(format!("line {}: expected key=value, got {line:?}", i + 1)));
            };
            let k = k.trim();
            if k.is_empty() {
                return Err(CliError::Config(format!("line {}: empty key", i + 1)));
            }
            cfg.set(k, v.trim());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// Applies a `key=value` override from the command line.
    pub fn set_pair(&mut self, pair: &str) -> CliResult<()> {
        match pair.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => {
                self.set(k.trim(), v.trim());
                Ok(())
            }
            _ => Err(CliError::Config(format!("expected key=value, got {pair:?}"))),
        }
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> CliResult<T> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => parse_value(key, v),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> CliResult<T> {
        match self.entries.get(key) {
            None => Err(CliError::Config(format!("missing required key `{key}`"))),
            Some(v) => parse_value(key, v),
        }
    }

    /// Comma-separated list, e.g. `n_mu = 0,2,5`.
    pub fn get_list<T: FromStr>(&self, key: &str, default: &[T]) -> CliResult<Vec<T>>
    where
        T: Clone,
    {
        match self.entries.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| parse_value(key, s))
                .collect(),
        }
    }

    /// Rejects keys a subcommand does not understand, so typos fail loudly.
    pub fn check_keys(&self, allowed: &[&str]) -> CliResult<()> {
        let unknown: Vec<&str> = self
            .entries
            .keys()
            .map(String::as_str)
            .filter(|k| !allowed.contains(k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(format!("unknown key(s): {}", unknown.join(", "))))
        }
    }

    /// Serialized form, loadable with [`ExperimentConfig::parse`].
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> CliResult<T> {
    v.parse()
        .map_err(|_| CliError::Config(format!("bad value for `{key}`: {v:?}")))
}
