//! Plain-text `key=value` run configuration.
//!
//! Lines are `key=value`; blank lines and `#` comments are skipped. The
//! fingerprint is an FNV-1a hash over the sorted canonical pairs, so two
//! configs with the same effective content fingerprint identically.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{LatError, Result};

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    map: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn empty() -> RunConfig {
        RunConfig::default()
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut map = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(LatError::Parse {
                    line: idx + 1,
                    message: format!("expected key=value, got '{line}'"),
                });
            };
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(LatError::Parse { line: idx + 1, message: "empty key".into() });
            }
            map.insert(key, value.trim().to_string());
        }
        Ok(RunConfig { map })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn str_or(&self, key: &str, default: &str) -> String {
        self.get(key).unwrap_or(default).to_string()
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| bad_value(key, v)),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| bad_value(key, v)),
        }
    }

    pub fn i64_or(&self, key: &str, default: i64) -> Result<i64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| bad_value(key, v)),
        }
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| bad_value(key, v)),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    /// Stable 64-bit fingerprint of the canonical `key=value` listing plus
    /// any extra pairs (e.g. the model kind a driver injects).
    pub fn fingerprint(&self, extras: &[(&str, &str)]) -> String {
        let mut pairs: Vec<(String, String)> =
            self.map.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        for (k, v) in extras {
            pairs.push((k.to_string(), v.to_string()));
        }
        pairs.sort();
        let mut hash = FNV_OFFSET;
        for (k, v) in &pairs {
            for b in k.bytes().chain([b'='].into_iter()).chain(v.bytes()).chain([b'\n']) {
                hash ^= b as u64;
                hash = hash.wrapping_mul(FNV_PRIME);
            }
        }
        format!("{hash:016x}")
    }
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn bad_value(key: &str, value: &str) -> LatError {
    LatError::Contract(format!("config key '{key}' has unparsable value '{value}'"))
}
