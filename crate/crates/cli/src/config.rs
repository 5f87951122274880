//! Plain `key=value` run configuration.

use std::collections::BTreeMap;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::CliError;

/// Every key the commands understand. Anything else is rejected.
pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "count",
    "temperature",
    "top_p",
    "points",
    "pairing",
    "beta",
    "lr",
    "steps",
    "optimizer",
    "divergence_window",
    "meshes",
    "l",
    "d",
    "layers",
    "heads",
    "ffn_mult",
    "max_segments",
    "freeze_geometry",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        let mut unknown = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::input(format!("config line {}: expected key=value", n + 1)));
            };
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                unknown.push(key);
                continue;
            }
            if values.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(CliError::input(format!("config line {}: duplicate key {key}", n + 1)));
            }
        }
        if !unknown.is_empty() {
            return Err(CliError::input(format!("unknown config keys: {}", unknown.join(", "))));
        }
        Ok(Self { values })
    }

    pub fn set(&mut self, key: &str, value: String) {
        self.values.insert(key.to_string(), value);
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| CliError::input(format!("config key {key}: cannot parse {v:?}: {e}"))),
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// SHA-256 of the sorted effective entries.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
