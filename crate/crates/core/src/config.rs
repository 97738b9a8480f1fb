//! Flat `key = value` configuration text with `#` comments.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered key/value pairs. Keys are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = KvConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = split_pair(line).ok_or_else(|| {
                Error::Validation(format!("line {}: expected key=value, got `{raw}`", lineno + 1))
            })?;
            if cfg.entries.insert(k.clone(), v).is_some() {
                return Err(Error::config(k, format!("duplicate key on line {}", lineno + 1)));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    /// Applies a `key=value` override string.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (k, v) = split_pair(spec)
            .ok_or_else(|| Error::Validation(format!("override `{spec}` is not key=value")))?;
        self.entries.insert(k, v);
        Ok(())
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::config(key, format!("cannot parse `{v}`: {e}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Rejects any key not in `known`.
    pub fn ensure_known(&self, known: &[&str]) -> Result<()> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(Error::config(k, "unknown key")),
            None => Ok(()),
        }
    }

    /// Merges `other` into `self`; keys in `other` win.
    pub fn merge(&mut self, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Canonical text form: sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

fn split_pair(line: &str) -> Option<(String, String)> {
    let (k, v) = line.split_once('=')?;
    let k = k.trim();
    if k.is_empty() {
        return None;
    }
    Some((k.to_string(), v.trim().to_string()))
}

/// Parses `64`, `64x48` or `64×48` as `(height, width)`.
pub fn parse_size(value: &str) -> Option<(usize, usize)> {
    let value = value.trim();
    match value.split_once(['x', 'X', '×']) {
        Some((h, w)) => Some((h.trim().parse().ok()?, w.trim().parse().ok()?)),
        None => {
            let s = value.parse().ok()?;
            Some((s, s))
        }
    }
}
