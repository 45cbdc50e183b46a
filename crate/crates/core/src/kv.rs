//! Plain-text `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys must be known to
//! the target config type; unknown keys are an error so typos do not pass
//! silently.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub trait KvConfig {
    /// Set one field from its textual value.
    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    /// Every field, in a stable order.
    fn entries(&self) -> Vec<(&'static str, String)>;

    fn to_kv_string(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    fn apply_kv_str(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    fn apply_kv_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (line, k, v) in parse_lines(&text)? {
            self.set(&k, &v)
                .map_err(|e| Error::parse(path, line, e.to_string()))?;
        }
        Ok(())
    }
}

fn parse_lines(text: &str) -> Result<Vec<(u64, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Invalid(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
        out.push((i as u64 + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    Ok(parse_lines(text)?.into_iter().map(|(_, k, v)| (k, v)).collect())
}

pub fn value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse()
        .map_err(|e| Error::Invalid(format!("{key}: cannot parse {raw:?}: {e}")))
}

pub fn unknown(key: &str) -> Error {
    Error::Invalid(format!("unknown config key {key:?}"))
}
