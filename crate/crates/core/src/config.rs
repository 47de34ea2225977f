//! Flat `key = value` configuration text.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Keys are case-sensitive and may repeat, the last assignment winning.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type KeyValues = BTreeMap<String, String>;

pub fn parse_kv(text: &str) -> Result<KeyValues> {
    let mut out = KeyValues::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

pub fn read_kv(path: &Path) -> Result<KeyValues> {
    parse_kv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn render_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> String {
    pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Error for a key no config type recognizes, listing the ones it does.
pub fn unknown_key(key: &str, valid: &[&str]) -> Error {
    Error::Config(format!("unknown key {key:?}; valid keys: {}", valid.join(", ")))
}

pub fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}
