//! Flat `key=value` text used by config files, checkpoints and run manifests.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parses `key=value` lines. Blank lines and `#` comments are skipped;
/// duplicate keys and lines without `=` are rejected.
pub fn parse(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key=value, got {line:?}", no + 1))
        })?;
        let key = k.trim().to_string();
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!(
                "line {}: duplicate key {key:?}",
                no + 1
            )));
        }
    }
    Ok(out)
}

/// Renders a map as sorted `key=value` lines.
pub fn render(map: &BTreeMap<String, String>) -> String {
    map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Removes and parses `key`, if present.
pub fn take<T>(map: &mut BTreeMap<String, String>, key: &str) -> Result<Option<T>>
where
    T: FromStr,
    T::Err: Display,
{
    map.remove(key)
        .map(|v| {
            v.parse::<T>()
                .map_err(|e| Error::Config(format!("bad value {v:?} for {key}: {e}")))
        })
        .transpose()
}

pub fn require<T>(map: &mut BTreeMap<String, String>, key: &str) -> Result<T>
where
    T: FromStr,
    T::Err: Display,
{
    take(map, key)?.ok_or_else(|| Error::Config(format!("missing key {key:?}")))
}

/// Errors if any keys were left unconsumed.
pub fn reject_unknown(map: &BTreeMap<String, String>, what: &str) -> Result<()> {
    match map.keys().next() {
        None => Ok(()),
        Some(_) => Err(Error::Config(format!(
            "unknown {what} keys: {}",
            map.keys().cloned().collect::<Vec<_>>().join(", ")
        ))),
    }
}
