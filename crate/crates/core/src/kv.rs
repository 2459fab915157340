//! Canonical `key=value` text blocks.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Parses lines of `key=value` that must list exactly `keys`, in order.
pub(crate) fn parse_canonical(text: &str, keys: &[&str]) -> Result<HashMap<String, String>> {
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != keys.len() {
        return Err(Error::Config(format!(
            "expected {} key=value lines, found {}",
            keys.len(),
            lines.len()
        )));
    }
    let mut out = HashMap::new();
    for (line, &key) in lines.iter().zip(keys) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("malformed line {line:?}")))?;
        if k.trim() != key {
            return Err(Error::Config(format!("expected key {key:?}, found {:?}", k.trim())));
        }
        out.insert(key.to_string(), v.trim().to_string());
    }
    Ok(out)
}
