//! Flat `key = value` files layered over serde structs.
//!
//! Keys are field names; nested fields use dots (`net.hidden_dim`). Lines
//! starting with `#` and blank lines are skipped.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("config line {}: expected key = value", n + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses `key=value` as given on the command line.
pub fn parse_assignment(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn literal(text: &str, current: &Value) -> Value {
    match current {
        Value::String(_) => Value::String(text.trim_matches('"').to_string()),
        _ => serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string())),
    }
}

/// Applies `pairs` in order to `base`; later pairs win.
pub fn overlay<T: Serialize + DeserializeOwned>(base: &T, pairs: &[(String, String)]) -> Result<T, String> {
    let mut doc = serde_json::to_value(base).map_err(|e| e.to_string())?;
    for (key, text) in pairs {
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| format!("unknown config key {key:?}"))?;
        }
        *slot = literal(text, slot);
    }
    serde_json::from_value(doc).map_err(|e| format!("config: {e}"))
}
