//! Layered configuration: built-in profile, then a JSON file, then `--set` overrides.
//!
//! Overrides use dotted keys into the JSON document (`train.lr=0.01`,
//! `alpha_range=[0.7,0.8]`). The right-hand side is parsed as JSON and falls
//! back to a plain string. Keys must already exist in the layered document,
//! and the final document must deserialize with no unknown fields.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

pub fn layer<T: Serialize + DeserializeOwned>(base: &T, file: Option<&Path>, sets: &[String]) -> Result<T, String> {
    let mut doc = serde_json::to_value(base).map_err(|e| e.to_string())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))?;
        if !patch.is_object() {
            return Err(format!("config {} must hold a JSON object", path.display()));
        }
        merge(&mut doc, patch, "")?;
    }
    for s in sets {
        apply_set(&mut doc, s)?;
    }
    serde_json::from_value(doc).map_err(|e| format!("invalid configuration: {e}"))
}

fn merge(dst: &mut Value, src: Value, prefix: &str) -> Result<(), String> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                match d.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &key)?,
                    Some(slot) => *slot = v,
                    None => return Err(format!("unknown configuration key `{key}`")),
                }
            }
            Ok(())
        }
        (d, s) => {
            *d = s;
            Ok(())
        }
    }
}

fn apply_set(doc: &mut Value, set: &str) -> Result<(), String> {
    let (key, raw) = set
        .split_once('=')
        .ok_or_else(|| format!("override `{set}` is not of the form key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = doc;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(m) => m
                .get_mut(part)
                .ok_or_else(|| format!("unknown configuration key `{key}`"))?,
            _ => return Err(format!("unknown configuration key `{key}`")),
        };
    }
    *slot = value;
    Ok(())
}
