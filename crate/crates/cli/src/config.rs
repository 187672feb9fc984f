//! Config loading: defaults, then the config file, then `key=value` overrides.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Reads a TOML or JSON file (by extension) into a JSON value.
pub fn read_value(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    if is_json {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    } else {
        let parsed: toml::Value = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(serde_json::to_value(parsed)?)
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies one `key=value` edit. Dashes in keys read as underscores, and a
/// bare key that only exists inside one nested table is routed there.
pub fn apply_override(root: &mut Value, edit: &str) -> Result<()> {
    let (key, raw) = edit
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{edit}` is not KEY=VALUE"))?;
    let key = key.trim().replace('-', "_");
    if key.is_empty() {
        bail!("override `{edit}` has an empty key");
    }
    let mut path: Vec<String> = key.split('.').map(str::to_string).collect();
    if path.len() == 1 {
        if let Value::Object(map) = &*root {
            if !map.contains_key(&path[0]) {
                let owners: Vec<&String> = map
                    .iter()
                    .filter(|(_, v)| v.as_object().is_some_and(|m| m.contains_key(&path[0])))
                    .map(|(k, _)| k)
                    .collect();
                if let [owner] = owners.as_slice() {
                    path.insert(0, (*owner).clone());
                }
            }
        }
    }
    let mut slot = root;
    for (i, part) in path.iter().enumerate() {
        let map = match slot {
            Value::Object(m) => m,
            other => {
                *other = Value::Object(Map::new());
                other.as_object_mut().expect("just set")
            }
        };
        if i + 1 == path.len() {
            map.insert(part.clone(), parse_scalar(raw));
            return Ok(());
        }
        slot = map.entry(part.clone()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("path has at least one element")
}

/// Builds a config from defaults, an optional file and overrides.
pub fn load<T>(path: Option<&Path>, overrides: &[String]) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let mut value = serde_json::to_value(T::default())?;
    if let Some(p) = path {
        merge(&mut value, read_value(p)?);
    }
    for edit in overrides {
        apply_override(&mut value, edit)?;
    }
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            anyhow!("invalid config: {}", e.inner())
        } else {
            anyhow!("invalid config: field `{path}`: {}", e.inner())
        }
    })
}
