//! Layered configuration: defaults < JSON config file < `key=value` overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::CliError;

/// Resolves a config of type `T`. Keys in the file or in overrides that the
/// defaults do not have are rejected, so typos fail loudly.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(file: Option<&Path>, overrides: &[String]) -> Result<T, CliError> {
    let mut value = serde_json::to_value(T::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let layer: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        merge(&mut value, layer, "")?;
    }
    for item in overrides {
        apply_override(&mut value, item)?;
    }
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))
}

fn merge(base: &mut Value, layer: Value, at: &str) -> Result<(), CliError> {
    match (base, layer) {
        (Value::Object(base), Value::Object(layer)) => {
            for (k, v) in layer {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match base.get_mut(&k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => return Err(CliError::Usage(format!("unknown config key '{path}'"))),
                }
            }
        }
        (slot, layer) => *slot = layer,
    }
    Ok(())
}

/// Applies one `dotted.path=value` override (array items as `list[1]` or
/// `list.1`); the value is parsed as JSON and taken as a plain string when
/// that fails.
pub fn apply_override(value: &mut Value, item: &str) -> Result<(), CliError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override '{item}' is not of the form key=value")))?;
    let parsed: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let path = key.replace('[', ".").replace(']', "");
    let mut slot = value;
    for part in path.split('.') {
        slot = match slot {
            Value::Object(map) => map.get_mut(part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| CliError::Usage(format!("unknown config key '{key}'")))?;
    }
    *slot = parsed;
    Ok(())
}
