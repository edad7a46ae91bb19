//! Layered run configuration: defaults, then a JSON file, then flags.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::Failure;

/// Deep merge `over` into `base`; objects merge key by key, anything else replaces.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Defaults overlaid with the config file section for `command`. A file may
/// either hold one object per command name or a single flat object.
pub fn layered<T: Serialize + DeserializeOwned>(defaults: &T, file: Option<&Path>, command: &str) -> Result<T, Failure> {
    let mut value = serde_json::to_value(defaults).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        let parsed: Value =
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        let section = match parsed {
            Value::Object(mut o) if o.contains_key(command) => o.remove(command).unwrap_or(Value::Null),
            other => other,
        };
        merge(&mut value, section);
    }
    serde_json::from_value(value).map_err(|e| Failure::Usage(format!("config for {command}: {e}")))
}

/// Log the resolved config and, with an output directory, write it there.
pub fn echo<T: Serialize>(command: &str, config: &T, dir: Option<&Path>) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(config).map_err(|e| Failure::Run(e.into()))?;
    log::info!("{command} resolved config: {text}");
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Failure::Run(pcanet::Error::io(dir, e)))?;
        let path = dir.join("config.json");
        fs::write(&path, text + "\n").map_err(|e| Failure::Run(pcanet::Error::io(&path, e)))?;
    }
    Ok(())
}
