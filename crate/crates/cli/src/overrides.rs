use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// Variables with this prefix override config keys. `__` separates nested
/// keys, so `ASRF_JOINT__ITERS=50` sets `joint.iters`.
pub const ENV_PREFIX: &str = "ASRF_";

/// Prefixed variables that configure the binary rather than the run.
const RESERVED: &[&str] = &["THREADS", "LOG"];

/// `(key path, value)` pairs from the given environment.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(Vec<String>, Value)> {
    let mut out: Vec<(Vec<String>, Value)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            if rest.is_empty() || RESERVED.contains(&rest) {
                return None;
            }
            let path = rest.split("__").map(|s| s.to_ascii_lowercase()).collect();
            let value = serde_json::from_str(&v).unwrap_or(Value::String(v));
            Some((path, value))
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Sets `path` inside `root`, creating objects on the way.
pub fn set_path(root: &mut Value, path: &[String], value: Value) -> Result<(), CliError> {
    let mut node = root;
    for (i, key) in path.iter().enumerate() {
        if !node.is_object() {
            return Err(CliError::Validation(format!("override {}: `{}` is not an object", path.join("."), path[..i].join("."))));
        }
        let map = node.as_object_mut().expect("checked object");
        if i + 1 == path.len() {
            map.insert(key.clone(), value);
            return Ok(());
        }
        node = map.entry(key.clone()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

/// Reads a JSON document.
pub fn read_json(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// Defaults, then `base` (usually a config file), then environment
/// overrides, then `flags`. The merged document must deserialize into `T`.
pub fn load_config<T: DeserializeOwned + Serialize + Default>(
    base: Option<Value>,
    env: &[(Vec<String>, Value)],
    flags: &[(Vec<String>, Value)],
) -> Result<T, CliError> {
    let mut doc = serde_json::to_value(T::default()).map_err(|e| CliError::Runtime(e.to_string()))?;
    if let Some(user) = base {
        merge(&mut doc, user);
    }
    for (path, value) in env.iter().chain(flags) {
        set_path(&mut doc, path, value.clone())?;
    }
    serde_json::from_value(doc).map_err(|e| CliError::Validation(format!("config: {e}")))
}

/// Recursive object merge; non-object values replace.
fn merge(base: &mut Value, over: Value) {
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
