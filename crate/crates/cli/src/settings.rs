//! Merges `--config <json>` with command-line flags. Flags win; `GFD_SEED`
//! fills in a missing seed.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::Usage;

pub const SEED_ENV: &str = "GFD_SEED";

fn load_object(path: &Path) -> anyhow::Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| Usage(format!("{}: {e}", path.display())))?;
    match serde_json::from_str::<Value>(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(Usage(format!("{}: config must be a JSON object", path.display())).into()),
        Err(e) => Err(Usage(format!("{}: {e}", path.display())).into()),
    }
}

/// `flags` must serialize to an object whose keys match the settings fields;
/// `None` flags serialize as null and do not override the file.
pub fn resolve<F: Serialize, S: DeserializeOwned>(flags: &F, config: Option<&Path>, seeded: bool) -> anyhow::Result<S> {
    let mut merged = match config {
        Some(p) => load_object(p)?,
        None => Map::new(),
    };
    let Value::Object(over) = serde_json::to_value(flags)? else {
        unreachable!("flag structs serialize to objects")
    };
    for (k, v) in over {
        if !v.is_null() {
            merged.insert(k, v);
        }
    }
    if seeded && merged.get("seed").is_none_or(Value::is_null) {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            let seed: u64 = raw
                .trim()
                .parse()
                .map_err(|e| Usage(format!("{SEED_ENV}={raw:?} is not a seed: {e}")))?;
            merged.insert("seed".into(), seed.into());
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| Usage(format!("invalid settings: {e}")).into())
}

/// Prints the resolved settings and seed, one line each.
pub fn announce<S: Serialize>(settings: &S, seed: Option<u64>) -> anyhow::Result<()> {
    println!("config: {}", serde_json::to_string(settings)?);
    match seed {
        Some(s) => println!("seed: {s}"),
        None => println!("seed: none"),
    }
    Ok(())
}
