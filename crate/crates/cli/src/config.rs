//! TOML config documents with `--set key=value` overrides.
//!
//! Keys are flat and mirror the library config structs; nested tables such as
//! `adversary` are addressed with dotted keys (`adversary.lambda_device`).
//! Unknown keys are rejected by the target struct, so a typo surfaces as an
//! error that names the offending key.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use toml::{Table, Value};

/// Parses `path` (or an empty document) and applies `overrides` in order.
pub fn load_table(path: Option<&Path>, overrides: &[String]) -> Result<Table> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            text.parse::<Table>().with_context(|| format!("parsing config {}", p.display()))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    Ok(table)
}

/// `key=value`; the value is read as a TOML literal and falls back to a
/// plain string when it is not one (`--set templates=my.txt`).
fn apply_override(table: &mut Table, raw: &str) -> Result<()> {
    let Some((key, value)) = raw.split_once('=') else {
        bail!("override `{raw}` is not of the form key=value");
    };
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        bail!("override `{raw}` has an empty key");
    }
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()));
    set(table, key, parsed)
}

/// Inserts `value` at a dotted `key`, creating intermediate tables.
pub fn set(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!("`{p}` in `{key}` is not a table"),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Deserializes `table` into `T`, whose unset fields keep their defaults.
pub fn decode<T: DeserializeOwned>(table: Table, what: &str) -> Result<T> {
    Value::Table(table).try_into().map_err(|e: toml::de::Error| anyhow::anyhow!("invalid {what}: {}", e.message()))
}
