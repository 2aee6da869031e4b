//! Layering of the train config: TOML file, then `--set key=value`, then
//! typed flags.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use lpq_core::train::ExperimentConfig;
use toml::{Table, Value};

pub fn read_table(path: Option<&Path>) -> Result<Table> {
    match path {
        None => Ok(Table::new()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            if p.extension().is_some_and(|e| e == "json") {
                from_manifest(&text).with_context(|| format!("parsing {}", p.display()))
            } else {
                text.parse::<Table>().with_context(|| format!("parsing {}", p.display()))
            }
        }
    }
}

/// Config table from a run manifest (its `config` object) or a bare JSON config.
fn from_manifest(text: &str) -> Result<Table> {
    let mut v: serde_json::Value = serde_json::from_str(text)?;
    if let Some(c) = v.get_mut("config") {
        v = c.take();
    }
    drop_nulls(&mut v);
    Ok(serde_json::from_value(v)?)
}

// TOML has no null; an absent key deserializes to the same `None`.
fn drop_nulls(v: &mut serde_json::Value) {
    if let serde_json::Value::Object(m) = v {
        m.retain(|_, x| !x.is_null());
        m.values_mut().for_each(drop_nulls);
    }
}

/// Parse a flag value as a TOML value, falling back to a bare string.
pub fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Set a dotted key, creating intermediate tables.
pub fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("bad key {key:?}");
    }
    let mut cur = table;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = cur.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        let created_data = i == 0 && *part == "data";
        cur = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("{} is not a table", parts[..=i].join(".")))?;
        // the data table is tagged; a bare override means synthetic data
        if created_data && !cur.contains_key("source") {
            cur.insert("source".into(), Value::String("synthetic".into()));
        }
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn apply_sets(table: &mut Table, sets: &[String]) -> Result<()> {
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects key=value, got {s:?}"))?;
        set_path(table, k.trim(), parse_value(v.trim()))?;
    }
    Ok(())
}

pub fn into_config(table: Table) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = table.try_into().context("invalid config")?;
    cfg.validate()?;
    Ok(cfg)
}
