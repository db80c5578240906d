//! Config files are flat TOML tables whose keys are [`RunConfig`] fields.
//! `--set key=value` overrides are applied on top, then the result is validated.

use std::fs;
use std::path::Path;

use tfsod_detector::RunConfig;

use crate::HarnessError;

/// Parses one `key=value` override. The value is read as a TOML literal and
/// falls back to a bare string, so `combine_op=max` and `thre_cls=0.5` both work.
pub fn parse_override(s: &str) -> Result<(String, toml::Value), HarnessError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(vec![format!("override `{s}` is not key=value")]))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(HarnessError::Config(vec![format!("override `{s}` has an empty key")]));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Builds a validated config from an optional file plus overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, HarnessError> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|source| HarnessError::MissingArtifact {
                path: p.to_path_buf(),
                source: Some(source),
            })?;
            toml::from_str::<toml::Table>(&text)
                .map_err(|e| HarnessError::Config(vec![format!("{}: {e}", p.display())]))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        let (k, v) = parse_override(o)?;
        table.insert(k, v);
    }
    config_from_table(table)
}

pub fn config_from_table(table: toml::Table) -> Result<RunConfig, HarnessError> {
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| HarnessError::Config(vec![e.message().to_string()]))?;
    let issues = cfg.validate();
    if issues.is_empty() {
        Ok(cfg)
    } else {
        Err(HarnessError::Config(issues.iter().map(|i| i.to_string()).collect()))
    }
}

/// Applies `key=value` overrides to an existing config.
pub fn with_overrides(cfg: &RunConfig, overrides: &[String]) -> Result<RunConfig, HarnessError> {
    let mut table = toml::Table::try_from(cfg).expect("config serializes to a table");
    for o in overrides {
        let (k, v) = parse_override(o)?;
        table.insert(k, v);
    }
    config_from_table(table)
}

/// The config as a flat TOML document, every key present.
pub fn to_toml(cfg: &RunConfig) -> String {
    toml::to_string(cfg).expect("config serializes")
}
