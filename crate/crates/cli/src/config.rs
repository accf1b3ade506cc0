//! Run configuration from a JSON file plus command-line overrides.

use std::path::Path;

use pfgen::trainer::RunConfig;
use serde_json::Value;

use crate::error::{io, CliError};

/// Parses a config document. Syntax errors carry their line and column.
pub fn parse_config_text(text: &str, source: &str) -> Result<Value, CliError> {
    let v: Value = serde_json::from_str(text).map_err(|e| CliError::Config(format!("{source}: {e}")))?;
    if !v.is_object() {
        return Err(CliError::Config(format!("{source}: expected a JSON object")));
    }
    Ok(v)
}

fn to_config(v: Value) -> Result<RunConfig, CliError> {
    serde_json::from_value(v).map_err(|e| CliError::Config(e.to_string()))
}

/// Applies one `key=value` override. Dotted keys reach nested objects
/// (`adam.lr=1e-4`); values are parsed as JSON, falling back to a string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override key {key:?} does not name an object field")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Resolves the final config: `base` document, then the paper-scale
/// budget, then overrides in order, then `seed`.
pub fn resolve_config(
    base: Value,
    defaults: &RunConfig,
    overrides: &[String],
    seed: Option<u64>,
    paper_scale: bool,
) -> Result<RunConfig, CliError> {
    let mut doc = serde_json::to_value(defaults).expect("config serializes");
    let fields = base.as_object().cloned().unwrap_or_default();
    for (k, v) in fields {
        doc.as_object_mut().expect("object").insert(k, v);
    }
    let mut cfg = to_config(doc)?;
    if paper_scale {
        cfg = cfg.paper_scale();
    }
    let mut doc = serde_json::to_value(&cfg).expect("config serializes");
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let mut cfg = to_config(doc)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(
    path: Option<&Path>,
    defaults: &RunConfig,
    overrides: &[String],
    seed: Option<u64>,
    paper_scale: bool,
) -> Result<RunConfig, CliError> {
    let base = match path {
        Some(p) => parse_config_text(
            &std::fs::read_to_string(p).map_err(|e| io(p, e))?,
            &p.display().to_string(),
        )?,
        None => Value::Object(Default::default()),
    };
    resolve_config(base, defaults, overrides, seed, paper_scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(text: &str, sets: &[&str]) -> Result<RunConfig, CliError> {
        let sets: Vec<String> = sets.iter().map(|s| s.to_string()).collect();
        resolve_config(
            parse_config_text(text, "cfg")?,
            &RunConfig::default(),
            &sets,
            None,
            false,
        )
    }

    #[test]
    fn malformed_json_reports_location() {
        let e = resolve("{\n  \"steps\": 10,,\n}", &[]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("line 2"), "{e}");
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let e = resolve(r#"{"stepz": 1}"#, &[]).unwrap_err().to_string();
        assert!(
            e.contains("stepz") && e.contains("steps") && e.contains("lambda"),
            "{e}"
        );
    }

    #[test]
    fn overrides_win_over_file() {
        let cfg = resolve(
            r#"{"lambda": 1.0, "steps": 5}"#,
            &["lambda=10", "adam.lr=1e-4", "problem=ring"],
        )
        .unwrap();
        assert_eq!(cfg.lambda, 10.0);
        assert_eq!(cfg.adam.lr, 1e-4);
        assert_eq!(cfg.adam.beta1, 0.5);
        assert_eq!(cfg.problem, "ring");
        assert_eq!(cfg.steps, 5);
    }

    #[test]
    fn paper_scale_then_overrides() {
        let sets = vec!["steps=7".to_string()];
        let cfg = resolve_config(
            Value::Object(Default::default()),
            &RunConfig::default(),
            &sets,
            Some(4),
            true,
        )
        .unwrap();
        assert_eq!(
            (cfg.hidden_layers, cfg.hidden_width, cfg.steps, cfg.seed),
            (5, 128, 7, 4)
        );
    }
}
