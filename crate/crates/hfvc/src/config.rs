//! Experiment configuration file and `--set key.path=value` overrides.

use std::path::Path;

use hfvc_core::synthdata::CorpusSpec;
use hfvc_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};
use crate::formats::read_text;

/// Top-level config document. Every field is optional; missing fields take
/// the library defaults and unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| CliError::input(format!("config: {e}")))?;
        Self::from_value(value)
    }

    fn from_value(value: Value) -> CliResult<Self> {
        let cfg: Self = serde_json::from_value(value).map_err(|e| CliError::input(format!("config: {e}")))?;
        cfg.corpus
            .validate()
            .map_err(|e| CliError::input(format!("config corpus: {e}")))?;
        cfg.train
            .validate()
            .map_err(|e| CliError::input(format!("config train: {e}")))?;
        Ok(cfg)
    }

    /// Loads `path` (defaults when `None`) and applies `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut value = match path {
            Some(p) => {
                serde_json::from_str(&read_text(p)?).map_err(|e| CliError::input(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(Self::default()).expect("defaults serialize"),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }
}

/// Sets `section.field[.sub]` to a JSON value; bare words are taken as
/// strings. Unknown paths are rejected with the offending key.
pub fn apply_override(root: &mut Value, assignment: &str) -> CliResult<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::input(format!("override `{assignment}` is not key=value")))?;
    let new: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            CliError::input(format!(
                "override key `{path}`: `{}` is not a section",
                keys[..i].join(".")
            ))
        })?;
        if i + 1 == keys.len() {
            // Missing leaves are allowed here; deserialization rejects them
            // if they are not real fields.
            obj.insert((*key).to_string(), new);
            return Ok(());
        }
        node = obj
            .entry((*key).to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err(CliError::input(format!("override key `{path}` is empty")))
}
