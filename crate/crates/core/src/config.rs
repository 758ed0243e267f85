//! Run configuration: a JSON document with dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::eval::{BuiltinConfig, ExternalConfig};
use crate::fixture::FixtureSpec;
use crate::retrain::RetrainConfig;
use crate::search::SearchConfig;
use crate::structural::StructuralConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EvaluatorConfig {
    Builtin(BuiltinConfig),
    External(ExternalConfig),
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        EvaluatorConfig::Builtin(BuiltinConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Importance threshold below which a filter may be pruned.
    pub tau: f64,
    /// Largest tolerated extra top-1 drop before the refinement is undone.
    pub budget: f64,
    /// Layers to analyze; all but the classifier when absent.
    pub layers: Option<Vec<String>>,
    /// Split used to accept or revert the refinement.
    pub split: Split,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            budget: 0.0,
            layers: None,
            split: Split::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    /// Initial masks applied to the model.
    pub masks: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    /// Share of the test split held out as the validation split.
    pub validation_fraction: f64,
    pub evaluator: EvaluatorConfig,
    /// Iterations (or epochs) between checkpoints.
    pub checkpoint_every: usize,
    pub search: SearchConfig,
    pub retrain: RetrainConfig,
    pub structural: StructuralConfig,
    pub analysis: AnalysisConfig,
    pub fixture: FixtureSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: None,
            dataset: None,
            masks: None,
            out: None,
            seed: 0,
            validation_fraction: 0.2,
            evaluator: EvaluatorConfig::default(),
            checkpoint_every: 10,
            search: SearchConfig::default(),
            retrain: RetrainConfig::default(),
            structural: StructuralConfig::default(),
            analysis: AnalysisConfig::default(),
            fixture: FixtureSpec::default(),
        }
    }
}

/// Parse a `key=value` override. Values parse as JSON and fall back to a
/// plain string.
pub fn parse_override(text: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{text}` is not key=value")))?;
    let path: Vec<String> = key.split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override key `{key}` has an empty segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path, value))
}

/// Set `path` inside `doc`, creating intermediate objects.
pub fn set_path(doc: &mut Value, path: &[String], value: Value) -> Result<()> {
    let mut cur = doc;
    for (i, key) in path.iter().enumerate() {
        if !cur.is_object() {
            if cur.is_null() {
                *cur = Value::Object(Map::new());
            } else {
                return Err(Error::Config(format!(
                    "cannot set `{}`: `{}` is not an object",
                    path.join("."),
                    path[..i].join(".")
                )));
            }
        }
        let obj = cur.as_object_mut().expect("checked above");
        if i + 1 == path.len() {
            obj.insert(key.clone(), value);
            return Ok(());
        }
        cur = obj.entry(key.clone()).or_insert(Value::Null);
    }
    Ok(())
}

impl RunConfig {
    /// File contents (if any) overlaid with dotted overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => Value::Object(Map::new()),
        };
        for o in overrides {
            let (path, value) = parse_override(o)?;
            set_path(&mut doc, &path, value)?;
        }
        let config: RunConfig =
            serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1]".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.analysis.tau) || self.analysis.budget < 0.0 {
            return Err(Error::Config("analysis.tau must lie in [0, 1) and budget be non-negative".into()));
        }
        self.search.validate()?;
        self.retrain.validate()?;
        self.structural.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_build_nested_objects() {
        let c = RunConfig::load(None, &["search.iterations=7".into(), "search.sa.enabled=false".into()]).unwrap();
        assert_eq!(c.search.iterations, 7);
        assert!(!c.search.sa.enabled);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::load(None, &["serch.iterations=7".into()]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::load(None, &["search.iters=7".into()]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::load(None, &["noequals".into()]), Err(Error::Config(_))));
    }

    #[test]
    fn evaluator_variants() {
        let c = RunConfig::load(
            None,
            &["evaluator={\"kind\":\"external\",\"command\":[\"python3\",\"x.py\"]}".into()],
        )
        .unwrap();
        assert!(matches!(c.evaluator, EvaluatorConfig::External(ref e) if e.command.len() == 2));
        let c = RunConfig::load(None, &["evaluator.kind=builtin".into(), "evaluator.eval_samples=10".into()]).unwrap();
        assert!(matches!(c.evaluator, EvaluatorConfig::Builtin(ref b) if b.eval_samples == Some(10)));
    }

    #[test]
    fn string_fallback() {
        let (p, v) = parse_override("model=some/dir").unwrap();
        assert_eq!(p, vec!["model"]);
        assert_eq!(v, Value::String("some/dir".into()));
    }
}
