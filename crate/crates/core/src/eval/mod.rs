//! Accuracy, gradient and activation oracles.
//!
//! [`Evaluator`] abstracts over the built-in engine ([`BuiltinEvaluator`])
//! and an external process speaking the line-delimited JSON protocol
//! ([`ExternalSession`]).

mod builtin;
mod external;
pub mod protocol;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use builtin::{BuiltinConfig, BuiltinEvaluator};
pub use external::{ExternalConfig, ExternalSession};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::ModelSnapshot;
use crate::pruning::GradientStats;

/// Accuracies in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub top1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top5: Option<f64>,
    #[serde(default)]
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrainerCapabilities {
    pub gradients: bool,
    pub retrain: bool,
    pub activations: bool,
}

/// One retraining request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrainRequest {
    pub epochs: usize,
    pub learning_rate: f64,
    pub masking: bool,
    /// Seed for data shuffling in this call.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrainOutcome {
    pub epoch_losses: Vec<f64>,
    pub result: EvaluationResult,
}

/// Per-filter activation means for one layer, optionally for one class.
pub type FilterMeans = Vec<f64>;

/// Global and per-class per-filter activation means for a set of layers.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ActivationReport {
    pub global: BTreeMap<String, FilterMeans>,
    pub per_class: BTreeMap<usize, BTreeMap<String, FilterMeans>>,
}

pub trait Evaluator {
    fn capabilities(&self) -> TrainerCapabilities;

    /// Accuracy of the masked model on a split.
    fn evaluate(&mut self, model: &ModelSnapshot, split: Split) -> Result<EvaluationResult>;

    /// Train the masked model in place; returns the post-training test
    /// accuracy.
    fn retrain(&mut self, model: &mut ModelSnapshot, request: &RetrainRequest) -> Result<RetrainOutcome>;

    /// Mean |gradient| per weight of one layer.
    fn gradients(&mut self, model: &ModelSnapshot, layer: &str) -> Result<GradientStats>;

    /// Per-filter mean activation of `layer`, over all samples or those of
    /// `class`.
    fn activations(
        &mut self,
        model: &ModelSnapshot,
        layer: &str,
        class: Option<usize>,
    ) -> Result<FilterMeans>;

    /// Activation means for several layers over all classes present.
    fn activation_report(
        &mut self,
        model: &ModelSnapshot,
        layers: &[String],
        classes: &[usize],
    ) -> Result<ActivationReport> {
        let mut report = ActivationReport::default();
        for l in layers {
            report.global.insert(l.clone(), self.activations(model, l, None)?);
            for &c in classes {
                let m = self.activations(model, l, Some(c))?;
                report.per_class.entry(c).or_default().insert(l.clone(), m);
            }
        }
        Ok(report)
    }

    /// Classes present in the evaluation split, when known.
    fn classes(&self) -> Option<Vec<usize>> {
        None
    }
}

pub(crate) fn require(cap: bool, name: &'static str) -> Result<()> {
    if cap {
        Ok(())
    } else {
        Err(Error::Capability(name))
    }
}
