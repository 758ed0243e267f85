use serde::{Deserialize, Serialize};

use super::{
    ActivationReport, EvaluationResult, Evaluator, FilterMeans, RetrainOutcome, RetrainRequest,
    TrainerCapabilities,
};
use crate::data::{DataBundle, Split};
use crate::engine::{self, SgdConfig, TrainOptions};
use crate::error::{Error, Result};
use crate::model::ModelSnapshot;
use crate::pruning::GradientStats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuiltinConfig {
    /// Evaluate on the first N samples of a split instead of all of them.
    pub eval_samples: Option<usize>,
    pub sgd: SgdConfig,
    /// Mini-batch size for gradient statistics.
    pub gradient_batch: usize,
    /// Split used for activation statistics.
    pub analysis_split: Split,
}

impl Default for BuiltinConfig {
    fn default() -> Self {
        Self {
            eval_samples: None,
            sgd: SgdConfig::default(),
            gradient_batch: 32,
            analysis_split: Split::Test,
        }
    }
}

/// Evaluator backed by the in-process engine.
#[derive(Debug, Clone)]
pub struct BuiltinEvaluator {
    data: DataBundle,
    config: BuiltinConfig,
}

impl BuiltinEvaluator {
    pub fn new(data: DataBundle, config: BuiltinConfig) -> Self {
        Self { data, config }
    }

    pub fn data(&self) -> &DataBundle {
        &self.data
    }

    pub fn config(&self) -> &BuiltinConfig {
        &self.config
    }
}

impl Evaluator for BuiltinEvaluator {
    fn capabilities(&self) -> TrainerCapabilities {
        TrainerCapabilities {
            gradients: true,
            retrain: true,
            activations: true,
        }
    }

    fn evaluate(&mut self, model: &ModelSnapshot, split: Split) -> Result<EvaluationResult> {
        engine::evaluate(model, self.data.get(split), self.config.eval_samples)
    }

    fn retrain(&mut self, model: &mut ModelSnapshot, request: &RetrainRequest) -> Result<RetrainOutcome> {
        let opts = TrainOptions {
            epochs: request.epochs,
            learning_rate: request.learning_rate,
            masking: request.masking,
            seed: request.seed,
        };
        let epoch_losses =
            engine::train_epochs(model, self.data.get(Split::Train), &opts, &self.config.sgd)?;
        let result = self.evaluate(model, Split::Test)?;
        Ok(RetrainOutcome {
            epoch_losses,
            result,
        })
    }

    fn gradients(&mut self, model: &ModelSnapshot, layer: &str) -> Result<GradientStats> {
        let idx = model.layer_index(layer)?;
        let mut all =
            engine::mean_abs_gradients(model, self.data.get(Split::Train), self.config.gradient_batch)?;
        GradientStats::new(layer, all.swap_remove(idx))
    }

    fn activations(
        &mut self,
        model: &ModelSnapshot,
        layer: &str,
        class: Option<usize>,
    ) -> Result<FilterMeans> {
        let idx = model.layer_index(layer)?;
        let summary =
            engine::activation_summary(model, self.data.get(self.config.analysis_split), &[idx])?;
        match class {
            None => Ok(summary.global[&idx].clone()),
            Some(c) => summary
                .per_class
                .get(&c)
                .map(|m| m[&idx].clone())
                .ok_or_else(|| Error::Dataset(format!("class {c} absent from analysis split"))),
        }
    }

    fn activation_report(
        &mut self,
        model: &ModelSnapshot,
        layers: &[String],
        classes: &[usize],
    ) -> Result<ActivationReport> {
        let idx: Vec<usize> = layers
            .iter()
            .map(|l| model.layer_index(l))
            .collect::<Result<_>>()?;
        let summary =
            engine::activation_summary(model, self.data.get(self.config.analysis_split), &idx)?;
        let name = |i: &usize| model.layer(*i).name().to_string();
        Ok(ActivationReport {
            global: summary.global.iter().map(|(i, v)| (name(i), v.clone())).collect(),
            per_class: summary
                .per_class
                .iter()
                .filter(|(c, _)| classes.contains(c))
                .map(|(c, m)| (*c, m.iter().map(|(i, v)| (name(i), v.clone())).collect()))
                .collect(),
        })
    }

    fn classes(&self) -> Option<Vec<usize>> {
        Some(self.data.get(self.config.analysis_split).classes_present())
    }
}
