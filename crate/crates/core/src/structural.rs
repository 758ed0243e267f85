//! Iterative channel removal with retraining.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::eval::{require, Evaluator, RetrainRequest};
use crate::model::{weighted_sparsity, LayerKind, ModelSnapshot};
use crate::pruning::{remaining_channels, remove_channels};
use crate::retrain::trace_row;
use crate::rng::derive_seed;
use crate::trace::TraceRow;

pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StructuralConfig {
    /// Fraction of each layer's remaining channels removed per iteration.
    pub fraction_per_iter: f64,
    pub drop_budget: f64,
    pub retrain_epochs: usize,
    pub learning_rate: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for StructuralConfig {
    fn default() -> Self {
        Self {
            fraction_per_iter: 0.1,
            drop_budget: 1.0,
            retrain_epochs: 1,
            learning_rate: 0.01,
            max_iterations: 50,
            seed: 0,
        }
    }
}

impl StructuralConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction_per_iter > 0.0 && self.fraction_per_iter < 1.0) {
            return Err(Error::Config(format!(
                "fraction_per_iter {} outside (0, 1)",
                self.fraction_per_iter
            )));
        }
        if !(self.drop_budget >= 0.0 && self.drop_budget.is_finite()) {
            return Err(Error::Config("drop_budget must be non-negative".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralRunState {
    pub version: u32,
    /// Completed iterations, accepted or not.
    pub iteration: usize,
    pub removed_channels: BTreeMap<String, Vec<usize>>,
    pub current_top1: f64,
    pub baseline_top1: f64,
    pub drop_budget: f64,
    pub finished: bool,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerChannels {
    pub total: usize,
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSummary {
    pub layers: BTreeMap<String, LayerChannels>,
    /// Removed conv channels over all conv channels.
    pub channel_fraction_removed: f64,
    /// Weighted sparsity of the final model.
    pub parameter_fraction_removed: f64,
}

pub fn channel_summary(model: &ModelSnapshot) -> ChannelSummary {
    let mut layers = BTreeMap::new();
    let (mut total, mut remaining) = (0usize, 0usize);
    for i in 0..model.layer_count() {
        let l = model.layer(i);
        if l.kind() != LayerKind::Conv2d {
            continue;
        }
        let r = remaining_channels(model, i).len();
        total += l.out_channels();
        remaining += r;
        layers.insert(
            l.name().to_string(),
            LayerChannels {
                total: l.out_channels(),
                remaining: r,
            },
        );
    }
    ChannelSummary {
        layers,
        channel_fraction_removed: if total == 0 { 0.0 } else { (total - remaining) as f64 / total as f64 },
        parameter_fraction_removed: weighted_sparsity(model),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralOutcome {
    pub state: StructuralRunState,
    pub summary: ChannelSummary,
}

/// Evaluate the baseline and build the initial state.
pub fn start_structural(
    model: &ModelSnapshot,
    evaluator: &mut dyn Evaluator,
    config: &StructuralConfig,
) -> Result<StructuralRunState> {
    config.validate()?;
    require(evaluator.capabilities().retrain, "retrain")?;
    if !model.layers().iter().any(|l| l.kind() == LayerKind::Conv2d) {
        return Err(Error::Precondition("structural pruning needs conv2d layers".into()));
    }
    let baseline = evaluator.evaluate(model, Split::Test)?.top1;
    Ok(StructuralRunState {
        version: STATE_VERSION,
        iteration: 0,
        removed_channels: BTreeMap::new(),
        current_top1: baseline,
        baseline_top1: baseline,
        drop_budget: config.drop_budget,
        finished: config.max_iterations == 0,
        trace: Vec::new(),
    })
}

/// One removal + retrain + accept-or-revert iteration.
pub fn structural_iteration(
    model: &mut ModelSnapshot,
    evaluator: &mut dyn Evaluator,
    config: &StructuralConfig,
    state: &mut StructuralRunState,
) -> Result<()> {
    if state.finished {
        return Ok(());
    }
    let iteration = state.iteration + 1;
    let snapshot = model.clone();
    let mut removed: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for i in 0..model.layer_count() {
        if model.layer(i).kind() != LayerKind::Conv2d || remaining_channels(model, i).len() <= 1 {
            continue;
        }
        let name = model.layer(i).name().to_string();
        match remove_channels(model, &name, config.fraction_per_iter) {
            Ok(r) => {
                removed.insert(name, r);
            }
            Err(Error::Refused(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if removed.is_empty() {
        state.finished = true;
        state.iteration = iteration;
        return Ok(());
    }
    let outcome = evaluator.retrain(
        model,
        &RetrainRequest {
            epochs: config.retrain_epochs,
            learning_rate: config.learning_rate,
            masking: true,
            seed: derive_seed(config.seed, &format!("structural/{iteration}")),
        },
    )?;
    let top1 = if config.retrain_epochs == 0 {
        evaluator.evaluate(model, Split::Test)?.top1
    } else {
        outcome.result.top1
    };
    let layers: Vec<String> = removed.keys().cloned().collect();
    let steps = removed.values().map(|r| r.len() as f64).collect();
    let accept = state.baseline_top1 - top1 <= config.drop_budget;
    if accept {
        for (l, r) in removed {
            let entry = state.removed_channels.entry(l).or_default();
            entry.extend(r);
            entry.sort_unstable();
        }
        state.current_top1 = top1;
    } else {
        *model = snapshot;
        state.finished = true;
    }
    state.trace.push(trace_row(
        model,
        iteration,
        layers,
        "remove",
        0,
        steps,
        state.baseline_top1,
        top1,
        if accept { "accept" } else { "revert" },
    ));
    state.iteration = iteration;
    if state.iteration >= config.max_iterations {
        state.finished = true;
    }
    Ok(())
}

/// Remove channels until a retrained iteration exceeds the drop budget.
pub fn run_structural(
    model: &mut ModelSnapshot,
    evaluator: &mut dyn Evaluator,
    config: &StructuralConfig,
) -> Result<StructuralOutcome> {
    let mut state = start_structural(model, evaluator, config)?;
    while !state.finished {
        structural_iteration(model, evaluator, config, &mut state)?;
    }
    Ok(StructuralOutcome {
        summary: channel_summary(model),
        state,
    })
}
