use serde::{Deserialize, Serialize};

use super::{trace_row, RetrainConfig, RetrainState};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::eval::Evaluator;
use crate::model::{quantize_fraction, ModelSnapshot};
use crate::policy::PrioritySelector;
use crate::pruning::magnitude_mask_extending;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoostConfig {
    pub priority: PrioritySelector,
    pub scales: usize,
    pub steps: usize,
    pub step_value: f64,
    pub reduction_factor: f64,
    /// Validation top-1 drop that rejects a prune attempt.
    pub threshold0: f64,
    /// Rejections after which a layer is skipped for good.
    pub threshold1: usize,
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self {
            priority: PrioritySelector::Largest { largest: 5 },
            scales: 2,
            steps: 12,
            step_value: 0.05,
            reduction_factor: 0.5,
            threshold0: 1.0,
            threshold1: 3,
        }
    }
}

impl BoostConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_value > 0.0 && self.step_value <= 1.0) {
            return Err(Error::Config(format!("step_value {} outside (0, 1]", self.step_value)));
        }
        if !(self.reduction_factor > 0.0 && self.reduction_factor < 1.0) {
            return Err(Error::Config(format!(
                "reduction_factor {} outside (0, 1)",
                self.reduction_factor
            )));
        }
        if !(self.threshold0 > 0.0) {
            return Err(Error::Config("threshold0 must be positive".into()));
        }
        if self.threshold1 == 0 {
            return Err(Error::Config("threshold1 must be at least 1".into()));
        }
        Ok(())
    }
}

pub(super) fn init(
    config: &RetrainConfig,
    state: &mut RetrainState,
    model: &ModelSnapshot,
    evaluator: &mut dyn Evaluator,
) -> Result<()> {
    state.priority_list = config.boost.priority.resolve(model)?;
    state.baseline_validation = Some(evaluator.evaluate(model, Split::Validation)?.top1);
    for name in &state.priority_list {
        state.skip_counts.insert(name.clone(), 0);
    }
    Ok(())
}

/// Prune attempts over the priority list for one epoch.
pub(super) fn epoch(
    config: &RetrainConfig,
    state: &mut RetrainState,
    model: &mut ModelSnapshot,
    evaluator: &mut dyn Evaluator,
    epoch: usize,
) -> Result<()> {
    let boost = &config.boost;
    let masking = config.masking_enabled();
    let base = state
        .baseline_validation
        .ok_or_else(|| Error::Precondition("boosted state lacks a validation baseline".into()))?;
    for name in state.priority_list.clone() {
        if state.permanently_skipped.contains(&name) {
            state
                .trace
                .push(trace_row(model, epoch, vec![name], "skip", 0, Vec::new(), base, base, "permanent"));
            continue;
        }
        let idx = model.layer_index(&name)?;
        let mut step = boost.step_value;
        let mut attempt = 0;
        'layer: for _scale in 0..boost.scales {
            for _ in 0..boost.steps {
                let s = model.mask(idx).target();
                if s >= 1.0 {
                    break 'layer;
                }
                let prev = model.mask(idx).clone();
                let next = quantize_fraction((s + step).min(1.0));
                if masking {
                    let mask = magnitude_mask_extending(model.layer(idx), next, &prev)?;
                    model.set_mask(idx, mask)?;
                } else {
                    model.set_layer_sparsity(idx, next)?;
                }
                let top1 = evaluator.evaluate(model, Split::Validation)?.top1;
                attempt += 1;
                if base - top1 >= boost.threshold0 {
                    model.set_mask(idx, prev)?;
                    let count = state.skip_counts.entry(name.clone()).or_insert(0);
                    *count += 1;
                    let accepted = if *count >= boost.threshold1 {
                        state.permanently_skipped.insert(name.clone());
                        "permanent"
                    } else {
                        "revert"
                    };
                    state.trace.push(trace_row(
                        model,
                        epoch,
                        vec![name.clone()],
                        "prune",
                        attempt,
                        vec![step],
                        base,
                        top1,
                        accepted,
                    ));
                    break 'layer;
                }
                state.trace.push(trace_row(
                    model,
                    epoch,
                    vec![name.clone()],
                    "prune",
                    attempt,
                    vec![step],
                    base,
                    top1,
                    "accept",
                ));
            }
            step *= boost.reduction_factor;
        }
    }
    Ok(())
}
