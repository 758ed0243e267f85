use serde::{Deserialize, Serialize};

use super::{apply_uniform, trace_row, RetrainConfig, RetrainState};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::eval::Evaluator;
use crate::model::{quantize_fraction, ModelSnapshot};
use crate::policy::sample_indices;
use crate::pruning::{gradient_informed_mask_extending, DEFAULT_ALPHA};
use crate::rng::StreamRng;
use crate::search::PolicyConfig;
use crate::sensitivity::{SensitivityConfig, SensitivityState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradientInformedConfig {
    pub drop_threshold: f64,
    pub init_sparsity: f64,
    pub init_step: f64,
    /// Weight of magnitude against gradient importance.
    pub alpha: f64,
    pub policy: PolicyConfig,
    pub sensitivity: SensitivityConfig,
}

impl Default for GradientInformedConfig {
    fn default() -> Self {
        Self {
            drop_threshold: 1.0,
            init_sparsity: 0.0,
            init_step: 0.05,
            alpha: DEFAULT_ALPHA,
            policy: PolicyConfig::default(),
            sensitivity: SensitivityConfig::default(),
        }
    }
}

impl GradientInformedConfig {
    fn sensitivity_config(&self) -> SensitivityConfig {
        SensitivityConfig {
            initial_step: self.init_step,
            ..self.sensitivity
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.drop_threshold > 0.0 && self.drop_threshold.is_finite()) {
            return Err(Error::Config("drop_threshold must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.init_sparsity) {
            return Err(Error::Config(format!("init_sparsity {} outside [0, 1)", self.init_sparsity)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        self.sensitivity_config().validate()
    }
}

pub(super) fn init(config: &RetrainConfig, state: &mut RetrainState, model: &mut ModelSnapshot) -> Result<()> {
    let g = &config.gradient;
    if g.init_sparsity > 0.0 {
        apply_uniform(model, g.init_sparsity, false)?;
    }
    let sc = g.sensitivity_config();
    state.sensitivities = model
        .layers()
        .iter()
        .map(|l| SensitivityState::new(l.name(), &sc))
        .collect();
    state.policy = Some(g.policy.build(model)?);
    state.rng = Some(StreamRng::derived(config.seed, "retrain/policy").state());
    Ok(())
}

/// Choose a layer, then prune or reverse it by its step with a
/// gradient-informed mask. Returns the touched layer.
pub(super) fn prune_step(
    config: &RetrainConfig,
    state: &mut RetrainState,
    model: &mut ModelSnapshot,
    evaluator: &mut dyn Evaluator,
    epoch: usize,
) -> Result<Option<String>> {
    let g = &config.gradient;
    let mut rng = StreamRng::from_state(
        state
            .rng
            .ok_or_else(|| Error::Precondition("gradient-informed state lacks an rng".into()))?,
    );
    let policy = state
        .policy
        .as_mut()
        .ok_or_else(|| Error::Precondition("gradient-informed state lacks a policy".into()))?;
    let sparsities = model.sparsities();
    let sizes = model.sizes();
    let baseline = state.baseline.top1;
    let eligible: Vec<bool> = sparsities.iter().map(|&s| s < 1.0).collect();
    let sens: Vec<f64> = state.sensitivities.iter().map(SensitivityState::sensitivity).collect();
    let drop_so_far = (baseline - state.last_top1).max(0.0);
    policy.update(&sizes, &sens, &eligible, g.drop_threshold, drop_so_far)?;

    let mut prune = baseline - state.last_top1 <= g.drop_threshold;
    let layer = if prune {
        policy.sample(&mut rng, 1)?[0]
    } else {
        let last = state.last_layers.iter().copied().find(|&i| sparsities[i] > 0.0);
        match last {
            Some(i) => i,
            None => {
                let probs: Vec<f64> = sparsities.iter().map(|&s| if s > 0.0 { 1.0 } else { 0.0 }).collect();
                if probs.iter().any(|&p| p > 0.0) {
                    sample_indices(&probs, &mut rng, 1)?[0]
                } else {
                    prune = true;
                    policy.sample(&mut rng, 1)?[0]
                }
            }
        }
    };
    state.rng = Some(rng.state());

    let name = model.layer(layer).name().to_string();
    let grads = evaluator.gradients(model, &name)?;
    let s = sparsities[layer];
    let step = state.sensitivities[layer].step();
    let q = quantize_fraction(step);
    let target = if prune {
        quantize_fraction((s + q).min(1.0))
    } else {
        quantize_fraction((s - q).max(0.0))
    };
    let prev = model.mask(layer).clone();
    let keep = (prune && config.masking_enabled()).then_some(&prev);
    let mask = gradient_informed_mask_extending(model.layer(layer), target, &grads, g.alpha, keep)?;
    model.set_mask(layer, mask)?;

    let top1 = evaluator.evaluate(model, Split::Test)?.top1;
    state.sensitivities[layer].record_impact(baseline, top1)?;
    state.sensitivities[layer].update_step(g.drop_threshold);
    state.last_top1 = top1;
    state.last_layers = vec![layer];
    state.trace.push(trace_row(
        model,
        epoch,
        vec![name.clone()],
        if prune { "prune" } else { "reverse" },
        0,
        vec![step],
        baseline,
        top1,
        "accept",
    ));
    Ok(Some(name))
}
