//! Retraining schedules: simple, progressive, boosted, and
//! gradient-informed pruning with retraining.

mod boosted;
mod gradient;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use boosted::BoostConfig;
pub use gradient::GradientInformedConfig;

use crate::data::Split;
use crate::error::{Error, Result};
use crate::eval::{require, EvaluationResult, Evaluator, RetrainRequest};
use crate::model::{quantize_fraction, weighted_sparsity_of, ModelSnapshot, PruneMask};
use crate::policy::LayerPolicy;
use crate::pruning::magnitude_mask_extending;
use crate::rng::{derive_seed, RngState};
use crate::sensitivity::SensitivityState;
use crate::trace::TraceRow;

pub const STATE_VERSION: u32 = 1;

/// Zero the gradient entries at pruned positions.
pub fn apply_gradient_mask(gradients: &[f32], mask: &PruneMask) -> Result<Vec<f32>> {
    let mut out = gradients.to_vec();
    mask_gradients_in_place(&mut out, mask)?;
    Ok(out)
}

/// In-place form of [`apply_gradient_mask`].
pub fn mask_gradients_in_place(gradients: &mut [f32], mask: &PruneMask) -> Result<()> {
    if gradients.len() != mask.len() {
        return Err(Error::Contract(format!(
            "{} gradients for a mask of {} bits",
            gradients.len(),
            mask.len()
        )));
    }
    if mask.pruned_count() == 0 {
        return Ok(());
    }
    for (w, chunk) in mask.words().iter().zip(gradients.chunks_mut(64)) {
        if *w == u64::MAX {
            continue;
        }
        for (b, g) in chunk.iter_mut().enumerate() {
            if (w >> b) & 1 == 0 {
                *g = 0.0;
            }
        }
    }
    Ok(())
}

/// True when every layer of `after` prunes at least what `before` prunes.
pub fn masks_monotone(before: &[PruneMask], after: &[PruneMask]) -> bool {
    before.len() == after.len() && before.iter().zip(after).all(|(b, a)| a.prunes_superset_of(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainMode {
    /// Retrain the given masks; `masking` decides whether gradients are masked.
    Simple,
    /// Retrain the given masks with gradient masking.
    SimpleMasked,
    /// Uniform sparsity `start + increment * epoch` before each epoch.
    Progressive,
    /// Priority-list pruning with skip counting, retraining between epochs.
    Boosted,
    /// Policy-driven gradient-informed pruning, retraining every epoch.
    #[default]
    GradientInformed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrainConfig {
    pub mode: RetrainMode,
    pub masking: bool,
    pub epochs: usize,
    pub learning_rate: f64,
    pub progressive_start: f64,
    pub progressive_increment: f64,
    pub boost: BoostConfig,
    pub gradient: GradientInformedConfig,
    pub seed: u64,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            mode: RetrainMode::default(),
            masking: true,
            epochs: 30,
            learning_rate: 0.01,
            progressive_start: 0.1,
            progressive_increment: 0.01,
            boost: BoostConfig::default(),
            gradient: GradientInformedConfig::default(),
            seed: 0,
        }
    }
}

impl RetrainConfig {
    pub fn masking_enabled(&self) -> bool {
        self.mode == RetrainMode::SimpleMasked || self.masking
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.mode == RetrainMode::Progressive {
            progressive_target(self.progressive_start, self.progressive_increment, self.epochs)?;
            if self.progressive_start < 0.0 || self.progressive_increment < 0.0 {
                return Err(Error::Config("progressive schedule must be non-negative".into()));
            }
        }
        if self.mode == RetrainMode::Boosted {
            self.boost.validate()?;
        }
        if self.mode == RetrainMode::GradientInformed {
            self.gradient.validate()?;
        }
        Ok(())
    }

    fn epoch_seed(&self, epoch: usize) -> u64 {
        derive_seed(self.seed, &format!("retrain/epoch/{epoch}"))
    }
}

/// Uniform sparsity of a progressive schedule at 1-based `epoch`.
pub fn progressive_target(start: f64, increment: f64, epoch: usize) -> Result<f64> {
    let t = quantize_fraction(start + increment * epoch as f64);
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!(
            "progressive sparsity {t} at epoch {epoch} outside [0, 1]"
        )));
    }
    Ok(t)
}

/// Post-search bookkeeping of the best feasible retrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: usize,
    pub result: EvaluationResult,
    pub fitness: f64,
}

/// Resumable state of a retraining run. Fields a mode does not use stay
/// at their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainState {
    pub version: u32,
    pub mode: RetrainMode,
    /// Completed epochs.
    pub epoch: usize,
    pub baseline: EvaluationResult,
    pub baseline_validation: Option<f64>,
    pub trace: Vec<TraceRow>,
    pub epoch_losses: Vec<f64>,
    pub last_result: EvaluationResult,
    pub skip_counts: BTreeMap<String, usize>,
    pub permanently_skipped: BTreeSet<String>,
    pub priority_list: Vec<String>,
    pub sensitivities: Vec<SensitivityState>,
    pub policy: Option<LayerPolicy>,
    pub rng: Option<RngState>,
    /// Top-1 measured right after the latest pruning move.
    pub last_top1: f64,
    pub last_layers: Vec<usize>,
    pub best: Option<BestRecord>,
}

/// Final artifacts of a retraining run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub mode: RetrainMode,
    pub baseline: EvaluationResult,
    pub final_result: EvaluationResult,
    pub weighted_sparsity: f64,
    pub sparsities: Vec<f64>,
    pub epochs: usize,
    pub epoch_losses: Vec<f64>,
    pub trace: Vec<TraceRow>,
}

/// A retraining run that can stop at any epoch boundary and resume.
#[derive(Debug, Clone)]
pub struct Retrainer {
    config: RetrainConfig,
    state: RetrainState,
    model: ModelSnapshot,
    best_model: Option<ModelSnapshot>,
}

impl Retrainer {
    pub fn new(model: ModelSnapshot, evaluator: &mut dyn Evaluator, config: RetrainConfig) -> Result<Self> {
        config.validate()?;
        let caps = evaluator.capabilities();
        require(caps.retrain, "retrain")?;
        if config.mode == RetrainMode::GradientInformed {
            require(caps.gradients, "gradients")?;
        }
        let baseline = evaluator.evaluate(&model, Split::Test)?;
        let mut state = RetrainState {
            version: STATE_VERSION,
            mode: config.mode,
            epoch: 0,
            baseline,
            baseline_validation: None,
            trace: Vec::new(),
            epoch_losses: Vec::new(),
            last_result: baseline,
            skip_counts: BTreeMap::new(),
            permanently_skipped: BTreeSet::new(),
            priority_list: Vec::new(),
            sensitivities: Vec::new(),
            policy: None,
            rng: None,
            last_top1: baseline.top1,
            last_layers: Vec::new(),
            best: None,
        };
        let mut model = model;
        let mut best_model = None;
        match config.mode {
            RetrainMode::Boosted => boosted::init(&config, &mut state, &model, evaluator)?,
            RetrainMode::GradientInformed => {
                state.best = Some(BestRecord {
                    epoch: 0,
                    result: baseline,
                    fitness: weighted_sparsity_of(&model.sizes(), &model.sparsities()),
                });
                best_model = Some(model.clone());
                gradient::init(&config, &mut state, &mut model)?;
            }
            _ => {}
        }
        Ok(Self {
            config,
            state,
            model,
            best_model,
        })
    }

    /// Continue from a saved state. `model` is the model at the saved epoch
    /// boundary and `best_model` the best snapshot saved with it.
    pub fn resume(
        config: RetrainConfig,
        state: RetrainState,
        model: ModelSnapshot,
        best_model: Option<ModelSnapshot>,
    ) -> Result<Self> {
        config.validate()?;
        if state.version != STATE_VERSION {
            return Err(Error::Version {
                found: state.version,
                supported: STATE_VERSION,
            });
        }
        if state.mode != config.mode {
            return Err(Error::Precondition("checkpoint was written by a different retrain mode".into()));
        }
        if state.best.is_some() && best_model.is_none() {
            return Err(Error::Precondition("checkpoint is missing its best model".into()));
        }
        Ok(Self {
            config,
            state,
            model,
            best_model,
        })
    }

    pub fn state(&self) -> &RetrainState {
        &self.state
    }

    pub fn config(&self) -> &RetrainConfig {
        &self.config
    }

    pub fn model(&self) -> &ModelSnapshot {
        &self.model
    }

    pub fn best_model(&self) -> Option<&ModelSnapshot> {
        self.best_model.as_ref()
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.config.epochs
    }

    /// Run one epoch of the configured schedule.
    pub fn step_epoch(&mut self, evaluator: &mut dyn Evaluator) -> Result<()> {
        let epoch = self.state.epoch + 1;
        match self.config.mode {
            RetrainMode::Simple | RetrainMode::SimpleMasked => self.simple_epoch(evaluator, epoch)?,
            RetrainMode::Progressive => self.progressive_epoch(evaluator, epoch)?,
            RetrainMode::Boosted => {
                boosted::epoch(&self.config, &mut self.state, &mut self.model, evaluator, epoch)?;
                self.retrain(evaluator, epoch, None)?;
            }
            RetrainMode::GradientInformed => {
                let layer = gradient::prune_step(&self.config, &mut self.state, &mut self.model, evaluator, epoch)?;
                let result = self.retrain(evaluator, epoch, layer.as_deref())?;
                self.track_best(epoch, result);
            }
        }
        self.state.epoch = epoch;
        Ok(())
    }

    /// Run the remaining epochs, calling `on_epoch` after each one.
    pub fn run(
        &mut self,
        evaluator: &mut dyn Evaluator,
        on_epoch: &mut dyn FnMut(&Retrainer) -> Result<()>,
    ) -> Result<()> {
        while !self.is_done() {
            self.step_epoch(evaluator)?;
            on_epoch(self)?;
        }
        Ok(())
    }

    /// The model the schedule hands back: the best feasible snapshot for
    /// gradient-informed runs that found one, otherwise the final model.
    pub fn result_model(&self) -> &ModelSnapshot {
        match (&self.config.mode, &self.best_model) {
            (RetrainMode::GradientInformed, Some(best)) => best,
            _ => &self.model,
        }
    }

    pub fn report(&self) -> ScheduleReport {
        let model = self.result_model();
        let final_result = match (&self.config.mode, &self.state.best) {
            (RetrainMode::GradientInformed, Some(best)) => best.result,
            _ => self.state.last_result,
        };
        let sparsities = model.sparsities();
        ScheduleReport {
            mode: self.config.mode,
            baseline: self.state.baseline,
            final_result,
            weighted_sparsity: weighted_sparsity_of(&model.sizes(), &sparsities),
            sparsities,
            epochs: self.state.epoch,
            epoch_losses: self.state.epoch_losses.clone(),
            trace: self.state.trace.clone(),
        }
    }

    fn retrain(&mut self, evaluator: &mut dyn Evaluator, epoch: usize, layer: Option<&str>) -> Result<EvaluationResult> {
        let masking = self.config.masking_enabled();
        let before: Vec<PruneMask> = self.model.masks().to_vec();
        let outcome = evaluator.retrain(
            &mut self.model,
            &RetrainRequest {
                epochs: 1,
                learning_rate: self.config.learning_rate,
                masking,
                seed: self.config.epoch_seed(epoch),
            },
        )?;
        if masking && !masks_monotone(&before, self.model.masks()) {
            return Err(Error::Contract("masked retraining shrank a pruned set".into()));
        }
        self.state.epoch_losses.extend(&outcome.epoch_losses);
        self.state.last_result = outcome.result;
        let row = trace_row(
            &self.model,
            epoch,
            layer.map(str::to_string).into_iter().collect(),
            "retrain",
            0,
            Vec::new(),
            self.state.baseline.top1,
            outcome.result.top1,
            "accept",
        );
        self.state.trace.push(row);
        Ok(outcome.result)
    }

    fn track_best(&mut self, epoch: usize, result: EvaluationResult) {
        let threshold = self.config.gradient.drop_threshold;
        if self.state.baseline.top1 - result.top1 > threshold {
            return;
        }
        let fitness = weighted_sparsity_of(&self.model.sizes(), &self.model.sparsities());
        if self.state.best.as_ref().is_none_or(|b| fitness > b.fitness) {
            self.state.best = Some(BestRecord { epoch, result, fitness });
            self.best_model = Some(self.model.clone());
        }
    }

    fn simple_epoch(&mut self, evaluator: &mut dyn Evaluator, epoch: usize) -> Result<()> {
        self.retrain(evaluator, epoch, None)?;
        Ok(())
    }

    fn progressive_epoch(&mut self, evaluator: &mut dyn Evaluator, epoch: usize) -> Result<()> {
        let target = progressive_target(
            self.config.progressive_start,
            self.config.progressive_increment,
            epoch,
        )?;
        apply_uniform(&mut self.model, target, self.config.masking_enabled())?;
        self.retrain(evaluator, epoch, None)?;
        Ok(())
    }

    pub fn into_parts(self) -> (ModelSnapshot, Option<ModelSnapshot>, RetrainState) {
        (self.model, self.best_model, self.state)
    }
}

/// Set every layer to `target`. With `extend`, bits already pruned stay
/// pruned while the target count allows it.
pub fn apply_uniform(model: &mut ModelSnapshot, target: f64, extend: bool) -> Result<()> {
    for i in 0..model.layer_count() {
        if extend {
            let mask = magnitude_mask_extending(model.layer(i), target, model.mask(i))?;
            model.set_mask(i, mask)?;
        } else {
            model.set_layer_sparsity(i, target)?;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn trace_row(
    model: &ModelSnapshot,
    epoch: usize,
    layers: Vec<String>,
    action: &str,
    attempt: usize,
    steps: Vec<f64>,
    baseline_top1: f64,
    top1: f64,
    accepted: &str,
) -> TraceRow {
    let sparsities = model.sparsities();
    let layer_sparsities = layers
        .iter()
        .filter_map(|l| model.layer_index(l).ok())
        .map(|i| sparsities[i])
        .collect();
    TraceRow {
        iteration: epoch,
        layers,
        action: action.into(),
        attempt,
        steps,
        drop: baseline_top1 - top1,
        layer_sparsities,
        fitness: weighted_sparsity_of(&model.sizes(), &sparsities),
        sparsities,
        top1,
        accepted: accepted.into(),
        temperature: 0.0,
    }
}

/// Retrain `epochs` epochs on the current masks.
pub fn run_simple(
    model: &mut ModelSnapshot,
    evaluator: &mut dyn Evaluator,
    epochs: usize,
    learning_rate: f64,
    masking: bool,
    seed: u64,
) -> Result<ScheduleReport> {
    run_mode(
        model,
        evaluator,
        RetrainConfig {
            mode: RetrainMode::Simple,
            masking,
            epochs,
            learning_rate,
            seed,
            ..RetrainConfig::default()
        },
    )
}

/// Uniform sparsity `start + increment * e` before epoch `e` (1-based).
#[allow(clippy::too_many_arguments)]
pub fn run_progressive(
    model: &mut ModelSnapshot,
    evaluator: &mut dyn Evaluator,
    start: f64,
    increment: f64,
    epochs: usize,
    masking: bool,
    learning_rate: f64,
    seed: u64,
) -> Result<ScheduleReport> {
    run_mode(
        model,
        evaluator,
        RetrainConfig {
            mode: RetrainMode::Progressive,
            masking,
            epochs,
            learning_rate,
            progressive_start: start,
            progressive_increment: increment,
            seed,
            ..RetrainConfig::default()
        },
    )
}

pub fn run_boosted(
    model: &mut ModelSnapshot,
    evaluator: &mut dyn Evaluator,
    schedule: BoostConfig,
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<ScheduleReport> {
    run_mode(
        model,
        evaluator,
        RetrainConfig {
            mode: RetrainMode::Boosted,
            masking: true,
            epochs,
            learning_rate,
            boost: schedule,
            seed,
            ..RetrainConfig::default()
        },
    )
}

pub fn run_gradient_informed(
    model: &mut ModelSnapshot,
    evaluator: &mut dyn Evaluator,
    config: GradientInformedConfig,
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<ScheduleReport> {
    run_mode(
        model,
        evaluator,
        RetrainConfig {
            mode: RetrainMode::GradientInformed,
            masking: true,
            epochs,
            learning_rate,
            gradient: config,
            seed,
            ..RetrainConfig::default()
        },
    )
}

/// Run a whole schedule and replace `model` with its result.
pub fn run_mode(model: &mut ModelSnapshot, evaluator: &mut dyn Evaluator, config: RetrainConfig) -> Result<ScheduleReport> {
    let mut r = Retrainer::new(model.clone(), evaluator, config)?;
    r.run(evaluator, &mut |_| Ok(()))?;
    let report = r.report();
    *model = r.result_model().clone();
    Ok(report)
}
