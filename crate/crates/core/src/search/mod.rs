//! Randomized hill climbing with simulated-annealing acceptance over
//! per-layer sparsity vectors.

mod ranked;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use ranked::RankedList;

use crate::data::Split;
use crate::error::{Error, Result};
use crate::eval::{EvaluationResult, Evaluator};
use crate::model::{quantize_fraction, weighted_sparsity_of, ModelSnapshot};
use crate::policy::{sample_indices, LayerPolicy, PolicyMode, PrioritySelector};
use crate::rng::{RngState, StreamRng};
use crate::sensitivity::{SensitivityConfig, SensitivityState};
use crate::trace::TraceRow;

pub const STATE_VERSION: u32 = 1;

/// A per-layer sparsity vector with its measured accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityGenotype {
    pub sparsities: Vec<f64>,
    /// Weighted sparsity of `sparsities`.
    pub fitness: f64,
    pub top1: f64,
    pub feasible: bool,
}

impl SparsityGenotype {
    pub fn new(sizes: &[usize], sparsities: Vec<f64>, top1: f64, baseline_top1: f64, threshold: f64) -> Self {
        let fitness = weighted_sparsity_of(sizes, &sparsities);
        Self {
            sparsities,
            fitness,
            top1,
            feasible: baseline_top1 - top1 <= threshold,
        }
    }
}

/// Geometric annealing schedule plus the ranked-list restart probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaSchedule {
    pub enabled: bool,
    pub t0: f64,
    pub alpha: f64,
    pub q_restart: f64,
}

impl Default for SaSchedule {
    fn default() -> Self {
        Self {
            enabled: true,
            t0: 0.1,
            alpha: 0.97,
            q_restart: 0.1,
        }
    }
}

impl SaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.t0 > 0.0 && self.t0.is_finite()) {
            return Err(Error::Config(format!("t0 must be positive, got {}", self.t0)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.q_restart) {
            return Err(Error::Config(format!("q_restart must lie in [0, 1], got {}", self.q_restart)));
        }
        Ok(())
    }

    pub fn temperature(&self, iteration: usize) -> f64 {
        self.t0 * self.alpha.powi(iteration.min(i32::MAX as usize) as i32)
    }

    /// Probability of accepting a candidate `delta` fitness worse than the
    /// current solution.
    pub fn acceptance_probability(&self, delta: f64, iteration: usize) -> f64 {
        if !self.enabled {
            return 0.0;
        }
        (-delta.max(0.0) / self.temperature(iteration)).exp()
    }
}

/// Outcome of one acceptance decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Acceptance {
    Candidate,
    /// Continue from this ranked-list entry.
    Restart(usize),
    Keep,
}

impl Acceptance {
    pub fn label(&self) -> &'static str {
        match self {
            Acceptance::Candidate => "accept",
            Acceptance::Restart(_) => "restart",
            Acceptance::Keep => "keep",
        }
    }
}

/// Decide the next solution.
///
/// A feasible candidate that beats the current fitness, or replaces an
/// infeasible current solution, is always taken. Otherwise the candidate is
/// taken with probability `exp(-delta / T)`; failing that, a random
/// ranked-list entry is taken with probability `q_restart`. With annealing
/// disabled the current solution is kept.
pub fn acceptance_step<R: Rng + ?Sized>(
    current: &SparsityGenotype,
    candidate: &SparsityGenotype,
    ranked: &RankedList,
    sa: &SaSchedule,
    iteration: usize,
    rng: &mut R,
) -> Acceptance {
    if candidate.feasible && (candidate.fitness > current.fitness || !current.feasible) {
        return Acceptance::Candidate;
    }
    if !sa.enabled {
        return Acceptance::Keep;
    }
    let p = sa.acceptance_probability(current.fitness - candidate.fitness, iteration);
    if rng.gen::<f64>() < p {
        return Acceptance::Candidate;
    }
    if !ranked.is_empty() && rng.gen::<f64>() < sa.q_restart {
        return Acceptance::Restart(rng.gen_range(0..ranked.len()));
    }
    Acceptance::Keep
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub mode: PolicyMode,
    pub priority: Option<PrioritySelector>,
    /// Accuracy drop after which a prioritized policy opens up to all layers.
    pub priority_drop: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            mode: PolicyMode::Dynamic,
            priority: None,
            priority_drop: 0.9,
        }
    }
}

impl PolicyConfig {
    pub fn build(&self, model: &ModelSnapshot) -> Result<LayerPolicy> {
        let names: Vec<String> = model.layers().iter().map(|l| l.name().to_string()).collect();
        let priority = match &self.priority {
            Some(sel) => sel.resolve(model)?,
            None => Vec::new(),
        };
        if self.mode == PolicyMode::Prioritized && priority.is_empty() {
            return Err(Error::Config("prioritized policy needs a priority list".into()));
        }
        LayerPolicy::new(names, self.mode, priority, self.priority_drop)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub iterations: usize,
    /// Largest tolerated top-1 drop in percentage points.
    pub drop_threshold: f64,
    pub policy: PolicyConfig,
    /// Layers moved together per iteration.
    pub multi_layer_count: usize,
    pub sa: SaSchedule,
    /// Ranked-list capacity.
    pub k: usize,
    pub sensitivity: SensitivityConfig,
    /// Restrict layer sparsities to these levels (ascending). Pruning moves
    /// one level up, reversing one level down, and the top level counts as
    /// fully pruned.
    pub sparsity_levels: Option<Vec<f64>>,
    /// Split the search evaluates on.
    pub split: Split,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            drop_threshold: 1.0,
            policy: PolicyConfig::default(),
            multi_layer_count: 1,
            sa: SaSchedule::default(),
            k: 10,
            sensitivity: SensitivityConfig::default(),
            sparsity_levels: None,
            split: Split::Test,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.drop_threshold > 0.0 && self.drop_threshold.is_finite()) {
            return Err(Error::Config(format!(
                "drop_threshold must be positive, got {}",
                self.drop_threshold
            )));
        }
        if self.multi_layer_count == 0 {
            return Err(Error::Config("multi_layer_count must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("ranked list capacity k must be at least 1".into()));
        }
        self.sa.validate()?;
        self.sensitivity.validate()?;
        if let Some(levels) = &self.sparsity_levels {
            if levels.len() < 2
                || levels[0] != 0.0
                || levels.windows(2).any(|w| !(w[0] < w[1]))
                || levels.iter().any(|l| !(0.0..=1.0).contains(l))
            {
                return Err(Error::Config(
                    "sparsity_levels must start at 0 and increase strictly within [0, 1]".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Result of a finished search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub baseline: EvaluationResult,
    pub best: SparsityGenotype,
    pub ranked: RankedList,
    pub trace: Vec<TraceRow>,
}

/// Everything needed to continue a search exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub version: u32,
    pub model_digest: u64,
    pub config: SearchConfig,
    pub layer_names: Vec<String>,
    pub iteration: usize,
    pub baseline: EvaluationResult,
    pub current: SparsityGenotype,
    pub best: SparsityGenotype,
    pub ranked: RankedList,
    pub sensitivities: Vec<SensitivityState>,
    pub policy: LayerPolicy,
    pub rng: RngState,
    /// Layers whose move produced the current solution.
    pub pending: Vec<usize>,
    pub trace: Vec<TraceRow>,
}

/// A resumable search run.
#[derive(Debug, Clone)]
pub struct Search {
    state: SearchState,
    sizes: Vec<usize>,
    rng: StreamRng,
    working: ModelSnapshot,
}

impl Search {
    /// Measure the unpruned baseline and set up the initial state.
    pub fn new(model: &ModelSnapshot, evaluator: &mut dyn Evaluator, config: SearchConfig) -> Result<Self> {
        config.validate()?;
        let mut working = model.clone();
        working.reset_masks();
        let baseline = evaluator.evaluate(&working, config.split)?;
        let sizes = working.sizes();
        let n = sizes.len();
        let zero = SparsityGenotype::new(&sizes, vec![0.0; n], baseline.top1, baseline.top1, config.drop_threshold);
        let policy = config.policy.build(&working)?;
        let sensitivities = working
            .layers()
            .iter()
            .map(|l| SensitivityState::new(l.name(), &config.sensitivity))
            .collect();
        let rng = StreamRng::derived(config.seed, "search");
        let state = SearchState {
            version: STATE_VERSION,
            model_digest: model.digest(),
            layer_names: working.layers().iter().map(|l| l.name().to_string()).collect(),
            iteration: 0,
            baseline,
            current: zero.clone(),
            best: zero,
            ranked: RankedList::new(config.k),
            sensitivities,
            policy,
            rng: rng.state(),
            pending: Vec::new(),
            trace: Vec::new(),
            config,
        };
        Ok(Self {
            state,
            sizes,
            rng,
            working,
        })
    }

    /// Continue from a saved state over the same model.
    pub fn resume(model: &ModelSnapshot, state: SearchState) -> Result<Self> {
        if state.version != STATE_VERSION {
            return Err(Error::Version {
                found: state.version,
                supported: STATE_VERSION,
            });
        }
        if state.model_digest != model.digest() {
            return Err(Error::Precondition("checkpoint was written for a different model".into()));
        }
        let names: Vec<String> = model.layers().iter().map(|l| l.name().to_string()).collect();
        if names != state.layer_names {
            return Err(Error::Precondition("checkpoint layer list does not match the model".into()));
        }
        state.config.validate()?;
        let mut working = model.clone();
        working.reset_masks();
        Ok(Self {
            sizes: working.sizes(),
            rng: StreamRng::from_state(state.rng),
            working,
            state,
        })
    }

    pub fn state(&self) -> &SearchState {
        &self.state
    }

    pub fn iteration(&self) -> usize {
        self.state.iteration
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.state.config.iterations
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.state.trace
    }

    fn max_level(&self) -> f64 {
        match &self.state.config.sparsity_levels {
            Some(levels) => *levels.last().expect("validated non-empty"),
            None => 1.0,
        }
    }

    fn moved(&self, s: f64, step: f64, prune: bool) -> f64 {
        match &self.state.config.sparsity_levels {
            Some(levels) => {
                if prune {
                    levels.iter().copied().find(|&l| l > s).unwrap_or(s)
                } else {
                    levels.iter().rev().copied().find(|&l| l < s).unwrap_or(0.0)
                }
            }
            None => {
                let step = quantize_fraction(step);
                if prune {
                    quantize_fraction((s + step).min(1.0))
                } else {
                    quantize_fraction((s - step).max(0.0))
                }
            }
        }
    }

    fn choose_reverse_layers(&mut self) -> Result<Vec<usize>> {
        let current = &self.state.current.sparsities;
        let pending: Vec<usize> = self
            .state
            .pending
            .iter()
            .copied()
            .filter(|&i| current[i] > 0.0)
            .collect();
        if !pending.is_empty() {
            return Ok(pending);
        }
        let probs: Vec<f64> = current.iter().map(|&s| if s > 0.0 { 1.0 } else { 0.0 }).collect();
        let available = probs.iter().filter(|&&p| p > 0.0).count();
        if available == 0 {
            return Err(Error::Precondition("infeasible solution with no pruned layer".into()));
        }
        let count = self.state.config.multi_layer_count.min(available);
        sample_indices(&probs, &mut self.rng, count)
    }

    /// Run one iteration and return its trace row.
    pub fn step(&mut self, evaluator: &mut dyn Evaluator) -> Result<&TraceRow> {
        let config = self.state.config.clone();
        let iteration = self.state.iteration;
        let baseline = self.state.baseline.top1;
        let max_level = self.max_level();

        let eligible: Vec<bool> = self.state.current.sparsities.iter().map(|&s| s < max_level).collect();
        let sens: Vec<f64> = self.state.sensitivities.iter().map(SensitivityState::sensitivity).collect();
        let drop_so_far = (baseline - self.state.current.top1).max(0.0);
        self.state
            .policy
            .update(&self.sizes, &sens, &eligible, config.drop_threshold, drop_so_far)?;

        let prune = self.state.current.feasible;
        let layers = if prune {
            let positive = self.state.policy.probabilities.iter().filter(|&&p| p > 0.0).count();
            let count = config.multi_layer_count.min(positive);
            self.state.policy.sample(&mut self.rng, count)?
        } else {
            self.choose_reverse_layers()?
        };

        let mut sparsities = self.state.current.sparsities.clone();
        let mut steps = Vec::with_capacity(layers.len());
        for &l in &layers {
            let step = self.state.sensitivities[l].step();
            steps.push(step);
            sparsities[l] = self.moved(sparsities[l], step, prune);
        }
        self.working.apply_sparsities(&sparsities)?;
        let result = evaluator.evaluate(&self.working, config.split)?;
        let candidate =
            SparsityGenotype::new(&self.sizes, sparsities, result.top1, baseline, config.drop_threshold);

        for &l in &layers {
            self.state.sensitivities[l].record_impact(baseline, result.top1)?;
        }
        self.state.ranked.insert(&candidate);
        if candidate.feasible && candidate.fitness > self.state.best.fitness {
            self.state.best = candidate.clone();
        }

        let decision = if prune {
            acceptance_step(
                &self.state.current,
                &candidate,
                &self.state.ranked,
                &config.sa,
                iteration,
                &mut self.rng,
            )
        } else {
            Acceptance::Candidate
        };
        match decision {
            Acceptance::Candidate => {
                self.state.current = candidate.clone();
                self.state.pending = layers.clone();
            }
            Acceptance::Restart(i) => {
                self.state.current = self.state.ranked.entries()[i].clone();
                self.state.pending.clear();
            }
            Acceptance::Keep => {}
        }
        for &l in &layers {
            self.state.sensitivities[l].update_step(config.drop_threshold);
        }

        self.state.trace.push(TraceRow {
            iteration,
            layers: layers.iter().map(|&l| self.state.layer_names[l].clone()).collect(),
            action: if prune { "prune" } else { "reverse" }.into(),
            attempt: 0,
            steps,
            drop: baseline - candidate.top1,
            layer_sparsities: layers.iter().map(|&l| candidate.sparsities[l]).collect(),
            sparsities: candidate.sparsities.clone(),
            top1: candidate.top1,
            fitness: candidate.fitness,
            accepted: decision.label().into(),
            temperature: config.sa.temperature(iteration),
        });
        self.state.iteration += 1;
        self.state.rng = self.rng.state();
        Ok(self.state.trace.last().expect("row just pushed"))
    }

    /// Run the remaining iterations.
    pub fn run(&mut self, evaluator: &mut dyn Evaluator) -> Result<()> {
        while !self.is_done() {
            self.step(evaluator)?;
        }
        Ok(())
    }

    pub fn outcome(&self) -> SearchOutcome {
        SearchOutcome {
            baseline: self.state.baseline,
            best: self.state.best.clone(),
            ranked: self.state.ranked.clone(),
            trace: self.state.trace.clone(),
        }
    }

    /// The model with the best genotype's magnitude masks.
    pub fn best_model(&self) -> Result<ModelSnapshot> {
        let mut m = self.working.clone();
        m.apply_sparsities(&self.state.best.sparsities)?;
        Ok(m)
    }
}

/// Run a full search from the unpruned model.
pub fn run_search(
    model: &ModelSnapshot,
    evaluator: &mut dyn Evaluator,
    config: SearchConfig,
) -> Result<SearchOutcome> {
    let mut search = Search::new(model, evaluator, config)?;
    search.run(evaluator)?;
    Ok(search.outcome())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(fitness: f64, feasible: bool) -> SparsityGenotype {
        SparsityGenotype {
            sparsities: vec![fitness],
            fitness,
            top1: 90.0,
            feasible,
        }
    }

    #[test]
    fn better_always_accepted() {
        let mut rng = StreamRng::new(0);
        let ranked = RankedList::new(3);
        for _ in 0..100 {
            let a = acceptance_step(&g(0.1, true), &g(0.2, true), &ranked, &SaSchedule::default(), 0, &mut rng);
            assert_eq!(a, Acceptance::Candidate);
        }
    }

    #[test]
    fn hill_climbing_keeps_current() {
        let mut rng = StreamRng::new(0);
        let sa = SaSchedule {
            enabled: false,
            ..SaSchedule::default()
        };
        let a = acceptance_step(&g(0.2, true), &g(0.1, true), &RankedList::new(3), &sa, 0, &mut rng);
        assert_eq!(a, Acceptance::Keep);
        let a = acceptance_step(&g(0.2, true), &g(0.3, false), &RankedList::new(3), &sa, 0, &mut rng);
        assert_eq!(a, Acceptance::Keep);
    }

    #[test]
    fn temperature_decays() {
        let sa = SaSchedule::default();
        assert_eq!(sa.temperature(0), 0.1);
        assert!((sa.temperature(2) - 0.1 * 0.97 * 0.97).abs() < 1e-15);
        assert!((sa.acceptance_probability(0.02, 0) - (-0.2f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn level_config_validation() {
        let mut c = SearchConfig {
            sparsity_levels: Some(vec![0.0, 0.2, 0.2]),
            ..SearchConfig::default()
        };
        assert!(c.validate().is_err());
        c.sparsity_levels = Some(vec![0.0, 0.2, 0.4]);
        assert!(c.validate().is_ok());
    }
}
