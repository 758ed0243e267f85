//! Categorical layer-selection policy.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSnapshot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// Probabilities fixed after the first computation.
    Constant,
    /// Recomputed from current sensitivities every update.
    #[default]
    Dynamic,
    /// Restricted to a priority list until the accuracy drop exceeds a
    /// budget, then dynamic over all layers.
    Prioritized,
}

/// Priority list given either by layer names or as the N largest layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PrioritySelector {
    Names(Vec<String>),
    Largest { largest: usize },
}

impl PrioritySelector {
    /// Layer names in priority order. Largest-first ties break by layer order.
    pub fn resolve(&self, model: &ModelSnapshot) -> Result<Vec<String>> {
        match self {
            PrioritySelector::Names(names) => {
                for n in names {
                    model.layer_index(n)?;
                }
                Ok(names.clone())
            }
            PrioritySelector::Largest { largest } => {
                let sizes = model.sizes();
                let mut order: Vec<usize> = (0..sizes.len()).collect();
                order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
                Ok(order
                    .into_iter()
                    .take(*largest)
                    .map(|i| model.layer(i).name().to_string())
                    .collect())
            }
        }
    }
}

/// Selection probabilities and the mode that governs their updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPolicy {
    pub layer_names: Vec<String>,
    pub probabilities: Vec<f64>,
    pub mode: PolicyMode,
    pub priority_list: Vec<String>,
    pub priority_drop: f64,
    /// Set once the constant policy has been computed.
    pub computed: bool,
    /// Set once a prioritized policy has spent its drop budget.
    pub priority_spent: bool,
}

impl LayerPolicy {
    pub fn new(
        layer_names: Vec<String>,
        mode: PolicyMode,
        priority_list: Vec<String>,
        priority_drop: f64,
    ) -> Result<Self> {
        if layer_names.is_empty() {
            return Err(Error::EmptyLayerSet);
        }
        for p in &priority_list {
            if !layer_names.contains(p) {
                return Err(Error::UnknownLayer(p.clone()));
            }
        }
        let n = layer_names.len();
        Ok(Self {
            layer_names,
            probabilities: vec![1.0 / n as f64; n],
            mode,
            priority_list,
            priority_drop,
            computed: false,
            priority_spent: false,
        })
    }

    /// True while mass is restricted to the priority list.
    pub fn in_priority_phase(&self) -> bool {
        self.mode == PolicyMode::Prioritized && !self.priority_spent && !self.priority_list.is_empty()
    }

    /// Refresh probabilities for the current sensitivities.
    ///
    /// `eligible[i]` is false for layers that can no longer be pruned.
    pub fn update(
        &mut self,
        sizes: &[usize],
        sensitivities: &[f64],
        eligible: &[bool],
        threshold: f64,
        accuracy_drop_so_far: f64,
    ) -> Result<()> {
        let n = self.layer_names.len();
        if sizes.len() != n || sensitivities.len() != n || eligible.len() != n {
            return Err(Error::Contract(format!(
                "policy over {n} layers got {} sizes, {} sensitivities, {} flags",
                sizes.len(),
                sensitivities.len(),
                eligible.len()
            )));
        }
        match self.mode {
            PolicyMode::Constant => {
                if !self.computed {
                    self.probabilities =
                        compute_probabilities_for(sizes, sensitivities, threshold, eligible)?;
                }
            }
            PolicyMode::Dynamic => {
                self.probabilities = compute_probabilities_for(sizes, sensitivities, threshold, eligible)?;
            }
            PolicyMode::Prioritized => {
                if accuracy_drop_so_far > self.priority_drop {
                    self.priority_spent = true;
                }
                let restricted: Vec<bool> = eligible
                    .iter()
                    .zip(&self.layer_names)
                    .map(|(&e, name)| e && self.priority_list.contains(name))
                    .collect();
                self.probabilities = if self.in_priority_phase() && restricted.iter().any(|&e| e) {
                    compute_probabilities_for(sizes, sensitivities, threshold, &restricted)?
                } else {
                    compute_probabilities_for(sizes, sensitivities, threshold, eligible)?
                };
            }
        }
        self.computed = true;
        Ok(())
    }

    /// Draw `count` distinct layer indices without replacement.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Result<Vec<usize>> {
        sample_indices(&self.probabilities, rng, count)
    }

    /// Draw `count` distinct layer names without replacement.
    pub fn sample_layer<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Result<Vec<String>> {
        Ok(self
            .sample(rng, count)?
            .into_iter()
            .map(|i| self.layer_names[i].clone())
            .collect())
    }
}

fn check_inputs(sizes: &[usize], sensitivities: &[f64], threshold: f64) -> Result<()> {
    if sizes.is_empty() {
        return Err(Error::EmptyLayerSet);
    }
    if sizes.len() != sensitivities.len() {
        return Err(Error::Contract(format!(
            "{} sizes but {} sensitivities",
            sizes.len(),
            sensitivities.len()
        )));
    }
    if !(threshold > 0.0) || !threshold.is_finite() {
        return Err(Error::Contract(format!("threshold must be positive, got {threshold}")));
    }
    if let Some(i) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Contract(format!("layer {i} has size 0")));
    }
    if let Some(i) = sensitivities.iter().position(|s| !s.is_finite()) {
        return Err(Error::Contract(format!("sensitivity of layer {i} is not finite")));
    }
    Ok(())
}

/// `w_i = size_i * max(0, threshold - sensitivity_i)`, normalized.
///
/// Falls back to uniform when every weight is zero.
pub fn compute_probabilities(sizes: &[usize], sensitivities: &[f64], threshold: f64) -> Result<Vec<f64>> {
    compute_probabilities_for(sizes, sensitivities, threshold, &vec![true; sizes.len()])
}

/// As [`compute_probabilities`] but with ineligible layers held at zero.
/// With no eligible layer at all the distribution is uniform over every
/// layer.
pub fn compute_probabilities_for(
    sizes: &[usize],
    sensitivities: &[f64],
    threshold: f64,
    eligible: &[bool],
) -> Result<Vec<f64>> {
    check_inputs(sizes, sensitivities, threshold)?;
    if eligible.len() != sizes.len() {
        return Err(Error::Contract("eligibility flags do not match layer count".into()));
    }
    let weights: Vec<f64> = sizes
        .iter()
        .zip(sensitivities)
        .zip(eligible)
        .map(|((&n, &s), &e)| if e { n as f64 * (threshold - s).max(0.0) } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        return Ok(weights.iter().map(|w| w / total).collect());
    }
    let support = eligible.iter().filter(|&&e| e).count();
    if support == 0 {
        return Ok(vec![1.0 / sizes.len() as f64; sizes.len()]);
    }
    Ok(eligible
        .iter()
        .map(|&e| if e { 1.0 / support as f64 } else { 0.0 })
        .collect())
}

/// Categorical sampling without replacement.
pub fn sample_indices<R: Rng + ?Sized>(probabilities: &[f64], rng: &mut R, count: usize) -> Result<Vec<usize>> {
    let eligible = probabilities.iter().filter(|&&p| p > 0.0).count();
    if count == 0 || count > eligible {
        return Err(Error::InsufficientLayers {
            requested: count,
            eligible,
        });
    }
    let mut weights = probabilities.to_vec();
    let mut picked = Vec::with_capacity(count);
    for _ in 0..count {
        let dist = WeightedIndex::new(&weights)
            .map_err(|e| Error::Contract(format!("invalid probabilities: {e}")))?;
        let i = dist.sample(rng);
        picked.push(i);
        weights[i] = 0.0;
    }
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    #[test]
    fn hand_example() {
        let p = compute_probabilities(&[100, 300], &[0.0, 0.5], 1.0).unwrap();
        assert!((p[0] - 0.4).abs() < 1e-12 && (p[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn oversensitive_layer_excluded() {
        let p = compute_probabilities(&[10, 10, 10], &[2.0, 0.1, 0.1], 1.0).unwrap();
        assert_eq!(p[0], 0.0);
        assert!((p[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn all_oversensitive_is_uniform_over_eligible() {
        let p = compute_probabilities_for(&[1, 2, 3], &[5.0; 3], 1.0, &[true, false, true]).unwrap();
        assert_eq!(p, vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn errors() {
        assert!(matches!(compute_probabilities(&[], &[], 1.0), Err(Error::EmptyLayerSet)));
        assert!(compute_probabilities(&[1], &[0.0], 0.0).is_err());
        assert!(compute_probabilities(&[0], &[0.0], 1.0).is_err());
    }

    #[test]
    fn degenerate_sampling() {
        let mut rng = StreamRng::new(1);
        for _ in 0..100 {
            assert_eq!(sample_indices(&[1.0, 0.0, 0.0], &mut rng, 1).unwrap(), vec![0]);
        }
        assert!(matches!(
            sample_indices(&[1.0, 0.0, 0.0], &mut rng, 2),
            Err(Error::InsufficientLayers { requested: 2, eligible: 1 })
        ));
        let mut all = sample_indices(&[0.25; 4], &mut rng, 4).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn uniform_frequencies() {
        let mut rng = StreamRng::new(7);
        let mut counts = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            counts[sample_indices(&[0.25; 4], &mut rng, 1).unwrap()[0]] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.02);
        }
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("l{i}")).collect()
    }

    #[test]
    fn constant_mode_freezes() {
        let mut p = LayerPolicy::new(names(2), PolicyMode::Constant, vec![], 0.0).unwrap();
        p.update(&[100, 300], &[0.0, 0.5], &[true; 2], 1.0, 0.0).unwrap();
        let first = p.probabilities.clone();
        p.update(&[100, 300], &[0.9, 0.0], &[true; 2], 1.0, 0.0).unwrap();
        assert_eq!(p.probabilities, first);
    }

    #[test]
    fn prioritized_switches_after_budget() {
        let mut p =
            LayerPolicy::new(names(3), PolicyMode::Prioritized, vec!["l2".into()], 0.9).unwrap();
        p.update(&[1, 1, 1], &[0.0; 3], &[true; 3], 1.0, 0.3).unwrap();
        assert_eq!(p.probabilities, vec![0.0, 0.0, 1.0]);
        p.update(&[1, 1, 1], &[0.0; 3], &[true; 3], 1.0, 0.95).unwrap();
        assert!(p.probabilities.iter().all(|&x| x > 0.0));
        // the switch latches
        p.update(&[1, 1, 1], &[0.0; 3], &[true; 3], 1.0, 0.1).unwrap();
        assert!(p.probabilities.iter().all(|&x| x > 0.0));
    }
}
