//! Per-filter activation contributions, per-class profiles and the
//! refinement pass that prunes filters unimportant everywhere.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::eval::{require, Evaluator};
use crate::model::{weighted_sparsity, ModelSnapshot, PruneMask};
use crate::pruning::mask_channels;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterContribution {
    pub layer_name: String,
    pub filter_index: usize,
    pub mean_abs_activation: f64,
    /// Min-max normalized within the layer; 1 for every filter of a layer
    /// whose means are all equal.
    pub normalized_importance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassActivationProfile {
    pub class_id: usize,
    /// layer name -> per-filter mean activation
    pub layers: BTreeMap<String, Vec<f64>>,
}

pub type Contributions = BTreeMap<String, Vec<FilterContribution>>;

/// Min-max normalization mapping a constant vector to all ones.
pub fn normalized_importance(means: &[f64]) -> Vec<f64> {
    let min = means.iter().copied().fold(f64::INFINITY, f64::min);
    let max = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if !(range > 0.0) {
        return vec![1.0; means.len()];
    }
    means.iter().map(|m| (m - min) / range).collect()
}

/// Every weighted layer except the final classifier.
pub fn analysis_layers(model: &ModelSnapshot) -> Vec<String> {
    let last = model.arch().iter().rev().find_map(|op| op.layer()).map(str::to_string);
    model
        .layers()
        .iter()
        .map(|l| l.name().to_string())
        .filter(|n| Some(n) != last.as_ref())
        .collect()
}

fn contributions_from(layer: &str, means: &[f64]) -> Vec<FilterContribution> {
    normalized_importance(means)
        .into_iter()
        .zip(means)
        .enumerate()
        .map(|(i, (n, &m))| FilterContribution {
            layer_name: layer.to_string(),
            filter_index: i,
            mean_abs_activation: m,
            normalized_importance: n,
        })
        .collect()
}

/// Mean absolute post-nonlinearity output per filter of each layer.
pub fn compute_filter_contributions(
    model: &ModelSnapshot,
    evaluator: &mut dyn Evaluator,
    layers: &[String],
) -> Result<Contributions> {
    require(evaluator.capabilities().activations, "activations")?;
    let report = evaluator.activation_report(model, layers, &[])?;
    Ok(report
        .global
        .iter()
        .map(|(l, means)| (l.clone(), contributions_from(l, means)))
        .collect())
}

/// Per-class mean activations for every class in the evaluation split.
pub fn compute_class_profiles(
    model: &ModelSnapshot,
    evaluator: &mut dyn Evaluator,
    layers: &[String],
) -> Result<Vec<ClassActivationProfile>> {
    require(evaluator.capabilities().activations, "activations")?;
    let classes = evaluator
        .classes()
        .ok_or_else(|| Error::Dataset("evaluation split carries no class labels".into()))?;
    let report = evaluator.activation_report(model, layers, &classes)?;
    Ok(report
        .per_class
        .into_iter()
        .map(|(class_id, layers)| ClassActivationProfile { class_id, layers })
        .collect())
}

/// Filters whose importance is below `tau` globally and in every class
/// profile, per layer.
pub fn unimportant_filters(
    contributions: &Contributions,
    profiles: &[ClassActivationProfile],
    tau: f64,
) -> BTreeMap<String, Vec<usize>> {
    let mut out = BTreeMap::new();
    for (layer, filters) in contributions {
        let class_norms: Vec<Option<Vec<f64>>> = profiles
            .iter()
            .map(|p| p.layers.get(layer).map(|m| normalized_importance(m)))
            .collect();
        let picked: Vec<usize> = filters
            .iter()
            .filter(|f| f.normalized_importance < tau)
            .filter(|f| {
                class_norms.iter().all(|n| match n {
                    Some(n) => n.get(f.filter_index).is_some_and(|&v| v < tau),
                    None => false,
                })
            })
            .map(|f| f.filter_index)
            .collect();
        if !picked.is_empty() {
            out.insert(layer.clone(), picked);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineOutcome {
    pub additional_pruned: usize,
    pub reverted: bool,
    pub pruned_filters: BTreeMap<String, Vec<usize>>,
    pub before_top1: f64,
    pub after_top1: f64,
    pub before_sparsity: f64,
    pub after_sparsity: f64,
}

/// Mask the filters unimportant everywhere (and the inputs that read them),
/// then keep the change only if top-1 on `split` drops by at most `budget`.
pub fn refine_pruning(
    model: &mut ModelSnapshot,
    evaluator: &mut dyn Evaluator,
    contributions: &Contributions,
    profiles: &[ClassActivationProfile],
    tau: f64,
    budget: f64,
    split: Split,
) -> Result<RefineOutcome> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::Contract(format!("tau {tau} outside [0, 1)")));
    }
    let before_masks: Vec<PruneMask> = model.masks().to_vec();
    let before_pruned: usize = before_masks.iter().map(PruneMask::pruned_count).sum();
    let before_sparsity = weighted_sparsity(model);
    let before_top1 = evaluator.evaluate(model, split)?.top1;
    let picked = unimportant_filters(contributions, profiles, tau);
    let mut outcome = RefineOutcome {
        additional_pruned: 0,
        reverted: false,
        pruned_filters: picked.clone(),
        before_top1,
        after_top1: before_top1,
        before_sparsity,
        after_sparsity: before_sparsity,
    };
    if picked.is_empty() {
        return Ok(outcome);
    }
    for (layer, filters) in &picked {
        let idx = model.layer_index(layer)?;
        mask_channels(model, idx, filters)?;
    }
    let after_top1 = evaluator.evaluate(model, split)?.top1;
    if before_top1 - after_top1 > budget {
        model.set_masks(before_masks)?;
        outcome.reverted = true;
        outcome.pruned_filters.clear();
        return Ok(outcome);
    }
    let after_pruned: usize = model.masks().iter().map(PruneMask::pruned_count).sum();
    outcome.additional_pruned = after_pruned - before_pruned;
    outcome.after_top1 = after_top1;
    outcome.after_sparsity = weighted_sparsity(model);
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_layer_is_fully_important() {
        assert_eq!(normalized_importance(&[0.3]), vec![1.0]);
        assert_eq!(normalized_importance(&[2.0, 2.0]), vec![1.0, 1.0]);
        assert_eq!(normalized_importance(&[0.0, 1.0, 0.5]), vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn intersection_rule() {
        let mut c = Contributions::new();
        c.insert("a".into(), contributions_from("a", &[0.0, 1.0, 0.01]));
        let profile = |v: Vec<f64>, id| ClassActivationProfile {
            class_id: id,
            layers: [("a".to_string(), v)].into_iter().collect(),
        };
        // filter 2 is important for class 1
        let profiles = vec![profile(vec![0.0, 1.0, 0.0], 0), profile(vec![0.0, 1.0, 0.9], 1)];
        let u = unimportant_filters(&c, &profiles, 0.05);
        assert_eq!(u["a"], vec![0]);
        assert!(unimportant_filters(&c, &profiles, 0.0).is_empty());
    }
}
