//! Fine-grain and structural pruning operations over model masks.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::engine::Plan;
use crate::error::{Error, Result};
use crate::model::{pruned_count, quantize_fraction, LayerKind, LayerTensor, ModelSnapshot, PruneMask};

/// Default blend between magnitude and gradient importance.
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Mean |gradient| per weight over the latest training interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientStats {
    layer_name: String,
    importance: Vec<f32>,
}

impl GradientStats {
    pub fn new(layer_name: impl Into<String>, importance: Vec<f32>) -> Result<Self> {
        if let Some(i) = importance.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Contract(format!(
                "gradient importance {} at index {i} is not a finite non-negative value",
                importance[i]
            )));
        }
        Ok(Self {
            layer_name: layer_name.into(),
            importance,
        })
    }

    pub fn layer_name(&self) -> &str {
        &self.layer_name
    }

    pub fn importance(&self) -> &[f32] {
        &self.importance
    }
}

fn check_step(step: f64) -> Result<f64> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Contract(format!("step must be positive, got {step}")));
    }
    Ok(quantize_fraction(step))
}

/// Raise a layer's sparsity by `step` (clamped to 1) and rebuild its
/// magnitude mask. Returns the new sparsity.
pub fn prune_layer_by_step(model: &mut ModelSnapshot, layer: &str, step: f64) -> Result<f64> {
    let idx = model.layer_index(layer)?;
    let step = check_step(step)?;
    let s = quantize_fraction(model.mask(idx).target());
    let next = quantize_fraction((s + step).min(1.0));
    model.set_layer_sparsity(idx, next)?;
    Ok(next)
}

/// Lower a layer's sparsity by `step` (clamped to 0) and rebuild its
/// magnitude mask. Returns the new sparsity.
pub fn reverse_prune_by_step(model: &mut ModelSnapshot, layer: &str, step: f64) -> Result<f64> {
    let idx = model.layer_index(layer)?;
    let step = check_step(step)?;
    let s = quantize_fraction(model.mask(idx).target());
    let next = quantize_fraction((s - step).max(0.0));
    model.set_layer_sparsity(idx, next)?;
    Ok(next)
}

fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if !(range > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - min) / range).collect()
}

/// Pruned index set of size `count` taken in `order`, keeping every bit
/// already pruned in `prev` when `prev` prunes no more than `count`.
fn select_pruned(order: &[usize], count: usize, prev: Option<&PruneMask>) -> Vec<usize> {
    let mut pruned = match prev {
        Some(p) if p.pruned_count() <= count => {
            let mut v = p.pruned_indices();
            v.extend(order.iter().copied().filter(|&i| p.is_kept(i)).take(count - p.pruned_count()));
            v
        }
        _ => order[..count].to_vec(),
    };
    pruned.sort_unstable();
    pruned
}

/// Magnitude mask at `target` that also keeps every position `prev` prunes
/// (when `prev` prunes no more than the target count).
pub fn magnitude_mask_extending(layer: &LayerTensor, target: f64, prev: &PruneMask) -> Result<PruneMask> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Contract(format!("sparsity {target} outside [0, 1]")));
    }
    if prev.len() != layer.parameter_count() {
        return Err(Error::Contract(format!("mask does not fit layer `{}`", layer.name())));
    }
    let target = quantize_fraction(target);
    let order: Vec<usize> = layer.magnitude_order().iter().map(|&i| i as usize).collect();
    let count = pruned_count(target, order.len());
    let pruned = select_pruned(&order, count, Some(prev));
    let mut plain = order[..count].to_vec();
    plain.sort_unstable();
    let magnitude = pruned == plain;
    Ok(PruneMask::from_pruned(layer.name(), order.len(), &pruned).with_target(target, magnitude))
}

/// Mask at `target` sparsity ranking weights by
/// `alpha * norm(|w|) + (1 - alpha) * norm(importance)`.
///
/// Both terms are min-max normalized within the layer (a constant term
/// normalizes to 0). Equal scores fall back to magnitude order, then flat
/// index, so `alpha = 1` or uniform importances reproduce the magnitude mask.
pub fn gradient_informed_mask(
    layer: &LayerTensor,
    target: f64,
    grads: &GradientStats,
    alpha: f64,
) -> Result<PruneMask> {
    gradient_informed_mask_extending(layer, target, grads, alpha, None)
}

/// As [`gradient_informed_mask`], optionally keeping the bits `prev` prunes.
pub fn gradient_informed_mask_extending(
    layer: &LayerTensor,
    target: f64,
    grads: &GradientStats,
    alpha: f64,
    prev: Option<&PruneMask>,
) -> Result<PruneMask> {
    if grads.importance.len() != layer.parameter_count() {
        return Err(Error::Contract(format!(
            "gradient statistics hold {} entries for {} weights of `{}`",
            grads.importance.len(),
            layer.parameter_count(),
            layer.name()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Contract(format!("alpha {alpha} outside [0, 1]")));
    }
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Contract(format!("sparsity {target} outside [0, 1]")));
    }
    let target = quantize_fraction(target);
    let w = layer.weights();
    let mags: Vec<f64> = w.iter().map(|v| f64::from(v.abs())).collect();
    let imps: Vec<f64> = grads.importance.iter().map(|&v| f64::from(v)).collect();
    let nm = min_max_normalize(&mags);
    let ni = min_max_normalize(&imps);
    let score: Vec<f64> = nm
        .iter()
        .zip(&ni)
        .map(|(m, i)| alpha * m + (1.0 - alpha) * i)
        .collect();
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| {
        score[a]
            .total_cmp(&score[b])
            .then(w[a].abs().total_cmp(&w[b].abs()))
            .then(a.cmp(&b))
    });
    let count = pruned_count(target, w.len());
    let pruned = select_pruned(&order, count, prev);
    Ok(PruneMask::from_pruned(layer.name(), w.len(), &pruned).with_target(target, false))
}

/// Importance of one output filter of a conv layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelScore {
    pub layer_name: String,
    pub channel_index: usize,
    /// Sum of |w| over the filter.
    pub l1: f64,
    /// Population variance of the filter's per-input-channel kernel L1 norms.
    pub variance: f64,
    /// Min-max normalized `l1` plus min-max normalized `variance`.
    pub combined: f64,
}

fn filter_stats(layer: &LayerTensor, weights: &[f32], o: usize) -> (f64, f64) {
    let in_c = layer.in_channels();
    let k = layer.shape()[2] * layer.shape()[3];
    let unit = in_c * k;
    let filter = &weights[o * unit..(o + 1) * unit];
    let energies: Vec<f64> = filter
        .chunks(k)
        .map(|kernel| kernel.iter().map(|v| f64::from(v.abs())).sum())
        .collect();
    let l1: f64 = energies.iter().sum();
    let mean = l1 / in_c as f64;
    let variance = energies.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / in_c as f64;
    (l1, variance)
}

/// Score the listed output channels (all of them when `channels` is `None`)
/// using the masked weights when a mask is given.
pub fn score_channels_of(
    layer: &LayerTensor,
    mask: Option<&PruneMask>,
    channels: Option<&[usize]>,
) -> Result<Vec<ChannelScore>> {
    if layer.kind() != LayerKind::Conv2d {
        return Err(Error::UnsupportedKind {
            name: layer.name().to_string(),
            reason: "channel scoring needs a conv2d layer".into(),
        });
    }
    let weights: Vec<f32> = match mask {
        Some(m) => crate::model::effective_weights(layer, m)?,
        None => layer.weights().to_vec(),
    };
    let all: Vec<usize> = (0..layer.out_channels()).collect();
    let channels = channels.unwrap_or(&all);
    let stats: Vec<(f64, f64)> = channels
        .iter()
        .map(|&o| filter_stats(layer, &weights, o))
        .collect();
    let l1n = min_max_normalize(&stats.iter().map(|s| s.0).collect::<Vec<_>>());
    let varn = min_max_normalize(&stats.iter().map(|s| s.1).collect::<Vec<_>>());
    Ok(channels
        .iter()
        .enumerate()
        .map(|(i, &o)| ChannelScore {
            layer_name: layer.name().to_string(),
            channel_index: o,
            l1: stats[i].0,
            variance: stats[i].1,
            combined: l1n[i] + varn[i],
        })
        .collect())
}

/// Score every output channel of a conv layer on its pristine weights.
pub fn score_channels(layer: &LayerTensor) -> Result<Vec<ChannelScore>> {
    score_channels_of(layer, None, None)
}

/// Output channels of a conv layer that still have at least one kept weight.
pub fn remaining_channels(model: &ModelSnapshot, index: usize) -> Vec<usize> {
    let layer = model.layer(index);
    let mask = model.mask(index);
    let unit = layer.unit_size();
    (0..layer.out_channels())
        .filter(|&o| (o * unit..(o + 1) * unit).any(|j| mask.is_kept(j)))
        .collect()
}

/// Mask out the lowest-scoring `round(fraction * remaining)` (at least one)
/// output channels of a conv layer, plus the matching input slices of the
/// next weighted layer. Returns the removed channel indices, ascending.
pub fn remove_channels(model: &mut ModelSnapshot, layer: &str, fraction: f64) -> Result<Vec<usize>> {
    let idx = model.layer_index(layer)?;
    if model.layer(idx).kind() != LayerKind::Conv2d {
        return Err(Error::UnsupportedKind {
            name: layer.to_string(),
            reason: "channel removal needs a conv2d layer".into(),
        });
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Contract(format!("fraction {fraction} outside (0, 1)")));
    }
    let remaining = remaining_channels(model, idx);
    let count = pruned_count(fraction, remaining.len()).max(1);
    if count >= remaining.len() {
        return Err(Error::Refused(format!(
            "removing {count} of {} remaining channels of `{layer}` would disconnect it",
            remaining.len()
        )));
    }
    let mut scores = score_channels_of(model.layer(idx), Some(model.mask(idx)), Some(&remaining))?;
    scores.sort_by(|a, b| {
        a.combined
            .partial_cmp(&b.combined)
            .unwrap_or(Ordering::Equal)
            .then(a.channel_index.cmp(&b.channel_index))
    });
    let mut removed: Vec<usize> = scores[..count].iter().map(|s| s.channel_index).collect();
    removed.sort_unstable();
    mask_channels(model, idx, &removed)?;
    Ok(removed)
}

/// Mask whole output channels of a layer and their downstream inputs.
pub fn mask_channels(model: &mut ModelSnapshot, index: usize, channels: &[usize]) -> Result<()> {
    let plan = Plan::new(model)?;
    let layer = model.layer(index).clone();
    let unit = layer.unit_size();
    let mut mask = model.mask(index).clone();
    for &o in channels {
        for j in o * unit..(o + 1) * unit {
            mask.set_kept(j, false);
        }
    }
    model.set_mask(index, mask)?;
    if let Some(consumer) = plan.consumer(index) {
        let next = model.layer(consumer.layer).clone();
        let mut mask = model.mask(consumer.layer).clone();
        match next.kind() {
            LayerKind::Conv2d => {
                let k = next.shape()[2] * next.shape()[3];
                let in_c = next.in_channels();
                for o in 0..next.out_channels() {
                    for &c in channels {
                        let start = (o * in_c + c) * k;
                        for j in start..start + k {
                            mask.set_kept(j, false);
                        }
                    }
                }
            }
            LayerKind::Dense => {
                let inputs = next.in_channels();
                let per = consumer.positions_per_channel;
                for row in 0..next.out_channels() {
                    for &c in channels {
                        let start = row * inputs + c * per;
                        for j in start..start + per {
                            mask.set_kept(j, false);
                        }
                    }
                }
            }
        }
        model.set_mask(consumer.layer, mask)?;
    }
    Ok(())
}
