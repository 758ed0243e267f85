//! Model weights, prune masks and sparsity bookkeeping.
//!
//! Trained weights are held immutably in [`LayerTensor`]; all pruning state
//! lives in one [`PruneMask`] per layer. Masks are recomputed from weights and
//! a sparsity target, so any prune step can be undone exactly.

mod container;
mod mask;
mod maskfile;

use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

pub use container::{load_model, save_model, MODEL_FORMAT, MODEL_FORMAT_VERSION};
pub use mask::{pruned_count, quantize_fraction, PruneMask};
pub use maskfile::{read_masks, write_masks};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv2d,
    Dense,
}

/// A named weight tensor. Conv2d shapes are `[out, in, kh, kw]`, dense shapes
/// are `[out, in]`, both row-major.
#[derive(Debug, Clone)]
pub struct LayerTensor {
    name: String,
    kind: LayerKind,
    shape: Vec<usize>,
    weights: Arc<Vec<f32>>,
    bias: Option<Arc<Vec<f32>>>,
    magnitude_order: OnceLock<Arc<Vec<u32>>>,
}

impl LayerTensor {
    pub fn new(
        name: impl Into<String>,
        kind: LayerKind,
        shape: Vec<usize>,
        weights: Vec<f32>,
        bias: Option<Vec<f32>>,
    ) -> Result<Self> {
        let name = name.into();
        let expected_rank = match kind {
            LayerKind::Conv2d => 4,
            LayerKind::Dense => 2,
        };
        if shape.len() != expected_rank || shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "layer `{name}` has invalid {kind:?} shape {shape:?}"
            )));
        }
        let count: usize = shape.iter().product();
        if weights.len() != count {
            return Err(Error::ShapeMismatch {
                name,
                expected: count,
                found: weights.len(),
            });
        }
        if let Some(index) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::NonFinite { name, index });
        }
        if let Some(b) = &bias {
            if b.len() != shape[0] {
                return Err(Error::ShapeMismatch {
                    name: format!("{name}.bias"),
                    expected: shape[0],
                    found: b.len(),
                });
            }
            if let Some(index) = b.iter().position(|w| !w.is_finite()) {
                return Err(Error::NonFinite {
                    name: format!("{name}.bias"),
                    index,
                });
            }
        }
        Ok(Self {
            name,
            kind,
            shape,
            weights: Arc::new(weights),
            bias: bias.map(Arc::new),
            magnitude_order: OnceLock::new(),
        })
    }

    /// A copy of this layer carrying retrained values.
    pub fn with_values(&self, weights: Vec<f32>, bias: Option<Vec<f32>>) -> Result<Self> {
        Self::new(self.name.clone(), self.kind, self.shape.clone(), weights, bias)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> Option<&[f32]> {
        self.bias.as_deref().map(Vec::as_slice)
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len()
    }

    pub fn out_channels(&self) -> usize {
        self.shape[0]
    }

    pub fn in_channels(&self) -> usize {
        self.shape[1]
    }

    /// Number of weights feeding one output channel / unit.
    pub fn unit_size(&self) -> usize {
        self.parameter_count() / self.out_channels()
    }

    /// Flat indices sorted by ascending `|w|`, ties by ascending index.
    pub fn magnitude_order(&self) -> Arc<Vec<u32>> {
        self.magnitude_order
            .get_or_init(|| {
                let w = &self.weights;
                let mut order: Vec<u32> = (0..w.len() as u32).collect();
                order.sort_by(|&a, &b| {
                    w[a as usize]
                        .abs()
                        .total_cmp(&w[b as usize].abs())
                        .then(a.cmp(&b))
                });
                Arc::new(order)
            })
            .clone()
    }
}

/// One step of the built-in evaluator's computation graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ArchOp {
    Conv2d {
        layer: String,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    Dense {
        layer: String,
    },
    Relu,
    #[serde(rename = "maxpool2")]
    MaxPool2,
    Flatten,
}

fn one() -> usize {
    1
}

impl ArchOp {
    pub fn layer(&self) -> Option<&str> {
        match self {
            ArchOp::Conv2d { layer, .. } | ArchOp::Dense { layer } => Some(layer),
            _ => None,
        }
    }
}

/// Layers, their masks and the graph that connects them.
#[derive(Debug, Clone)]
pub struct ModelSnapshot {
    layers: Vec<LayerTensor>,
    masks: Vec<PruneMask>,
    arch: Vec<ArchOp>,
    input_shape: [usize; 3],
    num_classes: usize,
}

impl ModelSnapshot {
    /// Assemble a snapshot with all-kept masks.
    pub fn new(
        layers: Vec<LayerTensor>,
        arch: Vec<ArchOp>,
        input_shape: [usize; 3],
        num_classes: usize,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::EmptyLayerSet);
        }
        for (i, l) in layers.iter().enumerate() {
            if layers[..i].iter().any(|o| o.name == l.name) {
                return Err(Error::Contract(format!("duplicate layer name `{}`", l.name)));
            }
        }
        for op in &arch {
            if let Some(name) = op.layer() {
                let layer = layers
                    .iter()
                    .find(|l| l.name == name)
                    .ok_or_else(|| Error::UnknownLayer(name.to_string()))?;
                let expected = match op {
                    ArchOp::Conv2d { .. } => LayerKind::Conv2d,
                    _ => LayerKind::Dense,
                };
                if layer.kind != expected {
                    return Err(Error::Contract(format!(
                        "graph uses `{name}` as {expected:?} but it is {:?}",
                        layer.kind
                    )));
                }
            }
        }
        let masks = layers
            .iter()
            .map(|l| PruneMask::all_kept(l.name.clone(), l.parameter_count()))
            .collect();
        Ok(Self {
            layers,
            masks,
            arch,
            input_shape,
            num_classes,
        })
    }

    pub fn layers(&self) -> &[LayerTensor] {
        &self.layers
    }

    pub fn masks(&self) -> &[PruneMask] {
        &self.masks
    }

    pub fn arch(&self) -> &[ArchOp] {
        &self.arch
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn layer(&self, index: usize) -> &LayerTensor {
        &self.layers[index]
    }

    pub fn mask(&self, index: usize) -> &PruneMask {
        &self.masks[index]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.layers.iter().map(LayerTensor::parameter_count).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(LayerTensor::parameter_count).sum()
    }

    /// Nominal per-layer sparsity targets.
    pub fn sparsities(&self) -> Vec<f64> {
        self.masks.iter().map(PruneMask::target).collect()
    }

    pub fn set_mask(&mut self, index: usize, mask: PruneMask) -> Result<()> {
        let layer = &self.layers[index];
        if mask.layer_name() != layer.name || mask.len() != layer.parameter_count() {
            return Err(Error::Contract(format!(
                "mask `{}` ({} bits) does not fit layer `{}` ({} weights)",
                mask.layer_name(),
                mask.len(),
                layer.name,
                layer.parameter_count()
            )));
        }
        self.masks[index] = mask;
        Ok(())
    }

    pub fn set_masks(&mut self, masks: Vec<PruneMask>) -> Result<()> {
        if masks.len() != self.layers.len() {
            return Err(Error::Contract(format!(
                "expected {} masks, got {}",
                self.layers.len(),
                masks.len()
            )));
        }
        let mut ordered = Vec::with_capacity(masks.len());
        for layer in &self.layers {
            let mask = masks
                .iter()
                .find(|m| m.layer_name() == layer.name)
                .ok_or_else(|| Error::UnknownLayer(layer.name.clone()))?;
            ordered.push(mask.clone());
        }
        for (i, m) in ordered.into_iter().enumerate() {
            self.set_mask(i, m)?;
        }
        Ok(())
    }

    /// Set one layer's magnitude mask at sparsity `target`.
    pub fn set_layer_sparsity(&mut self, index: usize, target: f64) -> Result<()> {
        let mask = PruneMask::magnitude(&self.layers[index], target)?;
        self.masks[index] = mask;
        Ok(())
    }

    /// Apply a whole sparsity vector as magnitude masks.
    pub fn apply_sparsities(&mut self, sparsities: &[f64]) -> Result<()> {
        if sparsities.len() != self.layers.len() {
            return Err(Error::Contract(format!(
                "sparsity vector has {} entries for {} layers",
                sparsities.len(),
                self.layers.len()
            )));
        }
        for (i, &s) in sparsities.iter().enumerate() {
            if (self.masks[i].target() - s).abs() > 0.0 || !self.masks[i].is_magnitude() {
                self.set_layer_sparsity(i, s)?;
            }
        }
        Ok(())
    }

    pub fn replace_layer(&mut self, index: usize, layer: LayerTensor) -> Result<()> {
        let old = &self.layers[index];
        if layer.name != old.name || layer.shape != old.shape || layer.kind != old.kind {
            return Err(Error::Contract(format!(
                "replacement for `{}` changes its identity",
                old.name
            )));
        }
        self.layers[index] = layer;
        Ok(())
    }

    pub fn effective_weights(&self, index: usize) -> Vec<f32> {
        effective_weights(&self.layers[index], &self.masks[index])
            .expect("snapshot masks always match their layers")
    }

    pub fn reset_masks(&mut self) {
        for (m, l) in self.masks.iter_mut().zip(&self.layers) {
            *m = PruneMask::all_kept(l.name.clone(), l.parameter_count());
        }
    }

    /// FNV-1a digest over names, shapes and weight bits.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for l in &self.layers {
            feed(l.name.as_bytes());
            for d in &l.shape {
                feed(&(*d as u64).to_le_bytes());
            }
            for w in l.weights.iter() {
                feed(&w.to_bits().to_le_bytes());
            }
            if let Some(b) = &l.bias {
                for w in b.iter() {
                    feed(&w.to_bits().to_le_bytes());
                }
            }
        }
        h
    }
}

/// Fraction of all prunable weights that are pruned.
pub fn weighted_sparsity(model: &ModelSnapshot) -> f64 {
    let total: usize = model.masks.iter().map(PruneMask::len).sum();
    if total == 0 {
        return 0.0;
    }
    let pruned: usize = model.masks.iter().map(PruneMask::pruned_count).sum();
    pruned as f64 / total as f64
}

/// Weighted sparsity implied by a sparsity vector over layers of `sizes`.
pub fn weighted_sparsity_of(sizes: &[usize], sparsities: &[f64]) -> f64 {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let pruned: usize = sizes
        .iter()
        .zip(sparsities)
        .map(|(&n, &s)| pruned_count(s, n))
        .sum();
    pruned as f64 / total as f64
}

/// Pristine weights multiplied by the mask bits.
pub fn effective_weights(layer: &LayerTensor, mask: &PruneMask) -> Result<Vec<f32>> {
    if mask.len() != layer.parameter_count() {
        return Err(Error::Contract(format!(
            "mask has {} bits but layer `{}` has {} weights",
            mask.len(),
            layer.name,
            layer.parameter_count()
        )));
    }
    Ok(layer
        .weights
        .iter()
        .enumerate()
        .map(|(i, &w)| if mask.is_kept(i) { w } else { 0.0 })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(name: &str, out: usize, inp: usize, seed: u32) -> LayerTensor {
        let w = (0..out * inp)
            .map(|i| (((i as u32).wrapping_mul(2654435761) ^ seed) % 1000) as f32 / 1000.0 - 0.5)
            .collect();
        LayerTensor::new(name, LayerKind::Dense, vec![out, inp], w, None).unwrap()
    }

    #[test]
    fn weighted_sparsity_hand_example() {
        let layers = vec![dense("a", 10, 10, 1), dense("b", 10, 30, 2)];
        let arch = vec![];
        let mut m = ModelSnapshot::new(layers, arch, [1, 1, 1], 2).unwrap();
        assert_eq!(weighted_sparsity(&m), 0.0);
        m.apply_sparsities(&[0.5, 0.25]).unwrap();
        assert_eq!(weighted_sparsity(&m), 0.3125);
        m.apply_sparsities(&[1.0, 1.0]).unwrap();
        assert_eq!(weighted_sparsity(&m), 1.0);
        assert_eq!(weighted_sparsity_of(&[100, 300], &[0.5, 0.25]), 0.3125);
    }

    #[test]
    fn effective_weights_masks_by_definition() {
        let l = LayerTensor::new(
            "l",
            LayerKind::Dense,
            vec![1, 4],
            vec![0.1, -0.5, 0.02, 0.3],
            None,
        )
        .unwrap();
        let mut mask = PruneMask::all_kept("l", 4);
        assert_eq!(effective_weights(&l, &mask).unwrap(), l.weights());
        mask.set_kept(0, false);
        mask.set_kept(2, false);
        assert_eq!(effective_weights(&l, &mask).unwrap(), vec![0.0, -0.5, 0.0, 0.3]);
        assert_eq!(l.weights(), &[0.1, -0.5, 0.02, 0.3]);
        assert!(effective_weights(&l, &PruneMask::all_kept("l", 3)).is_err());
    }

    #[test]
    fn rejects_bad_layers() {
        assert!(matches!(
            LayerTensor::new("x", LayerKind::Dense, vec![4, 4], vec![0.0; 15], None),
            Err(Error::ShapeMismatch { expected: 16, found: 15, .. })
        ));
        assert!(matches!(
            LayerTensor::new("x", LayerKind::Dense, vec![1, 2], vec![0.0, f32::NAN], None),
            Err(Error::NonFinite { index: 1, .. })
        ));
    }
}
