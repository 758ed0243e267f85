use crate::error::{Error, Result};

use super::LayerTensor;

const FRACTION_SCALE: u128 = 1_000_000_000;

/// Snap a fraction to a 1e-9 grid so `s + d - d` returns exactly `s`.
pub fn quantize_fraction(s: f64) -> f64 {
    (s * FRACTION_SCALE as f64).round() / FRACTION_SCALE as f64
}

/// Number of weights pruned at sparsity `s` in a layer of `n` weights:
/// `round(s * n)` with ties to even, evaluated exactly on the 1e-9 grid.
pub fn pruned_count(s: f64, n: usize) -> usize {
    let s = s.clamp(0.0, 1.0);
    let units = (s * FRACTION_SCALE as f64).round() as u128;
    let num = units * n as u128;
    let q = num / FRACTION_SCALE;
    let r = num % FRACTION_SCALE;
    let up = match (2 * r).cmp(&FRACTION_SCALE) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Equal => q % 2 == 1,
        std::cmp::Ordering::Less => false,
    };
    (q + u128::from(up)) as usize
}

/// Per-layer bitset; bit `i` set means flat weight `i` is kept.
///
/// Equality compares the layer name and bits only.
#[derive(Debug, Clone)]
pub struct PruneMask {
    layer_name: String,
    words: Vec<u64>,
    len: usize,
    pruned: usize,
    target: f64,
    magnitude: bool,
}

impl PartialEq for PruneMask {
    fn eq(&self, other: &Self) -> bool {
        self.layer_name == other.layer_name && self.len == other.len && self.words == other.words
    }
}

impl Eq for PruneMask {}

impl PruneMask {
    pub fn all_kept(layer_name: impl Into<String>, len: usize) -> Self {
        let mut words = vec![u64::MAX; len.div_ceil(64)];
        if len % 64 != 0 {
            if let Some(last) = words.last_mut() {
                *last = (1u64 << (len % 64)) - 1;
            }
        }
        Self {
            layer_name: layer_name.into(),
            words,
            len,
            pruned: 0,
            target: 0.0,
            magnitude: true,
        }
    }

    /// Mask keeping the top `1 - s` fraction of weights by `|w|`.
    ///
    /// The lowest-magnitude `pruned_count(s, n)` weights are removed; equal
    /// magnitudes are removed in ascending flat-index order.
    pub fn magnitude(layer: &LayerTensor, s: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&s) || s.is_nan() {
            return Err(Error::Contract(format!("sparsity {s} outside [0, 1]")));
        }
        let s = quantize_fraction(s);
        let n = layer.parameter_count();
        let order = layer.magnitude_order();
        let mut mask = Self::all_kept(layer.name(), n);
        for &idx in order.iter().take(pruned_count(s, n)) {
            mask.set_kept(idx as usize, false);
        }
        mask.target = s;
        Ok(mask)
    }

    /// Mask removing exactly the listed flat indices.
    pub fn from_pruned(layer_name: impl Into<String>, len: usize, pruned: &[usize]) -> Self {
        let mut mask = Self::all_kept(layer_name, len);
        for &i in pruned {
            mask.set_kept(i, false);
        }
        mask.target = mask.sparsity();
        mask.magnitude = false;
        mask
    }

    /// Rebuild from raw little-endian words as stored in a mask file.
    pub fn from_words(layer_name: impl Into<String>, len: usize, words: Vec<u64>) -> Result<Self> {
        if words.len() != len.div_ceil(64) {
            return Err(Error::Contract(format!(
                "{} words cannot hold exactly {len} bits",
                words.len()
            )));
        }
        if len % 64 != 0 {
            let last = words[words.len() - 1];
            if last >> (len % 64) != 0 {
                return Err(Error::Contract("padding bits set past mask length".into()));
            }
        }
        let kept: usize = words.iter().map(|w| w.count_ones() as usize).sum();
        let mut mask = Self {
            layer_name: layer_name.into(),
            words,
            len,
            pruned: len - kept,
            target: 0.0,
            magnitude: false,
        };
        mask.target = mask.sparsity();
        Ok(mask)
    }

    pub fn layer_name(&self) -> &str {
        &self.layer_name
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn is_kept(&self, i: usize) -> bool {
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn set_kept(&mut self, i: usize, kept: bool) {
        assert!(i < self.len, "bit {i} out of range for mask of {}", self.len);
        let was = self.is_kept(i);
        if was == kept {
            return;
        }
        if kept {
            self.words[i / 64] |= 1 << (i % 64);
            self.pruned -= 1;
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
            self.pruned += 1;
        }
        self.magnitude = false;
        self.target = self.sparsity();
    }

    pub fn pruned_count(&self) -> usize {
        self.pruned
    }

    pub fn kept_count(&self) -> usize {
        self.len - self.pruned
    }

    /// Exact fraction of pruned bits.
    pub fn sparsity(&self) -> f64 {
        if self.len == 0 {
            0.0
        } else {
            self.pruned as f64 / self.len as f64
        }
    }

    /// Sparsity fraction this mask was built for. Equals [`Self::sparsity`]
    /// for masks not built by magnitude rank.
    pub fn target(&self) -> f64 {
        self.target
    }

    pub fn is_magnitude(&self) -> bool {
        self.magnitude
    }

    pub fn pruned_indices(&self) -> Vec<usize> {
        (0..self.len).filter(|&i| !self.is_kept(i)).collect()
    }

    /// True when every pruned bit of `other` is also pruned here.
    pub fn prunes_superset_of(&self, other: &PruneMask) -> bool {
        self.len == other.len
            && self
                .words
                .iter()
                .zip(&other.words)
                .all(|(mine, theirs)| mine & !theirs == 0)
    }

    /// Bitwise AND of kept sets.
    pub fn intersect(&mut self, other: &PruneMask) {
        assert_eq!(self.len, other.len);
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a &= *b;
        }
        let kept: usize = self.words.iter().map(|w| w.count_ones() as usize).sum();
        self.pruned = self.len - kept;
        self.magnitude = false;
        self.target = self.sparsity();
    }

    /// Override the recorded target and magnitude flag, e.g. when restoring
    /// a mask read back from a file.
    pub fn with_target(mut self, target: f64, magnitude: bool) -> Self {
        self.target = target;
        self.magnitude = magnitude;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerKind;

    #[test]
    fn count_rounds_half_to_even() {
        assert_eq!(pruned_count(0.5, 5), 2);
        assert_eq!(pruned_count(0.5, 7), 4);
        assert_eq!(pruned_count(0.25, 2), 0);
        assert_eq!(pruned_count(0.75, 2), 2);
        assert_eq!(pruned_count(0.3, 10), 3);
        assert_eq!(pruned_count(1.0, 9), 9);
        assert_eq!(pruned_count(0.0, 9), 0);
        assert_eq!(pruned_count(0.53, 100), 53);
    }

    #[test]
    fn magnitude_keeps_largest() {
        let l = LayerTensor::new(
            "l",
            LayerKind::Dense,
            vec![1, 4],
            vec![0.1, -0.5, 0.02, 0.3],
            None,
        )
        .unwrap();
        let m = PruneMask::magnitude(&l, 0.5).unwrap();
        assert_eq!(m.pruned_indices(), vec![0, 2]);
        assert_eq!(m.sparsity(), 0.5);
    }

    #[test]
    fn ties_prune_lower_index_first() {
        let l = LayerTensor::new("l", LayerKind::Dense, vec![1, 4], vec![0.2, -0.2, 0.2, 0.1], None)
            .unwrap();
        let m = PruneMask::magnitude(&l, 0.5).unwrap();
        assert_eq!(m.pruned_indices(), vec![0, 3]);
    }

    #[test]
    fn padding_bits_stay_clear() {
        let m = PruneMask::all_kept("x", 70);
        assert_eq!(m.words()[1], (1 << 6) - 1);
        assert!(PruneMask::from_words("x", 70, vec![u64::MAX, u64::MAX]).is_err());
        assert_eq!(PruneMask::from_words("x", 70, m.words().to_vec()).unwrap().pruned_count(), 0);
    }
}
