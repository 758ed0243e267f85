//! Built-in forward/backward engine for small CNNs.
//!
//! Supported ops: conv2d (stride, zero padding), dense, relu, 2x2 max-pool,
//! flatten, and a softmax cross-entropy head. The engine is generic over the
//! float type so the same code path can be checked in f64 against finite
//! differences and run in f32 for training and evaluation.

mod gradcheck;
mod exec;

use std::fmt::Debug;
use std::ops::AddAssign;

use num_traits::Float;

pub use gradcheck::{gradient_check, linear_gradient_check, relative_error, GradCheckReport};
pub use exec::{
    activation_summary, evaluate, mean_abs_gradients, train_epochs, ActivationSummary, SgdConfig,
    TrainOptions,
};

use crate::error::{Error, Result};
use crate::model::{ArchOp, ModelSnapshot};

pub trait Scalar: Float + AddAssign + Default + Debug + Send + Sync + 'static {
    fn from_f32(v: f32) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn from_f32(v: f32) -> Self {
        f64::from(v)
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub layer: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Conv(ConvGeom),
    Dense { layer: usize, inputs: usize, outputs: usize },
    Relu,
    MaxPool { c: usize, h: usize, w: usize, oh: usize, ow: usize },
    Flatten,
}

/// Where a layer's output channels are consumed downstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Consumer {
    pub layer: usize,
    /// Contiguous input positions per producer channel at the consumer
    /// (1 for conv consumers, H*W of the flattened map for dense ones).
    pub positions_per_channel: usize,
}

/// Shape-checked execution plan derived from a model's graph.
#[derive(Debug, Clone)]
pub struct Plan {
    steps: Vec<Step>,
    /// shapes[i] is the `[c, h, w]` shape of acts[i]; acts[0] is the input.
    shapes: Vec<[usize; 3]>,
    layer_steps: Vec<usize>,
    num_classes: usize,
}

impl Plan {
    pub fn new(model: &ModelSnapshot) -> Result<Self> {
        let mut shape = model.input_shape();
        let mut shapes = vec![shape];
        let mut steps = Vec::with_capacity(model.arch().len());
        let mut layer_steps = vec![usize::MAX; model.layer_count()];
        for op in model.arch() {
            let step = match op {
                ArchOp::Conv2d { layer, stride, pad } => {
                    let idx = model.layer_index(layer)?;
                    let l = model.layer(idx);
                    let s = l.shape();
                    let (stride, pad) = (*stride, *pad);
                    if stride == 0 {
                        return Err(Error::Contract(format!("conv `{layer}` has stride 0")));
                    }
                    if s[1] != shape[0] {
                        return Err(Error::Contract(format!(
                            "conv `{layer}` expects {} input channels, graph provides {}",
                            s[1], shape[0]
                        )));
                    }
                    if shape[1] + 2 * pad < s[2] || shape[2] + 2 * pad < s[3] {
                        return Err(Error::Contract(format!(
                            "conv `{layer}` kernel larger than padded input"
                        )));
                    }
                    let g = ConvGeom {
                        layer: idx,
                        in_c: shape[0],
                        in_h: shape[1],
                        in_w: shape[2],
                        out_c: s[0],
                        out_h: (shape[1] + 2 * pad - s[2]) / stride + 1,
                        out_w: (shape[2] + 2 * pad - s[3]) / stride + 1,
                        k_h: s[2],
                        k_w: s[3],
                        stride,
                        pad,
                    };
                    shape = [g.out_c, g.out_h, g.out_w];
                    if layer_steps[idx] != usize::MAX {
                        return Err(Error::Contract(format!("layer `{layer}` used twice")));
                    }
                    layer_steps[idx] = steps.len();
                    Step::Conv(g)
                }
                ArchOp::Dense { layer } => {
                    let idx = model.layer_index(layer)?;
                    let s = model.layer(idx).shape();
                    let inputs = shape.iter().product::<usize>();
                    if s[1] != inputs {
                        return Err(Error::Contract(format!(
                            "dense `{layer}` expects {} inputs, graph provides {inputs}",
                            s[1]
                        )));
                    }
                    shape = [s[0], 1, 1];
                    if layer_steps[idx] != usize::MAX {
                        return Err(Error::Contract(format!("layer `{layer}` used twice")));
                    }
                    layer_steps[idx] = steps.len();
                    Step::Dense {
                        layer: idx,
                        inputs,
                        outputs: s[0],
                    }
                }
                ArchOp::Relu => Step::Relu,
                ArchOp::MaxPool2 => {
                    let [c, h, w] = shape;
                    if h < 2 || w < 2 {
                        return Err(Error::Contract(format!("maxpool2 on {h}x{w} map")));
                    }
                    shape = [c, h / 2, w / 2];
                    Step::MaxPool {
                        c,
                        h,
                        w,
                        oh: h / 2,
                        ow: w / 2,
                    }
                }
                ArchOp::Flatten => {
                    shape = [shape.iter().product(), 1, 1];
                    Step::Flatten
                }
            };
            steps.push(step);
            shapes.push(shape);
        }
        if let Some(unused) = layer_steps.iter().position(|&s| s == usize::MAX) {
            return Err(Error::Contract(format!(
                "layer `{}` is not referenced by the graph",
                model.layer(unused).name()
            )));
        }
        let out: usize = shape.iter().product();
        if out != model.num_classes() {
            return Err(Error::Contract(format!(
                "graph produces {out} logits for {} classes",
                model.num_classes()
            )));
        }
        Ok(Self {
            steps,
            shapes,
            layer_steps,
            num_classes: model.num_classes(),
        })
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_len(&self) -> usize {
        self.shapes[0].iter().product()
    }

    /// Index into a tape's activations holding the layer's post-nonlinearity
    /// output (the relu output when a relu directly follows the layer).
    pub fn activation_index(&self, layer: usize) -> usize {
        let s = self.layer_steps[layer];
        if matches!(self.steps.get(s + 1), Some(Step::Relu)) {
            s + 2
        } else {
            s + 1
        }
    }

    /// Shape `[c, h, w]` of the activations at `index`.
    pub fn activation_shape(&self, index: usize) -> [usize; 3] {
        self.shapes[index]
    }

    /// The next weighted layer that reads this layer's output channels.
    pub fn consumer(&self, layer: usize) -> Option<Consumer> {
        let s = self.layer_steps[layer];
        let channels = self.shapes[s + 1][0];
        for step in self.steps.iter().skip(s + 1) {
            match step {
                Step::Conv(g) => {
                    return Some(Consumer {
                        layer: g.layer,
                        positions_per_channel: 1,
                    })
                }
                Step::Dense { layer, inputs, .. } => {
                    return Some(Consumer {
                        layer: *layer,
                        positions_per_channel: inputs / channels,
                    });
                }
                _ => {}
            }
        }
        None
    }

    pub fn forward<T: Scalar>(&self, p: &Params<T>, input: &[T]) -> Tape<T> {
        debug_assert_eq!(input.len(), self.input_len());
        let mut acts: Vec<Vec<T>> = Vec::with_capacity(self.steps.len() + 1);
        let mut pool_idx: Vec<Vec<u32>> = Vec::with_capacity(self.steps.len());
        acts.push(input.to_vec());
        for step in &self.steps {
            let x = acts.last().expect("input present");
            let mut idx = Vec::new();
            let y = match step {
                Step::Conv(g) => conv_forward(g, &p.weights[g.layer], &p.biases[g.layer], x),
                Step::Dense {
                    layer,
                    inputs,
                    outputs,
                } => dense_forward(*inputs, *outputs, &p.weights[*layer], &p.biases[*layer], x),
                Step::Relu => x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
                Step::MaxPool { c, h, w, oh, ow } => {
                    let (y, i) = maxpool_forward(*c, *h, *w, *oh, *ow, x);
                    idx = i;
                    y
                }
                Step::Flatten => x.clone(),
            };
            pool_idx.push(idx);
            acts.push(y);
        }
        Tape { acts, pool_idx }
    }

    /// Accumulate parameter gradients of the loss into `grads`, given the
    /// gradient with respect to the logits. Returns the input gradient when
    /// `want_input` is set.
    pub fn backward<T: Scalar>(
        &self,
        p: &Params<T>,
        tape: &Tape<T>,
        dlogits: Vec<T>,
        grads: &mut Params<T>,
        want_input: bool,
    ) -> Option<Vec<T>> {
        let mut d = dlogits;
        for (i, step) in self.steps.iter().enumerate().rev() {
            let x = &tape.acts[i];
            let need_dx = i > 0 || want_input;
            d = match step {
                Step::Conv(g) => {
                    let (gw, gb) = grads.pair_mut(g.layer);
                    conv_backward(g, &p.weights[g.layer], x, &d, gw, gb, need_dx)
                }
                Step::Dense {
                    layer,
                    inputs,
                    outputs,
                } => {
                    let (gw, gb) = grads.pair_mut(*layer);
                    dense_backward(*inputs, *outputs, &p.weights[*layer], x, &d, gw, gb, need_dx)
                }
                Step::Relu => x
                    .iter()
                    .zip(&d)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect(),
                Step::MaxPool { c, h, w, .. } => {
                    let mut dx = vec![T::zero(); c * h * w];
                    for (o, &src) in tape.pool_idx[i].iter().enumerate() {
                        dx[src as usize] += d[o];
                    }
                    dx
                }
                Step::Flatten => d,
            };
        }
        want_input.then_some(d)
    }
}

/// Per-layer weights and biases, indexed like the model's layers.
#[derive(Debug, Clone)]
pub struct Params<T> {
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<Vec<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn zeros_like(other: &Params<T>) -> Self {
        Self {
            weights: other.weights.iter().map(|w| vec![T::zero(); w.len()]).collect(),
            biases: other.biases.iter().map(|b| vec![T::zero(); b.len()]).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    fn pair_mut(&mut self, layer: usize) -> (&mut [T], &mut [T]) {
        (&mut self.weights[layer], &mut self.biases[layer])
    }

    /// Masked parameters of a snapshot. Units whose incoming weights are all
    /// pruned are treated as removed, so their bias is dropped as well.
    pub fn effective(model: &ModelSnapshot) -> Self {
        let mut weights = Vec::with_capacity(model.layer_count());
        let mut biases = Vec::with_capacity(model.layer_count());
        for (i, layer) in model.layers().iter().enumerate() {
            let mask = model.mask(i);
            let eff = model.effective_weights(i);
            let unit = layer.unit_size();
            let bias: Vec<T> = match layer.bias() {
                Some(b) => b
                    .iter()
                    .enumerate()
                    .map(|(o, &v)| {
                        let alive = mask.pruned_count() == 0
                            || (o * unit..(o + 1) * unit).any(|j| mask.is_kept(j));
                        if alive {
                            T::from_f32(v)
                        } else {
                            T::zero()
                        }
                    })
                    .collect(),
                None => vec![T::zero(); layer.out_channels()],
            };
            weights.push(eff.into_iter().map(T::from_f32).collect());
            biases.push(bias);
        }
        Self { weights, biases }
    }
}

/// Activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    pub acts: Vec<Vec<T>>,
    pool_idx: Vec<Vec<u32>>,
}

impl<T> Tape<T> {
    pub fn logits(&self) -> &[T] {
        self.acts.last().expect("tape has output")
    }
}

fn conv_forward<T: Scalar>(g: &ConvGeom, w: &[T], b: &[T], x: &[T]) -> Vec<T> {
    let plane = g.out_h * g.out_w;
    let mut y = vec![T::zero(); g.out_c * plane];
    for o in 0..g.out_c {
        let out = &mut y[o * plane..(o + 1) * plane];
        out.iter_mut().for_each(|v| *v = b[o]);
        for c in 0..g.in_c {
            let xin = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            for ky in 0..g.k_h {
                for kx in 0..g.k_w {
                    let wv = w[((o * g.in_c + c) * g.k_h + ky) * g.k_w + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let row = &xin[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                        let orow = &mut out[oy * g.out_w..(oy + 1) * g.out_w];
                        for (ox, ov) in orow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                *ov += wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    w: &[T],
    x: &[T],
    dy: &[T],
    gw: &mut [T],
    gb: &mut [T],
    need_dx: bool,
) -> Vec<T> {
    let plane = g.out_h * g.out_w;
    let in_plane = g.in_h * g.in_w;
    let mut dx = if need_dx {
        vec![T::zero(); g.in_c * in_plane]
    } else {
        Vec::new()
    };
    for o in 0..g.out_c {
        let dout = &dy[o * plane..(o + 1) * plane];
        let mut sb = T::zero();
        for &v in dout {
            sb += v;
        }
        gb[o] += sb;
        for c in 0..g.in_c {
            let xin = &x[c * in_plane..(c + 1) * in_plane];
            for ky in 0..g.k_h {
                for kx in 0..g.k_w {
                    let wi = ((o * g.in_c + c) * g.k_h + ky) * g.k_w + kx;
                    let wv = w[wi];
                    let mut acc = T::zero();
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.in_w as isize {
                                continue;
                            }
                            let gy = dout[oy * g.out_w + ox];
                            acc += gy * xin[iy * g.in_w + ix as usize];
                            if need_dx {
                                dx[c * in_plane + iy * g.in_w + ix as usize] += wv * gy;
                            }
                        }
                    }
                    gw[wi] += acc;
                }
            }
        }
    }
    dx
}

fn dense_forward<T: Scalar>(inputs: usize, outputs: usize, w: &[T], b: &[T], x: &[T]) -> Vec<T> {
    (0..outputs)
        .map(|j| {
            let row = &w[j * inputs..(j + 1) * inputs];
            let mut acc = b[j];
            for (wv, xv) in row.iter().zip(x) {
                acc += *wv * *xv;
            }
            acc
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn dense_backward<T: Scalar>(
    inputs: usize,
    outputs: usize,
    w: &[T],
    x: &[T],
    dy: &[T],
    gw: &mut [T],
    gb: &mut [T],
    need_dx: bool,
) -> Vec<T> {
    let mut dx = if need_dx {
        vec![T::zero(); inputs]
    } else {
        Vec::new()
    };
    for j in 0..outputs {
        let g = dy[j];
        gb[j] += g;
        if g == T::zero() {
            continue;
        }
        let grow = &mut gw[j * inputs..(j + 1) * inputs];
        for (gv, xv) in grow.iter_mut().zip(x) {
            *gv += g * *xv;
        }
        if need_dx {
            let row = &w[j * inputs..(j + 1) * inputs];
            for (dv, wv) in dx.iter_mut().zip(row) {
                *dv += g * *wv;
            }
        }
    }
    dx
}

fn maxpool_forward<T: Scalar>(
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    x: &[T],
) -> (Vec<T>, Vec<u32>) {
    let mut y = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = ch * h * w + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                y.push(x[best]);
                idx.push(best as u32);
            }
        }
    }
    (y, idx)
}

/// Mean softmax cross-entropy loss and its gradient with respect to logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], label: usize) -> (f64, Vec<T>) {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let mut sum = T::zero();
    for &e in &exps {
        sum += e;
    }
    let loss = (sum.ln() - (logits[label] - max)).to_f64();
    let mut grad: Vec<T> = exps.into_iter().map(|e| e / sum).collect();
    grad[label] = grad[label] - T::one();
    (loss, grad)
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// True when `label` is among the `k` best logits (ties by lower index).
pub fn in_top_k<T: Scalar>(logits: &[T], label: usize, k: usize) -> bool {
    let target = logits[label];
    let better = logits
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > target || (v == target && i < label))
        .count();
    better < k
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.0f32, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[0.0f32, 1.0, 1.0]), 1);
        assert!(in_top_k(&[1.0f32, 1.0, 1.0], 0, 1));
        assert!(!in_top_k(&[1.0f32, 1.0, 1.0], 1, 1));
        assert!(in_top_k(&[1.0f32, 1.0, 1.0], 1, 2));
    }

    #[test]
    fn softmax_gradient_sums_to_zero() {
        let (loss, g) = softmax_cross_entropy(&[1.0f64, 2.0, 0.5], 1);
        assert!(loss > 0.0);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
        assert!(g[1] < 0.0);
    }
}
