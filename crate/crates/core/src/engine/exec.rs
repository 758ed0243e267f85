//! Evaluation, masked SGD training and activation statistics on the
//! built-in engine.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{argmax, in_top_k, softmax_cross_entropy, Params, Plan};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::EvaluationResult;
use crate::model::{ModelSnapshot, PruneMask};
use crate::retrain::mask_gradients_in_place;
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Zero gradients at pruned positions before every update.
    pub masking: bool,
    /// Seed of the shuffling stream for these epochs.
    pub seed: u64,
}

/// Top-1 (and top-5 when there are at least six classes) accuracy in percent.
pub fn evaluate(model: &ModelSnapshot, data: &Dataset, limit: Option<usize>) -> Result<EvaluationResult> {
    let plan = Plan::new(model)?;
    check_data(&plan, model, data)?;
    let n = limit.map_or(data.len(), |l| l.min(data.len()));
    if n == 0 {
        return Err(Error::Dataset("cannot evaluate on an empty split".into()));
    }
    let params = Params::<f32>::effective(model);
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    for i in 0..n {
        let tape = plan.forward(&params, data.sample(i));
        let logits = tape.logits();
        let label = data.label(i);
        if argmax(logits) == label {
            top1 += 1;
        }
        if in_top_k(logits, label, 5) {
            top5 += 1;
        }
    }
    Ok(EvaluationResult {
        top1: 100.0 * top1 as f64 / n as f64,
        top5: (model.num_classes() >= 6).then(|| 100.0 * top5 as f64 / n as f64),
        samples: n,
    })
}

fn check_data(plan: &Plan, model: &ModelSnapshot, data: &Dataset) -> Result<()> {
    if data.sample_len() != plan.input_len() || data.num_classes() != model.num_classes() {
        return Err(Error::Contract(format!(
            "dataset samples {:?} / {} classes do not fit model input {:?} / {} classes",
            data.sample_shape(),
            data.num_classes(),
            model.input_shape(),
            model.num_classes()
        )));
    }
    Ok(())
}

fn unit_alive(mask: &PruneMask, unit: usize, unit_size: usize) -> bool {
    mask.pruned_count() == 0 || (unit * unit_size..(unit + 1) * unit_size).any(|j| mask.is_kept(j))
}

/// Mini-batch SGD with momentum over `data`; returns the mean loss of each
/// epoch.
///
/// With masking, pruned positions receive zero gradient and stay at zero.
/// Without masking the pruned weights start from zero, train freely, and
/// each layer's sparsity target is re-applied by magnitude afterwards.
/// Either way the trained values replace the snapshot's weights.
pub fn train_epochs(
    model: &mut ModelSnapshot,
    data: &Dataset,
    opts: &TrainOptions,
    sgd: &SgdConfig,
) -> Result<Vec<f64>> {
    let plan = Plan::new(model)?;
    check_data(&plan, model, data)?;
    if opts.epochs == 0 {
        return Ok(Vec::new());
    }
    if data.is_empty() {
        return Err(Error::Dataset("cannot train on an empty split".into()));
    }
    if sgd.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let masks: Vec<PruneMask> = model.masks().to_vec();
    let layers = model.layers().to_vec();

    // Raw trainable values. Pruned positions start at zero.
    let mut raw = Params {
        weights: (0..layers.len()).map(|i| model.effective_weights(i)).collect(),
        biases: layers
            .iter()
            .map(|l| l.bias().map_or_else(|| vec![0.0; l.out_channels()], <[f32]>::to_vec))
            .collect(),
    };
    let alive: Vec<Vec<bool>> = layers
        .iter()
        .zip(&masks)
        .map(|(l, m)| {
            (0..l.out_channels())
                .map(|u| !opts.masking || unit_alive(m, u, l.unit_size()))
                .collect()
        })
        .collect();
    let has_bias: Vec<bool> = layers.iter().map(|l| l.bias().is_some()).collect();

    let mut grads = Params::zeros_like(&raw);
    let mut velocity = Params::zeros_like(&raw);
    let mut eff = raw.clone();
    let mut rng = StreamRng::new(opts.seed);
    let lr = opts.learning_rate as f32;
    let mu = sgd.momentum as f32;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for (b, batch) in order.chunks(sgd.batch_size).enumerate() {
            for (i, layer_alive) in alive.iter().enumerate() {
                eff.weights[i].copy_from_slice(&raw.weights[i]);
                for (o, &a) in layer_alive.iter().enumerate() {
                    eff.biases[i][o] = if a && has_bias[i] { raw.biases[i][o] } else { 0.0 };
                }
            }
            grads.fill_zero();
            let mut batch_loss = 0.0;
            for &s in batch {
                let tape = plan.forward(&eff, data.sample(s));
                let (loss, d) = softmax_cross_entropy(tape.logits(), data.label(s));
                batch_loss += loss;
                plan.backward(&eff, &tape, d, &mut grads, false);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss {batch_loss} at epoch {epoch}, batch {b}"
                )));
            }
            loss_sum += batch_loss;
            let scale = 1.0 / batch.len() as f32;
            for i in 0..layers.len() {
                if opts.masking {
                    mask_gradients_in_place(&mut grads.weights[i], &masks[i])?;
                }
                for ((w, v), g) in raw.weights[i]
                    .iter_mut()
                    .zip(velocity.weights[i].iter_mut())
                    .zip(&grads.weights[i])
                {
                    *v = mu * *v + g * scale;
                    *w -= lr * *v;
                }
                if has_bias[i] {
                    for (o, ((w, v), g)) in raw.biases[i]
                        .iter_mut()
                        .zip(velocity.biases[i].iter_mut())
                        .zip(&grads.biases[i])
                        .enumerate()
                    {
                        if alive[i][o] {
                            *v = mu * *v + g * scale;
                            *w -= lr * *v;
                        }
                    }
                }
            }
        }
        let mean = loss_sum / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence(format!("non-finite mean loss at epoch {epoch}")));
        }
        losses.push(mean);
    }

    for (i, layer) in layers.iter().enumerate() {
        if let Some(j) = raw.weights[i].iter().position(|w| !w.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite weight in `{}` at {j}",
                layer.name()
            )));
        }
        let mut w = std::mem::take(&mut raw.weights[i]);
        if opts.masking {
            for (j, v) in w.iter_mut().enumerate() {
                if !masks[i].is_kept(j) {
                    *v = 0.0;
                }
            }
        }
        let bias = has_bias[i].then(|| std::mem::take(&mut raw.biases[i]));
        model.replace_layer(i, layer.with_values(w, bias)?)?;
        if opts.masking {
            model.set_mask(i, masks[i].clone())?;
        } else {
            model.set_layer_sparsity(i, masks[i].target())?;
        }
    }
    Ok(losses)
}

/// Mean absolute mini-batch gradient of every weight, one pass over `data`
/// in order, without updating anything.
pub fn mean_abs_gradients(
    model: &ModelSnapshot,
    data: &Dataset,
    batch_size: usize,
) -> Result<Vec<Vec<f32>>> {
    let plan = Plan::new(model)?;
    check_data(&plan, model, data)?;
    if data.is_empty() || batch_size == 0 {
        return Err(Error::Dataset("gradient statistics need a non-empty split".into()));
    }
    let params = Params::<f32>::effective(model);
    let mut grads = Params::zeros_like(&params);
    let mut acc: Vec<Vec<f64>> = params.weights.iter().map(|w| vec![0.0; w.len()]).collect();
    let mut batches = 0usize;
    let order: Vec<usize> = (0..data.len()).collect();
    for batch in order.chunks(batch_size) {
        grads.fill_zero();
        for &s in batch {
            let tape = plan.forward(&params, data.sample(s));
            let (_, d) = softmax_cross_entropy(tape.logits(), data.label(s));
            plan.backward(&params, &tape, d, &mut grads, false);
        }
        let scale = 1.0 / batch.len() as f64;
        for (a, g) in acc.iter_mut().zip(&grads.weights) {
            for (av, gv) in a.iter_mut().zip(g) {
                *av += (f64::from(*gv) * scale).abs();
            }
        }
        batches += 1;
    }
    Ok(acc
        .into_iter()
        .map(|a| a.into_iter().map(|v| (v / batches as f64) as f32).collect())
        .collect())
}

/// Per-filter mean absolute post-nonlinearity activations, over all samples
/// and per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationSummary {
    /// layer index -> per-filter mean
    pub global: BTreeMap<usize, Vec<f64>>,
    /// class -> layer index -> per-filter mean
    pub per_class: BTreeMap<usize, BTreeMap<usize, Vec<f64>>>,
}

pub fn activation_summary(
    model: &ModelSnapshot,
    data: &Dataset,
    layers: &[usize],
) -> Result<ActivationSummary> {
    let plan = Plan::new(model)?;
    check_data(&plan, model, data)?;
    if data.is_empty() {
        return Err(Error::Dataset("activation statistics need a non-empty split".into()));
    }
    let params = Params::<f32>::effective(model);
    let slots: Vec<(usize, usize, [usize; 3])> = layers
        .iter()
        .map(|&l| {
            let idx = plan.activation_index(l);
            (l, idx, plan.activation_shape(idx))
        })
        .collect();
    let classes = model.num_classes();
    // sums[class][slot][filter]
    let mut sums: Vec<Vec<Vec<f64>>> = (0..classes)
        .map(|_| slots.iter().map(|(_, _, s)| vec![0.0; s[0]]).collect())
        .collect();
    let mut counts = vec![0usize; classes];
    for i in 0..data.len() {
        let tape = plan.forward(&params, data.sample(i));
        let label = data.label(i);
        counts[label] += 1;
        for (slot, (_, idx, shape)) in slots.iter().enumerate() {
            let act = &tape.acts[*idx];
            let plane = shape[1] * shape[2];
            for (f, chunk) in act.chunks(plane).enumerate() {
                let s: f64 = chunk.iter().map(|v| f64::from(v.abs())).sum();
                sums[label][slot][f] += s / plane as f64;
            }
        }
    }
    let total: usize = counts.iter().sum();
    let mut global = BTreeMap::new();
    for (slot, (layer, _, shape)) in slots.iter().enumerate() {
        let mut g = vec![0.0; shape[0]];
        for class_sums in &sums {
            for (gv, v) in g.iter_mut().zip(&class_sums[slot]) {
                *gv += v;
            }
        }
        global.insert(*layer, g.into_iter().map(|v| v / total as f64).collect());
    }
    let mut per_class = BTreeMap::new();
    for (c, class_sums) in sums.into_iter().enumerate() {
        if counts[c] == 0 {
            continue;
        }
        let m = slots
            .iter()
            .zip(class_sums)
            .map(|((layer, _, _), v)| (*layer, v.into_iter().map(|x| x / counts[c] as f64).collect()))
            .collect();
        per_class.insert(c, m);
    }
    Ok(ActivationSummary { global, per_class })
}
