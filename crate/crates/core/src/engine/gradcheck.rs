//! Finite-difference verification of the engine's analytic gradients.

use rand::Rng;

use super::{softmax_cross_entropy, Params, Plan};
use crate::model::{ArchOp, LayerKind, LayerTensor, ModelSnapshot};
use crate::rng::StreamRng;

const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub parameters: usize,
}

/// `|a - n| / max(|a|, |n|)`, falling back to the absolute difference when
/// both values are below 1e-8.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

struct Net {
    model: ModelSnapshot,
    params: Params<f64>,
    input: Vec<f64>,
    label: usize,
}

fn placeholder(name: &str, kind: LayerKind, shape: Vec<usize>) -> LayerTensor {
    let n = shape.iter().product();
    let out = shape[0];
    LayerTensor::new(name, kind, shape, vec![0.0; n], Some(vec![0.0; out])).expect("valid shape")
}

fn random_params(model: &ModelSnapshot, rng: &mut StreamRng) -> Params<f64> {
    let weights = model
        .layers()
        .iter()
        .map(|l| {
            let bound = (3.0 / l.unit_size() as f64).sqrt();
            (0..l.parameter_count()).map(|_| rng.gen_range(-bound..bound)).collect()
        })
        .collect();
    let biases = model
        .layers()
        .iter()
        .map(|l| (0..l.out_channels()).map(|_| rng.gen_range(-0.1..0.1)).collect())
        .collect();
    Params { weights, biases }
}

fn random_conv_net(seed: u64) -> Net {
    let mut rng = StreamRng::derived(seed, "gradcheck");
    let in_c = rng.gen_range(1..=2);
    let size = rng.gen_range(6..=8);
    let out_c = rng.gen_range(2..=3);
    let k = rng.gen_range(2..=3);
    let stride = rng.gen_range(1..=2);
    let pad = rng.gen_range(0..=1);
    let use_pool = rng.gen_bool(0.5);
    let classes = rng.gen_range(3..=4);

    let conv_out = (size + 2 * pad - k) / stride + 1;
    let spatial = if use_pool { conv_out / 2 } else { conv_out };
    let flat = out_c * spatial * spatial;
    let hidden = rng.gen_range(4..=6);

    let mut arch = vec![
        ArchOp::Conv2d {
            layer: "conv".into(),
            stride,
            pad,
        },
        ArchOp::Relu,
    ];
    if use_pool {
        arch.push(ArchOp::MaxPool2);
    }
    arch.extend([
        ArchOp::Flatten,
        ArchOp::Dense { layer: "fc1".into() },
        ArchOp::Relu,
        ArchOp::Dense { layer: "fc2".into() },
    ]);
    let layers = vec![
        placeholder("conv", LayerKind::Conv2d, vec![out_c, in_c, k, k]),
        placeholder("fc1", LayerKind::Dense, vec![hidden, flat]),
        placeholder("fc2", LayerKind::Dense, vec![classes, hidden]),
    ];
    let model = ModelSnapshot::new(layers, arch, [in_c, size, size], classes).expect("valid net");
    let params = random_params(&model, &mut rng);
    let input = (0..in_c * size * size).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let label = rng.gen_range(0..classes);
    Net {
        model,
        params,
        input,
        label,
    }
}

fn slot(p: &mut Params<f64>, layer: usize, which: usize, j: usize) -> &mut f64 {
    if which == 0 {
        &mut p.weights[layer][j]
    } else {
        &mut p.biases[layer][j]
    }
}

fn check(net: &Net) -> GradCheckReport {
    let plan = Plan::new(&net.model).expect("random net is consistent");
    let loss_at = |p: &Params<f64>| {
        let tape = plan.forward(p, &net.input);
        softmax_cross_entropy(tape.logits(), net.label).0
    };
    let tape = plan.forward(&net.params, &net.input);
    let (_, d) = softmax_cross_entropy(tape.logits(), net.label);
    let mut grads = Params::zeros_like(&net.params);
    plan.backward(&net.params, &tape, d, &mut grads, false);

    let mut probe = net.params.clone();
    let mut worst = 0.0f64;
    let mut count = 0;
    for layer in 0..probe.weights.len() {
        for which in 0..2 {
            let len = if which == 0 {
                probe.weights[layer].len()
            } else {
                probe.biases[layer].len()
            };
            for j in 0..len {
                let original = *slot(&mut probe, layer, which, j);
                *slot(&mut probe, layer, which, j) = original + STEP;
                let plus = loss_at(&probe);
                *slot(&mut probe, layer, which, j) = original - STEP;
                let minus = loss_at(&probe);
                *slot(&mut probe, layer, which, j) = original;
                let numeric = (plus - minus) / (2.0 * STEP);
                let analytic = if which == 0 {
                    grads.weights[layer][j]
                } else {
                    grads.biases[layer][j]
                };
                worst = worst.max(relative_error(analytic, numeric));
                count += 1;
            }
        }
    }
    GradCheckReport {
        max_relative_error: worst,
        parameters: count,
    }
}

/// Compare analytic and central-difference gradients (h = 1e-5, in f64) of
/// a random conv + relu (+ optional max-pool) + dense network.
pub fn gradient_check(seed: u64) -> GradCheckReport {
    check(&random_conv_net(seed))
}

/// Same check for a single dense layer feeding softmax cross-entropy.
pub fn linear_gradient_check(seed: u64) -> GradCheckReport {
    let mut rng = StreamRng::derived(seed, "gradcheck-linear");
    let inputs = 6;
    let classes = 3;
    let model = ModelSnapshot::new(
        vec![placeholder("fc", LayerKind::Dense, vec![classes, inputs])],
        vec![ArchOp::Dense { layer: "fc".into() }],
        [inputs, 1, 1],
        classes,
    )
    .expect("valid net");
    let params = random_params(&model, &mut rng);
    let input = (0..inputs).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let label = rng.gen_range(0..classes);
    check(&Net {
        model,
        params,
        input,
        label,
    })
}
