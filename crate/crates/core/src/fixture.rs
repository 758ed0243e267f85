//! Procedurally generated shape-classification data and small trained
//! CNNs to run the pipelines against.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{save_dataset, Dataset, Split};
use crate::engine::{self, SgdConfig, TrainOptions};
use crate::error::{Error, Result};
use crate::eval::EvaluationResult;
use crate::model::{save_model, ArchOp, LayerKind, LayerTensor, ModelSnapshot};
use crate::rng::{derive_seed, StreamRng};

pub const MAX_PARAMETERS: usize = 100_000;
pub const MAX_SAMPLES: usize = 10_000;
pub const SHAPE_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureSpec {
    pub classes: usize,
    pub image_size: usize,
    /// Training samples; the test split gets a quarter as many.
    pub samples: usize,
    pub seed: u64,
    pub conv_channels: [usize; 2],
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub noise: f64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            image_size: 16,
            samples: 2000,
            seed: 0,
            conv_channels: [8, 16],
            hidden: 160,
            epochs: 8,
            learning_rate: 0.02,
            noise: 0.15,
        }
    }
}

impl FixtureSpec {
    /// A three-layer network on 8x8 images, small enough to enumerate.
    pub fn toy() -> Self {
        Self {
            classes: 4,
            image_size: 8,
            samples: 800,
            seed: 0,
            conv_channels: [4, 8],
            hidden: 0,
            epochs: 10,
            learning_rate: 0.03,
            noise: 0.2,
        }
    }

    pub fn test_samples(&self) -> usize {
        (self.samples / 4).max(1)
    }

    pub fn parameter_count(&self) -> usize {
        let [c1, c2] = self.conv_channels;
        let flat = c2 * (self.image_size / 4).pow(2);
        let conv = c1 * 9 + c1 + c2 * c1 * 9 + c2;
        let dense = if self.hidden == 0 {
            flat * self.classes + self.classes
        } else {
            flat * self.hidden + self.hidden + self.hidden * self.classes + self.classes
        };
        conv + dense
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Bounds("samples must be positive".into()));
        }
        if self.samples + self.test_samples() > MAX_SAMPLES {
            return Err(Error::Bounds(format!(
                "{} samples exceed the limit of {MAX_SAMPLES}",
                self.samples + self.test_samples()
            )));
        }
        if !(2..=SHAPE_CLASSES).contains(&self.classes) {
            return Err(Error::Bounds(format!("classes must lie in 2..={SHAPE_CLASSES}")));
        }
        if self.image_size < 8 || self.image_size % 4 != 0 || self.image_size > 64 {
            return Err(Error::Bounds("image_size must be a multiple of 4 in 8..=64".into()));
        }
        if self.conv_channels.contains(&0) {
            return Err(Error::Bounds("conv channels must be positive".into()));
        }
        if self.parameter_count() > MAX_PARAMETERS {
            return Err(Error::Bounds(format!(
                "{} parameters exceed the limit of {MAX_PARAMETERS}",
                self.parameter_count()
            )));
        }
        if !(self.learning_rate > 0.0) || !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Bounds("learning_rate must be positive and noise in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Draw one shape of `class` into a `size x size` image.
pub fn draw_shape<R: Rng + ?Sized>(class: usize, size: usize, noise: f64, rng: &mut R) -> Vec<f32> {
    let s = size as f64;
    let cx = s / 2.0 - 0.5 + rng.gen_range(-0.15..0.15) * s;
    let cy = s / 2.0 - 0.5 + rng.gen_range(-0.15..0.15) * s;
    let r = s * rng.gen_range(0.22..0.32);
    let t = (s / 10.0).max(1.0);
    let intensity = rng.gen_range(0.7..1.0);
    let mut img = vec![0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let d = (dx * dx + dy * dy).sqrt();
            let inside_box = dx.abs() <= r && dy.abs() <= r;
            let on = match class {
                0 => inside_box,
                1 => inside_box && (dx.abs() > r - t || dy.abs() > r - t),
                2 => d <= r,
                3 => d <= r && d > r - t,
                4 => dy.abs() <= t / 2.0 + 0.5 && dx.abs() <= r,
                5 => dx.abs() <= t / 2.0 + 0.5 && dy.abs() <= r,
                6 => (dx - dy).abs() <= t && inside_box,
                7 => (dx + dy).abs() <= t && inside_box,
                8 => inside_box && (dx.abs() <= t / 2.0 + 0.5 || dy.abs() <= t / 2.0 + 0.5),
                _ => inside_box && ((dx - dy).abs() <= t || (dx + dy).abs() <= t),
            };
            let base = if on { intensity } else { 0.0 };
            img[y * size + x] = (base + noise * rng.gen_range(-1.0..1.0)) as f32;
        }
    }
    img
}

/// Balanced labelled samples in shuffled order.
pub fn generate_split(
    classes: usize,
    size: usize,
    count: usize,
    noise: f64,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    let mut rng = StreamRng::new(seed);
    let mut inputs = Vec::with_capacity(count * size * size);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = (i + rng.gen_range(0..classes)) % classes;
        inputs.extend(draw_shape(class, size, noise, &mut rng));
        labels.push(class as u32);
    }
    Dataset::new(inputs, labels, [1, size, size], classes, split)
}

fn uniform_init(rng: &mut StreamRng, n: usize, fan_in: usize) -> Vec<f32> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect()
}

/// Untrained network for `spec` with seeded uniform initialization.
pub fn init_model(spec: &FixtureSpec) -> Result<ModelSnapshot> {
    let mut rng = StreamRng::new(derive_seed(spec.seed, "fixture/init"));
    let [c1, c2] = spec.conv_channels;
    let flat = c2 * (spec.image_size / 4).pow(2);
    let conv = |rng: &mut StreamRng, name: &str, out: usize, inp: usize| {
        LayerTensor::new(
            name,
            LayerKind::Conv2d,
            vec![out, inp, 3, 3],
            uniform_init(rng, out * inp * 9, inp * 9),
            Some(vec![0.0; out]),
        )
    };
    let dense = |rng: &mut StreamRng, name: &str, out: usize, inp: usize| {
        LayerTensor::new(
            name,
            LayerKind::Dense,
            vec![out, inp],
            uniform_init(rng, out * inp, inp),
            Some(vec![0.0; out]),
        )
    };
    let conv_op = |layer: &str| ArchOp::Conv2d {
        layer: layer.into(),
        stride: 1,
        pad: 1,
    };
    let mut layers = vec![conv(&mut rng, "conv1", c1, 1)?, conv(&mut rng, "conv2", c2, c1)?];
    let mut arch = vec![
        conv_op("conv1"),
        ArchOp::Relu,
        ArchOp::MaxPool2,
        conv_op("conv2"),
        ArchOp::Relu,
        ArchOp::MaxPool2,
        ArchOp::Flatten,
    ];
    if spec.hidden == 0 {
        layers.push(dense(&mut rng, "fc", spec.classes, flat)?);
        arch.push(ArchOp::Dense { layer: "fc".into() });
    } else {
        layers.push(dense(&mut rng, "fc1", spec.hidden, flat)?);
        layers.push(dense(&mut rng, "fc2", spec.classes, spec.hidden)?);
        arch.extend([
            ArchOp::Dense { layer: "fc1".into() },
            ArchOp::Relu,
            ArchOp::Dense { layer: "fc2".into() },
        ]);
    }
    ModelSnapshot::new(layers, arch, [1, spec.image_size, spec.image_size], spec.classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureMeta {
    pub spec: FixtureSpec,
    pub parameters: usize,
    pub baseline: EvaluationResult,
    pub loss_curve: Vec<f64>,
    pub model_digest: u64,
}

/// A trained fixture held in memory.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub model: ModelSnapshot,
    pub train: Dataset,
    pub test: Dataset,
    pub meta: FixtureMeta,
}

/// Generate data and train the network for `spec`.
pub fn build_fixture(spec: &FixtureSpec) -> Result<Fixture> {
    spec.validate()?;
    let train = generate_split(
        spec.classes,
        spec.image_size,
        spec.samples,
        spec.noise,
        derive_seed(spec.seed, "fixture/train-data"),
        Split::Train,
    )?;
    let test = generate_split(
        spec.classes,
        spec.image_size,
        spec.test_samples(),
        spec.noise,
        derive_seed(spec.seed, "fixture/test-data"),
        Split::Test,
    )?;
    let mut model = init_model(spec)?;
    let loss_curve = engine::train_epochs(
        &mut model,
        &train,
        &TrainOptions {
            epochs: spec.epochs,
            learning_rate: spec.learning_rate,
            masking: true,
            seed: derive_seed(spec.seed, "fixture/train"),
        },
        &SgdConfig::default(),
    )?;
    let baseline = engine::evaluate(&model, &test, None)?;
    let meta = FixtureMeta {
        spec: spec.clone(),
        parameters: spec.parameter_count(),
        baseline,
        loss_curve,
        model_digest: model.digest(),
    };
    Ok(Fixture {
        model,
        train,
        test,
        meta,
    })
}

/// Build a fixture and write `model/`, `data/` and `fixture.json` under `out`.
pub fn make_fixture(spec: &FixtureSpec, out: impl AsRef<Path>) -> Result<FixtureMeta> {
    let out = out.as_ref();
    let fixture = build_fixture(spec)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_model(&fixture.model, out.join("model"))?;
    save_dataset(&fixture.train, &fixture.test, out.join("data"))?;
    let path = out.join("fixture.json");
    let text = serde_json::to_string_pretty(&fixture.meta).expect("fixture metadata serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(fixture.meta)
}
