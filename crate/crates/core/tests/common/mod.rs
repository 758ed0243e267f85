#![allow(dead_code)]

use std::collections::VecDeque;
use std::sync::OnceLock;

use prunesearch::data::{DataBundle, Split};
use prunesearch::eval::{
    BuiltinConfig, BuiltinEvaluator, EvaluationResult, Evaluator, FilterMeans, RetrainOutcome,
    RetrainRequest, TrainerCapabilities,
};
use prunesearch::fixture::{build_fixture, Fixture, FixtureSpec};
use prunesearch::model::{ArchOp, LayerKind, LayerTensor, ModelSnapshot, PruneMask};
use prunesearch::pruning::GradientStats;
use prunesearch::rng::StreamRng;
use prunesearch::{Error, Result};
use rand::Rng;

pub const VALIDATION_FRACTION: f64 = 0.2;

pub fn toy_fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| build_fixture(&FixtureSpec::toy()).expect("toy fixture"))
}

pub fn desk_fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| build_fixture(&FixtureSpec::default()).expect("desk fixture"))
}

pub fn evaluator(f: &Fixture) -> BuiltinEvaluator {
    let data =
        DataBundle::new(f.train.clone(), f.test.clone(), VALIDATION_FRACTION).expect("bundle");
    BuiltinEvaluator::new(data, BuiltinConfig::default())
}

/// A chain of dense layers with distinct nonzero weights.
pub fn dense_chain(widths: &[usize], seed: u64) -> ModelSnapshot {
    let mut rng = StreamRng::new(seed);
    let mut layers = Vec::new();
    let mut arch = Vec::new();
    for (i, w) in widths.windows(2).enumerate() {
        let name = format!("d{i}");
        let n = w[0] * w[1];
        let weights = (0..n)
            .map(|j| {
                let mag = 0.01 + rng.gen::<f32>() + j as f32 * 1e-6;
                if rng.gen_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        layers.push(
            LayerTensor::new(
                &name,
                LayerKind::Dense,
                vec![w[1], w[0]],
                weights,
                Some(vec![0.0; w[1]]),
            )
            .unwrap(),
        );
        if i > 0 {
            arch.push(ArchOp::Relu);
        }
        arch.push(ArchOp::Dense { layer: name });
    }
    let classes = *widths.last().unwrap();
    ModelSnapshot::new(layers, arch, [widths[0], 1, 1], classes).unwrap()
}

/// Evaluator whose validation accuracies come from a script and whose
/// retraining leaves the model untouched.
pub struct ScriptedEvaluator {
    pub validation: VecDeque<f64>,
    pub test_top1: f64,
    pub retrain_calls: usize,
}

impl ScriptedEvaluator {
    pub fn new(validation: &[f64], test_top1: f64) -> Self {
        Self {
            validation: validation.iter().copied().collect(),
            test_top1,
            retrain_calls: 0,
        }
    }
}

fn result(top1: f64) -> EvaluationResult {
    EvaluationResult {
        top1,
        top5: None,
        samples: 100,
    }
}

impl Evaluator for ScriptedEvaluator {
    fn capabilities(&self) -> TrainerCapabilities {
        TrainerCapabilities {
            gradients: false,
            retrain: true,
            activations: false,
        }
    }

    fn evaluate(&mut self, _model: &ModelSnapshot, split: Split) -> Result<EvaluationResult> {
        match split {
            Split::Validation => self
                .validation
                .pop_front()
                .map(result)
                .ok_or_else(|| Error::Precondition("script exhausted".into())),
            _ => Ok(result(self.test_top1)),
        }
    }

    fn retrain(
        &mut self,
        _model: &mut ModelSnapshot,
        _request: &RetrainRequest,
    ) -> Result<RetrainOutcome> {
        self.retrain_calls += 1;
        Ok(RetrainOutcome {
            epoch_losses: vec![0.0],
            result: result(self.test_top1),
        })
    }

    fn gradients(&mut self, _model: &ModelSnapshot, layer: &str) -> Result<GradientStats> {
        let _ = layer;
        Err(Error::Capability("gradients"))
    }

    fn activations(
        &mut self,
        _model: &ModelSnapshot,
        layer: &str,
        _class: Option<usize>,
    ) -> Result<FilterMeans> {
        let _ = layer;
        Err(Error::Capability("activations"))
    }
}

/// Wraps an evaluator and checks that retraining never shrinks a pruned set.
pub struct MonotoneWatch<E> {
    pub inner: E,
    pub retrains: usize,
    pub violations: Vec<usize>,
}

impl<E> MonotoneWatch<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            retrains: 0,
            violations: Vec::new(),
        }
    }
}

impl<E: Evaluator> Evaluator for MonotoneWatch<E> {
    fn capabilities(&self) -> TrainerCapabilities {
        self.inner.capabilities()
    }

    fn evaluate(&mut self, model: &ModelSnapshot, split: Split) -> Result<EvaluationResult> {
        self.inner.evaluate(model, split)
    }

    fn retrain(
        &mut self,
        model: &mut ModelSnapshot,
        request: &RetrainRequest,
    ) -> Result<RetrainOutcome> {
        let before: Vec<PruneMask> = model.masks().to_vec();
        let out = self.inner.retrain(model, request)?;
        self.retrains += 1;
        let kept = before
            .iter()
            .zip(model.masks())
            .all(|(b, a)| (0..b.len()).all(|i| b.is_kept(i) || !a.is_kept(i)));
        if !kept {
            self.violations.push(self.retrains);
        }
        Ok(out)
    }

    fn gradients(&mut self, model: &ModelSnapshot, layer: &str) -> Result<GradientStats> {
        self.inner.gradients(model, layer)
    }

    fn activations(
        &mut self,
        model: &ModelSnapshot,
        layer: &str,
        class: Option<usize>,
    ) -> Result<FilterMeans> {
        self.inner.activations(model, layer, class)
    }
}
