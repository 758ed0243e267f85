//! Python bindings for the `prunesearch` crate.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use prunesearch::data::{load_dataset, Split};
use prunesearch::eval::{BuiltinConfig, BuiltinEvaluator, Evaluator};
use prunesearch::fixture::{make_fixture as build_fixture_files, FixtureSpec};
use prunesearch::model::{self, ModelSnapshot};
use prunesearch::search::{run_search as search, SearchConfig};
use prunesearch::sensitivity::{SensitivityConfig, SensitivityState as CoreSensitivity};
use prunesearch::trace::trace_csv;
use prunesearch::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::MissingFile(_) | Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Config(_) | Error::Contract(_) | Error::Bounds(_) | Error::UnknownLayer(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_split(split: &str) -> PyResult<Split> {
    match split {
        "train" => Ok(Split::Train),
        "validation" => Ok(Split::Validation),
        "test" => Ok(Split::Test),
        other => Err(PyValueError::new_err(format!("unknown split `{other}`"))),
    }
}

fn builtin(dataset: PathBuf) -> PyResult<BuiltinEvaluator> {
    let data = load_dataset(dataset, 0.2).map_err(py_err)?;
    Ok(BuiltinEvaluator::new(data, BuiltinConfig::default()))
}

/// A network with per-layer pruning masks.
#[pyclass(name = "Model", skip_from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    inner: ModelSnapshot,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: model::load_model(path).map_err(py_err)?,
        })
    }

    #[getter]
    fn layer_names(&self) -> Vec<String> {
        self.inner.layers().iter().map(|l| l.name().to_string()).collect()
    }

    #[getter]
    fn layer_sizes(&self) -> Vec<usize> {
        self.inner.sizes()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn sparsities(&self) -> Vec<f64> {
        self.inner.sparsities()
    }

    fn weighted_sparsity(&self) -> f64 {
        model::weighted_sparsity(&self.inner)
    }

    /// Rebuild every layer's magnitude mask at the given sparsities.
    fn apply_sparsities(&mut self, sparsities: Vec<f64>) -> PyResult<()> {
        self.inner.apply_sparsities(&sparsities).map_err(py_err)
    }

    fn load_masks(&mut self, path: PathBuf) -> PyResult<()> {
        let masks = model::read_masks(path).map_err(py_err)?;
        self.inner.set_masks(masks).map_err(py_err)
    }

    fn save_masks(&self, path: PathBuf) -> PyResult<()> {
        model::write_masks(self.inner.masks(), path).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(layers={:?}, parameters={}, weighted_sparsity={:.4})",
            self.layer_names(),
            self.inner.parameter_count(),
            model::weighted_sparsity(&self.inner)
        )
    }
}

/// Sliding-window accuracy-drop tracker with an adaptive step.
#[pyclass(name = "SensitivityState")]
pub struct PySensitivityState {
    inner: CoreSensitivity,
}

#[pymethods]
impl PySensitivityState {
    #[new]
    #[pyo3(signature = (layer_name, window = 5, gain_k = 1.0, initial_step = 0.05))]
    fn new(layer_name: String, window: usize, gain_k: f64, initial_step: f64) -> PyResult<Self> {
        let config = SensitivityConfig {
            window,
            gain_k,
            initial_step,
            ..SensitivityConfig::default()
        };
        config.validate().map_err(py_err)?;
        Ok(Self {
            inner: CoreSensitivity::new(layer_name, &config),
        })
    }

    fn record_impact(&mut self, baseline_acc: f64, pruned_acc: f64) -> PyResult<()> {
        self.inner.record_impact(baseline_acc, pruned_acc).map_err(py_err)
    }

    fn update_step(&mut self, threshold: f64) -> f64 {
        self.inner.update_step(threshold)
    }

    #[getter]
    fn sensitivity(&self) -> f64 {
        self.inner.sensitivity()
    }

    #[getter]
    fn step(&self) -> f64 {
        self.inner.step()
    }

    #[getter]
    fn window(&self) -> Vec<f64> {
        self.inner.window().collect()
    }
}

/// Generate and train a synthetic fixture under `out`; returns
/// `(parameters, baseline_top1)`.
#[pyfunction]
#[pyo3(signature = (out, seed = 0, toy = false))]
fn make_fixture(out: PathBuf, seed: u64, toy: bool) -> PyResult<(usize, f64)> {
    let mut spec = if toy { FixtureSpec::toy() } else { FixtureSpec::default() };
    spec.seed = seed;
    let meta = build_fixture_files(&spec, out).map_err(py_err)?;
    Ok((meta.parameters, meta.baseline.top1))
}

/// Top-1 and top-5 accuracy of the masked model on a dataset split.
#[pyfunction]
#[pyo3(signature = (model, dataset, split = "test"))]
fn evaluate(model: &PyModel, dataset: PathBuf, split: &str) -> PyResult<(f64, Option<f64>)> {
    let mut ev = builtin(dataset)?;
    let r = ev.evaluate(&model.inner, parse_split(split)?).map_err(py_err)?;
    Ok((r.top1, r.top5))
}

/// Search per-layer sparsities; returns the best model and the trace as CSV.
#[pyfunction]
#[pyo3(signature = (model, dataset, iterations = 300, seed = 0, drop_threshold = 1.0))]
fn run_search(
    model: &PyModel,
    dataset: PathBuf,
    iterations: usize,
    seed: u64,
    drop_threshold: f64,
) -> PyResult<(PyModel, String)> {
    let mut ev = builtin(dataset)?;
    let config = SearchConfig {
        iterations,
        seed,
        drop_threshold,
        ..SearchConfig::default()
    };
    let outcome = search(&model.inner, &mut ev, config).map_err(py_err)?;
    let mut best = model.inner.clone();
    best.apply_sparsities(&outcome.best.sparsities).map_err(py_err)?;
    Ok((PyModel { inner: best }, trace_csv(&outcome.trace)))
}

/// Layer selection probabilities from sizes and sensitivities.
#[pyfunction]
fn compute_probabilities(sizes: Vec<usize>, sensitivities: Vec<f64>, threshold: f64) -> PyResult<Vec<f64>> {
    prunesearch::policy::compute_probabilities(&sizes, &sensitivities, threshold).map_err(py_err)
}

#[pyfunction]
fn weighted_sparsity_of(sizes: Vec<usize>, sparsities: Vec<f64>) -> PyResult<f64> {
    if sizes.len() != sparsities.len() {
        return Err(PyValueError::new_err("sizes and sparsities differ in length"));
    }
    Ok(model::weighted_sparsity_of(&sizes, &sparsities))
}

/// Largest relative error between analytic and numeric gradients of a
/// random small network.
#[pyfunction]
fn gradient_check(seed: u64) -> f64 {
    prunesearch::engine::gradient_check(seed).max_relative_error
}

/// Add the classes and functions to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PySensitivityState>()?;
    m.add_function(wrap_pyfunction!(make_fixture, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_search, m)?)?;
    m.add_function(wrap_pyfunction!(compute_probabilities, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_sparsity_of, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    Ok(())
}

#[pymodule]
fn prunesearch_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
