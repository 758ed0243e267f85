use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module(code: &std::ffi::CStr) {
    Python::initialize();
    Python::attach(|py| {
        let m = PyModule::new(py, "prunesearch_py").unwrap();
        prunesearch_py::register(&m).unwrap();
        let globals = PyDict::new(py);
        globals.set_item("ps", m).unwrap();
        if let Err(e) = py.run(code, Some(&globals), None) {
            panic!("{e}");
        }
    });
}

#[test]
fn policy_and_sensitivity() {
    with_module(
        c"
p = ps.compute_probabilities([100, 300], [0.5, 0.5], 1.0)
assert abs(p[1] - 0.75) < 1e-12, p
s = ps.SensitivityState('l')
s.record_impact(99.0, 98.5)
assert abs(s.update_step(1.0) - 0.075) < 1e-12
assert s.window == [0.5]
assert ps.gradient_check(2) <= 1e-3
try:
    ps.compute_probabilities([0], [0.1], 1.0)
    raise AssertionError('zero size accepted')
except ValueError:
    pass
",
    );
}

#[test]
fn fixture_search_and_masks() {
    let dir = tempfile::tempdir().unwrap();
    let code = format!(
        "
import os
root = {root:?}
params, baseline = ps.make_fixture(root, seed=3, toy=True)
model = ps.Model.load(os.path.join(root, 'model'))
data = os.path.join(root, 'data')
assert 0 < model.parameter_count <= params, (model.parameter_count, params)
assert ps.evaluate(model, data)[0] == baseline
best, trace = ps.run_search(model, data, iterations=10, seed=2)
assert trace.startswith('iteration,')
path = os.path.join(root, 'm.bin')
best.save_masks(path)
model.load_masks(path)
assert model.weighted_sparsity() == best.weighted_sparsity()
",
        root = dir.path().display().to_string()
    );
    with_module(&std::ffi::CString::new(code).unwrap());
}
