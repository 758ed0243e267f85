mod common;

use std::collections::BTreeMap;
use std::io::Cursor;

use prunesearch::data::Split;
use prunesearch::eval::protocol::{describe_model, serve, BuiltinServer, Request};
use prunesearch::eval::{Evaluator, ExternalConfig, ExternalSession, RetrainRequest};
use prunesearch::fixture::{make_fixture, FixtureSpec};
use prunesearch::search::{run_search, SearchConfig};
use prunesearch::trace::trace_csv;
use prunesearch::Error;
use serde_json::{json, Value};

use common::{evaluator, toy_fixture};

fn serve_lines(lines: &[String]) -> Vec<Value> {
    let f = toy_fixture();
    let mut server = BuiltinServer::new(f.model.clone(), evaluator(f), 0.01);
    let input = lines.join("\n");
    let mut out = Vec::new();
    serve(&mut server, Cursor::new(input), &mut out).unwrap();
    String::from_utf8(out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn builtin_server_round_trip() {
    let f = toy_fixture();
    let lines: Vec<String> = [
        json!({"id": 1, "op": "describe"}),
        json!({"id": 2, "op": "evaluate", "sparsities": {"conv2": 0.5}}),
        json!({"id": 3, "op": "gradients", "layer": "fc"}),
        json!({"id": 4, "op": "activations", "layer": "conv1", "class": 1}),
        json!({"id": 5, "op": "evaluate", "sparsities": {"nope": 0.5}}),
        json!({"id": 6, "op": "transmogrify"}),
        json!({"id": 7, "op": "retrain"}),
        json!({"id": 8, "op": "shutdown"}),
        json!({"id": 9, "op": "describe"}),
    ]
    .iter()
    .map(Value::to_string)
    .chain(std::iter::once("{not json".to_string()))
    .collect();
    let mut reordered = lines.clone();
    reordered.insert(7, lines[9].clone());
    reordered.truncate(10);
    let out = serve_lines(&reordered);
    assert_eq!(out.len(), 9, "{out:?}");

    assert_eq!(out[0]["id"], 1);
    assert_eq!(out[0]["layers"].as_array().unwrap().len(), 3);
    assert_eq!(out[0]["capabilities"]["gradients"], true);

    let mut masked = f.model.clone();
    masked.set_layer_sparsity(1, 0.5).unwrap();
    let expected = evaluator(f).evaluate(&masked, Split::Test).unwrap();
    assert_eq!(out[1]["top1"].as_f64().unwrap(), expected.top1);

    assert_eq!(out[2]["importance"].as_array().unwrap().len(), f.model.layer(2).parameter_count());
    assert_eq!(out[3]["means"].as_array().unwrap().len(), 4);
    assert_eq!(out[4]["error"]["code"], "unknown_layer");
    assert_eq!(out[5]["error"]["code"], "unknown_op");
    assert_eq!(out[6]["error"]["code"], "bad_request");
    assert_eq!(out[7]["error"]["code"], "bad_request");
    assert_eq!(out[7]["id"], Value::Null);
    assert_eq!(out[8]["id"], 8);
    assert_eq!(out[8]["ok"], true);
}

#[test]
fn requests_serialize_with_op_tags() {
    let r = Request::Evaluate {
        sparsities: BTreeMap::from([("a".to_string(), 0.25)]),
        masks_uri: None,
        split: None,
    };
    let v = serde_json::to_value(&r).unwrap();
    assert_eq!(v, json!({"op": "evaluate", "sparsities": {"a": 0.25}}));
    let back: Request = serde_json::from_value(v).unwrap();
    assert_eq!(back, r);
    let g: Request = serde_json::from_value(json!({"op": "gradients", "layer": "x"})).unwrap();
    assert_eq!(g.op(), "gradients");
}

fn served_session(dir: &std::path::Path) -> ExternalSession {
    let f = toy_fixture();
    make_fixture(&FixtureSpec::toy(), dir).unwrap();
    let config = ExternalConfig {
        command: vec![
            env!("CARGO_BIN_EXE_prunesearch").into(),
            "serve".into(),
            "--model".into(),
            dir.join("model").display().to_string(),
            "--dataset".into(),
            dir.join("data").display().to_string(),
        ],
        ..ExternalConfig::default()
    };
    ExternalSession::connect(&config, &f.model).unwrap()
}

#[test]
fn external_session_agrees_with_builtin() {
    let f = toy_fixture();
    let tmp = tempfile::tempdir().unwrap();
    let mut remote = served_session(tmp.path());
    let mut local = evaluator(f);
    assert!(remote.capabilities().gradients && remote.capabilities().retrain);

    let mut model = f.model.clone();
    model.apply_sparsities(&[0.3, 0.6, 0.2]).unwrap();
    for split in [Split::Test, Split::Validation, Split::Train] {
        assert_eq!(remote.evaluate(&model, split).unwrap(), local.evaluate(&model, split).unwrap());
    }
    let g_remote = remote.gradients(&model, "conv2").unwrap();
    let g_local = local.gradients(&model, "conv2").unwrap();
    assert_eq!(g_remote.importance(), g_local.importance());
    assert_eq!(
        remote.activations(&model, "conv1", None).unwrap(),
        local.activations(&model, "conv1", None).unwrap()
    );

    let request = RetrainRequest {
        epochs: 1,
        learning_rate: 0.01,
        masking: true,
        seed: 5,
    };
    let mut a = model.clone();
    let mut b = model.clone();
    let ra = remote.retrain(&mut a, &request).unwrap();
    let rb = local.retrain(&mut b, &request).unwrap();
    assert_eq!(ra.result, rb.result);
    assert_eq!(ra.epoch_losses, rb.epoch_losses);
    remote.shutdown().unwrap();
}

#[test]
fn search_through_the_protocol_matches_in_process() {
    let f = toy_fixture();
    let tmp = tempfile::tempdir().unwrap();
    let mut remote = served_session(tmp.path());
    let config = SearchConfig {
        iterations: 40,
        seed: 8,
        ..SearchConfig::default()
    };
    let a = run_search(&f.model, &mut remote, config.clone()).unwrap();
    let b = run_search(&f.model, &mut evaluator(f), config).unwrap();
    assert_eq!(trace_csv(&a.trace), trace_csv(&b.trace));
}

fn mock(mode: &str, timeout_ms: u64) -> prunesearch::Result<ExternalSession> {
    let f = toy_fixture();
    let layers = serde_json::to_string(&describe_model(&f.model)).unwrap();
    let config = ExternalConfig {
        command: vec![
            "python3".into(),
            concat!(env!("CARGO_MANIFEST_DIR"), "/tests/support/mock_evaluator.py").into(),
            layers,
            mode.into(),
        ],
        timeout_ms,
        handshake_timeout_ms: 10_000,
        ..ExternalConfig::default()
    };
    ExternalSession::connect(&config, &f.model)
}

#[test]
fn slow_answer_is_retried_once() {
    let f = toy_fixture();
    let mut s = mock("slow_once", 500).unwrap();
    let r = s.evaluate(&f.model, Split::Test).unwrap();
    assert_eq!(r.top1, 90.0);
    let r = s.evaluate(&f.model, Split::Test).unwrap();
    assert_eq!(r.top1, 90.0);
}

#[test]
fn hanging_evaluator_times_out() {
    let f = toy_fixture();
    let mut s = mock("hang", 150).unwrap();
    assert!(matches!(s.evaluate(&f.model, Split::Test), Err(Error::Timeout(_))));
    assert!(matches!(s.evaluate(&f.model, Split::Test), Err(Error::Protocol(_))));
}

#[test]
fn mismatched_description_is_rejected() {
    assert!(matches!(mock("bad_describe", 1000), Err(Error::Protocol(_))));
}

#[test]
fn remote_errors_and_garbage_surface() {
    let f = toy_fixture();
    let mut s = mock("remote_error", 1000).unwrap();
    match s.evaluate(&f.model, Split::Test) {
        Err(Error::Remote { code, .. }) => assert_eq!(code, "internal"),
        other => panic!("{other:?}"),
    }
    let mut s = mock("garbage", 1000).unwrap();
    assert!(matches!(s.evaluate(&f.model, Split::Test), Err(Error::Protocol(_))));
    let mut s = mock("ok", 1000).unwrap();
    assert!(matches!(s.gradients(&f.model, "fc"), Err(Error::Capability(_))));
    s.shutdown().unwrap();
}
