//! Line-delimited JSON evaluator protocol.
//!
//! Each request is one JSON object per line on the evaluator's stdin and
//! carries an `"id"` that the response echoes. Requests:
//!
//! | op            | fields                                                   | response fields                        |
//! |---------------|----------------------------------------------------------|----------------------------------------|
//! | `describe`    |                                                          | `layers`, `capabilities`               |
//! | `evaluate`    | `sparsities`, optional `masks_uri`, `split`              | `top1`, `top5`, `samples`              |
//! | `gradients`   | `layer`, optional `sparsities`, `masks_uri`              | `importance`                           |
//! | `retrain`     | `epochs`, `masking`, optional `learning_rate`, `seed`, `sparsities`, `masks_uri` | `top1`, `top5`, `samples`, `epoch_losses` |
//! | `activations` | `layer`, optional `class`, `sparsities`, `masks_uri`     | `means`                                |
//! | `export_masks`| `path`                                                   | `ok`                                   |
//! | `shutdown`    |                                                          | `ok`                                   |
//!
//! Failures are answered as `{"id": .., "error": {"code": .., "message": ..}}`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BuiltinEvaluator, Evaluator, RetrainRequest, TrainerCapabilities};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::{read_masks, write_masks, LayerKind, ModelSnapshot};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Describe,
    Evaluate {
        #[serde(default)]
        sparsities: BTreeMap<String, f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        masks_uri: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        split: Option<Split>,
    },
    Gradients {
        layer: String,
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        sparsities: BTreeMap<String, f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        masks_uri: Option<String>,
    },
    Retrain {
        epochs: usize,
        masking: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        learning_rate: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        sparsities: BTreeMap<String, f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        masks_uri: Option<String>,
    },
    Activations {
        layer: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        class: Option<usize>,
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        sparsities: BTreeMap<String, f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        masks_uri: Option<String>,
    },
    ExportMasks {
        path: String,
    },
    Shutdown,
}

impl Request {
    pub fn op(&self) -> &'static str {
        match self {
            Request::Describe => "describe",
            Request::Evaluate { .. } => "evaluate",
            Request::Gradients { .. } => "gradients",
            Request::Retrain { .. } => "retrain",
            Request::Activations { .. } => "activations",
            Request::ExportMasks { .. } => "export_masks",
            Request::Shutdown => "shutdown",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDescription {
    pub name: String,
    pub kind: LayerKind,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescribeResponse {
    pub layers: Vec<LayerDescription>,
    pub capabilities: TrainerCapabilities,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateResponse {
    pub top1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top5: Option<f64>,
    #[serde(default)]
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientsResponse {
    pub importance: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationsResponse {
    pub means: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

pub fn describe_model(model: &ModelSnapshot) -> Vec<LayerDescription> {
    model
        .layers()
        .iter()
        .map(|l| LayerDescription {
            name: l.name().to_string(),
            kind: l.kind(),
            shape: l.shape().to_vec(),
        })
        .collect()
}

pub fn error_code(err: &Error) -> &'static str {
    match err {
        Error::UnknownLayer(_) => "unknown_layer",
        Error::Capability(_) => "unsupported",
        Error::Contract(_) | Error::Config(_) => "bad_request",
        Error::Divergence(_) => "diverged",
        _ => "internal",
    }
}

/// Serves the protocol from the built-in engine, holding its own copy of
/// the model.
pub struct BuiltinServer {
    model: ModelSnapshot,
    evaluator: BuiltinEvaluator,
    learning_rate: f64,
    retrain_calls: u64,
}

impl BuiltinServer {
    pub fn new(model: ModelSnapshot, evaluator: BuiltinEvaluator, learning_rate: f64) -> Self {
        Self {
            model,
            evaluator,
            learning_rate,
            retrain_calls: 0,
        }
    }

    fn sync_masks(&mut self, sparsities: &BTreeMap<String, f64>, masks_uri: &Option<String>) -> Result<()> {
        if let Some(uri) = masks_uri {
            let path = uri.strip_prefix("file://").unwrap_or(uri);
            let masks = read_masks(path)?;
            return self.model.set_masks(masks);
        }
        for name in sparsities.keys() {
            self.model.layer_index(name)?;
        }
        if sparsities.is_empty() {
            return Ok(());
        }
        for i in 0..self.model.layer_count() {
            let s = sparsities
                .get(self.model.layer(i).name())
                .copied()
                .unwrap_or(0.0);
            self.model.set_layer_sparsity(i, s)?;
        }
        Ok(())
    }

    /// Answer one request; the flag is true when the session should end.
    pub fn handle(&mut self, request: Request) -> Result<(Value, bool)> {
        let value = match request {
            Request::Describe => serde_json::to_value(DescribeResponse {
                layers: describe_model(&self.model),
                capabilities: self.evaluator.capabilities(),
            }),
            Request::Evaluate {
                sparsities,
                masks_uri,
                split,
            } => {
                self.sync_masks(&sparsities, &masks_uri)?;
                let r = self
                    .evaluator
                    .evaluate(&self.model, split.unwrap_or(Split::Test))?;
                serde_json::to_value(EvaluateResponse {
                    top1: r.top1,
                    top5: r.top5,
                    samples: r.samples,
                    epoch_losses: Vec::new(),
                })
            }
            Request::Gradients {
                layer,
                sparsities,
                masks_uri,
            } => {
                self.sync_masks(&sparsities, &masks_uri)?;
                let g = self.evaluator.gradients(&self.model, &layer)?;
                serde_json::to_value(GradientsResponse {
                    importance: g.importance().to_vec(),
                })
            }
            Request::Retrain {
                epochs,
                masking,
                learning_rate,
                seed,
                sparsities,
                masks_uri,
            } => {
                self.sync_masks(&sparsities, &masks_uri)?;
                self.retrain_calls += 1;
                let req = RetrainRequest {
                    epochs,
                    learning_rate: learning_rate.unwrap_or(self.learning_rate),
                    masking,
                    seed: seed.unwrap_or(self.retrain_calls),
                };
                let out = self.evaluator.retrain(&mut self.model, &req)?;
                serde_json::to_value(EvaluateResponse {
                    top1: out.result.top1,
                    top5: out.result.top5,
                    samples: out.result.samples,
                    epoch_losses: out.epoch_losses,
                })
            }
            Request::Activations {
                layer,
                class,
                sparsities,
                masks_uri,
            } => {
                self.sync_masks(&sparsities, &masks_uri)?;
                let means = self.evaluator.activations(&self.model, &layer, class)?;
                serde_json::to_value(ActivationsResponse { means })
            }
            Request::ExportMasks { path } => {
                write_masks(self.model.masks(), &path)?;
                Ok(json!({"ok": true}))
            }
            Request::Shutdown => return Ok((json!({"ok": true}), true)),
        };
        Ok((value.expect("response serializes"), false))
    }
}

fn respond(out: &mut impl Write, id: &Value, mut body: Value) -> std::io::Result<()> {
    if let Value::Object(map) = &mut body {
        map.insert("id".into(), id.clone());
    }
    writeln!(out, "{body}")?;
    out.flush()
}

fn error_response(code: &str, message: impl Into<String>) -> Value {
    json!({"error": {"code": code, "message": message.into()}})
}

/// Run the request loop until `shutdown` or end of input. Malformed lines
/// are answered with a `bad_request` error and the loop continues.
pub fn serve(server: &mut BuiltinServer, input: impl BufRead, mut output: impl Write) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                respond(&mut output, &Value::Null, error_response("bad_request", e.to_string()))?;
                continue;
            }
        };
        let id = value.get("id").cloned().unwrap_or(Value::Null);
        let op = value.get("op").and_then(Value::as_str).unwrap_or("").to_string();
        let request: Request = match serde_json::from_value(value) {
            Ok(r) => r,
            Err(e) => {
                let code = match op.as_str() {
                    "describe" | "evaluate" | "gradients" | "retrain" | "activations"
                    | "export_masks" | "shutdown" => "bad_request",
                    _ => "unknown_op",
                };
                respond(&mut output, &id, error_response(code, e.to_string()))?;
                continue;
            }
        };
        match server.handle(request) {
            Ok((body, stop)) => {
                respond(&mut output, &id, body)?;
                if stop {
                    break;
                }
            }
            Err(e) => respond(&mut output, &id, error_response(error_code(&e), e.to_string()))?,
        }
    }
    Ok(())
}
