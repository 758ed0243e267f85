//! Client side of the evaluator protocol: drives an external process over
//! its stdin/stdout.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::protocol::{
    describe_model, ActivationsResponse, DescribeResponse, ErrorBody, EvaluateResponse,
    GradientsResponse, Request,
};
use super::{
    require, EvaluationResult, Evaluator, FilterMeans, RetrainOutcome, RetrainRequest,
    TrainerCapabilities,
};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::{read_masks, write_masks, ModelSnapshot};
use crate::pruning::GradientStats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExternalConfig {
    /// Program followed by its arguments.
    pub command: Vec<String>,
    pub env: BTreeMap<String, String>,
    /// Per-call timeout; a timed-out call is retried once.
    pub timeout_ms: u64,
    pub handshake_timeout_ms: u64,
}

impl Default for ExternalConfig {
    fn default() -> Self {
        Self {
            command: Vec::new(),
            env: BTreeMap::new(),
            timeout_ms: 120_000,
            handshake_timeout_ms: 30_000,
        }
    }
}

pub struct ExternalSession {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
    next_id: u64,
    timeout: Duration,
    capabilities: TrainerCapabilities,
    scratch: tempfile::TempDir,
    closed: bool,
}

impl ExternalSession {
    /// Spawn the evaluator, perform the `describe` handshake and check that
    /// its layers match `model` by name, kind and shape.
    pub fn connect(config: &ExternalConfig, model: &ModelSnapshot) -> Result<Self> {
        let (program, args) = config
            .command
            .split_first()
            .ok_or_else(|| Error::Config("external evaluator command is empty".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .envs(&config.env)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Protocol(format!("cannot start `{program}`: {e}")))?;
        let stdin = child.stdin.take().expect("stdin piped");
        let stdout = child.stdout.take().expect("stdout piped");
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let scratch = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let mut session = Self {
            child,
            stdin,
            lines,
            next_id: 1,
            timeout: Duration::from_millis(config.handshake_timeout_ms),
            capabilities: TrainerCapabilities::default(),
            scratch,
            closed: false,
        };
        let described: DescribeResponse = session.call(&Request::Describe)?;
        let local = describe_model(model);
        if described.layers != local {
            let _ = session.child.kill();
            return Err(Error::Protocol(format!(
                "evaluator describes layers {:?}, local model has {:?}",
                described.layers.iter().map(|l| (&l.name, &l.shape)).collect::<Vec<_>>(),
                local.iter().map(|l| (&l.name, &l.shape)).collect::<Vec<_>>()
            )));
        }
        session.capabilities = described.capabilities;
        session.timeout = Duration::from_millis(config.timeout_ms);
        Ok(session)
    }

    fn send(&mut self, id: u64, request: &Request) -> Result<()> {
        let mut value = serde_json::to_value(request).expect("request serializes");
        value
            .as_object_mut()
            .expect("request is an object")
            .insert("id".into(), Value::from(id));
        writeln!(self.stdin, "{value}")
            .and_then(|_| self.stdin.flush())
            .map_err(|e| Error::Protocol(format!("evaluator stdin closed: {e}")))
    }

    fn await_response(&mut self, id: u64) -> std::result::Result<Value, Option<Error>> {
        let deadline = Instant::now() + self.timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.lines.recv_timeout(left) {
                Ok(line) => {
                    let value: Value = serde_json::from_str(&line).map_err(|e| {
                        Some(Error::Protocol(format!("malformed response line: {e}")))
                    })?;
                    if value.get("id").and_then(Value::as_u64) != Some(id) {
                        // Late answer to a request we already gave up on.
                        continue;
                    }
                    return Ok(value);
                }
                Err(RecvTimeoutError::Timeout) => return Err(None),
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Some(Error::Protocol("evaluator process exited".into())))
                }
            }
        }
    }

    /// Send a request and decode its response, retrying once on timeout.
    pub fn call<T: DeserializeOwned>(&mut self, request: &Request) -> Result<T> {
        if self.closed {
            return Err(Error::Protocol("session is closed".into()));
        }
        let mut value = None;
        for _attempt in 0..2 {
            let id = self.next_id;
            self.next_id += 1;
            self.send(id, request)?;
            match self.await_response(id) {
                Ok(v) => {
                    value = Some(v);
                    break;
                }
                Err(Some(e)) => return Err(e),
                Err(None) => continue,
            }
        }
        let Some(mut value) = value else {
            self.abort();
            return Err(Error::Timeout(request.op().to_string()));
        };
        if let Some(err) = value.get("error") {
            let body: ErrorBody = serde_json::from_value(err.clone())
                .map_err(|e| Error::Protocol(format!("malformed error object: {e}")))?;
            return Err(Error::Remote {
                code: body.code,
                message: body.message,
            });
        }
        value.as_object_mut().map(|m| m.remove("id"));
        serde_json::from_value(value)
            .map_err(|e| Error::Protocol(format!("`{}` response violates schema: {e}", request.op())))
    }

    fn abort(&mut self) {
        self.closed = true;
        let _ = self.child.kill();
        let _ = self.child.wait();
    }

    /// Ask the evaluator to exit and wait for it.
    pub fn shutdown(mut self) -> Result<()> {
        let r: Result<Value> = self.call(&Request::Shutdown);
        self.closed = true;
        let _ = self.child.wait();
        r.map(|_| ())
    }

    fn mask_state(&self, model: &ModelSnapshot) -> Result<(BTreeMap<String, f64>, Option<String>)> {
        let sparsities = model
            .masks()
            .iter()
            .map(|m| (m.layer_name().to_string(), m.target()))
            .collect();
        let path = self.scratch.path().join("masks.bin");
        write_masks(model.masks(), &path)?;
        Ok((sparsities, Some(path.display().to_string())))
    }
}

impl Drop for ExternalSession {
    fn drop(&mut self) {
        if !self.closed {
            let _ = self.send(self.next_id, &Request::Shutdown);
            let deadline = Instant::now() + Duration::from_millis(500);
            while Instant::now() < deadline {
                if let Ok(Some(_)) = self.child.try_wait() {
                    return;
                }
                thread::sleep(Duration::from_millis(10));
            }
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
    }
}

impl Evaluator for ExternalSession {
    fn capabilities(&self) -> TrainerCapabilities {
        self.capabilities
    }

    fn evaluate(&mut self, model: &ModelSnapshot, split: Split) -> Result<EvaluationResult> {
        let (sparsities, masks_uri) = self.mask_state(model)?;
        let r: EvaluateResponse = self.call(&Request::Evaluate {
            sparsities,
            masks_uri,
            split: (split != Split::Test).then_some(split),
        })?;
        Ok(EvaluationResult {
            top1: r.top1,
            top5: r.top5,
            samples: r.samples,
        })
    }

    fn retrain(&mut self, model: &mut ModelSnapshot, request: &RetrainRequest) -> Result<RetrainOutcome> {
        require(self.capabilities.retrain, "retrain")?;
        let (sparsities, masks_uri) = self.mask_state(model)?;
        let r: EvaluateResponse = self.call(&Request::Retrain {
            epochs: request.epochs,
            masking: request.masking,
            learning_rate: Some(request.learning_rate),
            seed: Some(request.seed),
            sparsities,
            masks_uri,
        })?;
        if !request.masking {
            // The remote side re-derives masks from its retrained weights.
            let path = self.scratch.path().join("exported.bin");
            let _: Value = self.call(&Request::ExportMasks {
                path: path.display().to_string(),
            })?;
            model.set_masks(read_masks(&path)?)?;
        }
        Ok(RetrainOutcome {
            epoch_losses: r.epoch_losses,
            result: EvaluationResult {
                top1: r.top1,
                top5: r.top5,
                samples: r.samples,
            },
        })
    }

    fn gradients(&mut self, model: &ModelSnapshot, layer: &str) -> Result<GradientStats> {
        require(self.capabilities.gradients, "gradients")?;
        let idx = model.layer_index(layer)?;
        let (sparsities, masks_uri) = self.mask_state(model)?;
        let r: GradientsResponse = self.call(&Request::Gradients {
            layer: layer.to_string(),
            sparsities,
            masks_uri,
        })?;
        if r.importance.len() != model.layer(idx).parameter_count() {
            return Err(Error::Protocol(format!(
                "gradients for `{layer}` have {} entries, layer has {}",
                r.importance.len(),
                model.layer(idx).parameter_count()
            )));
        }
        GradientStats::new(layer, r.importance)
    }

    fn activations(
        &mut self,
        model: &ModelSnapshot,
        layer: &str,
        class: Option<usize>,
    ) -> Result<FilterMeans> {
        require(self.capabilities.activations, "activations")?;
        let (sparsities, masks_uri) = self.mask_state(model)?;
        let r: ActivationsResponse = self.call(&Request::Activations {
            layer: layer.to_string(),
            class,
            sparsities,
            masks_uri,
        })?;
        Ok(r.means)
    }
}
