//! Per-iteration trace rows shared by the search and retraining pipelines.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRACE_HEADER: [&str; 12] = [
    "iteration",
    "layer",
    "action",
    "attempt",
    "step",
    "drop",
    "sparsity",
    "sparsities",
    "top1",
    "fitness",
    "accepted",
    "temperature",
];

/// One loop turn. `iteration` counts search iterations or training epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub layers: Vec<String>,
    pub action: String,
    pub attempt: usize,
    pub steps: Vec<f64>,
    /// Baseline top-1 minus `top1`.
    pub drop: f64,
    /// New sparsity of each touched layer.
    pub layer_sparsities: Vec<f64>,
    /// Full per-layer sparsity vector after the turn.
    pub sparsities: Vec<f64>,
    pub top1: f64,
    /// Weighted sparsity of `sparsities`.
    pub fitness: f64,
    pub accepted: String,
    pub temperature: f64,
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(";")
}

impl TraceRow {
    fn record(&self) -> [String; 12] {
        [
            self.iteration.to_string(),
            self.layers.join(";"),
            self.action.clone(),
            self.attempt.to_string(),
            join(&self.steps),
            self.drop.to_string(),
            join(&self.layer_sparsities),
            join(&self.sparsities),
            self.top1.to_string(),
            self.fitness.to_string(),
            self.accepted.clone(),
            self.temperature.to_string(),
        ]
    }
}

/// Render rows as CSV with a header line.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRACE_HEADER).expect("in-memory write");
    for r in rows {
        w.write_record(r.record()).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

pub fn write_trace_csv(path: impl AsRef<Path>, rows: &[TraceRow]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(trace_csv(rows).as_bytes()).map_err(|e| Error::io(path, e))
}
