//! Line-delimited JSON request loop.
//!
//! A reader thread parses lines, a batch former drains up to `max_batch`
//! pending requests, and the calling thread runs each batch and writes the
//! responses in input order, flushing after every batch.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::composer::CompositionStrategy;
use crate::engine::{serve_batch, BackboneModel, InferenceRequest, RequestOutput};
use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::retriever::{Retrieved, Retriever};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WireRequest {
    id: String,
    text: String,
    features: Vec<Vec<f64>>,
    #[serde(default)]
    mask: Option<Vec<String>>,
}

/// One output line. Exactly one of `output` / `error` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieved: Option<Vec<Retrieved>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl WireResponse {
    fn ok(out: RequestOutput) -> Self {
        let d = out.output.shape()[1];
        Self {
            id: Some(out.id),
            output: Some(out.output.data().chunks(d).map(<[f64]>::to_vec).collect()),
            retrieved: Some(out.retrieved),
            error: None,
        }
    }

    fn err(id: Option<String>, message: impl Into<String>) -> Self {
        Self {
            id,
            output: None,
            retrieved: None,
            error: Some(message.into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServeConfig {
    pub strategy: CompositionStrategy,
    /// Largest number of pending lines drained into one batch.
    pub max_batch: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServeStats {
    pub responses: usize,
    pub errors: usize,
    pub batches: usize,
}

type Parsed = std::result::Result<InferenceRequest, WireResponse>;

/// Parses one request line for a backbone of width `d`.
pub fn parse_request_line(line: &str, d: usize) -> Parsed {
    let wire: WireRequest = serde_json::from_str(line).map_err(|e| {
        let id = serde_json::from_str::<serde_json::Value>(line)
            .ok()
            .and_then(|v| v.get("id").and_then(|i| i.as_str()).map(str::to_string));
        WireResponse::err(id, format!("malformed request: {e}"))
    })?;
    let id = wire.id.clone();
    let bad = |msg: String| WireResponse::err(Some(id.clone()), msg);
    if wire.features.is_empty() {
        return Err(bad("features must have at least one row".into()));
    }
    if let Some(row) = wire.features.iter().find(|r| r.len() != d) {
        return Err(bad(format!("feature rows must have width {d}, got {}", row.len())));
    }
    let features = DenseTensor::from_rows(&wire.features).map_err(|e| bad(e.to_string()))?;
    let mut req = InferenceRequest::new(wire.id, wire.text, features);
    if let Some(mask) = wire.mask {
        req = req.with_mask(mask.into_iter().collect::<HashSet<_>>());
    }
    Ok(req)
}

fn run_batch(
    batch: Vec<Parsed>,
    model: &BackboneModel,
    registry: &Registry,
    retriever: &Retriever,
    strategy: CompositionStrategy,
) -> Vec<WireResponse> {
    let valid: Vec<InferenceRequest> = batch.iter().filter_map(|p| p.as_ref().ok().cloned()).collect();
    let mut served = if valid.is_empty() {
        Vec::new().into_iter()
    } else {
        match serve_batch(model, &valid, strategy, registry, retriever) {
            Ok(out) => out.outputs.into_iter().map(WireResponse::ok).collect::<Vec<_>>().into_iter(),
            // isolate the failure to the request(s) that caused it
            Err(_) => valid
                .iter()
                .map(|r| match serve_batch(model, std::slice::from_ref(r), strategy, registry, retriever) {
                    Ok(mut out) => WireResponse::ok(out.outputs.remove(0)),
                    Err(e) => WireResponse::err(Some(r.id.clone()), e.to_string()),
                })
                .collect::<Vec<_>>()
                .into_iter(),
        }
    };
    batch
        .into_iter()
        .map(|p| match p {
            Ok(_) => served.next().expect("one response per valid request"),
            Err(e) => e,
        })
        .collect()
}

/// Serves until `input` is exhausted. Blank lines are skipped.
pub fn serve_loop<R, W>(
    input: R,
    mut output: W,
    model: &BackboneModel,
    registry: &Registry,
    retriever: &Retriever,
    config: ServeConfig,
) -> Result<ServeStats>
where
    R: BufRead + Send,
    W: Write,
{
    if config.max_batch == 0 {
        return Err(Error::Validation("max_batch must be >= 1".into()));
    }
    let d = model.d();
    let (line_tx, line_rx) = mpsc::channel::<Parsed>();
    let (batch_tx, batch_rx) = mpsc::channel::<Vec<Parsed>>();
    let mut stats = ServeStats::default();

    thread::scope(|scope| -> Result<()> {
        let reader = scope.spawn(move || -> std::io::Result<()> {
            for line in input.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                if line_tx.send(parse_request_line(&line, d)).is_err() {
                    break;
                }
            }
            Ok(())
        });
        scope.spawn(move || {
            while let Ok(first) = line_rx.recv() {
                let mut batch = vec![first];
                while batch.len() < config.max_batch {
                    match line_rx.try_recv() {
                        Ok(p) => batch.push(p),
                        Err(_) => break,
                    }
                }
                if batch_tx.send(batch).is_err() {
                    break;
                }
            }
        });

        let stdout_err = |e: std::io::Error| Error::io("<output>", e);
        for batch in batch_rx {
            for resp in run_batch(batch, model, registry, retriever, config.strategy) {
                stats.responses += 1;
                stats.errors += usize::from(resp.error.is_some());
                serde_json::to_writer(&mut output, &resp).map_err(|e| Error::Validation(e.to_string()))?;
                output.write_all(b"\n").map_err(stdout_err)?;
            }
            output.flush().map_err(stdout_err)?;
            stats.batches += 1;
        }
        reader
            .join()
            .expect("reader thread panicked")
            .map_err(|e| Error::io("<input>", e))
    })?;
    Ok(stats)
}
