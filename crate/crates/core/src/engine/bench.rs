//! Wall-clock throughput of the serving path at several batch sizes.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::backbone::BackboneModel;
use super::serve::{serve_batch_on, InferenceRequest};
use crate::composer::{build_batch_plan, CompositionStrategy};
use crate::error::{Error, Result};
use crate::registry::RegistrySnapshot;
use crate::retriever::Retriever;
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchPath {
    /// Retrieval, plan and the batched kernels.
    Batched,
    /// Retrieval, plan and the per-sample loop oracle.
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub warmup: usize,
    pub trials: usize,
    /// Requests served per trial, rounded up to whole batches.
    pub requests_per_trial: usize,
    pub path: BenchPath,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup: 2,
            trials: 5,
            requests_per_trial: 256,
            path: BenchPath::Batched,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub batch_size: usize,
    /// Median over trials; one token is one sequence position.
    pub tokens_per_sec: f64,
    pub trial_tokens_per_sec: Vec<f64>,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn run_batch(
    model: &BackboneModel,
    batch: &[InferenceRequest],
    strategy: CompositionStrategy,
    snapshot: &RegistrySnapshot,
    retriever: &Retriever,
    path: BenchPath,
) -> Result<usize> {
    match path {
        BenchPath::Batched => {
            let out = serve_batch_on(model, batch, strategy, snapshot, retriever)?;
            Ok(out.outputs.iter().map(|o| o.output.shape()[0]).sum())
        }
        BenchPath::Sequential => {
            let index = retriever.index(snapshot)?;
            let ids = batch
                .iter()
                .map(|r| {
                    let q = retriever.embed_text(&r.text)?;
                    Ok(index
                        .top_k(&q, strategy.k(), r.mask.as_ref())?
                        .into_iter()
                        .map(|x| x.id)
                        .collect())
                })
                .collect::<Result<Vec<Vec<String>>>>()?;
            let plan = build_batch_plan(&ids, strategy, snapshot)?;
            let l = batch[0].features.shape()[0];
            if batch.iter().any(|r| r.features.shape()[0] != l) {
                return Err(Error::Validation("sequential bench path needs equal lengths".into()));
            }
            let d = model.d();
            let mut x = Vec::with_capacity(batch.len() * l * d);
            for r in batch {
                x.extend_from_slice(r.features.data());
            }
            let x = DenseTensor::new(vec![batch.len(), l, d], x)?;
            let y = model.forward_with_plan_sequential(&x, &plan, snapshot)?;
            Ok(y.shape()[0] * y.shape()[1])
        }
    }
}

/// Serves `requests` (cycled) in batches of each size and reports tokens/sec.
/// Single-threaded; warm-up rounds are not timed.
pub fn benchmark_throughput(
    model: &BackboneModel,
    snapshot: &RegistrySnapshot,
    retriever: &Retriever,
    requests: &[InferenceRequest],
    batch_sizes: &[usize],
    strategy: CompositionStrategy,
    config: &BenchConfig,
) -> Result<Vec<ThroughputRow>> {
    if requests.is_empty() {
        return Err(Error::EmptyInput);
    }
    if config.trials == 0 {
        return Err(Error::Validation("trials must be >= 1".into()));
    }
    let mut rows = Vec::with_capacity(batch_sizes.len());
    for &b in batch_sizes {
        if b == 0 {
            return Err(Error::Validation("batch size must be >= 1".into()));
        }
        let n_batches = config.requests_per_trial.div_ceil(b).max(1);
        let batches: Vec<Vec<InferenceRequest>> = (0..n_batches)
            .map(|i| (0..b).map(|j| requests[(i * b + j) % requests.len()].clone()).collect())
            .collect();
        let round = || -> Result<usize> {
            let mut tokens = 0;
            for batch in &batches {
                tokens += run_batch(model, batch, strategy, snapshot, retriever, config.path)?;
            }
            Ok(tokens)
        };
        for _ in 0..config.warmup {
            round()?;
        }
        let mut trials = Vec::with_capacity(config.trials);
        for _ in 0..config.trials {
            let start = Instant::now();
            let tokens = round()?;
            trials.push(tokens as f64 / start.elapsed().as_secs_f64().max(1e-9));
        }
        rows.push(ThroughputRow {
            batch_size: b,
            tokens_per_sec: median(&trials),
            trial_tokens_per_sec: trials,
        });
    }
    Ok(rows)
}
