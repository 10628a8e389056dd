//! Fixture for throughput runs: a wide backbone, one random adapter per suite
//! task and requests drawn from the suite's mixed test texts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::suite::SyntheticTaskSuite;
use crate::engine::{BackboneModel, InferenceRequest};
use crate::error::{Error, Result};
use crate::registry::{LoraAdapter, Registry};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputSetup {
    pub d: usize,
    pub depth: usize,
    pub seq_len: usize,
    pub rank: usize,
    pub alpha: f64,
    pub adapter_std: f64,
    pub backbone_noise: f64,
    pub seed: u64,
}

impl Default for ThroughputSetup {
    fn default() -> Self {
        Self {
            d: 1024,
            depth: 2,
            seq_len: 2,
            rank: 6,
            alpha: 12.0,
            adapter_std: 0.05,
            backbone_noise: 0.05,
            seed: 0,
        }
    }
}

pub struct ThroughputFixture {
    pub model: BackboneModel,
    pub registry: Registry,
    pub requests: Vec<InferenceRequest>,
}

/// Random request features of shape `[seq_len, d]` over the suite's test texts.
pub fn bench_requests(suite: &SyntheticTaskSuite, d: usize, seq_len: usize, seed: u64) -> Result<Vec<InferenceRequest>> {
    if d == 0 || seq_len == 0 {
        return Err(Error::Validation("d and seq_len must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    Ok(suite
        .mixed_test_set(seed)
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let x = DenseTensor::random_normal(&[seq_len, d], 0.5, &mut rng);
            InferenceRequest::new(format!("r{i}"), e.sample.text.clone(), x)
        })
        .collect())
}

pub fn throughput_fixture(suite: &SyntheticTaskSuite, setup: &ThroughputSetup) -> Result<ThroughputFixture> {
    if setup.rank == 0 || setup.alpha.is_nan() || setup.alpha <= 0.0 {
        return Err(Error::Validation("rank must be >= 1 and alpha > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let model = BackboneModel::near_identity(setup.d, setup.depth, setup.backbone_noise, 0.0, &mut rng)?;
    let registry = Registry::new(setup.d, setup.depth);
    for t in &suite.tasks {
        let reps = t.train.iter().map(|s| s.text.clone()).collect();
        let adapter = LoraAdapter::random(
            t.task_id.clone(),
            t.task_id.clone(),
            setup.d,
            setup.depth,
            setup.rank,
            setup.alpha,
            setup.adapter_std,
            reps,
            &mut rng,
        );
        registry.register(adapter)?;
    }
    let requests = bench_requests(suite, setup.d, setup.seq_len, setup.seed)?;
    Ok(ThroughputFixture { model, registry, requests })
}
