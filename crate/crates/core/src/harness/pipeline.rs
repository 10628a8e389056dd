//! Train adapters and retriever on a suite, then evaluate the mixed test stream.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::report::{EvalReport, TaskMetrics};
use super::suite::SyntheticTaskSuite;
use crate::composer::{CompositionStrategy, StrategyKind};
use crate::engine::{execute_batch, train_lora, BackboneModel, InferenceRequest, LoraTask, LoraTrainConfig};
use crate::error::{Error, Result};
use crate::registry::{Registry, RegistrySnapshot};
use crate::retriever::{train_retriever, Encoder, Retrieved, Retriever, TrainingConfig, DEFAULT_INSTRUCTION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Full pool visible.
    Iid,
    /// Each sample's own-task adapter is masked.
    Ood,
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::Iid => "iid",
            EvalMode::Ood => "ood",
        })
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "iid" => Ok(Self::Iid),
            "ood" => Ok(Self::Ood),
            other => Err(Error::Validation(format!("unknown eval mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub backbone_depth: usize,
    pub backbone_noise: f64,
    pub backbone_bias_std: f64,
    pub lora: LoraTrainConfig,
    pub retriever: TrainingConfig,
    /// Fraction of tasks whose samples train the retriever.
    pub train_fraction: f64,
    pub hidden: usize,
    pub embed_dim: usize,
    pub instruction: String,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            backbone_depth: 2,
            backbone_noise: 0.05,
            backbone_bias_std: 0.02,
            lora: LoraTrainConfig::default(),
            retriever: TrainingConfig::default(),
            train_fraction: 0.4,
            hidden: 256,
            embed_dim: 256,
            instruction: DEFAULT_INSTRUCTION.to_string(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub strategy: StrategyKind,
    pub k: usize,
    pub mode: EvalMode,
    pub batch_size: usize,
    /// Shuffles the mixed test stream.
    pub shuffle_seed: u64,
}

impl EvalConfig {
    pub fn new(strategy: StrategyKind, k: usize, mode: EvalMode) -> Self {
        Self {
            strategy,
            k,
            mode,
            batch_size: 32,
            shuffle_seed: 0,
        }
    }

    pub fn composition(&self) -> Result<CompositionStrategy> {
        CompositionStrategy::new(self.strategy, self.k)
    }
}

/// How each test sample is routed to adapters.
#[derive(Debug, Clone, Copy)]
pub enum Router<'a> {
    Retriever { retriever: &'a Retriever, label: &'a str },
    /// The sample's own-task adapter; ignores `k`.
    Perfect,
}

impl Router<'_> {
    fn label(&self) -> &str {
        match self {
            Router::Retriever { label, .. } => label,
            Router::Perfect => "perfect",
        }
    }
}

pub fn build_backbone(d: usize, config: &PipelineConfig) -> Result<BackboneModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xb0_b0);
    BackboneModel::near_identity(d, config.backbone_depth, config.backbone_noise, config.backbone_bias_std, &mut rng)
}

/// One adapter per task, registered under the task id.
pub fn train_task_loras(suite: &SyntheticTaskSuite, model: &BackboneModel, config: &LoraTrainConfig) -> Result<Registry> {
    let registry = Registry::new(model.d(), model.depth());
    for (i, task) in suite.tasks.iter().enumerate() {
        let data = LoraTask {
            id: task.task_id.clone(),
            task_tag: task.task_id.clone(),
            representative_samples: task.train.iter().map(|s| s.text.clone()).collect(),
            examples: task.train.iter().map(|s| (s.features.clone(), s.targets.clone())).collect(),
        };
        let cfg = LoraTrainConfig {
            seed: config.seed.wrapping_add(i as u64),
            ..config.clone()
        };
        registry.register(train_lora(model, &data, &cfg)?)?;
    }
    Ok(registry)
}

/// The seeded `fraction` of task ids used for retriever training (at least two).
pub fn retriever_task_ids(suite: &SyntheticTaskSuite, fraction: f64, seed: u64) -> Result<Vec<String>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Validation(format!("train fraction must be in (0, 1], got {fraction}")));
    }
    let n = ((suite.tasks.len() as f64 * fraction).round() as usize).clamp(2, suite.tasks.len());
    let mut ids: Vec<String> = suite.tasks.iter().map(|t| t.task_id.clone()).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids.truncate(n);
    ids.sort();
    Ok(ids)
}

/// Encoder over the suite's training vocabulary, before any contrastive updates.
pub fn untrained_encoder(suite: &SyntheticTaskSuite, config: &PipelineConfig) -> Encoder {
    let corpus = std::iter::once(config.instruction.as_str()).chain(suite.training_corpus());
    Encoder::new(corpus, config.hidden, config.embed_dim, config.seed)
}

#[derive(Debug, Clone)]
pub struct RetrieverArtifacts {
    pub untrained: Encoder,
    pub trained: Encoder,
    pub tasks: Vec<String>,
    pub epoch_losses: Vec<f64>,
}

pub fn train_suite_retriever(suite: &SyntheticTaskSuite, config: &PipelineConfig) -> Result<RetrieverArtifacts> {
    let untrained = untrained_encoder(suite, config);
    let tasks = retriever_task_ids(suite, config.train_fraction, config.seed)?;
    let data: BTreeMap<String, Vec<String>> = tasks
        .iter()
        .map(|id| {
            let t = suite.task(id).expect("id from suite");
            (id.clone(), t.train.iter().map(|s| s.text.clone()).collect())
        })
        .collect();
    let outcome = train_retriever(&untrained, &data, &config.instruction, &config.retriever)?;
    Ok(RetrieverArtifacts {
        untrained,
        trained: outcome.encoder,
        tasks,
        epoch_losses: outcome.epoch_losses,
    })
}

/// Everything `evaluate` needs, trained from a suite.
#[derive(Debug)]
pub struct Prepared {
    pub model: BackboneModel,
    pub registry: Registry,
    pub trained: Retriever,
    pub untrained: Retriever,
    pub retriever_tasks: Vec<String>,
    pub retriever_losses: Vec<f64>,
}

impl Prepared {
    pub fn evaluate(&self, suite: &SyntheticTaskSuite, routing: &str, eval: &EvalConfig) -> Result<EvalReport> {
        let router = match routing {
            "trained" | "retriever" => Router::Retriever { retriever: &self.trained, label: "trained" },
            "untrained" => Router::Retriever { retriever: &self.untrained, label: "untrained" },
            "perfect" => Router::Perfect,
            other => return Err(Error::Validation(format!("unknown routing `{other}`"))),
        };
        evaluate(suite, &self.model, &self.registry.snapshot(), router, eval)
    }
}

pub fn prepare(suite: &SyntheticTaskSuite, config: &PipelineConfig) -> Result<Prepared> {
    let model = build_backbone(suite.d(), config)?;
    let registry = train_task_loras(suite, &model, &config.lora)?;
    let r = train_suite_retriever(suite, config)?;
    let instruction = config.instruction.clone();
    Ok(Prepared {
        model,
        registry,
        trained: Retriever::with_instruction(r.trained.into(), instruction.clone()),
        untrained: Retriever::with_instruction(r.untrained.into(), instruction),
        retriever_tasks: r.tasks,
        retriever_losses: r.epoch_losses,
    })
}

/// Trains adapters and the retriever, then evaluates with the trained retriever.
pub fn run_pipeline(suite: &SyntheticTaskSuite, config: &PipelineConfig, eval: &EvalConfig) -> Result<EvalReport> {
    prepare(suite, config)?.evaluate(suite, "trained", eval)
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Streams the shuffled mixed test set through the serving path in fixed-size batches.
pub fn evaluate(
    suite: &SyntheticTaskSuite,
    model: &BackboneModel,
    snapshot: &RegistrySnapshot,
    router: Router<'_>,
    eval: &EvalConfig,
) -> Result<EvalReport> {
    let strategy = eval.composition()?;
    if eval.batch_size == 0 {
        return Err(Error::Validation("batch_size must be >= 1".into()));
    }
    if matches!(router, Router::Perfect) && eval.mode == EvalMode::Ood {
        return Err(Error::Validation("perfect routing uses the masked adapter; run it in iid mode".into()));
    }
    let stream = suite.mixed_test_set(eval.shuffle_seed);
    let index = match router {
        Router::Retriever { retriever, .. } => Some(retriever.index(snapshot)?),
        Router::Perfect => None,
    };
    let pool = snapshot.len();

    #[derive(Default)]
    struct Acc {
        n: usize,
        mse: f64,
        top1: usize,
        topk: usize,
    }
    let mut per_task: BTreeMap<&str, Acc> = BTreeMap::new();
    let (mut batches, mut dedup_violations, mut ood_violations, mut max_p) = (0, 0, 0, 0);

    for chunk in stream.chunks(eval.batch_size) {
        let requests: Vec<InferenceRequest> = chunk
            .iter()
            .map(|e| {
                let req = InferenceRequest::new(
                    format!("{}/{}", e.task.task_id, e.index),
                    e.sample.text.clone(),
                    e.sample.features.clone(),
                );
                match eval.mode {
                    EvalMode::Iid => req,
                    EvalMode::Ood => req.with_mask(HashSet::from([e.task.task_id.clone()])),
                }
            })
            .collect();
        let retrievals = match (&router, &index) {
            (Router::Retriever { retriever, .. }, Some(index)) => requests
                .iter()
                .map(|r| index.top_k(&retriever.embed_text(&r.text)?, strategy.k(), r.mask.as_ref()))
                .collect::<Result<Vec<_>>>()?,
            _ => chunk
                .iter()
                .map(|e| vec![Retrieved { id: e.task.task_id.clone(), score: 1.0 }])
                .collect(),
        };
        let out = execute_batch(model, &requests, retrievals, strategy, snapshot)?;

        let plan = &out.plan;
        let bound = (chunk.len() * strategy.k()).min(pool);
        let rows_ok = (0..plan.batch_size()).all(|i| {
            let s: f64 = plan.mapping.row(i).iter().sum();
            s == 0.0 || (s - 1.0).abs() <= 1e-12
        });
        if plan.p() > bound || !rows_ok {
            dedup_violations += 1;
        }
        max_p = max_p.max(plan.p());
        batches += 1;

        for (e, o) in chunk.iter().zip(&out.outputs) {
            let own = e.task.task_id.as_str();
            if eval.mode == EvalMode::Ood && o.retrieved.iter().any(|r| r.id == own) {
                ood_violations += 1;
            }
            let acc = per_task.entry(own).or_default();
            acc.n += 1;
            acc.mse += mse(o.output.data(), e.sample.targets.data());
            acc.top1 += usize::from(o.retrieved.first().is_some_and(|r| r.id == own));
            acc.topk += usize::from(o.retrieved.iter().any(|r| r.id == own));
        }
    }

    let tasks: Vec<TaskMetrics> = per_task
        .into_iter()
        .map(|(id, a)| TaskMetrics {
            task_id: id.to_string(),
            samples: a.n,
            mse: a.mse / a.n as f64,
            retrieval_top1: a.top1 as f64 / a.n as f64,
            retrieval_topk: a.topk as f64 / a.n as f64,
        })
        .collect();
    let samples: usize = tasks.iter().map(|t| t.samples).sum();
    let weighted = |f: fn(&TaskMetrics) -> f64| tasks.iter().map(|t| f(t) * t.samples as f64).sum::<f64>() / samples as f64;
    Ok(EvalReport {
        mode: eval.mode,
        strategy: eval.strategy,
        k: strategy.k(),
        routing: router.label().to_string(),
        batch_size: eval.batch_size,
        samples,
        batches,
        pool_size: pool,
        max_p,
        mse_mean: weighted(|t| t.mse),
        retrieval_top1: weighted(|t| t.retrieval_top1),
        retrieval_topk: weighted(|t| t.retrieval_topk),
        dedup_violations,
        ood_violations,
        tasks,
    })
}
