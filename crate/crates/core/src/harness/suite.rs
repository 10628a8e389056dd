//! Synthetic mixed-task suite.
//!
//! Tasks come in families. Each task owns a private word cluster and an affine
//! target map `I + family low-rank + task low-rank`; tasks in a family share a
//! handful of family words and the family component of the map. Every text also
//! carries filler words drawn from one pool shared by all tasks.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::parse_json;
use crate::tensor::{matmul, DenseTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub num_tasks: usize,
    pub family_size: usize,
    pub train_per_task: usize,
    pub test_per_task: usize,
    pub d: usize,
    /// Positions per sample.
    pub seq_len: usize,
    pub seed: u64,
    pub cluster_size: usize,
    pub family_vocab: usize,
    pub filler_vocab: usize,
    pub task_words_per_text: usize,
    pub family_words_per_text: usize,
    pub filler_words_per_text: usize,
    pub feature_std: f64,
    pub family_rank: usize,
    pub family_scale: f64,
    pub task_rank: usize,
    pub task_scale: f64,
    pub bias_std: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            num_tasks: 20,
            family_size: 4,
            train_per_task: 20,
            test_per_task: 50,
            d: 16,
            seq_len: 4,
            seed: 0,
            cluster_size: 10,
            family_vocab: 6,
            filler_vocab: 8,
            task_words_per_text: 3,
            family_words_per_text: 2,
            filler_words_per_text: 8,
            feature_std: 0.5,
            family_rank: 2,
            family_scale: 1.0,
            task_rank: 2,
            task_scale: 0.6,
            bias_std: 0.05,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::Validation(msg.into())) };
        check(self.num_tasks >= 2, "num_tasks must be >= 2")?;
        check(self.family_size >= 1, "family_size must be >= 1")?;
        check(self.train_per_task >= 2, "train_per_task must be >= 2")?;
        check(self.test_per_task >= 1, "test_per_task must be >= 1")?;
        check(self.d >= 1 && self.seq_len >= 1, "d and seq_len must be >= 1")?;
        check(self.cluster_size >= 1, "cluster_size must be >= 1")?;
        check(self.task_words_per_text >= 1, "texts need at least one task word")?;
        check(
            self.family_words_per_text == 0 || self.family_vocab >= 1,
            "family words requested but family_vocab is 0",
        )?;
        check(
            self.filler_words_per_text == 0 || self.filler_vocab >= 1,
            "filler words requested but filler_vocab is 0",
        )?;
        check(self.feature_std > 0.0, "feature_std must be > 0")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSample {
    pub text: String,
    /// `[l×d]`.
    pub features: DenseTensor,
    /// `[l×d]`, the task map applied position-wise.
    pub targets: DenseTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub task_id: String,
    pub family: usize,
    pub vocab_cluster: Vec<String>,
    /// `[d×d]`; `target = target_map · x + bias`.
    pub target_map: DenseTensor,
    pub bias: Vec<f64>,
    pub train: Vec<SuiteSample>,
    pub test: Vec<SuiteSample>,
}

impl SyntheticTask {
    pub fn apply(&self, features: &DenseTensor) -> Result<DenseTensor> {
        let mut y = matmul(features, &self.target_map.transpose()?)?;
        let d = self.bias.len();
        for row in y.data_mut().chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSuite {
    pub config: SuiteConfig,
    pub tasks: Vec<SyntheticTask>,
}

/// A test sample tagged with its task, as it appears in the mixed stream.
#[derive(Debug, Clone, Copy)]
pub struct MixedEntry<'a> {
    pub task: &'a SyntheticTask,
    pub index: usize,
    pub sample: &'a SuiteSample,
}

impl SyntheticTaskSuite {
    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn task(&self, id: &str) -> Option<&SyntheticTask> {
        self.tasks.iter().find(|t| t.task_id == id)
    }

    /// Every test sample of every task, shuffled with `seed`.
    pub fn mixed_test_set(&self, seed: u64) -> Vec<MixedEntry<'_>> {
        use rand::seq::SliceRandom;
        let mut all: Vec<MixedEntry> = self
            .tasks
            .iter()
            .flat_map(|t| t.test.iter().enumerate().map(move |(index, sample)| MixedEntry { task: t, index, sample }))
            .collect();
        all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        all
    }

    /// Every word appearing in any training text.
    pub fn training_corpus(&self) -> Vec<&str> {
        self.tasks.iter().flat_map(|t| t.train.iter().map(|s| s.text.as_str())).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| Error::Validation(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_json(path, &text)
    }
}

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "br"];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];

fn fresh_word(rng: &mut ChaCha8Rng, used: &mut BTreeSet<String>) -> String {
    loop {
        let syllables = rng.random_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
            .collect();
        if used.insert(w.clone()) {
            return w;
        }
    }
}

fn words(rng: &mut ChaCha8Rng, used: &mut BTreeSet<String>, n: usize) -> Vec<String> {
    (0..n).map(|_| fresh_word(rng, used)).collect()
}

/// `scale · U·Vᵀ` with `U, V ~ N(0, 1/d)` of width `rank`.
fn low_rank(d: usize, rank: usize, scale: f64, rng: &mut ChaCha8Rng) -> Result<DenseTensor> {
    if rank == 0 || scale == 0.0 {
        return Ok(DenseTensor::zeros(&[d, d]));
    }
    let std = 1.0 / (d as f64).sqrt();
    let u = DenseTensor::random_normal(&[d, rank], std, rng);
    let v = DenseTensor::random_normal(&[d, rank], std, rng);
    Ok(matmul(&u, &v.transpose()?)?.scale(scale * (d as f64 / rank as f64).sqrt()))
}

/// Default layout with `samples_per_task` test samples per task.
pub fn generate_suite(num_tasks: usize, samples_per_task: usize, d: usize, seed: u64) -> Result<SyntheticTaskSuite> {
    generate_suite_with(SuiteConfig {
        num_tasks,
        test_per_task: samples_per_task,
        d,
        seed,
        ..SuiteConfig::default()
    })
}

pub fn generate_suite_with(config: SuiteConfig) -> Result<SyntheticTaskSuite> {
    config.validate()?;
    let c = &config;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut used = BTreeSet::new();
    let n_families = c.num_tasks.div_ceil(c.family_size);
    let filler = words(&mut rng, &mut used, c.filler_vocab);
    let families = (0..n_families)
        .map(|_| {
            let vocab = words(&mut rng, &mut used, c.family_vocab);
            let map = low_rank(c.d, c.family_rank, c.family_scale, &mut rng)?;
            Ok((vocab, map))
        })
        .collect::<Result<Vec<_>>>()?;

    let width = (c.num_tasks - 1).to_string().len().max(2);
    let mut tasks = Vec::with_capacity(c.num_tasks);
    for t in 0..c.num_tasks {
        let family = t / c.family_size;
        let cluster = words(&mut rng, &mut used, c.cluster_size);
        let target_map = DenseTensor::identity(c.d)
            .add(&families[family].1)?
            .add(&low_rank(c.d, c.task_rank, c.task_scale, &mut rng)?)?;
        let bias = DenseTensor::random_normal(&[c.d], c.bias_std.max(0.0), &mut rng).into_data();
        let mut task = SyntheticTask {
            task_id: format!("task{t:0width$}"),
            family,
            vocab_cluster: cluster,
            target_map,
            bias,
            train: Vec::new(),
            test: Vec::new(),
        };
        let sample = |rng: &mut ChaCha8Rng| -> Result<SuiteSample> {
            let mut tokens: Vec<&str> = Vec::new();
            for _ in 0..c.task_words_per_text {
                tokens.push(task.vocab_cluster.choose(rng).unwrap());
            }
            for _ in 0..c.family_words_per_text {
                tokens.push(families[family].0.choose(rng).unwrap());
            }
            for _ in 0..c.filler_words_per_text {
                tokens.push(filler.choose(rng).unwrap());
            }
            use rand::seq::SliceRandom;
            tokens.shuffle(rng);
            let features = DenseTensor::random_normal(&[c.seq_len, c.d], c.feature_std, rng);
            let targets = task.apply(&features)?;
            Ok(SuiteSample {
                text: tokens.join(" "),
                features,
                targets,
            })
        };
        let train = (0..c.train_per_task).map(|_| sample(&mut rng)).collect::<Result<Vec<_>>>()?;
        let test = (0..c.test_per_task).map(|_| sample(&mut rng)).collect::<Result<Vec<_>>>()?;
        task.train = train;
        task.test = test;
        tasks.push(task);
    }
    Ok(SyntheticTaskSuite { config, tasks })
}
