//! Line-oriented evaluation report: `key=value` lines, then one JSON block.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::pipeline::EvalMode;
use crate::composer::StrategyKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task_id: String,
    pub samples: usize,
    pub mse: f64,
    pub retrieval_top1: f64,
    pub retrieval_topk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub strategy: StrategyKind,
    pub k: usize,
    /// `trained`, `untrained` or `perfect`.
    pub routing: String,
    pub batch_size: usize,
    pub samples: usize,
    pub batches: usize,
    pub pool_size: usize,
    /// Largest `p` over all batches.
    pub max_p: usize,
    pub mse_mean: f64,
    pub retrieval_top1: f64,
    pub retrieval_topk: f64,
    /// Batches whose plan broke `p <= min(b·k, |Φ|)` or had a row not summing to 1.
    pub dedup_violations: usize,
    /// Samples whose retrieved list contained their own task's adapter in OOD mode.
    pub ood_violations: usize,
    pub tasks: Vec<TaskMetrics>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("mode", &self.mode);
        kv("strategy", &self.strategy);
        kv("k", &self.k);
        kv("routing", &self.routing);
        kv("batch_size", &self.batch_size);
        kv("samples", &self.samples);
        kv("batches", &self.batches);
        kv("pool_size", &self.pool_size);
        kv("max_p", &self.max_p);
        kv("mse_mean", &self.mse_mean);
        kv("retrieval_top1", &self.retrieval_top1);
        kv("retrieval_topk", &self.retrieval_topk);
        kv("dedup_violations", &self.dedup_violations);
        kv("ood_violations", &self.ood_violations);
        for t in &self.tasks {
            kv(&format!("task.{}.mse", t.task_id), &t.mse);
            kv(&format!("task.{}.retrieval_top1", t.task_id), &t.retrieval_top1);
            kv(&format!("task.{}.retrieval_topk", t.task_id), &t.retrieval_topk);
        }
        s.push_str(&serde_json::to_string_pretty(self).expect("report serializes"));
        s.push('\n');
        s
    }

    /// Reads the JSON block back out of [`to_text`](Self::to_text) output.
    pub fn from_text(text: &str) -> Option<Self> {
        let start = text.find('{')?;
        serde_json::from_str(&text[start..]).ok()
    }
}
