//! Contrastive fine-tuning of the encoder on a subset of tasks.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{EmbeddingVector, Encoder, EncoderGrads};
use super::similarity;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// Softmax temperature.
    pub gamma: f64,
    /// Negatives per anchor.
    pub negatives_p: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            gamma: 0.05,
            negatives_p: 4,
            epochs: 30,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::Validation(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if self.negatives_p == 0 {
            return Err(Error::Validation("negatives_p must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Validation("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

/// `-log softmax_0(s / γ)` over `[s_pos, s_neg...]`, max-shifted.
pub fn contrastive_nll_from_scores(s_pos: f64, s_neg: &[f64], gamma: f64) -> Result<f64> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::Validation(format!("gamma must be > 0, got {gamma}")));
    }
    if s_neg.is_empty() {
        return Err(Error::Validation("at least one negative is required".into()));
    }
    let logits: Vec<f64> = std::iter::once(s_pos).chain(s_neg.iter().copied()).map(|s| s / gamma).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok((lse - (logits[0] - max)).max(0.0))
}

pub fn contrastive_nll(
    anchor: &EmbeddingVector,
    positive: &EmbeddingVector,
    negatives: &[EmbeddingVector],
    gamma: f64,
) -> Result<f64> {
    let s_neg: Vec<f64> = negatives.iter().map(|n| similarity(anchor, n)).collect();
    contrastive_nll_from_scores(similarity(anchor, positive), &s_neg, gamma)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Loss for one (anchor, positive, negatives) tuple of token-id sequences;
/// accumulates the exact parameter gradient into `grads`.
pub fn contrastive_step(
    encoder: &Encoder,
    anchor: &[usize],
    positive: &[usize],
    negatives: &[Vec<usize>],
    gamma: f64,
    grads: &mut EncoderGrads,
) -> Result<f64> {
    let ta = encoder.forward(anchor)?;
    let others = std::iter::once(positive)
        .chain(negatives.iter().map(Vec::as_slice))
        .map(|ids| encoder.forward(ids))
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = others.iter().map(|t| dot(&ta.unit, &t.unit)).collect();
    let loss = contrastive_nll_from_scores(scores[0], &scores[1..], gamma)?;

    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / gamma).exp()).collect();
    let z: f64 = exps.iter().sum();
    // dL/ds_j = (π_j - [j = 0]) / γ
    let dscore: Vec<f64> = exps
        .iter()
        .enumerate()
        .map(|(j, e)| (e / z - if j == 0 { 1.0 } else { 0.0 }) / gamma)
        .collect();

    let e = encoder.embed_dim();
    let mut grad_anchor = vec![0.0; e];
    for (t, &ds) in others.iter().zip(&dscore) {
        for (g, v) in grad_anchor.iter_mut().zip(&t.unit) {
            *g += ds * v;
        }
        let grad_other: Vec<f64> = ta.unit.iter().map(|v| ds * v).collect();
        encoder.backward(t, &grad_other, grads);
    }
    encoder.backward(&ta, &grad_anchor, grads);
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub encoder: Encoder,
    /// Mean loss of each epoch, measured before each update.
    pub epoch_losses: Vec<f64>,
}

/// SGD on the contrastive loss. Positives come from the anchor's task, negatives
/// from uniformly chosen other tasks.
pub fn train_retriever(
    encoder: &Encoder,
    tasks: &BTreeMap<String, Vec<String>>,
    instruction: &str,
    config: &TrainingConfig,
) -> Result<TrainingOutcome> {
    config.validate()?;
    if tasks.len() < 2 {
        return Err(Error::Validation(format!(
            "contrastive training needs >= 2 tasks, got {}",
            tasks.len()
        )));
    }
    if let Some((t, s)) = tasks.iter().find(|(_, s)| s.len() < 2) {
        return Err(Error::Validation(format!(
            "task `{t}` has {} samples, positive pairs need >= 2",
            s.len()
        )));
    }
    let tokenized: Vec<Vec<Vec<usize>>> = tasks
        .values()
        .map(|samples| {
            samples
                .iter()
                .map(|s| encoder.token_ids(instruction, s))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let anchors: Vec<(usize, usize)> = tokenized
        .iter()
        .enumerate()
        .flat_map(|(t, s)| (0..s.len()).map(move |i| (t, i)))
        .collect();

    let mut model = encoder.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut order = anchors.clone();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &(task, i) in &order {
            let samples = &tokenized[task];
            let mut j = rng.random_range(0..samples.len() - 1);
            if j >= i {
                j += 1;
            }
            let negatives: Vec<Vec<usize>> = (0..config.negatives_p)
                .map(|_| {
                    let mut other = rng.random_range(0..tokenized.len() - 1);
                    if other >= task {
                        other += 1;
                    }
                    let pool = &tokenized[other];
                    pool[rng.random_range(0..pool.len())].clone()
                })
                .collect();
            let mut grads = EncoderGrads::default();
            total += contrastive_step(&model, &samples[i], &samples[j], &negatives, config.gamma, &mut grads)?;
            model.apply_gradient(&grads, config.learning_rate);
        }
        epoch_losses.push(total / order.len() as f64);
    }
    Ok(TrainingOutcome {
        encoder: model,
        epoch_losses,
    })
}
