//! Input-aware adapter retrieval.
//!
//! Requests and adapters share one embedding space: a request is embedded as
//! `E(I ⊕ x)`, an adapter as the renormalised mean of its representative
//! samples' embeddings. Retrieval is an exact cosine scan over the snapshot.

mod encoder;
mod train;

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::{LoraAdapter, RegistrySnapshot};

pub use encoder::{tokenize, EmbeddingVector, Encoder, EncoderGrads, UNK_TOKEN};
pub use train::{
    contrastive_nll, contrastive_nll_from_scores,
    contrastive_step, train_retriever, TrainingConfig, TrainingOutcome,
};

/// Fixed instruction prefixed to every text before embedding.
pub const DEFAULT_INSTRUCTION: &str = "Represent the sentence for similar task retrieval";

/// Cosine similarity of unit vectors (a plain dot product).
pub fn similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum()
}

/// `E(φ)`: mean of the sample embeddings, rescaled to unit length.
pub fn embed_lora(encoder: &Encoder, adapter: &LoraAdapter, instruction: &str) -> Result<EmbeddingVector> {
    embed_samples(encoder, &adapter.representative_samples, instruction)
}

pub fn embed_samples(encoder: &Encoder, samples: &[String], instruction: &str) -> Result<EmbeddingVector> {
    if samples.is_empty() {
        return Err(Error::Validation(
            "adapter embedding needs at least one representative sample".into(),
        ));
    }
    let mut sum = vec![0.0; encoder.embed_dim()];
    for s in samples {
        let v = encoder.embed_text(instruction, s)?;
        for (acc, x) in sum.iter_mut().zip(v.values()) {
            *acc += x;
        }
    }
    let m = samples.len() as f64;
    EmbeddingVector::normalized(sum.into_iter().map(|v| v / m).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub id: String,
    pub score: f64,
}

/// Descending by score, ties by ascending id.
pub fn rank_candidates(mut scored: Vec<Retrieved>, k: usize) -> Vec<Retrieved> {
    scored.sort_by(|a, b| match b.score.total_cmp(&a.score) {
        Ordering::Equal => a.id.cmp(&b.id),
        o => o,
    });
    scored.truncate(k);
    scored
}

/// Adapter centroids for one snapshot, in registration order.
#[derive(Debug, Clone)]
pub struct CentroidIndex {
    version: u64,
    entries: Vec<(String, EmbeddingVector)>,
}

impl CentroidIndex {
    pub fn from_entries(version: u64, entries: Vec<(String, EmbeddingVector)>) -> Self {
        Self { version, entries }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn entries(&self) -> &[(String, EmbeddingVector)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn centroid(&self, id: &str) -> Option<&EmbeddingVector> {
        self.entries.iter().find(|(i, _)| i == id).map(|(_, v)| v)
    }

    pub fn top_k(
        &self,
        query: &EmbeddingVector,
        k: usize,
        mask: Option<&HashSet<String>>,
    ) -> Result<Vec<Retrieved>> {
        if k == 0 {
            return Err(Error::Validation("k must be at least 1".into()));
        }
        let scored: Vec<Retrieved> = self
            .entries
            .iter()
            .filter(|(id, _)| mask.is_none_or(|m| !m.contains(id)))
            .map(|(id, c)| Retrieved {
                id: id.clone(),
                score: similarity(query, c),
            })
            .collect();
        if scored.is_empty() {
            return Err(Error::EmptyPool);
        }
        Ok(rank_candidates(scored, k))
    }
}

/// Encoder plus a centroid cache keyed by adapter identity.
#[derive(Debug)]
pub struct Retriever {
    encoder: Arc<Encoder>,
    instruction: String,
    cache: Mutex<HashMap<String, (Arc<LoraAdapter>, EmbeddingVector)>>,
}

impl Clone for Retriever {
    fn clone(&self) -> Self {
        Self::with_instruction(Arc::clone(&self.encoder), self.instruction.clone())
    }
}

impl Retriever {
    pub fn new(encoder: Encoder) -> Self {
        Self::with_instruction(Arc::new(encoder), DEFAULT_INSTRUCTION.to_string())
    }

    pub fn with_instruction(encoder: Arc<Encoder>, instruction: String) -> Self {
        Self {
            encoder,
            instruction,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn instruction(&self) -> &str {
        &self.instruction
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        self.encoder.embed_text(&self.instruction, text)
    }

    /// Centroids for every adapter in `snapshot`. Adapters already seen (same
    /// `Arc`) are served from the cache.
    pub fn index(&self, snapshot: &RegistrySnapshot) -> Result<CentroidIndex> {
        let mut cache = self.cache.lock().expect("centroid cache poisoned");
        let mut entries = Vec::with_capacity(snapshot.len());
        for adapter in snapshot.adapters() {
            let hit = cache
                .get(&adapter.id)
                .filter(|(a, _)| Arc::ptr_eq(a, adapter))
                .map(|(_, v)| v.clone());
            let centroid = match hit {
                Some(v) => v,
                None => {
                    let v = embed_lora(&self.encoder, adapter, &self.instruction)?;
                    cache.insert(adapter.id.clone(), (Arc::clone(adapter), v.clone()));
                    v
                }
            };
            entries.push((adapter.id.clone(), centroid));
        }
        Ok(CentroidIndex::from_entries(snapshot.version(), entries))
    }

    /// `g(x, Φ)`: the `k` most similar adapters, excluding `mask`.
    pub fn retrieve_top_k(
        &self,
        text: &str,
        snapshot: &RegistrySnapshot,
        k: usize,
        mask: Option<&HashSet<String>>,
    ) -> Result<Vec<Retrieved>> {
        if k == 0 {
            return Err(Error::Validation("k must be at least 1".into()));
        }
        let index = self.index(snapshot)?;
        let query = self.embed_text(text)?;
        index.top_k(&query, k, mask)
    }
}
