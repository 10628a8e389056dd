//! Retrieval, composition and one batched forward per request batch.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::backbone::BackboneModel;
use crate::composer::{build_batch_plan, BatchPlan, CompositionStrategy};
use crate::error::{Error, Result};
use crate::registry::{LoraAdapter, Registry, RegistrySnapshot};
use crate::retriever::{Retrieved, Retriever};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRequest {
    pub id: String,
    /// Retrieval key.
    pub text: String,
    /// `[l×d]` forward input.
    pub features: DenseTensor,
    /// Adapter ids this request must not be routed to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<HashSet<String>>,
}

impl InferenceRequest {
    pub fn new(id: impl Into<String>, text: impl Into<String>, features: DenseTensor) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            features,
            mask: None,
        }
    }

    pub fn with_mask(mut self, mask: HashSet<String>) -> Self {
        self.mask = Some(mask);
        self
    }

    fn seq_len(&self, d: usize) -> Result<usize> {
        let (l, w) = self.features.dims2()?;
        if l == 0 {
            return Err(Error::Validation(format!("request `{}` has no positions", self.id)));
        }
        if w != d {
            return Err(Error::Dimension(format!(
                "request `{}` has width {w}, backbone expects {d}",
                self.id
            )));
        }
        Ok(l)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestOutput {
    pub id: String,
    /// `[l×d]`, cropped to the request's own length.
    pub output: DenseTensor,
    pub retrieved: Vec<Retrieved>,
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    /// Same order as the input requests.
    pub outputs: Vec<RequestOutput>,
    pub plan: BatchPlan,
}

/// Serves a batch against the registry's current snapshot.
pub fn serve_batch(
    model: &BackboneModel,
    requests: &[InferenceRequest],
    strategy: CompositionStrategy,
    registry: &Registry,
    retriever: &Retriever,
) -> Result<BatchOutput> {
    let snapshot = registry.snapshot();
    serve_batch_on(model, requests, strategy, &snapshot, retriever)
}

/// Serves a batch pinned to `snapshot`; later registrations cannot affect it.
pub fn serve_batch_on(
    model: &BackboneModel,
    requests: &[InferenceRequest],
    strategy: CompositionStrategy,
    snapshot: &RegistrySnapshot,
    retriever: &Retriever,
) -> Result<BatchOutput> {
    if snapshot.is_empty() {
        return Err(Error::EmptyPool);
    }
    let index = retriever.index(snapshot)?;
    let retrievals = requests
        .iter()
        .map(|r| {
            let query = retriever.embed_text(&r.text)?;
            index.top_k(&query, strategy.k(), r.mask.as_ref())
        })
        .collect::<Result<Vec<_>>>()?;
    execute_batch(model, requests, retrievals, strategy, snapshot)
}

/// Builds the plan from given retrieval lists and runs the batched forward.
/// Requests of different lengths are zero-padded; the backbone is position-wise
/// so padding never leaks into real positions.
pub fn execute_batch(
    model: &BackboneModel,
    requests: &[InferenceRequest],
    retrievals: Vec<Vec<Retrieved>>,
    strategy: CompositionStrategy,
    snapshot: &RegistrySnapshot,
) -> Result<BatchOutput> {
    if requests.is_empty() {
        return Err(Error::EmptyInput);
    }
    if retrievals.len() != requests.len() {
        return Err(Error::Dimension(format!(
            "{} retrieval lists for {} requests",
            retrievals.len(),
            requests.len()
        )));
    }
    let d = model.d();
    let lens = requests.iter().map(|r| r.seq_len(d)).collect::<Result<Vec<_>>>()?;
    let l_max = *lens.iter().max().expect("non-empty");
    let b = requests.len();

    let mut x = vec![0.0; b * l_max * d];
    for (i, r) in requests.iter().enumerate() {
        let start = i * l_max * d;
        x[start..start + lens[i] * d].copy_from_slice(r.features.data());
    }
    let x = DenseTensor::new(vec![b, l_max, d], x)?;

    let ids: Vec<Vec<String>> = retrievals
        .iter()
        .map(|list| list.iter().map(|r| r.id.clone()).collect())
        .collect();
    let plan = build_batch_plan(&ids, strategy, snapshot)?;
    let y = model.forward_with_plan(&x, &plan, snapshot)?;

    let outputs = requests
        .iter()
        .zip(retrievals)
        .enumerate()
        .map(|(i, (r, retrieved))| {
            let start = i * l_max * d;
            Ok(RequestOutput {
                id: r.id.clone(),
                output: DenseTensor::new(vec![lens[i], d], y.data()[start..start + lens[i] * d].to_vec())?,
                retrieved,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchOutput { outputs, plan })
}

/// Unbatched reference path: retrieval then [`BackboneModel::forward_single`].
pub fn serve_single(
    model: &BackboneModel,
    request: &InferenceRequest,
    strategy: CompositionStrategy,
    snapshot: &RegistrySnapshot,
    retriever: &Retriever,
) -> Result<RequestOutput> {
    if snapshot.is_empty() {
        return Err(Error::EmptyPool);
    }
    let l = request.seq_len(model.d())?;
    let retrieved = retriever.retrieve_top_k(&request.text, snapshot, strategy.k(), request.mask.as_ref())?;
    let adapters: Vec<&LoraAdapter> = retrieved
        .iter()
        .map(|r| snapshot.get(&r.id).map(AsRef::as_ref))
        .collect::<Result<_>>()?;
    let x = DenseTensor::new(vec![1, l, model.d()], request.features.data().to_vec())?;
    let y = model.forward_single(&x, &adapters, strategy.kind())?;
    Ok(RequestOutput {
        id: request.id.clone(),
        output: y.reshape(vec![l, model.d()])?,
        retrieved,
    })
}
