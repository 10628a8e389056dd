//! Turns per-sample retrieval results into a [`BatchPlan`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{KernelMode, MappingMatrix};
use crate::registry::{LoraAdapter, LoraLayer, RegistrySnapshot};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    /// Top-1 adapter only.
    Selection,
    /// Average of adapter outputs.
    Mixture,
    /// Average of adapter parameters.
    Fusion,
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StrategyKind::Selection => "selection",
            StrategyKind::Mixture => "mixture",
            StrategyKind::Fusion => "fusion",
        })
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "selection" => Ok(Self::Selection),
            "mixture" => Ok(Self::Mixture),
            "fusion" => Ok(Self::Fusion),
            other => Err(Error::Validation(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CompositionStrategy {
    kind: StrategyKind,
    k: usize,
}

impl CompositionStrategy {
    pub fn new(kind: StrategyKind, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Validation("k must be at least 1".into()));
        }
        if kind == StrategyKind::Selection && k != 1 {
            return Err(Error::Validation(format!("selection requires k = 1, got {k}")));
        }
        Ok(Self { kind, k })
    }

    pub fn selection() -> Self {
        Self {
            kind: StrategyKind::Selection,
            k: 1,
        }
    }

    pub fn mixture(k: usize) -> Result<Self> {
        Self::new(StrategyKind::Mixture, k)
    }

    pub fn fusion(k: usize) -> Result<Self> {
        Self::new(StrategyKind::Fusion, k)
    }

    pub fn kind(&self) -> StrategyKind {
        self.kind
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Selection runs through the mixture kernel with one-hot rows.
    pub fn kernel_mode(&self) -> KernelMode {
        match self.kind {
            StrategyKind::Selection | StrategyKind::Mixture => KernelMode::Mixture,
            StrategyKind::Fusion => KernelMode::Fusion,
        }
    }
}

impl fmt::Display for CompositionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(k={})", self.kind, self.k)
    }
}

/// Deduplicated adapter set `Φ_B` (sorted ids) plus the mapping matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub adapter_ids: Vec<String>,
    pub mapping: MappingMatrix,
    pub strategy: CompositionStrategy,
    pub snapshot_version: u64,
}

impl BatchPlan {
    pub fn batch_size(&self) -> usize {
        self.mapping.rows()
    }

    /// Number of unique adapters in the batch.
    pub fn p(&self) -> usize {
        self.adapter_ids.len()
    }

    /// Ids routed to sample `i`, in column order.
    pub fn sample_adapters(&self, i: usize) -> Vec<&str> {
        self.mapping
            .nonzero_cols(i)
            .into_iter()
            .map(|j| self.adapter_ids[j].as_str())
            .collect()
    }
}

pub fn build_batch_plan(
    retrievals: &[Vec<String>],
    strategy: CompositionStrategy,
    snapshot: &RegistrySnapshot,
) -> Result<BatchPlan> {
    if retrievals.is_empty() {
        return Err(Error::EmptyPlan);
    }
    let lists: Vec<&[String]> = retrievals
        .iter()
        .map(|r| match strategy.kind() {
            StrategyKind::Selection => &r[..r.len().min(1)],
            _ => r.as_slice(),
        })
        .collect();
    for (i, list) in lists.iter().enumerate() {
        if list.len() > strategy.k() {
            return Err(Error::Validation(format!(
                "sample {i} has {} adapters but k = {}",
                list.len(),
                strategy.k()
            )));
        }
        for id in *list {
            if !snapshot.contains(id) {
                return Err(Error::NotFound(id.clone()));
            }
        }
    }
    let union: BTreeSet<&str> = lists.iter().flat_map(|l| l.iter().map(String::as_str)).collect();
    if union.is_empty() {
        return Err(Error::EmptyPlan);
    }
    let column: BTreeMap<&str, usize> = union.iter().enumerate().map(|(j, id)| (*id, j)).collect();
    let assignments: Vec<Vec<usize>> = lists
        .iter()
        .map(|l| l.iter().map(|id| column[id.as_str()]).collect())
        .collect();
    Ok(BatchPlan {
        adapter_ids: union.into_iter().map(str::to_string).collect(),
        mapping: MappingMatrix::uniform(column.len(), &assignments)?,
        strategy,
        snapshot_version: snapshot.version(),
    })
}

/// Zero-pads `A` rows and `B` columns up to `target_r`, keeping `scale · B·A`
/// unchanged (alpha is rescaled with the rank).
pub fn pad_rank(adapter: &LoraAdapter, target_r: usize) -> Result<LoraAdapter> {
    let r = adapter.rank;
    if target_r < r {
        return Err(Error::Validation(format!(
            "cannot pad adapter `{}` from rank {r} down to {target_r}",
            adapter.id
        )));
    }
    if target_r == r {
        return Ok(adapter.clone());
    }
    let layers = adapter
        .layers
        .iter()
        .map(|layer| {
            let (_, d) = layer.a.dims2()?;
            let mut a = layer.a.data().to_vec();
            a.resize(target_r * d, 0.0);
            let mut b = vec![0.0; d * target_r];
            for i in 0..d {
                b[i * target_r..i * target_r + r].copy_from_slice(&layer.b.data()[i * r..(i + 1) * r]);
            }
            Ok(LoraLayer {
                a: DenseTensor::new(vec![target_r, d], a)?,
                b: DenseTensor::new(vec![d, target_r], b)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LoraAdapter {
        rank: target_r,
        alpha: adapter.alpha * target_r as f64 / r as f64,
        layers,
        ..adapter.clone()
    })
}

/// `Θ_fusion = (1/k) Σ Θ_j` over adapters of identical shape.
///
/// When scales differ, each `B_j` is weighted by `scale_j / scale_fused` so the
/// fused delta equals `mean(scale_j·B_j) · mean(A_j)`, as in the batched kernel.
pub fn fuse_adapters(adapters: &[&LoraAdapter]) -> Result<LoraAdapter> {
    let first = *adapters
        .first()
        .ok_or_else(|| Error::Validation("cannot fuse an empty adapter list".into()))?;
    for a in adapters {
        if a.rank != first.rank
            || a.layers.len() != first.layers.len()
            || a.layers
                .iter()
                .zip(&first.layers)
                .any(|(x, y)| x.a.shape() != y.a.shape() || x.b.shape() != y.b.shape())
        {
            return Err(Error::Validation(format!(
                "adapter `{}` does not match the shape of `{}`; pad ranks first",
                a.id, first.id
            )));
        }
    }
    let n = adapters.len() as f64;
    let alpha = adapters.iter().map(|a| a.alpha).sum::<f64>() / n;
    let fused_scale = alpha / first.rank as f64;
    let uniform = adapters.iter().all(|a| a.scale().to_bits() == first.scale().to_bits());
    let weight = |a: &LoraAdapter| if uniform { 1.0 } else { a.scale() / fused_scale };

    let layers = (0..first.layers.len())
        .map(|li| {
            let mut a = vec![0.0; first.layers[li].a.len()];
            let mut b = vec![0.0; first.layers[li].b.len()];
            for adapter in adapters {
                let w = weight(adapter);
                let layer = &adapter.layers[li];
                for (acc, v) in a.iter_mut().zip(layer.a.data()) {
                    *acc += v;
                }
                for (acc, v) in b.iter_mut().zip(layer.b.data()) {
                    *acc += w * v;
                }
            }
            a.iter_mut().for_each(|v| *v /= n);
            b.iter_mut().for_each(|v| *v /= n);
            Ok(LoraLayer {
                a: DenseTensor::new(first.layers[li].a.shape().to_vec(), a)?,
                b: DenseTensor::new(first.layers[li].b.shape().to_vec(), b)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let ids: Vec<&str> = adapters.iter().map(|a| a.id.as_str()).collect();
    let tags: Vec<&str> = adapters.iter().map(|a| a.task_tag.as_str()).collect();
    Ok(LoraAdapter {
        id: format!("fused[{}]", ids.join("+")),
        task_tag: tags.join("+"),
        rank: first.rank,
        alpha,
        layers,
        representative_samples: adapters
            .iter()
            .flat_map(|a| a.representative_samples.iter().cloned())
            .collect(),
    })
}

/// Pads every adapter to the largest rank in the list, then fuses.
pub fn fuse_padded(adapters: &[&LoraAdapter]) -> Result<LoraAdapter> {
    let r = adapters.iter().map(|a| a.rank).max().unwrap_or(0);
    let padded = adapters.iter().map(|a| pad_rank(a, r)).collect::<Result<Vec<_>>>()?;
    fuse_adapters(&padded.iter().collect::<Vec<_>>())
}

/// Per-layer `A[p×r×d]` / `B[p×d×r]` stacks for a plan, zero-padded to the plan's
/// largest rank, with each adapter's native `alpha / r`.
#[derive(Debug, Clone)]
pub struct PlanFactors {
    pub rank: usize,
    pub layers: Vec<(DenseTensor, DenseTensor)>,
    pub scales: Vec<f64>,
}

impl PlanFactors {
    pub fn gather(plan: &BatchPlan, snapshot: &RegistrySnapshot) -> Result<Self> {
        let adapters: Vec<&Arc<LoraAdapter>> = plan
            .adapter_ids
            .iter()
            .map(|id| snapshot.get(id))
            .collect::<Result<_>>()?;
        let p = adapters.len();
        let r = adapters.iter().map(|a| a.rank).max().unwrap_or(0);
        let d = snapshot.d();
        let mut layers = Vec::with_capacity(snapshot.num_layers());
        for li in 0..snapshot.num_layers() {
            let mut a_stack = vec![0.0; p * r * d];
            let mut b_stack = vec![0.0; p * d * r];
            for (j, adapter) in adapters.iter().enumerate() {
                let ra = adapter.rank;
                let layer = &adapter.layers[li];
                a_stack[j * r * d..j * r * d + ra * d].copy_from_slice(layer.a.data());
                for i in 0..d {
                    let dst = j * d * r + i * r;
                    b_stack[dst..dst + ra].copy_from_slice(&layer.b.data()[i * ra..(i + 1) * ra]);
                }
            }
            layers.push((
                DenseTensor::new(vec![p, r, d], a_stack)?,
                DenseTensor::new(vec![p, d, r], b_stack)?,
            ));
        }
        Ok(Self {
            rank: r,
            layers,
            scales: adapters.iter().map(|a| a.scale()).collect(),
        })
    }
}
