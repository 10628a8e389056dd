use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::composer::{fuse_padded, BatchPlan, PlanFactors, StrategyKind};
use crate::error::{Error, Result};
use crate::kernels::{batched_lora, sequential_oracle, LayerFactors};
use crate::registry::{parse_json, LoraAdapter, RegistrySnapshot};
use crate::tensor::{gemm, matmul, DenseTensor, Strided};

/// `y = W0·x + bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineLayer {
    pub weight: DenseTensor,
    pub bias: Vec<f64>,
}

#[derive(Deserialize)]
struct RawBackbone {
    layers: Vec<AffineLayer>,
}

/// Frozen stack of affine layers with `tanh` between them (none after the last).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBackbone")]
pub struct BackboneModel {
    layers: Vec<AffineLayer>,
    d: usize,
    /// `W0ᵀ` per layer, row-major, so the GEMM streams weights contiguously.
    #[serde(skip)]
    weights_t: Vec<Vec<f64>>,
}

impl TryFrom<RawBackbone> for BackboneModel {
    type Error = Error;

    fn try_from(raw: RawBackbone) -> Result<Self> {
        Self::new(raw.layers)
    }
}

impl BackboneModel {
    pub fn new(layers: Vec<AffineLayer>) -> Result<Self> {
        let d = layers
            .first()
            .ok_or_else(|| Error::Validation("backbone needs at least one layer".into()))?
            .bias
            .len();
        for (i, l) in layers.iter().enumerate() {
            if l.weight.shape() != [d, d] || l.bias.len() != d {
                return Err(Error::Dimension(format!(
                    "layer {i}: weight {:?} / bias {} do not match width {d}",
                    l.weight.shape(),
                    l.bias.len()
                )));
            }
        }
        let weights_t = layers
            .iter()
            .map(|l| l.weight.transpose().map(DenseTensor::into_data))
            .collect::<Result<_>>()?;
        Ok(Self { layers, d, weights_t })
    }

    /// `W0 = I + N(0, noise²)`, bias `N(0, bias_std²)`.
    pub fn near_identity<R: Rng + ?Sized>(
        d: usize,
        depth: usize,
        noise: f64,
        bias_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|_| {
                let mut w = DenseTensor::random_normal(&[d, d], noise, rng);
                for i in 0..d {
                    w.data_mut()[i * d + i] += 1.0;
                }
                let bias = DenseTensor::random_normal(&[d], bias_std, rng).into_data();
                AffineLayer { weight: w, bias }
            })
            .collect();
        Self::new(layers)
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

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[AffineLayer] {
        &self.layers
    }

    fn check_input(&self, x: &DenseTensor) -> Result<(usize, usize)> {
        let (b, l, d) = x.dims3()?;
        if d != self.d {
            return Err(Error::Dimension(format!(
                "input width {d} does not match backbone width {}",
                self.d
            )));
        }
        Ok((b, l))
    }

    /// Runs the stack; `delta(layer, input)` may add a low-rank term to each
    /// layer's pre-activation.
    pub(crate) fn run(
        &self,
        x: &DenseTensor,
        mut delta: impl FnMut(usize, &DenseTensor) -> Result<Option<DenseTensor>>,
    ) -> Result<DenseTensor> {
        let (b, l) = self.check_input(x)?;
        let d = self.d;
        let rows = b * l;
        let mut h = x.clone();
        for (i, (layer, wt)) in self.layers.iter().zip(&self.weights_t).enumerate() {
            let mut z = vec![0.0; rows * d];
            for row in z.chunks_mut(d) {
                row.copy_from_slice(&layer.bias);
            }
            gemm(
                rows,
                d,
                d,
                Strided::row_major(h.data(), d),
                Strided::row_major(wt, d),
                &mut z,
                d as isize,
                true,
            );
            if let Some(dl) = delta(i, &h)? {
                for (zv, dv) in z.iter_mut().zip(dl.data()) {
                    *zv += dv;
                }
            }
            if i + 1 < self.layers.len() {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            h = DenseTensor::new(vec![b, l, d], z)?;
        }
        Ok(h)
    }

    /// `W0·x` path only.
    pub fn forward_base(&self, x: &DenseTensor) -> Result<DenseTensor> {
        self.run(x, |_, _| Ok(None))
    }

    /// Base path plus the batched mixture or fusion delta at every layer.
    pub fn forward_with_plan(
        &self,
        x: &DenseTensor,
        plan: &BatchPlan,
        snapshot: &RegistrySnapshot,
    ) -> Result<DenseTensor> {
        self.check_plan(x, plan, snapshot)?;
        let factors = PlanFactors::gather(plan, snapshot)?;
        let mode = plan.strategy.kernel_mode();
        self.run(x, |i, h| {
            let (a, b) = &factors.layers[i];
            batched_lora(mode, h, a, b, &plan.mapping, &factors.scales).map(Some)
        })
    }

    /// Same semantics as [`forward_with_plan`](Self::forward_with_plan) with the
    /// delta computed by the per-sample loop oracle.
    pub fn forward_with_plan_sequential(
        &self,
        x: &DenseTensor,
        plan: &BatchPlan,
        snapshot: &RegistrySnapshot,
    ) -> Result<DenseTensor> {
        self.check_plan(x, plan, snapshot)?;
        let adapters: Vec<Vec<&LoraAdapter>> = (0..plan.batch_size())
            .map(|i| {
                plan.sample_adapters(i)
                    .into_iter()
                    .map(|id| snapshot.get(id).map(AsRef::as_ref))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let mode = plan.strategy.kernel_mode();
        self.run(x, |li, h| {
            let lists: Vec<Vec<LayerFactors>> = adapters
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|a| LayerFactors {
                            a: &a.layers[li].a,
                            b: &a.layers[li].b,
                            scale: a.scale(),
                        })
                        .collect()
                })
                .collect();
            sequential_oracle(h, &lists, mode).map(Some)
        })
    }

    fn check_plan(&self, x: &DenseTensor, plan: &BatchPlan, snapshot: &RegistrySnapshot) -> Result<()> {
        if plan.snapshot_version != snapshot.version() {
            return Err(Error::Stale {
                plan: plan.snapshot_version,
                snapshot: snapshot.version(),
            });
        }
        if snapshot.d() != self.d || snapshot.num_layers() != self.depth() {
            return Err(Error::Dimension(format!(
                "registry is for d={} x {} layers, backbone is d={} x {}",
                snapshot.d(),
                snapshot.num_layers(),
                self.d,
                self.depth()
            )));
        }
        let (b, _) = self.check_input(x)?;
        if b != plan.batch_size() {
            return Err(Error::Dimension(format!(
                "batch of {b} samples but plan has {} rows",
                plan.batch_size()
            )));
        }
        Ok(())
    }

    /// Non-batched path for one sample `x[1×l×d]`: averages explicit per-adapter
    /// deltas (selection / mixture) or applies a materialised fused adapter.
    pub fn forward_single(
        &self,
        x: &DenseTensor,
        adapters: &[&LoraAdapter],
        kind: StrategyKind,
    ) -> Result<DenseTensor> {
        let (b, l) = self.check_input(x)?;
        if b != 1 {
            return Err(Error::Dimension(format!("single path expects one sample, got {b}")));
        }
        let fused;
        let used: Vec<&LoraAdapter> = match kind {
            StrategyKind::Fusion if !adapters.is_empty() => {
                fused = fuse_padded(adapters)?;
                vec![&fused]
            }
            StrategyKind::Selection => adapters.iter().take(1).copied().collect(),
            _ => adapters.to_vec(),
        };
        let d = self.d;
        self.run(x, |li, h| {
            if used.is_empty() {
                return Ok(None);
            }
            let rows = DenseTensor::new(vec![l, d], h.data().to_vec())?;
            let mut acc = DenseTensor::zeros(&[l, d]);
            for a in &used {
                let layer = &a.layers[li];
                let ax = matmul(&rows, &layer.a.transpose()?)?;
                let bax = matmul(&ax, &layer.b.transpose()?)?;
                acc = acc.add(&bax.scale(a.scale() / used.len() as f64))?;
            }
            acc.reshape(vec![1, l, d]).map(Some)
        })
    }
}
