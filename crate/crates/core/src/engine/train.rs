//! Per-task LoRA fine-tuning over the frozen backbone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::BackboneModel;
use crate::error::{Error, Result};
use crate::registry::{LoraAdapter, LoraLayer};
use crate::tensor::{matmul, DenseTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraTrainConfig {
    pub rank: usize,
    pub alpha: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Standard deviation of the Gaussian `A` initialisation.
    pub init_std: f64,
}

impl Default for LoraTrainConfig {
    fn default() -> Self {
        Self {
            rank: 6,
            alpha: 12.0,
            steps: 500,
            learning_rate: 0.3,
            seed: 0,
            init_std: 0.3,
        }
    }
}

/// Supervised data and metadata for one task's adapter.
#[derive(Debug, Clone)]
pub struct LoraTask {
    pub id: String,
    pub task_tag: String,
    pub representative_samples: Vec<String>,
    /// `(features[l×d], targets[l×d])` pairs.
    pub examples: Vec<(DenseTensor, DenseTensor)>,
}

/// Gradient of the loss with respect to one layer's factors.
#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub a: DenseTensor,
    pub b: DenseTensor,
}

/// Stacks every example's positions into `(X[n×d], Y[n×d])`.
pub fn stack_examples(examples: &[(DenseTensor, DenseTensor)], d: usize) -> Result<(DenseTensor, DenseTensor)> {
    if examples.is_empty() {
        return Err(Error::Validation("task has no training examples".into()));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, (x, y)) in examples.iter().enumerate() {
        x.expect_same_shape(y)?;
        if x.ndim() != 2 || x.shape()[1] != d {
            return Err(Error::Dimension(format!(
                "example {i} has shape {:?}, expected [l, {d}]",
                x.shape()
            )));
        }
        xs.extend_from_slice(x.data());
        ys.extend_from_slice(y.data());
    }
    let n = xs.len() / d;
    Ok((DenseTensor::new(vec![n, d], xs)?, DenseTensor::new(vec![n, d], ys)?))
}

/// Mean squared error of `model + adapter` on rows `x` against `y`, and its
/// gradient with respect to every layer's `A` and `B`.
pub fn lora_loss_and_grad(
    model: &BackboneModel,
    adapter: &LoraAdapter,
    x: &DenseTensor,
    y: &DenseTensor,
) -> Result<(f64, Vec<LayerGrad>)> {
    let (n, d) = x.dims2()?;
    x.expect_same_shape(y)?;
    let s = adapter.scale();
    let depth = model.depth();

    // Forward, keeping each layer's input and its projection onto A.
    let mut inputs = Vec::with_capacity(depth);
    let mut projected = Vec::with_capacity(depth);
    let mut h = x.clone();
    for (li, layer) in model.layers().iter().enumerate() {
        let lora = &adapter.layers[li];
        let u = matmul(&h, &lora.a.transpose()?)?;
        let mut z = matmul(&h, &layer.weight.transpose()?)?
            .add(&matmul(&u, &lora.b.transpose()?)?.scale(s))?;
        for row in z.data_mut().chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        if li + 1 < depth {
            z.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        }
        inputs.push(h);
        projected.push(u);
        h = z;
    }

    let count = (n * d) as f64;
    let mut loss = 0.0;
    let mut g = h.clone();
    for (gv, (o, t)) in g.data_mut().iter_mut().zip(h.data().iter().zip(y.data())) {
        let diff = o - t;
        loss += diff * diff;
        *gv = 2.0 * diff / count;
    }
    loss /= count;

    let mut grads = Vec::with_capacity(depth);
    let mut output = h;
    for li in (0..depth).rev() {
        if li + 1 < depth {
            // through tanh: dz = dh ⊙ (1 - h²)
            for (gv, hv) in g.data_mut().iter_mut().zip(output.data()) {
                *gv *= 1.0 - hv * hv;
            }
        }
        let lora = &adapter.layers[li];
        let input = &inputs[li];
        let gt = g.transpose()?;
        let grad_b = matmul(&gt, &projected[li])?.scale(s);
        let grad_u = matmul(&g, &lora.b)?.scale(s);
        let grad_a = matmul(&grad_u.transpose()?, input)?;
        let grad_in = matmul(&g, &model.layers()[li].weight)?.add(&matmul(&grad_u, &lora.a)?)?;
        grads.push(LayerGrad { a: grad_a, b: grad_b });
        output = inputs[li].clone();
        g = grad_in;
    }
    grads.reverse();
    Ok((loss, grads))
}

pub fn lora_loss(model: &BackboneModel, adapter: &LoraAdapter, x: &DenseTensor, y: &DenseTensor) -> Result<f64> {
    let out = model
        .forward_single(
            &DenseTensor::new(vec![1, x.shape()[0], x.shape()[1]], x.data().to_vec())?,
            &[adapter],
            crate::composer::StrategyKind::Selection,
        )?;
    let n = out.len() as f64;
    Ok(out.data().iter().zip(y.data()).map(|(o, t)| (o - t) * (o - t)).sum::<f64>() / n)
}

/// Full-batch gradient descent on MSE over every layer's `A` and `B`; `W0` stays
/// frozen. `B` starts at zero so the untrained adapter leaves the backbone unchanged.
pub fn train_lora(model: &BackboneModel, task: &LoraTask, config: &LoraTrainConfig) -> Result<LoraAdapter> {
    if config.rank == 0 {
        return Err(Error::Validation("rank must be >= 1".into()));
    }
    if !(config.alpha.is_finite() && config.alpha > 0.0) {
        return Err(Error::Validation("alpha must be > 0".into()));
    }
    let d = model.d();
    let (x, y) = stack_examples(&task.examples, d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adapter = LoraAdapter {
        id: task.id.clone(),
        task_tag: task.task_tag.clone(),
        rank: config.rank,
        alpha: config.alpha,
        layers: (0..model.depth())
            .map(|_| LoraLayer {
                a: DenseTensor::random_normal(&[config.rank, d], config.init_std, &mut rng),
                b: DenseTensor::zeros(&[d, config.rank]),
            })
            .collect(),
        representative_samples: task.representative_samples.clone(),
    };
    for _ in 0..config.steps {
        let (_, grads) = lora_loss_and_grad(model, &adapter, &x, &y)?;
        for (layer, g) in adapter.layers.iter_mut().zip(&grads) {
            for (w, gv) in layer.a.data_mut().iter_mut().zip(g.a.data()) {
                *w -= config.learning_rate * gv;
            }
            for (w, gv) in layer.b.data_mut().iter_mut().zip(g.b.data()) {
                *w -= config.learning_rate * gv;
            }
        }
    }
    Ok(adapter)
}
