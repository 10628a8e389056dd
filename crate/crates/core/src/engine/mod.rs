//! Frozen backbone, serving pipeline, per-task trainer and throughput bench.

mod backbone;
mod bench;
mod serve;
mod train;

pub use backbone::{AffineLayer, BackboneModel};
pub use bench::{benchmark_throughput, BenchConfig, BenchPath, ThroughputRow};
pub use serve::{execute_batch, serve_batch, serve_batch_on, serve_single, BatchOutput, InferenceRequest, RequestOutput};
pub use train::{lora_loss, lora_loss_and_grad, stack_examples, train_lora, LayerGrad, LoraTask, LoraTrainConfig};
