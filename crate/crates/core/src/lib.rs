//! Multi-adapter LoRA serving: a copy-on-write adapter registry, an embedding
//! retriever that routes each request to its nearest adapters, Selection /
//! Mixture / Fusion composition, and batched low-rank kernels over a frozen
//! backbone.

pub mod composer;
pub mod engine;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod registry;
pub mod retriever;
pub mod tensor;

pub use composer::{build_batch_plan, BatchPlan, CompositionStrategy, StrategyKind};
pub use engine::{BackboneModel, InferenceRequest};
pub use error::{Error, Result};
pub use kernels::{KernelMode, MappingMatrix};
pub use registry::{LoraAdapter, LoraLayer, Registry, RegistrySnapshot};
pub use retriever::{Encoder, Retriever};
pub use tensor::DenseTensor;
