//! Synthetic mixed-task suite, evaluation pipeline serve loop and throughput fixture.

mod pipeline;
mod report;
mod serve_loop;
mod suite;
mod throughput;

pub use pipeline::{
    build_backbone, evaluate, prepare, retriever_task_ids, run_pipeline, train_suite_retriever, train_task_loras,
    untrained_encoder, EvalConfig, EvalMode, PipelineConfig, Prepared, Router, RetrieverArtifacts,
};
pub use report::{EvalReport, TaskMetrics};
pub use serve_loop::{parse_request_line, serve_loop, ServeConfig, ServeStats, WireResponse};
pub use suite::{generate_suite, generate_suite_with, MixedEntry, SuiteConfig, SuiteSample, SyntheticTask, SyntheticTaskSuite};
pub use throughput::{bench_requests, throughput_fixture, ThroughputFixture, ThroughputSetup};
