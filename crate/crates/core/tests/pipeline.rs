use std::collections::HashSet;

use loraserve::engine::LoraTrainConfig;
use loraserve::harness::{
    evaluate, generate_suite_with, prepare, run_pipeline, EvalConfig, EvalMode, EvalReport, PipelineConfig, Router,
    SuiteConfig, SyntheticTaskSuite,
};
use loraserve::retriever::TrainingConfig;
use loraserve::StrategyKind;

fn small() -> (SyntheticTaskSuite, PipelineConfig) {
    let suite = generate_suite_with(SuiteConfig {
        num_tasks: 6,
        train_per_task: 8,
        test_per_task: 6,
        d: 6,
        seq_len: 2,
        seed: 11,
        ..SuiteConfig::default()
    })
    .unwrap();
    let config = PipelineConfig {
        lora: LoraTrainConfig { steps: 40, ..LoraTrainConfig::default() },
        retriever: TrainingConfig { epochs: 3, ..TrainingConfig::default() },
        hidden: 16,
        embed_dim: 16,
        seed: 11,
        ..PipelineConfig::default()
    };
    (suite, config)
}

#[test]
fn fixed_seed_reports_are_byte_identical() {
    let (suite, config) = small();
    for (kind, k, mode) in [(StrategyKind::Mixture, 3, EvalMode::Ood), (StrategyKind::Fusion, 2, EvalMode::Iid)] {
        let eval = EvalConfig { batch_size: 5, ..EvalConfig::new(kind, k, mode) };
        let a = run_pipeline(&suite, &config, &eval).unwrap().to_text();
        let b = run_pipeline(&suite, &config, &eval).unwrap().to_text();
        assert_eq!(a, b);
        assert_eq!(EvalReport::from_text(&a).unwrap().to_text(), a);
    }
}

#[test]
fn suite_file_round_trip_gives_same_report() {
    let (suite, config) = small();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("suite.json");
    suite.save(&path).unwrap();
    let loaded = SyntheticTaskSuite::load(&path).unwrap();
    let eval = EvalConfig::new(StrategyKind::Mixture, 2, EvalMode::Iid);
    assert_eq!(
        run_pipeline(&suite, &config, &eval).unwrap().to_text(),
        run_pipeline(&loaded, &config, &eval).unwrap().to_text()
    );
}

#[test]
fn ood_reports_never_route_to_own_task() {
    let (suite, config) = small();
    let prep = prepare(&suite, &config).unwrap();
    for (kind, k) in [(StrategyKind::Selection, 1), (StrategyKind::Mixture, 3), (StrategyKind::Fusion, 6)] {
        for routing in ["trained", "untrained"] {
            let report = prep.evaluate(&suite, routing, &EvalConfig::new(kind, k, EvalMode::Ood)).unwrap();
            assert_eq!(report.ood_violations, 0);
            assert_eq!(report.dedup_violations, 0);
            assert_eq!(report.retrieval_top1, 0.0);
        }
    }
    // independent replay of the masked retrieval for every test sample
    let snap = prep.registry.snapshot();
    for entry in suite.mixed_test_set(0) {
        let mask: HashSet<String> = [entry.task.task_id.clone()].into();
        let got = prep.trained.retrieve_top_k(&entry.sample.text, &snap, 5, Some(&mask)).unwrap();
        assert!(got.iter().all(|r| r.id != entry.task.task_id));
        assert_eq!(got.len(), 5);
    }
}

#[test]
fn perfect_routing_rejects_ood_and_reports_full_recall() {
    let (suite, config) = small();
    let prep = prepare(&suite, &config).unwrap();
    let eval = EvalConfig::new(StrategyKind::Selection, 1, EvalMode::Ood);
    assert!(evaluate(&suite, &prep.model, &prep.registry.snapshot(), Router::Perfect, &eval).unwrap_err().is_validation());
    let report = prep.evaluate(&suite, "perfect", &EvalConfig::new(StrategyKind::Selection, 1, EvalMode::Iid)).unwrap();
    assert_eq!(report.retrieval_top1, 1.0);
    assert_eq!(report.samples, 36);
    assert_eq!(report.tasks.len(), 6);
}
