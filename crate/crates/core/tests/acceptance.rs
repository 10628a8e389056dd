//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{
    encoder_gradient_error, lora_gradient_error, max_abs_diff, max_rel_err, random_pool,
    registry_round_trip_violations, snapshot_isolation_violations, KernelCase,
};
use loraserve::engine::{benchmark_throughput, BenchConfig};
use loraserve::harness::{
    generate_suite_with, prepare, throughput_fixture, untrained_encoder, EvalConfig, EvalMode, EvalReport,
    PipelineConfig, Prepared, SuiteConfig, SyntheticTaskSuite, ThroughputSetup,
};
use loraserve::kernels::{batched_lora, sequential_oracle, KernelMode, LayerFactors};
use loraserve::retriever::{contrastive_nll, contrastive_nll_from_scores, EmbeddingVector};
use loraserve::{build_batch_plan, BackboneModel, CompositionStrategy, DenseTensor, Registry, Retriever, StrategyKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KERNEL_REL_TOL: f64 = 1e-10;
const KERNEL_BUDGET: Duration = Duration::from_secs(10);
const COLLAPSE_TOL: f64 = 1e-12;
const IDENTITY_TOL: f64 = 1e-12;
const GRAD_TOL: f64 = 1e-4;
const GRAD_INSTANCES: u64 = 24;
const CLOSED_FORM_TOL: f64 = 1e-12;
const SATURATED_MAX: f64 = 1e-8;
const TOP1_MIN: f64 = 0.90;
const TOP3_MIN: f64 = 0.98;
const TOP1_MARGIN: f64 = 0.20;
const RETRIEVAL_BUDGET: Duration = Duration::from_secs(300);
const ROW_SUM_TOL: f64 = 1e-12;
const THROUGHPUT_RATIO: f64 = 5.0;
const THROUGHPUT_BUDGET: Duration = Duration::from_secs(120);
const SEEDS: [u64; 3] = [0, 1, 2];
const SEEDS_REQUIRED: usize = 2;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn kernel_oracle() -> Verdict {
    let start = Instant::now();
    let mut worst_lib = 0.0f64;
    let mut worst_ref = 0.0f64;
    for seed in 0..100 {
        let case = KernelCase::random(1000 + seed);
        let x = case.x_tensor();
        let (a, b) = (case.a_tensor(), case.b_tensor());
        let block = case.r * case.d;
        let factors: Vec<(DenseTensor, DenseTensor)> = (0..case.p)
            .map(|j| {
                (
                    DenseTensor::new(vec![case.r, case.d], a.data()[j * block..(j + 1) * block].to_vec()).unwrap(),
                    DenseTensor::new(vec![case.d, case.r], b.data()[j * block..(j + 1) * block].to_vec()).unwrap(),
                )
            })
            .collect();
        let per_sample: Vec<Vec<LayerFactors<'_>>> = case
            .routes
            .iter()
            .map(|cols| cols.iter().map(|&j| LayerFactors { a: &factors[j].0, b: &factors[j].1, scale: case.scale[j] }).collect())
            .collect();
        for mode in [KernelMode::Mixture, KernelMode::Fusion] {
            let got = batched_lora(mode, &x, &a, &b, &case.mapping(), &case.scale).unwrap();
            let lib = sequential_oracle(&x, &per_sample, mode).unwrap();
            worst_lib = worst_lib.max(max_rel_err(got.data(), lib.data()));
            worst_ref = worst_ref.max(max_rel_err(got.data(), &case.reference(mode)));
        }
    }
    let elapsed = start.elapsed();
    verdict(
        worst_lib <= KERNEL_REL_TOL && worst_ref <= KERNEL_REL_TOL && elapsed <= KERNEL_BUDGET,
        format!("100 configs, max rel err {worst_lib:.2e} (sequential oracle) / {worst_ref:.2e} (loop reference), {elapsed:.2?}"),
    )
}

fn strategy_collapse() -> Verdict {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let d = rng.random_range(2..=12);
        let depth = rng.random_range(1..=3);
        let model = BackboneModel::near_identity(d, depth, 0.3, 0.1, &mut rng).unwrap();
        let registry = Registry::new(d, depth);
        let ranks: Vec<usize> = (0..rng.random_range(1..=8)).map(|_| rng.random_range(1..=4)).collect();
        for a in random_pool(d, depth, &ranks, seed).into_values() {
            registry.register(a).unwrap();
        }
        let snap = registry.snapshot();
        let ids = snap.ids();
        let b = rng.random_range(1..=8);
        let retrievals: Vec<Vec<String>> = (0..b).map(|_| vec![ids[rng.random_range(0..ids.len())].clone()]).collect();
        let x = DenseTensor::random_normal(&[b, rng.random_range(1..=6), d], 1.0, &mut rng);
        let outs: Vec<DenseTensor> = [StrategyKind::Selection, StrategyKind::Mixture, StrategyKind::Fusion]
            .into_iter()
            .map(|kind| {
                let plan = build_batch_plan(&retrievals, CompositionStrategy::new(kind, 1).unwrap(), &snap).unwrap();
                model.forward_with_plan(&x, &plan, &snap).unwrap()
            })
            .collect();
        for i in 0..3 {
            for j in i + 1..3 {
                worst = worst.max(max_abs_diff(outs[i].data(), outs[j].data()));
            }
        }
    }
    verdict(worst <= COLLAPSE_TOL, format!("50 plans, max pairwise diff {worst:.2e}"))
}

fn lora_identity() -> Verdict {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let d = rng.random_range(2..=16);
        let depth = rng.random_range(1..=5);
        let model = BackboneModel::near_identity(d, depth, 0.4, 0.2, &mut rng).unwrap();
        let registry = Registry::new(d, depth);
        for mut a in random_pool(d, depth, &[1, 3, 2, 4, 2], seed).into_values() {
            for layer in &mut a.layers {
                layer.b = DenseTensor::zeros(layer.b.shape());
            }
            registry.register(a).unwrap();
        }
        let snap = registry.snapshot();
        let ids = snap.ids();
        let b = rng.random_range(1..=8);
        let (kind, k) = [(StrategyKind::Selection, 1), (StrategyKind::Mixture, 3), (StrategyKind::Fusion, 3)][seed as usize % 3];
        let retrievals: Vec<Vec<String>> = (0..b)
            .map(|_| {
                let set: BTreeSet<usize> = (0..k).map(|_| rng.random_range(0..ids.len())).collect();
                set.into_iter().map(|i| ids[i].clone()).collect()
            })
            .collect();
        let plan = build_batch_plan(&retrievals, CompositionStrategy::new(kind, k).unwrap(), &snap).unwrap();
        let x = DenseTensor::random_normal(&[b, rng.random_range(1..=6), d], 1.0, &mut rng);
        let with = model.forward_with_plan(&x, &plan, &snap).unwrap();
        worst = worst.max(max_abs_diff(with.data(), model.forward_base(&x).unwrap().data()));
    }
    verdict(worst <= IDENTITY_TOL, format!("50 zero-B plans, max diff from base {worst:.2e}"))
}

fn gradient_checks() -> Verdict {
    let enc = (0..GRAD_INSTANCES).map(encoder_gradient_error).fold(0.0f64, f64::max);
    let lora = (0..GRAD_INSTANCES).map(lora_gradient_error).fold(0.0f64, f64::max);
    verdict(
        enc <= GRAD_TOL && lora <= GRAD_TOL,
        format!("{GRAD_INSTANCES} instances each, worst rel err contrastive {enc:.2e}, lora {lora:.2e}"),
    )
}

fn contrastive_closed_forms() -> Verdict {
    let mut worst = 0.0f64;
    for p in [1usize, 4, 16] {
        let want = (1.0 + p as f64).ln();
        for s in [-0.3, 0.0, 0.7] {
            worst = worst.max((contrastive_nll_from_scores(s, &vec![s; p], 0.05).unwrap() - want).abs());
        }
        let v = EmbeddingVector::normalized(vec![0.6, -0.8, 0.0]).unwrap();
        let negs = vec![v.clone(); p];
        worst = worst.max((contrastive_nll(&v, &v, &negs, 0.05).unwrap() - want).abs());
    }
    let e0 = EmbeddingVector::normalized(vec![1.0, 0.0]).unwrap();
    let opposite = EmbeddingVector::normalized(vec![-1.0, 0.0]).unwrap();
    let saturated = [1usize, 4, 16]
        .iter()
        .map(|&p| contrastive_nll(&e0, &e0, &vec![opposite.clone(); p], 0.05).unwrap())
        .fold(0.0f64, f64::max);
    verdict(
        worst <= CLOSED_FORM_TOL && saturated < SATURATED_MAX,
        format!("equal-similarity max |L - ln(1+p)| {worst:.2e}, saturated max {saturated:.2e}"),
    )
}

struct SeedRun {
    seed: u64,
    prep: Prepared,
    suite: SyntheticTaskSuite,
    setup: Duration,
}

fn seed_run(seed: u64) -> SeedRun {
    let start = Instant::now();
    let suite = generate_suite_with(SuiteConfig { seed, ..SuiteConfig::default() }).unwrap();
    let prep = prepare(&suite, &PipelineConfig { seed, ..PipelineConfig::default() }).unwrap();
    SeedRun { seed, prep, suite, setup: start.elapsed() }
}

impl SeedRun {
    fn eval(&self, routing: &str, kind: StrategyKind, k: usize, mode: EvalMode, reports: &mut Vec<EvalReport>) -> EvalReport {
        let r = self.prep.evaluate(&self.suite, routing, &EvalConfig::new(kind, k, mode)).unwrap();
        reports.push(r.clone());
        r
    }
}

/// Top-1 and top-3 hit rates recomputed directly from the retriever.
fn direct_hit_rates(run: &SeedRun, retriever: &Retriever) -> (f64, f64) {
    let snap = run.prep.registry.snapshot();
    let stream = run.suite.mixed_test_set(0);
    let (mut top1, mut top3) = (0usize, 0usize);
    for e in &stream {
        let got = retriever.retrieve_top_k(&e.sample.text, &snap, 3, None).unwrap();
        top1 += usize::from(got[0].id == e.task.task_id);
        top3 += usize::from(got.iter().any(|r| r.id == e.task.task_id));
    }
    (top1 as f64 / stream.len() as f64, top3 as f64 / stream.len() as f64)
}

fn retrieval_accuracy(run: &SeedRun, reports: &mut Vec<EvalReport>) -> Verdict {
    let start = Instant::now();
    let trained = run.eval("trained", StrategyKind::Mixture, 3, EvalMode::Iid, reports);
    let untrained = run.eval("untrained", StrategyKind::Mixture, 3, EvalMode::Iid, reports);
    let (d1, d3) = direct_hit_rates(run, &run.prep.trained);
    let elapsed = run.setup + start.elapsed();
    let consistent = d1 == trained.retrieval_top1 && d3 == trained.retrieval_topk;
    verdict(
        consistent
            && trained.retrieval_top1 >= TOP1_MIN
            && trained.retrieval_topk >= TOP3_MIN
            && trained.retrieval_top1 - untrained.retrieval_top1 >= TOP1_MARGIN
            && elapsed <= RETRIEVAL_BUDGET,
        format!(
            "seed {}, {} tasks trained of {}: top-1 {:.3}, top-3 {:.3}, untrained top-1 {:.3} (margin {:.3}), {:.1?}",
            run.seed,
            run.prep.retriever_tasks.len(),
            run.suite.tasks.len(),
            trained.retrieval_top1,
            trained.retrieval_topk,
            untrained.retrieval_top1,
            trained.retrieval_top1 - untrained.retrieval_top1,
            elapsed
        ),
    )
}

fn mixed_task_ordering(runs: &[SeedRun], reports: &mut Vec<EvalReport>) -> Verdict {
    let mut held = 0;
    let mut parts = Vec::new();
    for run in runs {
        let perfect = run.eval("perfect", StrategyKind::Selection, 1, EvalMode::Iid, reports).mse_mean;
        let selection = run.eval("trained", StrategyKind::Selection, 1, EvalMode::Iid, reports).mse_mean;
        let ood_sel = run.eval("trained", StrategyKind::Selection, 1, EvalMode::Ood, reports).mse_mean;
        let ood_mix = run.eval("trained", StrategyKind::Mixture, 3, EvalMode::Ood, reports).mse_mean;
        let ok = perfect <= selection && ood_mix <= ood_sel;
        held += usize::from(ok);
        parts.push(format!(
            "seed {}: perfect {perfect:.4} <= sel {selection:.4}, ood mix {ood_mix:.4} <= ood sel {ood_sel:.4} [{}]",
            run.seed,
            if ok { "ok" } else { "no" }
        ));
    }
    verdict(held >= SEEDS_REQUIRED, format!("{held}/{} seeds; {}", runs.len(), parts.join("; ")))
}

fn k_sweep(runs: &[SeedRun], reports: &mut Vec<EvalReport>) -> Verdict {
    let mut held = 0;
    let mut parts = Vec::new();
    for run in runs {
        let mix1 = run.eval("trained", StrategyKind::Mixture, 1, EvalMode::Ood, reports).mse_mean;
        let mix3 = run.eval("trained", StrategyKind::Mixture, 3, EvalMode::Ood, reports).mse_mean;
        let fus1 = run.eval("trained", StrategyKind::Fusion, 1, EvalMode::Ood, reports).mse_mean;
        let fus8 = run.eval("trained", StrategyKind::Fusion, 8, EvalMode::Ood, reports).mse_mean;
        let ok = mix3 <= mix1 && fus8 >= fus1;
        held += usize::from(ok);
        parts.push(format!(
            "seed {}: mix k3 {mix3:.4} <= k1 {mix1:.4}, fus k8 {fus8:.4} >= k1 {fus1:.4} [{}]",
            run.seed,
            if ok { "ok" } else { "no" }
        ));
    }
    verdict(held >= SEEDS_REQUIRED, format!("{held}/{} seeds; {}", runs.len(), parts.join("; ")))
}

fn dedup_bound(reports: &[EvalReport]) -> Verdict {
    let from_reports: usize = reports.iter().map(|r| r.dedup_violations).sum();
    let batches: usize = reports.iter().map(|r| r.batches).sum();
    // fresh random plans, checked here rather than by the evaluator
    let mut random_violations = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(4000);
    for _ in 0..500 {
        let pool = rng.random_range(1..=24);
        let registry = Registry::new(2, 1);
        for a in random_pool(2, 1, &vec![1; pool], 0).into_values() {
            registry.register(a).unwrap();
        }
        let snap = registry.snapshot();
        let ids = snap.ids();
        let k = rng.random_range(1..=4);
        let b = rng.random_range(1..=32);
        let retrievals: Vec<Vec<String>> = (0..b)
            .map(|_| {
                let set: BTreeSet<usize> = (0..k).map(|_| rng.random_range(0..pool)).collect();
                set.into_iter().map(|i| ids[i].clone()).collect()
            })
            .collect();
        let strategy = if rng.random_bool(0.5) { CompositionStrategy::mixture(k) } else { CompositionStrategy::fusion(k) };
        let plan = build_batch_plan(&retrievals, strategy.unwrap(), &snap).unwrap();
        let rows_ok = (0..b).all(|i| (plan.mapping.row(i).iter().sum::<f64>() - 1.0).abs() <= ROW_SUM_TOL);
        random_violations += usize::from(plan.p() > (b * k).min(pool) || !rows_ok);
    }
    verdict(
        from_reports == 0 && random_violations == 0,
        format!("{batches} evaluation batches over {} reports: {from_reports} violations; 500 random plans: {random_violations} violations", reports.len()),
    )
}

fn throughput() -> Verdict {
    let start = Instant::now();
    let suite = generate_suite_with(SuiteConfig { test_per_task: 10, ..SuiteConfig::default() }).unwrap();
    let fx = throughput_fixture(&suite, &ThroughputSetup::default()).unwrap();
    let retriever = Retriever::new(untrained_encoder(&suite, &PipelineConfig::default()));
    let snap = fx.registry.snapshot();
    let config = BenchConfig { requests_per_trial: 64, ..BenchConfig::default() };
    let run = |strategy: CompositionStrategy, sizes: &[usize], config: &BenchConfig| {
        benchmark_throughput(&fx.model, &snap, &retriever, &fx.requests, sizes, strategy, config).unwrap()
    };
    let mix = run(CompositionStrategy::mixture(3).unwrap(), &[1, 32], &config);
    let fus = run(CompositionStrategy::fusion(3).unwrap(), &[32], &config);
    let ratio = mix[1].tokens_per_sec / mix[0].tokens_per_sec;
    let elapsed = start.elapsed();
    verdict(
        ratio >= THROUGHPUT_RATIO && fus[0].tokens_per_sec >= mix[1].tokens_per_sec && elapsed <= THROUGHPUT_BUDGET,
        format!(
            "d={} l={} median of {} trials: mixture b1 {:.0} tok/s, b32 {:.0} tok/s ({ratio:.1}x); fusion b32 {:.0} tok/s; {elapsed:.1?}",
            fx.model.d(),
            fx.requests[0].features.shape()[0],
            config.trials,
            mix[0].tokens_per_sec,
            mix[1].tokens_per_sec,
            fus[0].tokens_per_sec
        ),
    )
}

fn registry_suites() -> Verdict {
    let round_trip: usize = (0..20).map(registry_round_trip_violations).sum();
    let isolation: usize = (0..5).map(snapshot_isolation_violations).sum();
    verdict(
        round_trip == 0 && isolation == 0,
        format!("round-trip violations {round_trip} (20 pools), isolation violations {isolation} (5 runs)"),
    )
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        }
    }
}

fn main() {
    let total = Instant::now();
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut report = |n: u32, name: &'static str, v: Verdict| {
        println!("{} criterion {n:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((n, name, v));
    };

    report(1, "kernel-oracle equivalence", guarded(kernel_oracle));
    report(2, "strategy collapse at k=1", guarded(strategy_collapse));
    report(3, "zero-B identity", guarded(lora_identity));
    report(4, "gradient checks", guarded(gradient_checks));
    report(5, "contrastive closed forms", guarded(contrastive_closed_forms));

    let runs: Vec<SeedRun> = catch_unwind(|| SEEDS.iter().map(|&s| seed_run(s)).collect()).unwrap_or_default();
    let mut reports = Vec::new();
    if runs.len() == SEEDS.len() {
        report(6, "retrieval accuracy", guarded(|| retrieval_accuracy(&runs[0], &mut reports)));
        report(7, "mixed-task ordering", guarded(|| mixed_task_ordering(&runs, &mut reports)));
        report(8, "dedup bound", guarded(|| dedup_bound(&reports)));
    } else {
        for (n, name) in [(6, "retrieval accuracy"), (7, "mixed-task ordering"), (8, "dedup bound")] {
            report(n, name, verdict(false, "pipeline preparation failed"));
        }
    }
    report(9, "throughput trends", guarded(throughput));
    if runs.len() == SEEDS.len() {
        report(10, "k-sweep trend", guarded(|| k_sweep(&runs, &mut reports)));
    } else {
        report(10, "k-sweep trend", verdict(false, "pipeline preparation failed"));
    }
    report(11, "registry round-trip and snapshot isolation", guarded(registry_suites));

    let failed: Vec<u32> = results.iter().filter(|(_, _, v)| !v.pass).map(|(n, _, _)| *n).collect();
    println!(
        "acceptance: {}/{} passed in {:.1?}",
        results.len() - failed.len(),
        results.len(),
        total.elapsed()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
