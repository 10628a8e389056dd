use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use loraserve::engine::{benchmark_throughput, BenchConfig, BenchPath, LoraTrainConfig};
use loraserve::harness::{
    bench_requests, build_backbone, evaluate, serve_loop, throughput_fixture, train_suite_retriever,
    train_task_loras, untrained_encoder, EvalConfig, EvalMode, PipelineConfig, Router, ServeConfig, SuiteConfig,
    SyntheticTaskSuite, ThroughputSetup,
};
use loraserve::retriever::{TrainingConfig, DEFAULT_INSTRUCTION};
use loraserve::{BackboneModel, CompositionStrategy, Encoder, Error, Registry, Retriever, StrategyKind};

#[derive(Parser, Debug)]
#[command(name = "loraserve", version, about = "Retrieval-routed LoRA composition server")]
struct Cli {
    /// Print the resolved configuration as JSON and exit.
    #[arg(long, global = true)]
    dump_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic mixed-task suite.
    Gen(GenArgs),
    /// Train one adapter per suite task and save the frozen backbone.
    TrainLoras(TrainLorasArgs),
    /// Contrastively train the retrieval encoder on a fraction of the tasks.
    TrainRetriever(TrainRetrieverArgs),
    /// Evaluate on the suite's mixed test stream.
    Eval(EvalArgs),
    /// Measure batched throughput.
    Bench(BenchArgs),
    /// Serve line-delimited JSON requests from stdin.
    Serve(ServeArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Strategy {
    Selection,
    Mixture,
    Fusion,
}

impl From<Strategy> for StrategyKind {
    fn from(s: Strategy) -> Self {
        match s {
            Strategy::Selection => StrategyKind::Selection,
            Strategy::Mixture => StrategyKind::Mixture,
            Strategy::Fusion => StrategyKind::Fusion,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Iid,
    Ood,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Routing {
    Retriever,
    Perfect,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ExecPath {
    Batched,
    Sequential,
}

#[derive(Args, Debug, Serialize)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    tasks: usize,
    #[arg(long, default_value_t = 20)]
    train_per_task: usize,
    #[arg(long, default_value_t = 50)]
    test_per_task: usize,
    #[arg(long, default_value_t = 16)]
    d: usize,
    #[arg(long, default_value_t = 4)]
    seq_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct TrainLorasArgs {
    #[arg(long)]
    suite: PathBuf,
    /// Output registry directory.
    #[arg(long)]
    registry: PathBuf,
    /// Output backbone JSON file.
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long, default_value_t = 6)]
    rank: usize,
    #[arg(long, default_value_t = 12.0)]
    alpha: f64,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0.3)]
    lr: f64,
    #[arg(long, default_value_t = 0.3)]
    init_std: f64,
    #[arg(long, default_value_t = 2)]
    backbone_depth: usize,
    #[arg(long, default_value_t = 0.05)]
    backbone_noise: f64,
    #[arg(long, default_value_t = 0.02)]
    backbone_bias_std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct TrainRetrieverArgs {
    #[arg(long)]
    suite: PathBuf,
    /// Output encoder directory.
    #[arg(long)]
    out: PathBuf,
    /// Save the encoder before any contrastive updates.
    #[arg(long)]
    untrained: bool,
    #[arg(long, default_value_t = 0.4)]
    fraction: f64,
    #[arg(long, default_value_t = 0.05)]
    gamma: f64,
    #[arg(long, default_value_t = 4)]
    negatives: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[arg(long, default_value_t = 256)]
    embed_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    suite: PathBuf,
    #[arg(long)]
    registry: PathBuf,
    #[arg(long)]
    backbone: PathBuf,
    /// Required unless `--routing perfect`.
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Strategy::Mixture)]
    strategy: Strategy,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, value_enum, default_value_t = Mode::Iid)]
    mode: Mode,
    #[arg(long, value_enum, default_value_t = Routing::Retriever)]
    routing: Routing,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    shuffle_seed: u64,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct BenchArgs {
    /// Suite supplying request texts and adapter samples.
    #[arg(long)]
    suite: PathBuf,
    /// Encoder directory; defaults to an untrained encoder over the suite.
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// Use saved adapters instead of random ones (needs `--backbone`).
    #[arg(long, requires = "backbone")]
    registry: Option<PathBuf>,
    #[arg(long, requires = "registry")]
    backbone: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Strategy::Mixture)]
    strategy: Strategy,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,8,32")]
    batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    seq_len: usize,
    /// Backbone width for random adapters.
    #[arg(long, default_value_t = 1024)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 64)]
    requests_per_trial: usize,
    #[arg(long, value_enum, default_value_t = ExecPath::Batched)]
    path: ExecPath,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct ServeArgs {
    #[arg(long)]
    registry: PathBuf,
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    encoder: PathBuf,
    #[arg(long, value_enum, default_value_t = Strategy::Mixture)]
    strategy: Strategy,
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Largest number of pending requests composed into one batch.
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

fn strategy(s: Strategy, k: usize) -> loraserve::Result<CompositionStrategy> {
    CompositionStrategy::new(s.into(), k)
}

fn retriever_from(dir: &Path) -> loraserve::Result<Retriever> {
    Ok(Retriever::with_instruction(Arc::new(Encoder::load(dir)?), DEFAULT_INSTRUCTION.to_string()))
}

fn dump(value: &impl Serialize) -> loraserve::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Validation(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn gen(args: GenArgs, dump_only: bool) -> loraserve::Result<()> {
    let config = SuiteConfig {
        num_tasks: args.tasks,
        train_per_task: args.train_per_task,
        test_per_task: args.test_per_task,
        d: args.d,
        seq_len: args.seq_len,
        seed: args.seed,
        ..SuiteConfig::default()
    };
    if dump_only {
        return dump(&config);
    }
    let suite = loraserve::harness::generate_suite_with(config)?;
    suite.save(&args.out)?;
    eprintln!("wrote {} tasks to {}", suite.tasks.len(), args.out.display());
    Ok(())
}

fn train_loras(args: TrainLorasArgs, dump_only: bool) -> loraserve::Result<()> {
    let pipeline = PipelineConfig {
        backbone_depth: args.backbone_depth,
        backbone_noise: args.backbone_noise,
        backbone_bias_std: args.backbone_bias_std,
        lora: LoraTrainConfig {
            rank: args.rank,
            alpha: args.alpha,
            steps: args.steps,
            learning_rate: args.lr,
            seed: args.seed,
            init_std: args.init_std,
        },
        seed: args.seed,
        ..PipelineConfig::default()
    };
    if dump_only {
        return dump(&pipeline);
    }
    let suite = SyntheticTaskSuite::load(&args.suite)?;
    let model = build_backbone(suite.d(), &pipeline)?;
    let registry = train_task_loras(&suite, &model, &pipeline.lora)?;
    registry.save(&args.registry)?;
    model.save(&args.backbone)?;
    eprintln!("trained {} adapters into {}", registry.len(), args.registry.display());
    Ok(())
}

fn train_retriever(args: TrainRetrieverArgs, dump_only: bool) -> loraserve::Result<()> {
    let pipeline = PipelineConfig {
        retriever: TrainingConfig {
            gamma: args.gamma,
            negatives_p: args.negatives,
            epochs: args.epochs,
            learning_rate: args.lr,
            seed: args.seed,
        },
        train_fraction: args.fraction,
        hidden: args.hidden,
        embed_dim: args.embed_dim,
        seed: args.seed,
        ..PipelineConfig::default()
    };
    if dump_only {
        return dump(&pipeline);
    }
    let suite = SyntheticTaskSuite::load(&args.suite)?;
    if args.untrained {
        untrained_encoder(&suite, &pipeline).save(&args.out)?;
        eprintln!("wrote untrained encoder to {}", args.out.display());
        return Ok(());
    }
    let r = train_suite_retriever(&suite, &pipeline)?;
    for (epoch, loss) in r.epoch_losses.iter().enumerate() {
        eprintln!("epoch {epoch} loss {loss:.6}");
    }
    r.trained.save(&args.out)?;
    eprintln!("trained on {} tasks: {}", r.tasks.len(), r.tasks.join(","));
    Ok(())
}

fn eval(args: EvalArgs, dump_only: bool) -> loraserve::Result<()> {
    let mode = match args.mode {
        Mode::Iid => EvalMode::Iid,
        Mode::Ood => EvalMode::Ood,
    };
    let config = EvalConfig {
        batch_size: args.batch_size,
        shuffle_seed: args.shuffle_seed,
        ..EvalConfig::new(args.strategy.into(), args.k, mode)
    };
    if dump_only {
        return dump(&args);
    }
    strategy(args.strategy, args.k)?;
    let suite = SyntheticTaskSuite::load(&args.suite)?;
    let registry = Registry::load(&args.registry)?;
    let model = BackboneModel::load(&args.backbone)?;
    let retriever = match (args.routing, &args.encoder) {
        (Routing::Perfect, _) => None,
        (Routing::Retriever, Some(dir)) => Some(retriever_from(dir)?),
        (Routing::Retriever, None) => {
            return Err(Error::Validation("--encoder is required unless --routing perfect".into()))
        }
    };
    let router = match &retriever {
        Some(retriever) => Router::Retriever { retriever, label: "retriever" },
        None => Router::Perfect,
    };
    let report = evaluate(&suite, &model, &registry.snapshot(), router, &config)?;
    let text = report.to_text();
    if let Some(path) = &args.out {
        std::fs::write(path, &text).map_err(|e| Error::io(path, e))?;
    }
    print!("{text}");
    Ok(())
}

fn bench(args: BenchArgs, dump_only: bool) -> loraserve::Result<()> {
    let config = BenchConfig {
        warmup: args.warmup,
        trials: args.trials,
        requests_per_trial: args.requests_per_trial,
        path: match args.path {
            ExecPath::Batched => BenchPath::Batched,
            ExecPath::Sequential => BenchPath::Sequential,
        },
    };
    if dump_only {
        return dump(&args);
    }
    let strat = strategy(args.strategy, args.k)?;
    let suite = SyntheticTaskSuite::load(&args.suite)?;
    let retriever = match &args.encoder {
        Some(dir) => retriever_from(dir)?,
        None => {
            eprintln!("note: routing with an untrained encoder");
            Retriever::new(untrained_encoder(&suite, &PipelineConfig::default()))
        }
    };
    let (model, registry, requests) = match (&args.registry, &args.backbone) {
        (Some(reg), Some(bb)) => {
            let model = BackboneModel::load(bb)?;
            let requests = bench_requests(&suite, model.d(), args.seq_len, args.seed)?;
            (model, Registry::load(reg)?, requests)
        }
        _ => {
            let setup = ThroughputSetup {
                d: args.d,
                depth: args.depth,
                seq_len: args.seq_len,
                seed: args.seed,
                ..ThroughputSetup::default()
            };
            let fx = throughput_fixture(&suite, &setup)?;
            (fx.model, fx.registry, fx.requests)
        }
    };
    let rows = benchmark_throughput(&model, &registry.snapshot(), &retriever, &requests, &args.batch_sizes, strat, &config)?;
    println!("batch_size\ttokens_per_sec");
    for row in rows {
        println!("{}\t{:.1}", row.batch_size, row.tokens_per_sec);
    }
    Ok(())
}

fn serve(args: ServeArgs, dump_only: bool) -> loraserve::Result<()> {
    if dump_only {
        return dump(&args);
    }
    let config = ServeConfig {
        strategy: strategy(args.strategy, args.k)?,
        max_batch: args.batch_size,
    };
    let registry = Registry::load(&args.registry)?;
    let model = BackboneModel::load(&args.backbone)?;
    let retriever = retriever_from(&args.encoder)?;
    let stdin = io::BufReader::new(io::stdin());
    let stdout = BufWriter::new(io::stdout().lock());
    let stats = serve_loop(stdin, stdout, &model, &registry, &retriever, config)?;
    eprintln!("served {} responses ({} errors) in {} batches", stats.responses, stats.errors, stats.batches);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let d = cli.dump_config;
    let result = match cli.command {
        Command::Gen(a) => gen(a, d),
        Command::TrainLoras(a) => train_loras(a, d),
        Command::TrainRetriever(a) => train_retriever(a, d),
        Command::Eval(a) => eval(a, d),
        Command::Bench(a) => bench(a, d),
        Command::Serve(a) => serve(a, d),
    };
    let _ = io::stdout().flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
