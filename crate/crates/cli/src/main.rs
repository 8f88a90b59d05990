//! `vcnn`: inference, granularity tuning and benchmarking from the shell.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use vcnn::bench::run_bench;
use vcnn::modelio::{load_image_for, load_model, save_model, ImageError, ModelError};
use vcnn::pool::default_threads;
use vcnn::synth::{random_input, random_model};
use vcnn::tuner::{compare_plans, tune_network_with, TuneError, TuneTable, DEFAULT_REPEATS};
use vcnn::{forward, ArithMode, GranularityPlan, Model, NetworkDef, Tensor3, WorkerPool};

const EXIT_IO: u8 = 3;
const EXIT_VALIDATION: u8 = 4;

#[derive(Parser)]
#[command(name = "vcnn", version, about = "Vectorized CNN inference on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Classify an image and print the top classes.
    Infer(InferArgs),
    /// Measure every valid granularity per convolution and write a plan.
    Tune(TuneArgs),
    /// Time the sequential, strict and relaxed executors node by node.
    Bench(BenchArgs),
    /// Write a model with seeded random weights.
    SynthModel(SynthArgs),
}

#[derive(Args)]
struct Common {
    /// Model file.
    #[arg(long, short)]
    model: PathBuf,
    /// Worker threads (defaults to hardware parallelism).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    /// PPM (P6) image sized for the model input.
    #[arg(long, short)]
    image: PathBuf,
    /// Granularity plan written by `tune`.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Flush denormals and allow fused multiply-add.
    #[arg(long)]
    relaxed: bool,
    /// Number of classes to print.
    #[arg(long, default_value_t = 5)]
    top: usize,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    common: Common,
    /// Image whose activations drive the timing (random input if omitted).
    #[arg(long, short)]
    image: Option<PathBuf>,
    /// Timed runs per granularity, at least 3.
    #[arg(long, default_value_t = DEFAULT_REPEATS)]
    repeats: usize,
    #[arg(long)]
    relaxed: bool,
    /// Destination plan file.
    #[arg(long, short)]
    out: PathBuf,
    /// Also time the whole network under the optimal and pessimal plans.
    #[arg(long)]
    compare: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, short)]
    image: Option<PathBuf>,
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_REPEATS)]
    repeats: usize,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Write the report here instead of standard output.
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    /// Topology file (defaults to the bundled SqueezeNet v1.0).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Io(String),
    Validation(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => EXIT_IO,
            Failure::Validation(_) => EXIT_VALIDATION,
        }
    }
}

impl Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Io(m) | Failure::Validation(m) => f.write_str(m),
        }
    }
}

fn at(path: &Path, e: impl Display) -> String {
    format!("{}: {e}", path.display())
}

fn model_failure(path: &Path, e: ModelError) -> Failure {
    match e {
        ModelError::Io(_) => Failure::Io(at(path, e)),
        e => Failure::Validation(at(path, e)),
    }
}

fn image_failure(path: &Path, e: ImageError) -> Failure {
    match e {
        ImageError::Io(_) => Failure::Io(at(path, e)),
        e => Failure::Validation(at(path, e)),
    }
}

fn tune_failure(path: &Path, e: TuneError) -> Failure {
    match e {
        TuneError::Io(_) => Failure::Io(at(path, e)),
        e => Failure::Validation(at(path, e)),
    }
}

fn engine(e: vcnn::Error) -> Failure {
    Failure::Validation(e.to_string())
}

fn write_io(path: &Path, e: impl Display) -> Failure {
    Failure::Io(at(path, e))
}

fn pool(common: &Common) -> Result<WorkerPool, Failure> {
    WorkerPool::new(common.threads.unwrap_or_else(default_threads)).map_err(engine)
}

fn model(common: &Common) -> Result<Model, Failure> {
    load_model(&common.model).map_err(|e| model_failure(&common.model, e))
}

fn input(model: &Model, image: Option<&Path>, seed: u64) -> Result<Tensor3, Failure> {
    match image {
        Some(p) => load_image_for(p, model.def()).map_err(|e| image_failure(p, e)),
        None => Ok(random_input(model.def(), seed)),
    }
}

fn plan(model: &Model, path: Option<&Path>) -> Result<GranularityPlan, Failure> {
    let Some(path) = path else {
        return Ok(GranularityPlan::new());
    };
    let table = TuneTable::load(path).map_err(|e| tune_failure(path, e))?;
    table
        .plan
        .validate(model.def())
        .map_err(|e| Failure::Validation(at(path, e)))?;
    Ok(table.plan)
}

fn mode(relaxed: bool) -> ArithMode {
    if relaxed {
        ArithMode::Relaxed
    } else {
        ArithMode::Strict
    }
}

fn infer(a: InferArgs) -> Result<(), Failure> {
    let model = model(&a.common)?;
    let plan = plan(&model, a.plan.as_deref())?;
    let image = input(&model, Some(&a.image), 0)?;
    let pool = pool(&a.common)?;
    let out = forward(&pool, &model, &image, &plan, mode(a.relaxed)).map_err(engine)?;
    println!("rank\tclass\tprobability");
    for (rank, (class, p)) in out.top_k(a.top).into_iter().enumerate() {
        println!("{}\t{class}\t{p:.6}", rank + 1);
    }
    eprintln!("forward: {:.3} ms ({})", out.total.as_secs_f64() * 1e3, mode(a.relaxed).name());
    Ok(())
}

fn tune(a: TuneArgs) -> Result<(), Failure> {
    let model = model(&a.common)?;
    let x = input(&model, a.image.as_deref(), a.seed)?;
    let pool = pool(&a.common)?;
    let table = tune_network_with(&pool, &model, &x, a.repeats, mode(a.relaxed), |row| {
        let best = row.g_opt().map(|g| g.get()).unwrap_or(1);
        eprintln!("{:<24} {} candidates, g_opt={best}", row.node, row.times.len());
    })
    .map_err(|e| tune_failure(&a.common.model, e))?;
    table.save(&a.out).map_err(|e| tune_failure(&a.out, e))?;
    println!("wrote plan for {} convolutions to {}", table.rows.len(), a.out.display());
    if a.compare {
        let cmp = compare_plans(&pool, &model, &x, &table, a.repeats, mode(a.relaxed))
            .map_err(|e| tune_failure(&a.common.model, e))?;
        println!(
            "optimal plan {:.3} ms, pessimal plan {:.3} ms, ratio {:.2}X",
            cmp.optimal_ms,
            cmp.pessimal_ms,
            cmp.ratio()
        );
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<(), Failure> {
    let model = model(&a.common)?;
    let plan = plan(&model, a.plan.as_deref())?;
    let x = input(&model, a.image.as_deref(), a.seed)?;
    let pool = pool(&a.common)?;
    let report = run_bench(&pool, &model, &x, &plan, a.repeats).map_err(engine)?;
    let text = match a.format {
        Format::Table => report.to_table(),
        Format::Csv => report.to_csv(),
    };
    match &a.out {
        Some(p) => std::fs::write(p, text).map_err(|e| write_io(p, e))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<(), Failure> {
    let def = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Io(at(p, e)))?;
            NetworkDef::from_toml(&text).map_err(|e| Failure::Validation(at(p, e)))?
        }
        None => NetworkDef::squeezenet_v1_0(),
    };
    let model = random_model(def, a.seed).map_err(engine)?;
    save_model(&model, &a.out).map_err(|e| model_failure(&a.out, e))?;
    println!("wrote {} nodes to {}", model.def().nodes.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Infer(a) => infer(a),
        Command::Tune(a) => tune(a),
        Command::Bench(a) => bench(a),
        Command::SynthModel(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
