use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dod_core::harness::{
    load_sequence, run_pipeline, save_sequence, sweep, write_report, write_sweep, HarnessError, ModelSize,
    OperatorKind, RunConfig, SweepAxis,
};
use dod_core::model::{DodModel, ModelConfig};
use dod_core::nn::weights::write_weights;
use dod_core::scene::synthetic_suite;
use dod_core::training::{
    model_gradient_check, module_gradient_check, toy_dataset, train_toy, CheckedModule, TrainConfig,
};

#[derive(Parser)]
#[command(name = "dod", version, about = "Temporal depth densification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a suite scene into a sequence directory.
    Simulate(SimulateArgs),
    /// Densify every frame of a sequence and write the report.
    Run(RunArgs),
    /// Repeat `run` over the values of one parameter.
    Sweep(SweepArgs),
    /// Run, fuse the predictions into a TSDF and write `mesh.ply`.
    Mesh(MeshArgs),
    /// Train the toy learned model on suite renders.
    TrainToy(TrainArgs),
    /// Finite-difference check of the learned modules.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Suite scene name; `--list` prints them.
    #[arg(long, required_unless_present = "list")]
    scene: Option<String>,
    #[arg(long, required_unless_present = "list")]
    out: Option<PathBuf>,
    #[arg(long, required_unless_present = "list")]
    seed: Option<u64>,
    /// Fraction of frames carrying depth.
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Sparse points per depth frame; omitted means every pixel.
    #[arg(long)]
    n_points: Option<usize>,
    #[arg(long)]
    list: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum OperatorArg {
    Analytic,
    Learned,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Default,
    Toy,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    n_points: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long, value_enum)]
    operator: Option<OperatorArg>,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    seq: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    seq: PathBuf,
    /// tau, n_points, lambda or iterations.
    #[arg(long)]
    axis: SweepAxis,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct MeshArgs {
    #[arg(long)]
    seq: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    voxel: Option<f64>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    seed: u64,
    /// Directory for `weights.bin` and `train.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Square render size of the training frames.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 200)]
    n_points: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Scalar parameters probed per module.
    #[arg(long, default_value_t = 32)]
    count: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Also check the whole model against the training loss.
    #[arg(long)]
    full: bool,
}

#[derive(Debug)]
enum CliError {
    Harness(HarnessError),
    Numeric(String),
    Usage(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Harness(e) => e.exit_code() as u8,
            CliError::Numeric(_) => 3,
            CliError::Usage(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Harness(e) => write!(f, "{e}"),
            CliError::Numeric(m) | CliError::Usage(m) => f.write_str(m),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        CliError::Harness(e)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Harness(HarnessError::Io { path: path.to_path_buf(), source: e })
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Harness(HarnessError::Format { path: path.clone(), reason: e.to_string() }))?
        }
        None => RunConfig::default(),
    };
    if let Some(v) = args.tau {
        cfg.tau = v;
    }
    if let Some(v) = args.n_points {
        cfg.n_points = v;
    }
    if let Some(v) = args.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = args.operator {
        cfg.operator = match v {
            OperatorArg::Analytic => OperatorKind::Analytic,
            OperatorArg::Learned => OperatorKind::Learned,
        };
    }
    if let Some(v) = args.model {
        cfg.model = match v {
            ModelArg::Default => ModelSize::Default,
            ModelArg::Toy => ModelSize::Toy,
        };
    }
    if let Some(v) = &args.weights {
        cfg.weights = Some(v.clone());
    }
    if let Some(v) = args.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    flag.clone()
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set \"output\" in the config".into()))
}

fn simulate(a: SimulateArgs) -> Result<(), CliError> {
    let suite = synthetic_suite();
    if a.list {
        for s in &suite {
            println!("{}\t{}x{}\t{} frames", s.name, s.intrinsics.width, s.intrinsics.height, s.trajectory.len());
        }
        return Ok(());
    }
    let (name, out, seed) = (a.scene.expect("required"), a.out.expect("required"), a.seed.expect("required"));
    let scene = suite
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| CliError::Usage(format!("unknown scene {name}; try --list")))?;
    let seq = scene
        .generate(a.tau, a.n_points.unwrap_or(usize::MAX), seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    save_sequence(&seq, &out)?;
    println!("wrote {} frames to {}", seq.len(), out.display());
    Ok(())
}

fn print_summary(report: &dod_core::harness::RunReport) {
    if let Some(m) = report.aggregate {
        println!(
            "frames {} skipped {} mae {:.4} rmse {:.4} abs_rel {:.4} delta_1.25 {:.4}",
            report.frames.len(),
            report.skipped.len(),
            m.mae,
            m.rmse,
            m.abs_rel,
            m.delta_125
        );
    }
    if let Some(m) = report.metrics_3d {
        println!("acc {:.4} comp {:.4} chamfer {:.4} fscore {:.4}", m.acc, m.comp, m.chamfer, m.fscore);
    }
}

fn run(a: RunArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.cfg)?;
    let out = output_dir(&a.out, &cfg)?;
    let seq = load_sequence(&a.seq)?;
    let report = run_pipeline(&seq, &cfg)?;
    write_report(&report, &out)?;
    print_summary(&report);
    Ok(())
}

fn mesh(a: MeshArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.cfg)?;
    cfg.mesh.enabled = true;
    if let Some(v) = a.voxel {
        cfg.mesh.voxel = v;
    }
    cfg.validate()?;
    let out = output_dir(&a.out, &cfg)?;
    let seq = load_sequence(&a.seq)?;
    let report = run_pipeline(&seq, &cfg)?;
    write_report(&report, &out)?;
    print_summary(&report);
    Ok(())
}

fn run_sweep(a: SweepArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.cfg)?;
    let seq = load_sequence(&a.seq)?;
    let rows = sweep(&seq, a.axis, &a.values, &cfg)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    write_sweep(a.axis, &rows, &a.out)?;
    for r in &rows {
        match &r.result {
            Ok((m, _)) => println!("{} = {}: mae {:.4}", a.axis.name(), r.value, m.mae),
            Err(e) => println!("{} = {}: error {e}", a.axis.name(), r.value),
        }
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    if !a.size.is_multiple_of(8) || a.size == 0 {
        return Err(CliError::Usage(format!("--size must be a positive multiple of 8, got {}", a.size)));
    }
    let suite = synthetic_suite();
    let data = toy_dataset(&suite, a.size, a.size, 3, a.n_points, a.seed);
    let mut model = DodModel::new(ModelConfig::toy(), a.seed);
    let cfg = TrainConfig { steps: a.steps, lr: a.lr, seed: a.seed, ..TrainConfig::default() };
    let report = train_toy(&mut model, &data, &cfg).map_err(|e| CliError::Numeric(e.to_string()))?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let wpath = a.out.join("weights.bin");
    let file = fs::File::create(&wpath).map_err(|e| io_err(&wpath, e))?;
    write_weights(&model.params, BufWriter::new(file))
        .map_err(|e| CliError::Harness(HarnessError::Format { path: wpath.clone(), reason: e.to_string() }))?;
    let cpath = a.out.join("train.csv");
    fs::write(&cpath, report.to_csv()).map_err(|e| io_err(&cpath, e))?;
    let first = report.losses.first().copied().unwrap_or(f64::NAN);
    let last = report.losses.last().copied().unwrap_or(f64::NAN);
    println!("{} steps, loss {first:.4} -> {last:.4}, weights in {}", a.steps, wpath.display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let suite = synthetic_suite();
    let sample = toy_dataset(&suite[..1], 32, 32, 2, 40, a.seed).swap_remove(1);
    let model = DodModel::new(ModelConfig::toy(), a.seed);
    let mut worst: f64 = 0.0;
    for m in CheckedModule::ALL {
        let err = module_gradient_check(&model, m, &sample.target_image, a.count, a.eps, a.seed)
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        println!("{:10} max relative error {err:.3e}", m.prefix().trim_end_matches('.'));
        worst = worst.max(err);
    }
    if a.full {
        let prefixes = ["geometry.", "mono.", "operator.", "decoder."];
        let rows = model_gradient_check(&model, &sample, &prefixes, a.count, a.eps, a.seed)
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        for (p, err) in rows {
            println!("full model {:10} max relative error {err:.3e}", p.trim_end_matches('.'));
        }
    }
    if worst > a.tolerance {
        return Err(CliError::Numeric(format!("gradient check failed: {worst:.3e} > {:.1e}", a.tolerance)));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Run(a) => run(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Mesh(a) => mesh(a),
        Command::TrainToy(a) => train(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
