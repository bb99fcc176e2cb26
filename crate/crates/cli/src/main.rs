use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use dmtl_core::checkpoint;
use dmtl_core::experiment::{
    evaluate, simulate, simulation_csv, sweep, threads_from_env, EvalOptions, LossScript, Protocol,
};
use dmtl_core::gradcheck::{run_gradcheck, GradcheckOptions};
use dmtl_core::metrics::Similarity;
use dmtl_core::plot::{plot_csv, plot_csv_text};
use dmtl_core::taskweights::{GradientForm, SchedulerKind};
use dmtl_core::trainer::{load_data, run_training};
use dmtl_core::{Error, Result, Tensor, TrainConfig};

#[derive(Parser)]
#[command(
    name = "dmtl",
    version,
    about = "Multi-task training with dynamic task weights"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Where artifacts are written.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Overrides the configured log interval.
    #[arg(long, global = true)]
    log_every: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the log, evaluations and checkpoints.
    Train,
    /// Train once per static weight on one task and report accuracy against weight.
    Sweep {
        /// Zero-based index of the swept task.
        #[arg(long)]
        task: usize,
        /// Weights in (0,1]; defaults to 0.1, 0.2, ..., 1.0.
        #[arg(long, value_delimiter = ',')]
        weights: Vec<f64>,
    },
    /// Compare every differentiable operation against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        /// Perturb the analytic gradient of this operation (fault injection).
        #[arg(long)]
        corrupt: Option<String>,
    },
    /// Run the weight scheduler on scripted losses without a network.
    Simulate(SimulateArgs),
    /// Evaluate a checkpoint under a verification or identification protocol.
    Eval(EvalArgs),
    /// Render CSV columns as an SVG line chart.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        columns: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SimulateArgs {
    /// CSV with one column per task loss and one row per step.
    #[arg(long, conflicts_with = "constant")]
    losses: Option<PathBuf>,
    /// Constant task losses used at every step, e.g. `2,1`.
    #[arg(long, value_delimiter = ',')]
    constant: Vec<f64>,
    #[arg(long, value_enum, default_value_t = SchedulerArg::DynamicL4)]
    scheduler: SchedulerArg,
    #[arg(long, value_enum, default_value_t = GradientArg::Full)]
    gradient: GradientArg,
    /// Static weights when `--scheduler static`.
    #[arg(long, value_delimiter = ',')]
    weights: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    /// Fixed feature vector fed to the weight module.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = vec![1.0, 1.0, 1.0, 1.0])]
    z: Vec<f64>,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    /// Also update the bias of the weight module.
    #[arg(long)]
    update_bias: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// verification, c2p, p2c or identification.
    #[arg(long)]
    protocol: Protocol,
    /// Zero-based branch to evaluate.
    #[arg(long, default_value_t = 0)]
    task: usize,
    /// Evaluate on the training split instead of the held-out split.
    #[arg(long)]
    train_split: bool,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long, default_value_t = 6000)]
    pairs: usize,
    #[arg(long)]
    euclidean: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchedulerArg {
    Static,
    DynamicL4,
    NaiveDynamic,
}

#[derive(Clone, Copy, ValueEnum)]
enum GradientArg {
    Full,
    Diagonal,
}

impl Common {
    fn load_config(&self) -> Result<TrainConfig> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| Error::Usage("--config is required for this command".into()))?;
        let mut cfg = TrainConfig::load(path)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(n) = self.log_every {
            cfg.log_every = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: Option<&TrainConfig>, fallback: &str) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| cfg.and_then(|c| c.out_dir.clone()))
            .unwrap_or_else(|| PathBuf::from(fallback))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn train(common: &Common) -> Result<()> {
    let cfg = common.load_config()?;
    let dir = common.out_dir(Some(&cfg), "runs/train");
    let history = run_training(&cfg, Some(&dir))?;
    let log = dir.join("log.csv");
    let columns: Vec<String> = (1..=cfg.num_tasks()).map(|i| format!("w{i}")).collect();
    plot_csv(&log, &columns, &dir.join("weights.svg"))?;
    if let Some(acc) = history.final_accuracy() {
        let acc: Vec<String> = acc.iter().map(|a| format!("{a:.4}")).collect();
        println!("final accuracy per task: {}", acc.join(" "));
    }
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn run_sweep(common: &Common, task: usize, weights: &[f64]) -> Result<()> {
    let cfg = common.load_config()?;
    let weights: Vec<f64> = if weights.is_empty() {
        (1..=10).map(|k| k as f64 / 10.0).collect()
    } else {
        weights.to_vec()
    };
    let dir = common.out_dir(Some(&cfg), "runs/sweep");
    create_dir(&dir)?;
    let report = sweep(&cfg, task, &weights, Some(&dir), threads_from_env())?;
    let csv = report.to_csv();
    write_file(&dir.join("sweep.csv"), &csv)?;
    let columns: Vec<String> = (1..=cfg.num_tasks()).map(|i| format!("acc{i}")).collect();
    let svg = plot_csv_text(
        &csv,
        &columns,
        &format!("accuracy against static weight of task {}", task + 1),
    )?;
    write_file(&dir.join("sweep.svg"), &svg)?;
    print!("{csv}");
    if let Some(best) = report.best() {
        println!("best weight for task {}: {}", task + 1, best.weight);
    }
    Ok(())
}

fn gradcheck(common: &Common, instances: usize, corrupt: Option<String>) -> Result<bool> {
    let opts = GradcheckOptions {
        instances,
        corrupt,
        ..GradcheckOptions::default()
    };
    let report = run_gradcheck(common.seed.unwrap_or(0), &opts)?;
    print!("{report}");
    if let Some(dir) = &common.out_dir {
        create_dir(dir)?;
        write_file(&dir.join("gradcheck.txt"), &report.to_string())?;
    }
    Ok(report.passed())
}

fn run_simulate(common: &Common, args: SimulateArgs) -> Result<()> {
    let script = match (&args.losses, args.constant.is_empty()) {
        (Some(path), _) => LossScript::load(path)?,
        (None, false) => LossScript::constant(&args.constant, args.steps),
        (None, true) => return Err(Error::Usage("pass --losses or --constant".into())),
    };
    let gradient = match args.gradient {
        GradientArg::Full => GradientForm::Full,
        GradientArg::Diagonal => GradientForm::Diagonal,
    };
    let kind = match args.scheduler {
        SchedulerArg::Static => SchedulerKind::Static(args.weights),
        SchedulerArg::DynamicL4 => SchedulerKind::DynamicL4(gradient),
        SchedulerArg::NaiveDynamic => SchedulerKind::NaiveDynamic,
    };
    let trajectory = simulate(
        &script,
        &kind,
        &Tensor::vector(args.z),
        args.learning_rate,
        args.update_bias,
        args.steps,
    )?;
    let csv = simulation_csv(&trajectory);
    let dir = common.out_dir(None, "runs/simulate");
    create_dir(&dir)?;
    write_file(&dir.join("simulation.csv"), &csv)?;
    let tasks = trajectory.first().map_or(0, |s| s.weights.len());
    let columns: Vec<String> = (1..=tasks).map(|i| format!("w{i}")).collect();
    write_file(
        &dir.join("simulation.svg"),
        &plot_csv_text(&csv, &columns, "task weights")?,
    )?;
    if let Some(last) = trajectory.last() {
        println!("final weights: {:?}", last.weights);
    }
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn eval(common: &Common, args: &EvalArgs) -> Result<()> {
    let cfg = common.load_config()?;
    let model = checkpoint::load_model(&args.checkpoint)?;
    let (train, test) = load_data(&cfg)?;
    let data = if args.train_split { &train } else { &test };
    let opts = EvalOptions {
        task: args.task,
        folds: args.folds,
        pairs: args.pairs,
        seed: common.seed.unwrap_or(0),
        similarity: if args.euclidean {
            Similarity::Euclidean
        } else {
            Similarity::Cosine
        },
        ..EvalOptions::new(args.protocol)
    };
    let report = evaluate(&model, data, &opts)?;
    let text = report.render();
    print!("{text}");
    let dir = common.out_dir(Some(&cfg), "runs/eval");
    create_dir(&dir)?;
    let path = dir.join(format!("report_{}.md", args.protocol.as_str()));
    write_file(&path, &text)?;
    info!("report written to {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let common = &cli.common;
    match cli.command {
        Command::Train => train(common)?,
        Command::Sweep { task, ref weights } => run_sweep(common, task, weights)?,
        Command::Gradcheck { instances, corrupt } => return gradcheck(common, instances, corrupt),
        Command::Simulate(args) => run_simulate(common, args)?,
        Command::Eval(ref args) => eval(common, args)?,
        Command::Plot {
            ref csv,
            ref columns,
            ref out,
        } => {
            plot_csv(csv, columns, out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } | Error::Usage(_) | Error::Argument(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
