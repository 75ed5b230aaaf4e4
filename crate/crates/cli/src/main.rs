//! `aat`: train, evaluate and probe three-way disentanglement models.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data error,
//! 4 numeric failure, 5 I/O error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aat", version, about = "Adversarial asymmetric training of three-way models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, epoch log and resolved config.
    Train(TrainArgs),
    /// Clean, per-way and standard-way adversarial accuracy, DIA, RAD.
    Eval(EvalArgs),
    /// Generate adversarial examples against one way.
    Attack(AttackArgs),
    /// Detection rate on a balanced natural/adversarial mixture.
    Detect(EvalArgs),
    /// Calibrated predictions on a balanced natural/adversarial mixture.
    Calibrate(EvalArgs),
    /// Exact and sampled accuracies on the discrete feature testbed.
    Dilemma(DilemmaArgs),
    /// Reconstruct an input from one of its representations.
    Invert(InvertArgs),
    /// Render input gradients of each way as images.
    GradViz(GradVizArgs),
    /// Download the MNIST IDX files.
    Fetch(FetchArgs),
    /// Print a preset, or validate and normalize a config file.
    Config(ConfigArgs),
}

/// Run configuration selection shared by all model commands.
#[derive(Args, Clone, Default)]
pub struct ConfigSel {
    /// JSON run configuration.
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Named preset (see `aat config --list`).
    #[arg(long, value_name = "NAME")]
    pub preset: Option<String>,
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Directory holding the IDX files; falls back to $AAT_DATA_DIR.
    #[arg(long, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    /// Use the first N samples after a seeded shuffle.
    #[arg(long, value_name = "N")]
    pub subset: Option<usize>,
}

#[derive(Args, Clone, Default)]
pub struct AttackOverride {
    #[arg(long, value_name = "linf|l2")]
    pub attack_norm: Option<String>,
    #[arg(long, value_name = "R")]
    pub eps: Option<f64>,
    #[arg(long, value_name = "R")]
    pub alpha: Option<f64>,
    #[arg(long, value_name = "N")]
    pub steps: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub sel: ConfigSel,
    #[command(flatten)]
    pub attack: AttackOverride,
    /// Loss terms, e.g. `st,as,ar,an`.
    #[arg(long, value_name = "LIST")]
    pub loss: Option<String>,
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    #[arg(long, value_name = "R")]
    pub lr: Option<f64>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub sel: ConfigSel,
    #[command(flatten)]
    pub attack: AttackOverride,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args)]
pub struct AttackArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Way whose loss is maximized.
    #[arg(long, default_value = "standard")]
    pub way: String,
}

#[derive(Args)]
pub struct DilemmaArgs {
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub d: Option<usize>,
    /// Comma-separated feature magnitudes.
    #[arg(long, value_name = "LIST")]
    pub eta: Option<String>,
    #[arg(long, value_name = "R")]
    pub eps: Option<f64>,
    /// Monte-Carlo sample count.
    #[arg(long, default_value_t = 100_000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args)]
pub struct InvertArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub sel: ConfigSel,
    /// Test-set sample whose representation is the target.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// `robust`, `nonrobust` or `both`.
    #[arg(long, default_value = "both")]
    pub rep: String,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lr: f64,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct GradVizArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub sel: ConfigSel,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// `standard`, `robust`, `nonrobust` or `all`.
    #[arg(long, default_value = "all")]
    pub way: String,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct FetchArgs {
    /// Destination directory; defaults to $AAT_DATA_DIR.
    #[arg(long, value_name = "DIR")]
    pub dest: Option<PathBuf>,
    #[arg(long, default_value = commands::MNIST_BASE_URL)]
    pub base_url: String,
}

#[derive(Args)]
pub struct ConfigArgs {
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    /// List preset names.
    #[arg(long)]
    pub list: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Attack(a) => commands::attack(a),
        Command::Detect(a) => commands::detect(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Dilemma(a) => commands::dilemma(a),
        Command::Invert(a) => commands::invert(a),
        Command::GradViz(a) => commands::grad_viz(a),
        Command::Fetch(a) => commands::fetch(a),
        Command::Config(a) => commands::config(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
