//! `partdisc`: generate synthetic feature sets, run the candidate/part
//! pipeline stage by stage, train the toy model and score predictions.

mod commands;
mod error;
mod tables;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "partdisc", version, about = "Part-aware generalized category discovery toolkit")]
struct Cli {
    /// Seed for every random stream of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages (mixture fits).
    #[arg(long, global = true, env = "PARTDISC_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic feature container (plus its manifest).
    GenSynth(GenSynthArgs),
    /// Balance a prediction matrix (CSV) with Sinkhorn-Knopp.
    Sinkhorn(SinkhornArgs),
    /// Pick per-class candidate samples with calibrated prototypes.
    Select(SelectArgs),
    /// Fit one part mixture per class on the candidates' filtered patches.
    FitGmm(FitGmmArgs),
    /// Train the toy model and write a run directory.
    TrainToy(TrainToyArgs),
    /// Predict classes with a trained state.
    Predict(PredictArgs),
    /// Clustering accuracy (All/Old/New) of predictions against labels.
    Eval(EvalArgs),
    /// Finite-difference check of every loss gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Plain generator defaults.
    Default,
    /// The 20-class fine-grained benchmark used by the end-to-end checks.
    Benchmark,
}

#[derive(Args, Debug)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "default")]
    pub preset: Preset,
    /// TOML file overriding generator fields of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SinkhornArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
}

#[derive(Args, Debug)]
pub struct SelectArgs {
    #[arg(long)]
    pub features: PathBuf,
    /// Prototype file (`PGPW`) or a trained state (`PGST`), whose encoder is
    /// then applied to the CLS features first.
    #[arg(long)]
    pub proto: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    /// Temperature of the predictions fed to Sinkhorn.
    #[arg(long, default_value_t = 0.1)]
    pub tau: f64,
    /// Rank with the given prototypes instead of calibrated ones.
    #[arg(long)]
    pub raw: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FitGmmArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub candidates: PathBuf,
    /// Parts per class, or `auto` for the silhouette choice on labeled data.
    #[arg(long, default_value = "auto")]
    pub k: String,
    /// L2-normalize patches before fitting.
    #[arg(long)]
    pub normalize: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainToyArgs {
    /// Run description (TOML); see the README for its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub state: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// Predict every sample, not only the unlabeled split.
    #[arg(long)]
    pub all: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// CSV with `id,pred`.
    #[arg(long)]
    pub pred: PathBuf,
    /// CSV with `id,label`; a dataset manifest also works (labeled rows skipped).
    #[arg(long)]
    pub labels: PathBuf,
    /// Old class ids, whitespace or comma separated.
    #[arg(long)]
    pub old_classes: PathBuf,
    /// Also write the report here as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Random instances per check.
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    /// Write the table here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot size the thread pool: {e}")))?;
    }
    let seed = cli.seed;
    match cli.command {
        Command::GenSynth(a) => commands::gen_synth(&a, seed),
        Command::Sinkhorn(a) => commands::sinkhorn(&a),
        Command::Select(a) => commands::select(&a),
        Command::FitGmm(a) => commands::fit_gmm(&a, seed.unwrap_or(0)),
        Command::TrainToy(a) => commands::train_toy(&a, seed),
        Command::Predict(a) => commands::predict(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a, seed.unwrap_or(0)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
