//! `lefm`: synthetic data, training, evaluation and reports for LEFM networks.

mod commands;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use failure::Failure;

#[derive(Parser)]
#[command(name = "lefm", version, about = "Learnable explicit feature maps for segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset in the on-disk layout.
    Synth(SynthArgs),
    /// Train every (m, seed) run of an experiment.
    Train(TrainArgs),
    /// Score a checkpoint against a dataset.
    Eval(EvalArgs),
    /// Expand one image into its monomial features.
    Expand(ExpandArgs),
    /// Rank the learned expansion coefficients of a checkpoint.
    ReportCoeffs(ReportArgs),
    /// Fleiss kappa of the annotator masks, per image and pooled.
    Kappa(KappaArgs),
    /// One-way ANOVA between two model groups of a runs.csv.
    Anova(AnovaArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub images: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// LINEAR, PRODUCT or MIX.
    #[arg(long, default_value = "PRODUCT")]
    pub rule: String,
    /// Label threshold; defaults to the rule's own.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// key = value experiment file; unset keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Train this single seed instead of the configured list.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated expansion orders, overriding the config.
    #[arg(long)]
    pub m: Option<String>,
    /// Attest that the images are already stain normalized.
    #[arg(long)]
    pub prenormalized: bool,
    /// Skip writing per-run checkpoints.
    #[arg(long)]
    pub no_checkpoints: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub prenormalized: bool,
}

#[derive(Args)]
pub struct ExpandArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub d: usize,
    #[arg(long)]
    pub m: usize,
    /// Output prefix; writes `<out>.bin` and `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Use the learned coefficients of this checkpoint instead of ones.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct KappaArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct AnovaArgs {
    /// runs.csv written by `train`.
    #[arg(long)]
    pub runs: PathBuf,
    /// BACC, F1, PREC, SE or SP.
    #[arg(long)]
    pub metric: String,
    #[arg(long)]
    pub group_a: String,
    #[arg(long)]
    pub group_b: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            eprintln!("{}", Failure::usage(text.trim_start_matches("error: ").trim_end()));
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Expand(a) => commands::expand(a),
        Command::ReportCoeffs(a) => commands::report_coeffs(a),
        Command::Kappa(a) => commands::kappa(a),
        Command::Anova(a) => commands::anova(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
