mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use erasure_core::{Method, Preset, DEFAULT_SEED};

/// Concept-erasure pipeline on a synthetic token-image world.
///
/// Stages share a run directory (`--out`) and hand artifacts to each other
/// only through files in it.
#[derive(Parser, Debug)]
#[command(name = "erasure", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run directory holding every artifact of the pipeline.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a world definition and write its canonical form.
    World {
        #[command(flatten)]
        common: Common,
        /// World TOML; the default world when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fit the base model to oracle renders.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Build preference pairs for a target concept.
    BuildPairs {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2)]
        target: u32,
        #[arg(long, default_value_t = 800)]
        n: usize,
    },
    /// Fine-tune the base model to erase the target concept.
    Erase {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "vce", value_parser = parse_method)]
        method: Method,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Score a model: erase / preserve / decouple, occurrence counts and,
    /// with `--removal`, the per-class removal accuracy table.
    Eval(EvalFlags),
    /// Merge per-run loss curves into one CSV.
    Curves {
        #[command(flatten)]
        common: Common,
        /// Labels to include; every `curve_*.csv` in the run directory when
        /// omitted.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
    },
    /// Run every erasure method plus the `wo_data` variant and tabulate
    /// their scores.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
    },
}

#[derive(Args, Debug, Clone)]
pub struct TrainFlags {
    #[arg(long, default_value = "style", value_parser = parse_preset)]
    pub preset: Preset,
    #[arg(long)]
    pub drop_prob: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// TOML overriding preset fields (learning_rate, iterations, batch_size,
    /// weight_decay, beta, drop_prob).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalFlags {
    #[command(flatten)]
    pub common: Common,
    /// Model to score: `base`, an erasure method, or `sld` (guided base).
    #[arg(long, default_value = "vce")]
    pub method: String,
    /// Target concept; taken from the pair set when omitted.
    #[arg(long)]
    pub target: Option<u32>,
    /// Exact expectations instead of sampling.
    #[arg(long)]
    pub exact: bool,
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = erasure_core::eval::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Guidance scale for `--method sld`.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Also erase every concept with the object preset and report removal
    /// accuracy.
    #[arg(long)]
    pub removal: bool,
}

fn parse_method(s: &str) -> Result<Method, String> {
    match s.parse::<Method>() {
        Ok(Method::Pretrain) => Err("`pretrain` is not an erasure method".into()),
        Ok(m) => Ok(m),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: erasure_core::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::World { common, config } => commands::world(&common, config.as_deref()),
        Command::Pretrain { common } => commands::pretrain(&common),
        Command::BuildPairs { common, target, n } => commands::build_pairs(&common, target, n),
        Command::Erase {
            common,
            method,
            train,
        } => commands::erase(&common, method, &train),
        Command::Eval(flags) => commands::eval(&flags),
        Command::Curves { common, labels } => commands::curves(&common, &labels),
        Command::Ablate { common, train } => commands::ablate(&common, &train),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
