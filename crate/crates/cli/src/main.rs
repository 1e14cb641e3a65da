mod commands;
mod export;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::LazyLock;

use clap::{Args, Parser, Subcommand, ValueEnum};

use run::Failure;

/// Environment variable that replaces the default output root.
pub const OUTPUT_ROOT_VAR: &str = "RLHB_OUTPUT_ROOT";

static CONFIG_KEYS: LazyLock<String> = LazyLock::new(|| {
    let mut out = String::from("Configuration keys (set with --set key=value) and their defaults:\n");
    for (k, v) in rlhb_core::train::config_keys() {
        out.push_str(&format!("  {k} = {v}\n"));
    }
    out.push_str(&format!(
        "\nExit codes: 0 success, 1 other failure, 2 config error, 3 missing prerequisite, 4 collapse or divergence.\n\
         The output root defaults to ./runs and can be replaced with {OUTPUT_ROOT_VAR}."
    ));
    out
});

#[derive(Parser, Debug)]
#[command(name = "rlhb", version, about = "Alignment from simulated human behavior: data, training, evaluation")]
#[command(after_help = CONFIG_KEYS.as_str())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML configuration file; defaults apply to anything it leaves out.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `ppo.kappa=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed; takes precedence over the config file and overrides.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output root holding data, checkpoints and runs.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the demonstration corpus and preference pairs.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Replace existing data files.
        #[arg(long)]
        overwrite: bool,
    },
    /// Train one model or run one alignment loop.
    #[command(after_help = CONFIG_KEYS.as_str())]
    Train {
        #[arg(value_enum)]
        what: TrainTarget,
        #[command(flatten)]
        common: Common,
        /// Run directory, relative to the output root. Defaults per target.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Win/tie/loss of policy A against policy B under the hidden oracle.
    Eval {
        /// Policy checkpoint A.
        a: PathBuf,
        /// Policy checkpoint B.
        b: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Behavior text given to A.
        #[arg(long, value_enum, default_value_t = Conditioning::None)]
        a_behavior: Conditioning,
        /// Behavior text given to B.
        #[arg(long, value_enum, default_value_t = Conditioning::None)]
        b_behavior: Conditioning,
        /// Number of evaluation queries; defaults to eval.n_queries.
        #[arg(long, short)]
        n: Option<usize>,
        /// Report directory, relative to the output root.
        #[arg(long, default_value = "eval")]
        report_dir: PathBuf,
    },
    /// Run the one-factor-at-a-time ablation grid of the adversarial loop.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Only run cells whose name matches, e.g. `kappa=0.5` or `frozen-disc`. Repeatable.
        #[arg(long = "only")]
        only: Vec<String>,
        #[arg(long, default_value = "ablate")]
        run_dir: PathBuf,
    },
    /// Merge the metrics of several runs into one table aligned by step.
    ExportMetrics {
        /// Run directories (each holding metrics.csv).
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Output CSV file.
        #[arg(long, short)]
        output: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainTarget {
    Sft,
    Rm,
    Cm,
    Disc,
    Rlhf,
    Rlhbc,
    Rlhb,
    Stacked,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    None,
    Best,
    Worst,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { common, overwrite } => commands::gen_data(&common, overwrite),
        Command::Train { what, common, run_dir } => commands::train(what, &common, run_dir),
        Command::Eval { a, b, common, a_behavior, b_behavior, n, report_dir } => {
            commands::eval(&a, &b, &common, a_behavior, b_behavior, n, &report_dir)
        }
        Command::Ablate { common, only, run_dir } => commands::ablate(&common, &only, &run_dir),
        Command::ExportMetrics { runs, output } => export::export_metrics(&runs, &output),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, message }) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}
