//! `patchmixer` command-line driver.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "patchmixer", version, about = "Patch-mixing convolutional forecaster")]
struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

/// Run configuration: a key=value file, shortcut flags, then `--override`s.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// `key=value`, applied last. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub lookback: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub patch_len: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub kernel: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub heads: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write report, metrics and checkpoint.
    Train(ConfigArgs),
    /// Forecast from a look-back window CSV.
    Predict {
        #[arg(long)]
        checkpoint: std::path::PathBuf,
        /// CSV with a timestamp column and one column per variable, L rows.
        #[arg(long)]
        input: std::path::PathBuf,
        /// Output CSV; stdout when absent.
        #[arg(long)]
        output: Option<std::path::PathBuf>,
    },
    /// Score a checkpoint on one split of the configured dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: std::path::PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write every window's forecast (standardized scale).
        #[arg(long)]
        forecasts: Option<std::path::PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    #[command(subcommand)]
    Analyze(Analyze),
}

#[derive(Subcommand)]
enum Analyze {
    /// Variable-wise and patch-wise NMI matrices.
    Nmi {
        /// Variable (name or index) whose patches are compared.
        #[arg(long, default_value = "0")]
        variable: String,
        #[arg(long)]
        bins: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Per-stage multiply-accumulate counts.
    Macs {
        /// Number of variables M; read from the dataset when absent.
        #[arg(long)]
        vars: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// One training run per value of an axis.
    Sweep {
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train architecture variants.
    Ablate {
        /// Comma-separated variants: full, no_patch, linear_head, mlp_head, dual_head.
        #[arg(long, value_delimiter = ',', default_value = "full")]
        variant: Vec<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Train(cfg) => commands::train(&cfg),
        Command::Predict {
            checkpoint,
            input,
            output,
        } => commands::predict(&checkpoint, &input, output.as_deref()),
        Command::Evaluate {
            checkpoint,
            split,
            forecasts,
            cfg,
        } => commands::evaluate(&checkpoint, &split, forecasts.as_deref(), &cfg),
        Command::Analyze(Analyze::Nmi { variable, bins, cfg }) => commands::nmi(&cfg, &variable, bins),
        Command::Analyze(Analyze::Macs { vars, cfg }) => commands::macs(&cfg, vars),
        Command::Analyze(Analyze::Sweep {
            axis,
            values,
            threads,
            cfg,
        }) => commands::sweep(&cfg, &axis, &values, threads),
        Command::Analyze(Analyze::Ablate { variant, cfg }) => commands::ablate(&cfg, &variant),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
