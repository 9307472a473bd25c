use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

/// Online calibration experiments: synthetic streams, offline pretraining,
/// online runs, ablations, and plot-data export.
///
/// Output directory precedence: --out flag, then the UNDERCALI_OUT
/// environment variable, then [run] out from the config file.
#[derive(Parser)]
#[command(name = "undercali", version, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a JSONL stream from the configured scenario.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output directory override.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train an offline component and write its checkpoint.
    Pretrain {
        /// Which component: forecaster or ue.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        config: PathBuf,
        /// Training seed override.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the online loop over each configured seed.
    RunOnline {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seed list override.
        #[arg(long)]
        seed: Option<String>,
        /// Engine mode override.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every mode over the same stream and seeds; write a comparison
    /// table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every analytic gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Merge run CSVs into long-format plot data and replay the trigger
    /// threshold sweep.
    Report {
        /// Directories containing batches_*.csv files.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Which per-batch column to export.
        #[arg(long, default_value = "mse")]
        column: String,
        /// Trigger smoothing factor used when replaying the sweep.
        #[arg(long, default_value_t = 0.25)]
        alpha_trig: f64,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems exit 1; clap's own help/version paths exit 0.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.cmd {
        Cmd::GenData { config, out } => commands::gen_data(&config, out),
        Cmd::Pretrain { kind, config, seed, out } => {
            commands::pretrain(&kind, &config, seed, out)
        }
        Cmd::RunOnline { config, seed, mode, out } => {
            commands::run_online(&config, seed.as_deref(), mode.as_deref(), out)
        }
        Cmd::Ablate { config, seed, out } => {
            commands::ablate(&config, seed.as_deref(), out)
        }
        Cmd::Gradcheck { seed } => commands::gradcheck(seed),
        Cmd::Report { dirs, column, alpha_trig, out } => {
            commands::report(&dirs, &column, alpha_trig, &out)
        }
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
