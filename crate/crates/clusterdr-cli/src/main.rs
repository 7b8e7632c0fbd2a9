use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use clusterdr_cli::commands::{self, Context, OutputFormat};
use clusterdr_cli::error::{CliError, Result};

#[derive(Parser)]
#[command(
    name = "clusterdr",
    version,
    about = "Doubly robust estimation of average outcomes from clustered data \
             with missing responses, with cluster-aware inference and a \
             simulation harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// JSON configuration file
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// CSV dataset to analyze
    #[arg(long, global = true, value_name = "FILE")]
    data: Option<PathBuf>,

    /// Directory for report and curve files
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Seed for every random draw in the run
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads; 0 picks automatically (CLUSTERDR_THREADS applies
    /// when the flag is absent)
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Stdout format for estimate and bootstrap
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Json)]
    format: OutputFormat,
}

#[derive(Subcommand)]
enum Cmd {
    /// Estimate the average outcome from a dataset
    Estimate,
    /// Estimate with a cluster bootstrap interval
    Bootstrap,
    /// Generate a synthetic dataset with known truth
    Simulate,
    /// Confidence interval coverage experiment
    McCoverage,
    /// Sequential estimator accuracy experiment
    McRmse,
    /// Nuisance misspecification experiment
    McMisspec,
    /// Growth diagnostic for the cluster variance scale
    OmegaDiag,
}

fn resolve_threads(flag: Option<usize>) -> Result<usize> {
    if let Some(t) = flag {
        return Ok(t);
    }
    if let Ok(raw) = std::env::var("CLUSTERDR_THREADS") {
        return raw.parse().map_err(|_| {
            CliError::Usage(format!("CLUSTERDR_THREADS must be a non-negative integer, got {raw:?}"))
        });
    }
    Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn run(cli: Cli) -> Result<String> {
    // Test hook: forces the internal-error path so the exit code contract
    // stays covered end to end.
    if std::env::var("CLUSTERDR_FAULT_INJECT").as_deref() == Ok("internal") {
        return Err(CliError::Internal(clusterdr::Error::Internal {
            details: "fault injection requested via CLUSTERDR_FAULT_INJECT".to_string(),
        }));
    }
    let ctx = Context {
        config_path: cli.config,
        data_path: cli.data,
        out_dir: cli.out,
        seed: cli.seed,
        threads: resolve_threads(cli.threads)?,
        format: cli.format,
    };
    match cli.command {
        Cmd::Estimate => commands::cmd_estimate(&ctx),
        Cmd::Bootstrap => commands::cmd_bootstrap(&ctx),
        Cmd::Simulate => commands::cmd_simulate(&ctx),
        Cmd::McCoverage => commands::cmd_mc_coverage(&ctx),
        Cmd::McRmse => commands::cmd_mc_rmse(&ctx),
        Cmd::McMisspec => commands::cmd_mc_misspec(&ctx),
        Cmd::OmegaDiag => commands::cmd_omega_diag(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(mut output) => {
            if !output.ends_with('\n') {
                output.push('\n');
            }
            print!("{output}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
