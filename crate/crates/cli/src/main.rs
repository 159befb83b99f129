use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eco_cli::commands::{self, CliError, SimulateArgs, EXIT_CONFIG, EXIT_VALIDATION};
use eco_core::theory::{ByteFormat, Regime1d};

#[derive(Parser)]
#[command(name = "eco", version, about = "Master-weight-free quantized training laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the acceptance suite; exits 1 if any criterion fails.
    ValidateTheory {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run only these criteria (comma separated ids).
        #[arg(long, value_delimiter = ',')]
        only: Vec<u32>,
    },
    /// Closed-form vs Monte Carlo stationary second moment on the scalar quadratic.
    #[command(name = "simulate-1d")]
    Simulate1d {
        #[arg(long, value_delimiter = ',', default_values = ["mw", "naive", "eco"])]
        regime: Vec<Regime1d>,
        #[arg(long = "L", default_value_t = 1.0)]
        l: f64,
        #[arg(long, value_delimiter = ',', required = true)]
        eta: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        beta: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        sigma2: f64,
        #[arg(long, default_value_t = 10_000_000)]
        steps: u64,
        #[arg(long)]
        burn_in: Option<u64>,
        #[arg(long, default_value_t = 8)]
        replicas: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one configuration and write per-step metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train several configurations and write a summary table.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Persistent bytes per parameter.
    Memory {
        #[arg(long)]
        weights: ByteFormat,
        #[arg(long, default_value = "none")]
        master: ByteFormat,
        #[arg(long, default_value = "fp32")]
        m: ByteFormat,
        #[arg(long, default_value = "none")]
        v: ByteFormat,
    },
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::ValidateTheory { out, only } => commands::validate_theory(&only, out.as_deref()),
        Command::Simulate1d {
            regime,
            l,
            eta,
            beta,
            sigma2,
            steps,
            burn_in,
            replicas,
            seed,
            out,
        } => {
            let args = SimulateArgs {
                regimes: regime,
                l,
                etas: eta,
                betas: beta,
                sigma2,
                steps,
                burn_in,
                replicas,
                seed,
            };
            commands::simulate_1d(&args, &out)
        }
        Command::Train { config, out } => commands::train(&config, &out),
        Command::Compare { configs, out } => commands::compare(&configs, &out),
        Command::Memory { weights, master, m, v } => {
            println!("{}", commands::memory(weights, master, m, v));
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                CliError::Config(_) | CliError::Domain(_) => EXIT_CONFIG,
                _ => EXIT_VALIDATION,
            };
            ExitCode::from(code as u8)
        }
    }
}
