use std::io::{self, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use privfed::accountant::Conversion;
use privfed::data::{save_csv, synth_blobs, SyntheticSpec};
use privfed::experiment::{run_experiment, AccountantQuery, ExperimentConfig, MetricsWriter};
use privfed::Result;

/// Differentially private and federated MLP training.
///
/// Log verbosity follows `RUST_LOG` (e.g. `RUST_LOG=info`).
#[derive(Parser)]
#[command(name = "privfed", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a config file and write JSONL metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Privacy calculator: epsilon, max steps, or required noise multiplier.
    Accountant(AccountantArgs),
    /// Write a two-class Gaussian blob dataset as CSV.
    Synth {
        #[arg(long, default_value_t = 10_000)]
        n_samples: usize,
        #[arg(long, default_value_t = 10)]
        n_features: usize,
        #[arg(long, default_value_t = 6.0)]
        separation: f64,
        #[arg(long, default_value_t = 1.0)]
        noise_std: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct AccountantArgs {
    /// Noise multiplier; omit together with --target-eps to solve for it.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    batch: usize,
    #[arg(long)]
    n: usize,
    #[arg(long, conflicts_with = "steps")]
    epochs: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, default_value_t = 1e-5)]
    delta: f64,
    /// With --sigma: largest step count within budget. Without: smallest sigma.
    #[arg(long)]
    target_eps: Option<f64>,
    #[arg(long, default_value_t = Conversion::Classic)]
    conversion: Conversion,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let summary = match out {
                Some(path) => {
                    let file = std::fs::File::create(&path)?;
                    run_experiment(&cfg, &mut MetricsWriter::new(BufWriter::new(file)))?
                }
                None => run_experiment(&cfg, &mut MetricsWriter::new(io::stdout().lock()))?,
            };
            if let Some(acc) = summary.final_test_acc {
                eprintln!("final test accuracy {acc:.4}");
            }
        }
        Command::Accountant(a) => {
            let row = AccountantQuery {
                sigma: a.sigma,
                batch: a.batch,
                n: a.n,
                steps: a.steps,
                epochs: a.epochs,
                delta: a.delta,
                target_eps: a.target_eps,
                conversion: a.conversion,
            }
            .answer()?;
            println!("query,q,sigma,steps,delta,epsilon,best_order");
            println!(
                "{},{},{},{},{},{},{}",
                row.query,
                row.q,
                row.sigma,
                row.steps,
                row.delta,
                row.epsilon,
                row.best_order
            );
        }
        Command::Synth { n_samples, n_features, separation, noise_std, seed, out } => {
            let spec = SyntheticSpec { n_samples, n_features, class_separation: separation, noise_std };
            save_csv(&synth_blobs(&spec, seed)?, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
