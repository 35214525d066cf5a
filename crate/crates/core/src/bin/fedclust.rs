use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedclust::config::ExperimentConfig;
use fedclust::datasets::{PartitionMode, PartitionSpec};
use fedclust::experiment::{cmd_baseline_kmeans, cmd_eval, cmd_partition, cmd_run, exit_code};
use fedclust::Error;

#[derive(Parser)]
#[command(name = "fedclust", version, about = "Federated robust clustering of text embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a federated clustering experiment.
    ///
    /// Any configuration key can be given as `--key value` after the
    /// config file and wins over the file.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Pooled k-means on the raw embeddings.
    BaselineKmeans {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        restarts: usize,
    },
    /// Split a dataset into client shards.
    Partition {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: PartitionMode,
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        rho: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "shards")]
        out: PathBuf,
    },
    /// Score predicted cluster ids against true labels.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        /// Label file (one id per line) or a labelled dataset file.
        #[arg(long)]
        truth: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<PartitionMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::InvalidInput(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config, overrides } => {
            let cfg = ExperimentConfig::load(config.as_deref(), &overrides)?;
            let summary = cmd_run(&cfg)?;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
            println!(
                "{}: acc={} nmi={} ({:.1}s)",
                summary.run_dir.display(),
                fmt(summary.metrics.acc),
                fmt(summary.metrics.nmi),
                summary.wall_s
            );
        }
        Command::BaselineKmeans {
            data,
            k,
            seed,
            restarts,
        } => print_json(&cmd_baseline_kmeans(&data, k, seed, restarts)?)?,
        Command::Partition {
            data,
            mode,
            m,
            rho,
            seed,
            out,
        } => {
            let spec = PartitionSpec { mode, m, rho, seed };
            for path in cmd_partition(&data, &spec, &out)? {
                println!("{}", path.display());
            }
        }
        Command::Eval { pred, truth } => print_json(&cmd_eval(&pred, &truth)?)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
