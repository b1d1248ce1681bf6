use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use driftguard::experiment::{load_report, render_summary, run_experiment, trace_jsonl, ExperimentConfig};

#[derive(Parser)]
#[command(name = "driftguard", version, about = "Federated continual learning drift simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured policy for every seed and write results.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replace the configured seed list with this one seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a summary table from run report JSON files.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Print the drift trace as JSON lines without training anything.
    Trace {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli) -> driftguard::Result<()> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            let dir = out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("results"));
            let manifest = run_experiment(&cfg, &dir)?;
            let summary = std::fs::read_to_string(dir.join("summary.txt"))?;
            print!("{summary}");
            eprintln!("wrote {} files to {}", manifest.files.len(), dir.display());
        }
        Command::Compare { reports } => {
            let loaded = reports.iter().map(|p| load_report(p)).collect::<driftguard::Result<Vec<_>>>()?;
            print!("{}", render_summary(&loaded));
        }
        Command::Trace { config, seed } => {
            let cfg = ExperimentConfig::load(&config)?;
            print!("{}", trace_jsonl(&cfg, seed.unwrap_or(cfg.seeds[0]))?);
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
            ExitCode::FAILURE
        }
    }
}
