use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use zorba::cli::{self, ReportOptions};
use zorba::verify::{run_suite, Suite, VerifyOptions};
use zorba::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "zorba", version, about = "Zeroth-order federated fine-tuning simulator")]
struct Cli {
    /// Experiment config (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Replaces the master, data and sweep seeds.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sweep ε, write pareto.csv and allocation.json.
    Allocate,
    /// Run an experiment and write metrics.csv and manifest.json.
    Train {
        /// allocation.json from `allocate` (ZorBA only).
        #[arg(long)]
        allocation: Option<PathBuf>,
        /// Rerun a manifest and check the metrics hash.
        #[arg(long, conflicts_with = "allocation")]
        replay: Option<PathBuf>,
    },
    /// Run self-check suites and write verify_report.json.
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        suite: Suite,
    },
    /// Summarize metrics files.
    Report {
        /// metrics.csv files.
        metrics: Vec<PathBuf>,
        /// Evaluation target for rounds-to-target.
        #[arg(long)]
        target: Option<f64>,
        /// Target is reached when the metric falls to it (quadratic runs).
        #[arg(long)]
        lower_is_better: bool,
        /// pareto.csv files to collect into front.csv.
        #[arg(long)]
        pareto: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    let config = cli.config.as_deref();
    match cli.command {
        Command::Allocate => {
            let cfg = cli::load_config(config, cli.seed_override)?;
            let r = cli::cmd_allocate(&cfg, &cli.out)?;
            println!(
                "{} samples ({} infeasible), {} on the front; chosen Λ = {}, VRAM = {}",
                r.samples, r.skipped, r.front_size, r.chosen.summary.lambda, r.chosen.summary.vram_total
            );
        }
        Command::Train { allocation, replay } => {
            let r = match replay {
                Some(manifest) => cli::cmd_replay(&manifest, &cli.out)?,
                None => {
                    let cfg = cli::load_config(config, cli.seed_override)?;
                    cli::cmd_train(&cfg, allocation.as_deref(), &cli.out)?
                }
            };
            println!(
                "{} rounds of {}; final train loss {}, metrics sha256 {}",
                r.rounds, r.manifest.scheme, r.last.train_loss, r.manifest.metrics_sha256
            );
        }
        Command::Verify { suite } => {
            let opts = VerifyOptions {
                seed: cli.seed_override.unwrap_or(0),
                ..VerifyOptions::default()
            };
            let report = run_suite(suite, &opts)?;
            std::fs::create_dir_all(&cli.out).map_err(|e| Error::Io {
                path: cli.out.clone(),
                source: e,
            })?;
            let path = cli.out.join("verify_report.json");
            let text = serde_json::to_string_pretty(&report)?;
            std::fs::write(&path, text + "\n").map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            for c in &report.checks {
                println!(
                    "{} {} (measured {}, threshold {}) {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.measured,
                    c.threshold,
                    c.detail
                );
            }
            if !report.passed {
                return Err(Error::Internal(format!("verification failed, see {}", path.display())));
            }
        }
        Command::Report {
            metrics,
            target,
            lower_is_better,
            pareto,
        } => {
            let opts = ReportOptions {
                target,
                lower_is_better,
                pareto,
            };
            cli::cmd_report(&metrics, &opts, &cli.out)?;
            println!("wrote {}", Path::new(&cli.out).join("summary.json").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
