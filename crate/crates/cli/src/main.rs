use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use ssa_core::data::DATA_DIR_ENV;
use ssa_core::harness::{self, ExperimentConfig, Overrides, SummaryRow};

#[derive(Parser)]
#[command(
    name = "ssa",
    version,
    about = "Subnetwork pruning, annealing and ensemble experiments"
)]
struct Cli {
    /// Dataset root directory (contains mnist/ and cifar-10-batches-bin/).
    #[arg(long, global = true, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config file.
    Run {
        config: PathBuf,
        /// Master seed; replaces the config's seed list with this one seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Serial execution for bit-identical outputs.
        #[arg(long)]
        deterministic: bool,
        /// Worker threads for independent cells and ensemble members.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Rebuild summary.csv from the manifests in a run directory.
    Summarize { dir: PathBuf },
}

fn print_rows(rows: &[SummaryRow]) {
    println!(
        "{:<20} {:<10} {:<10} {:>6} {:>4} {:>5} {:>9} {:>8} {:>8} {:>8} {:>5}",
        "method",
        "selector",
        "schedule",
        "rho",
        "phi",
        "tau0",
        "mean_acc",
        "std_acc",
        "nll",
        "ece",
        "seeds"
    );
    for r in rows {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
        println!(
            "{:<20} {:<10} {:<10} {:>6} {:>4} {:>5} {:>9.4} {:>8.4} {:>8.4} {:>8.4} {:>5}{}",
            r.method,
            r.selector,
            r.lr_schedule,
            r.rho,
            opt(r.phi.map(|p| p.to_string())),
            opt(r.tau0.map(|t| t.to_string())),
            r.mean_acc,
            r.std_acc,
            r.mean_nll,
            r.mean_ece,
            r.seed_count,
            if r.best == 1 { " *" } else { "" }
        );
    }
}

fn main() -> Result<ExitCode> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(dir) = &cli.data_dir {
        std::env::set_var(DATA_DIR_ENV, dir);
    }
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            deterministic,
            threads,
        } => {
            let mut cfg = ExperimentConfig::load(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            cfg.apply(&Overrides {
                seed,
                out_dir: out,
                deterministic,
                threads,
            });
            cfg.validate()?;
            let manifest = harness::run(&cfg)?;
            println!(
                "wrote {} metric files to {} in {:.1}s",
                manifest.runs.len(),
                cfg.out_dir.display(),
                manifest.wall_clock_seconds
            );
            let summary = cfg.out_dir.join("summary.csv");
            if summary.exists() {
                print_rows(&harness::read_summary(&summary)?);
            }
            if !manifest.succeeded() {
                for f in &manifest.failures {
                    eprintln!("failed: {} (seed {:?}): {}", f.stage, f.seed, f.error);
                }
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Summarize { dir } => {
            let rows = harness::summarize_dir(&dir)?;
            print_rows(&rows);
            println!("wrote {}", dir.join("summary.csv").display());
        }
    }
    Ok(ExitCode::SUCCESS)
}
