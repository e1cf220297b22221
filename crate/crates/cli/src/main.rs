use std::path::{Path, PathBuf};
use std::process::ExitCode;

use apie::harness::{self, RunConfig};
use apie::tasks::SequenceSpec;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "apie", version, about = "Continual-learning experiments on synthetic steganalysis tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one mode through the task sequence.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare mas, apie-curvature-only, apie-peakweight-only and apie-full.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check gradients, Hessian diagonals and penalty gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write every task's images (PGM) and manifest.
    GenTasks {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(command: Command) -> apie::Result<ExitCode> {
    match command {
        Command::Run { config, mode, seed, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(m) = mode {
                cfg.mode = m.parse()?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if out.is_some() {
                cfg.output_dir = out;
            }
            let outcome = harness::run_sequence(&cfg)?;
            print!("{}", outcome.matrix.to_csv());
            if let Some(m) = &outcome.metrics {
                println!(
                    "avg_final_accuracy={:.4} avg_forgetting={:.4}",
                    m.avg_final_accuracy, m.avg_forgetting
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate { config, seeds, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if out.is_some() {
                cfg.output_dir = out;
            }
            let (table, _) = harness::run_ablation(&cfg, &seeds)?;
            print!("{}", table.to_csv());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { seed } => {
            let report = harness::run_gradcheck(seed)?;
            for c in &report.checks {
                println!(
                    "{:<20} cases={:<3} max_error={:.3e} tolerance={:.0e} {}",
                    c.name,
                    c.cases,
                    c.max_error,
                    c.tolerance,
                    if c.passed() { "ok" } else { "FAIL" }
                );
            }
            Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Command::GenTasks { config, out, seed } => {
            let cfg = RunConfig::load(&config)?;
            gen_tasks(&cfg.tasks, seed.unwrap_or(cfg.seed), &out)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn gen_tasks(spec: &SequenceSpec, seed: u64, out: &Path) -> apie::Result<()> {
    for task in spec.build(seed)? {
        let dir = out.join(format!("task_{:03}", task.task_id));
        task.export(&dir)?;
        println!(
            "{} {} pairs={} changed={} clamped={}",
            dir.display(),
            task.scheme.label(),
            task.pair_count(),
            task.embedding.changed,
            task.embedding.clamped
        );
    }
    Ok(())
}
