use std::fmt::Write as _;

use rayon::prelude::*;

use super::config::{Mode, RunConfig};
use super::metrics::{fmt_value, AccuracyMatrix};
use super::sequence::{run_dir, run_on_tasks, train_first, write_text, RunOutcome};
use crate::error::{Error, Result};

/// Final accuracies of one (seed, mode) run.
#[derive(Debug, Clone)]
pub struct ModeRun {
    pub seed: u64,
    pub mode: Mode,
    pub matrix: AccuracyMatrix,
    /// Final-row accuracies (the diagonal for reference runs).
    pub finals: Vec<f64>,
}

impl ModeRun {
    fn from_outcome(o: &RunOutcome) -> Self {
        let finals = if o.mode == Mode::Reference {
            o.matrix.diagonal().into_iter().flatten().collect()
        } else {
            o.matrix.final_row().unwrap_or_default()
        };
        Self { seed: o.seed, mode: o.mode, matrix: o.matrix.clone(), finals }
    }

    pub fn mean(&self) -> f64 {
        mean(&self.finals)
    }

    /// Mean final accuracy over every task but the last.
    pub fn retained(&self) -> f64 {
        match self.finals.len() {
            0 => f64::NAN,
            1 => self.finals[0],
            n => mean(&self.finals[..n - 1]),
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Every requested mode run on every seed, seed-major.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub seeds: Vec<u64>,
    pub modes: Vec<Mode>,
    pub runs: Vec<ModeRun>,
}

impl Comparison {
    pub fn get(&self, seed: u64, mode: Mode) -> Option<&ModeRun> {
        self.runs.iter().find(|r| r.seed == seed && r.mode == mode)
    }

    pub fn runs_of(&self, mode: Mode) -> Vec<&ModeRun> {
        self.seeds.iter().filter_map(|&s| self.get(s, mode)).collect()
    }
}

/// Runs `modes` on each seed. Within a seed the tasks are built once and the
/// first task is trained once, since no mode differs before it ends. Seeds
/// run in parallel; with an output directory each run writes to
/// `seed_<s>/<mode>/`.
pub fn run_comparison(base: &RunConfig, seeds: &[u64], modes: &[Mode]) -> Result<Comparison> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    if modes.is_empty() {
        return Err(Error::Config("at least one mode is required".into()));
    }
    base.validate()?;
    let per_seed: Vec<Vec<ModeRun>> = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = base.with_seed(seed);
            let tasks = cfg.tasks.build(seed)?;
            let first = train_first(&cfg, &tasks)?;
            modes
                .iter()
                .map(|&mode| {
                    let mut run_cfg = cfg.with_mode(mode);
                    run_cfg.output_dir = base.output_dir.as_ref().map(|root| run_dir(root, seed, mode));
                    run_on_tasks(&run_cfg, &tasks, Some(&first)).map(|o| ModeRun::from_outcome(&o))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(Comparison { seeds: seeds.to_vec(), modes: modes.to_vec(), runs: per_seed.into_iter().flatten().collect() })
}

/// Per-mode final accuracy per task, averaged over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub tasks: usize,
    pub rows: Vec<(Mode, Vec<f64>, f64)>,
}

impl AblationTable {
    pub fn from_comparison(c: &Comparison, modes: &[Mode]) -> Result<Self> {
        let mut rows = Vec::with_capacity(modes.len());
        let mut tasks = 0;
        for &mode in modes {
            let runs = c.runs_of(mode);
            if runs.is_empty() {
                return Err(Error::Config(format!("no runs for mode {mode}")));
            }
            tasks = runs[0].finals.len();
            let per_task: Vec<f64> = (0..tasks).map(|j| mean(&runs.iter().map(|r| r.finals[j]).collect::<Vec<_>>())).collect();
            let m = mean(&per_task);
            rows.push((mode, per_task, m));
        }
        Ok(Self { tasks, rows })
    }

    /// `mode,task_0,..,mean`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode");
        for j in 0..self.tasks {
            let _ = write!(out, ",task_{j}");
        }
        out.push_str(",mean\n");
        for (mode, vals, m) in &self.rows {
            out.push_str(mode.name());
            for v in vals {
                let _ = write!(out, ",{}", fmt_value(*v));
            }
            let _ = writeln!(out, ",{}", fmt_value(*m));
        }
        out
    }
}

/// `seed,mode,task_0,..,mean,retained`, one row per run.
pub fn per_seed_csv(c: &Comparison) -> String {
    let tasks = c.runs.first().map_or(0, |r| r.finals.len());
    let mut out = String::from("seed,mode");
    for j in 0..tasks {
        let _ = write!(out, ",task_{j}");
    }
    out.push_str(",mean,retained\n");
    for r in &c.runs {
        let _ = write!(out, "{},{}", r.seed, r.mode);
        for v in &r.finals {
            let _ = write!(out, ",{}", fmt_value(*v));
        }
        let _ = writeln!(out, ",{},{}", fmt_value(r.mean()), fmt_value(r.retained()));
    }
    out
}

/// The four-way comparison of importance estimators and accumulation
/// rules. Writes `ablation.csv` and `ablation_seeds.csv` when the base
/// config has an output directory.
pub fn run_ablation(base: &RunConfig, seeds: &[u64]) -> Result<(AblationTable, Comparison)> {
    let comparison = run_comparison(base, seeds, &Mode::ABLATION)?;
    let table = AblationTable::from_comparison(&comparison, &Mode::ABLATION)?;
    if let Some(root) = &base.output_dir {
        write_text(&root.join("ablation.csv"), &table.to_csv())?;
        write_text(&root.join("ablation_seeds.csv"), &per_seed_csv(&comparison))?;
    }
    Ok((table, comparison))
}
