use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::Serialize;

use super::config::{Mode, RunConfig};
use super::metrics::{fmt_value, forgetting_metrics, reference_metrics_csv, retained_accuracy, AccuracyMatrix, ForgettingMetrics};
use super::train::{train_task, EpochLog, TrainOutcome};
use crate::consolidation::ImportanceHistory;
use crate::error::{Error, Result};
use crate::importance::{apie_importance, mas_importance, Estimator, ImportanceVector};
use crate::models::{accuracy, init_params, Checkpoint, LabelVector};
use crate::params::ParamVector;
use crate::rng::{mix_seed, rng_for, stream};
use crate::tasks::{EmbedReport, Split, TaskDataset};
use crate::tensor::Tensor;

/// Name of the marker file left in a run directory that did not finish.
pub const FAILED_MARKER: &str = "FAILED";

#[derive(Debug, Clone)]
pub struct TaskRecord {
    pub task: usize,
    pub log: Vec<EpochLog>,
    pub selected_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub mode: Mode,
    pub seed: u64,
    pub matrix: AccuracyMatrix,
    /// Absent for reference runs.
    pub metrics: Option<ForgettingMetrics>,
    pub retained: Option<f64>,
    pub history: ImportanceHistory<f64>,
    pub final_params: ParamVector<f64>,
    pub records: Vec<TaskRecord>,
}

/// Builds the configured tasks and trains through them.
pub fn run_sequence(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let tasks = match cfg.tasks.build(cfg.seed) {
        Ok(t) => t,
        Err(e) => {
            if let Some(dir) = &cfg.output_dir {
                mark_failed(dir, &e);
            }
            return Err(e);
        }
    };
    run_on_tasks(cfg, &tasks, None)
}

/// Seed of the fresh model for task `t`. Task 0 shares the sequential
/// initialization so every mode agrees on it.
fn init_seed(cfg: &RunConfig, t: usize) -> u64 {
    if cfg.mode == Mode::Reference && t > 0 {
        mix_seed(cfg.seed, &[stream::REFERENCE, t as u64])
    } else {
        cfg.seed
    }
}

/// Trains the first task; identical for every mode given the same config.
pub(crate) fn train_first(cfg: &RunConfig, tasks: &[TaskDataset]) -> Result<TrainOutcome> {
    let params = init_params(&cfg.model, init_seed(cfg, 0))?;
    train_task(params, &cfg.model, &tasks[0], cfg, &ImportanceHistory::new())
}

/// Trains through prebuilt `tasks`, optionally reusing an already trained
/// first task. Artifacts go to `cfg.output_dir` when set; on error the
/// directory gets a `FAILED` marker.
pub(crate) fn run_on_tasks(cfg: &RunConfig, tasks: &[TaskDataset], first: Option<&TrainOutcome>) -> Result<RunOutcome> {
    let out = cfg.output_dir.as_deref();
    if let Some(dir) = out {
        crate::io::create_dir(dir)?;
        let marker = dir.join(FAILED_MARKER);
        if marker.exists() {
            std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
        }
    }
    let result = run_inner(cfg, tasks, first, out);
    if let (Err(e), Some(dir)) = (&result, out) {
        mark_failed(dir, e);
    }
    result
}

fn mark_failed(dir: &Path, err: &Error) {
    // Best effort: the original error is what the caller reports.
    let _ = crate::io::write_bytes(&dir.join(FAILED_MARKER), format!("{err}\n").as_bytes());
}

#[derive(Serialize)]
struct RunManifest<'a> {
    version: &'static str,
    config: &'a RunConfig,
    tasks: Vec<TaskSummary>,
}

#[derive(Serialize)]
struct TaskSummary {
    task_id: usize,
    scheme: String,
    seed: u64,
    pairs: usize,
    embedding: EmbedReport,
}

fn run_inner(cfg: &RunConfig, tasks: &[TaskDataset], first: Option<&TrainOutcome>, out: Option<&Path>) -> Result<RunOutcome> {
    if tasks.is_empty() {
        return Err(Error::Empty("task sequence"));
    }
    if let Some(dir) = out {
        let manifest = RunManifest {
            version: env!("CARGO_PKG_VERSION"),
            config: cfg,
            tasks: tasks
                .iter()
                .map(|t| TaskSummary {
                    task_id: t.task_id,
                    scheme: t.scheme.label(),
                    seed: t.seed,
                    pairs: t.pair_count(),
                    embedding: t.embedding,
                })
                .collect(),
        };
        crate::io::write_json(&dir.join("run_manifest.json"), &manifest)?;
    }

    let scale = cfg.tasks.pixel_scale;
    let tests: Vec<(Tensor<f64>, LabelVector)> =
        tasks.iter().map(|t| t.split_data(Split::Test, scale)).collect::<Result<_>>()?;
    let spec = &cfg.model;
    let mut matrix = AccuracyMatrix::new(tasks.len());
    let mut history = ImportanceHistory::new();
    let mut records = Vec::with_capacity(tasks.len());
    let mut params = init_params::<f64>(spec, init_seed(cfg, 0))?;

    for (t, task) in tasks.iter().enumerate() {
        if cfg.mode == Mode::Reference {
            params = init_params(spec, init_seed(cfg, t))?;
        }
        let trained = match (t, first) {
            (0, Some(f)) => f.clone(),
            _ => train_task(params, spec, task, cfg, &history)?,
        };
        params = trained.params;
        records.push(TaskRecord { task: t, log: trained.log, selected_epoch: trained.selected_epoch });

        let seen = if cfg.mode == Mode::Reference { t..t + 1 } else { 0..t + 1 };
        for j in seen {
            matrix.set(t, j, accuracy(&params, spec, &tests[j].0, &tests[j].1)?)?;
        }
        if let Some(dir) = out {
            Checkpoint::new(spec.clone(), params.clone())?.save(&dir.join("checkpoints").join(format!("task_{t:03}.ckpt")))?;
        }
        if let Some(estimator) = cfg.mode.estimator() {
            let imp = estimate_importance(cfg, task, &params, estimator)?;
            history.push(imp, params.clone())?;
            if let Some(dir) = out {
                history.save(&dir.join("importance"), spec)?;
            }
        }
    }

    let (metrics, retained) = if cfg.mode == Mode::Reference {
        (None, None)
    } else {
        (Some(forgetting_metrics(&matrix)?), retained_accuracy(&matrix))
    };
    if let Some(dir) = out {
        write_text(&dir.join("accuracy_matrix.csv"), &matrix.to_csv())?;
        let metrics_csv = match &metrics {
            Some(m) => m.to_csv(retained),
            None => reference_metrics_csv(&matrix),
        };
        write_text(&dir.join("metrics.csv"), &metrics_csv)?;
        write_text(&dir.join("training_log.csv"), &training_log_csv(&records))?;
    }
    Ok(RunOutcome { mode: cfg.mode, seed: cfg.seed, matrix, metrics, retained, history, final_params: params, records })
}

/// Importance on `n_importance` training images drawn without replacement.
fn estimate_importance(cfg: &RunConfig, task: &TaskDataset, params: &ParamVector<f64>, estimator: Estimator) -> Result<ImportanceVector<f64>> {
    let train = task.splits.get(Split::Train);
    let amount = cfg.n_importance.min(train.len());
    let mut rng = rng_for(cfg.seed, &[stream::IMPORTANCE, task.task_id as u64]);
    let picked: Vec<usize> = index::sample(&mut rng, train.len(), amount).into_iter().map(|i| train[i]).collect();
    let (x, _) = task.subset::<f64>(&picked, cfg.tasks.pixel_scale)?;
    let samples: Vec<Tensor<f64>> = (0..x.rows()).map(|r| x.row_tensor(r)).collect();
    let imp = match estimator {
        Estimator::Mas => mas_importance(params, &cfg.model, &samples)?,
        Estimator::Apie => apie_importance(params, &cfg.model, &samples, cfg.hessian_method)?,
    };
    Ok(imp.with_source_task(task.task_id))
}

fn training_log_csv(records: &[TaskRecord]) -> String {
    let mut out = String::from("task,epoch,train_loss,penalty,val_accuracy,selected\n");
    for r in records {
        for e in &r.log {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.task,
                e.epoch,
                fmt_value(e.train_loss),
                fmt_value(e.penalty),
                fmt_value(e.val_accuracy),
                u8::from(e.epoch == r.selected_epoch)
            );
        }
    }
    out
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    crate::io::write_bytes(path, text.as_bytes())
}

/// Directory of one run inside an ablation output root.
pub fn run_dir(root: &Path, seed: u64, mode: Mode) -> PathBuf {
    root.join(format!("seed_{seed}")).join(mode.name())
}
