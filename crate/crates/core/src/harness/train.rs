use rand::seq::SliceRandom;
use serde::Serialize;

use super::config::{RunConfig, Selection};
use crate::autodiff::Evaluator;
use crate::consolidation::{Consolidator, ImportanceHistory};
use crate::error::{Error, Result};
use crate::models::{accuracy, ModelSpec};
use crate::params::ParamVector;
use crate::rng::{rng_for, stream};
use crate::tasks::{Split, TaskDataset};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's minibatches.
    pub train_loss: f64,
    /// Mean consolidation penalty over the epoch's minibatches.
    pub penalty: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamVector<f64>,
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub selected_epoch: usize,
}

/// Minibatch SGD on mean cross-entropy, plus the consolidation penalty when
/// the mode is regularized and `history` is non-empty.
pub fn train_task(
    params: ParamVector<f64>,
    spec: &ModelSpec,
    task: &TaskDataset,
    cfg: &RunConfig,
    history: &ImportanceHistory<f64>,
) -> Result<TrainOutcome> {
    if !history.is_empty() && !cfg.mode.is_regularized() {
        return Err(Error::Config(format!("mode {} takes no importance history", cfg.mode)));
    }
    let consolidator = if history.is_empty() {
        None
    } else {
        Some(Consolidator::new(&params, history, &cfg.regularizer_config())?)
    };

    let scale = cfg.tasks.pixel_scale;
    let (train_x, train_y) = task.split_data::<f64>(Split::Train, scale)?;
    let (val_x, val_y) = task.split_data::<f64>(Split::Val, scale)?;
    let lr = cfg.learning_rate(task.task_id);
    let n = train_y.len();
    let mut ev = Evaluator::<f64>::new(spec)?;
    let mut theta = params;
    let mut grad = vec![0.0; theta.len()];
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamVector<f64>)> = None;

    for epoch in 0..cfg.epochs {
        let mut rng = rng_for(cfg.seed, &[stream::SHUFFLE, task.task_id as u64, epoch as u64]);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut pen_sum, mut batches) = (0.0, 0.0, 0usize);
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let inv = 1.0 / rows.len() as f64;
            let diverged = |loss: f64| Error::Divergence { task: task.task_id, epoch, batch: b, loss };
            let ce = match ev.cross_entropy_accumulate(theta.values(), &train_x, train_y.as_slice(), rows, inv, &mut grad) {
                Ok(s) => s * inv,
                Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            let pen = match &consolidator {
                Some(c) => {
                    c.add_grad(theta.values(), &mut grad);
                    c.penalty(theta.values())
                }
                None => 0.0,
            };
            let loss = ce + pen;
            if !loss.is_finite() {
                return Err(diverged(loss));
            }
            for (t, g) in theta.values_mut().iter_mut().zip(&grad) {
                *t -= lr * g;
            }
            if theta.values().iter().any(|v| !v.is_finite()) {
                return Err(diverged(loss));
            }
            loss_sum += ce;
            pen_sum += pen;
            batches += 1;
        }
        let val_accuracy = match accuracy(&theta, spec, &val_x, &val_y) {
            Err(Error::NonFinite { .. }) => {
                return Err(Error::Divergence { task: task.task_id, epoch, batch: batches - 1, loss: f64::NAN })
            }
            other => other?,
        };
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            penalty: pen_sum / batches as f64,
            val_accuracy,
        });
        let better = match (&best, cfg.selection) {
            (_, Selection::LastEpoch) | (None, _) => true,
            (Some((b, _, _)), Selection::BestVal) => val_accuracy > *b,
        };
        if better {
            best = Some((val_accuracy, epoch, theta.clone()));
        }
    }
    let (_, selected_epoch, params) = best.expect("at least one epoch");
    Ok(TrainOutcome { params, log, selected_epoch })
}
