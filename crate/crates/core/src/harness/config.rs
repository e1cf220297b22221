use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::HessianMethod;
use crate::consolidation::{Accumulation, RegularizerConfig};
use crate::error::{Error, Result};
use crate::importance::Estimator;
use crate::models::ModelSpec;
use crate::params::LambdaGroup;
use crate::tasks::SequenceSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Plain sequential SGD, no penalty.
    Finetune,
    /// A fresh model per task; only own-task accuracy is reported.
    Reference,
    /// MAS importance, summed across tasks.
    Mas,
    /// Curvature importance with Peak-Weight accumulation.
    ApieFull,
    /// Curvature importance, summed across tasks.
    ApieCurvatureOnly,
    /// MAS importance with Peak-Weight accumulation.
    ApiePeakweightOnly,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Finetune,
        Mode::Reference,
        Mode::Mas,
        Mode::ApieFull,
        Mode::ApieCurvatureOnly,
        Mode::ApiePeakweightOnly,
    ];

    /// Modes compared by the ablation table, in row order.
    pub const ABLATION: [Mode; 4] = [Mode::Mas, Mode::ApieCurvatureOnly, Mode::ApiePeakweightOnly, Mode::ApieFull];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Finetune => "finetune",
            Mode::Reference => "reference",
            Mode::Mas => "mas",
            Mode::ApieFull => "apie-full",
            Mode::ApieCurvatureOnly => "apie-curvature-only",
            Mode::ApiePeakweightOnly => "apie-peakweight-only",
        }
    }

    pub fn estimator(self) -> Option<Estimator> {
        match self {
            Mode::Mas | Mode::ApiePeakweightOnly => Some(Estimator::Mas),
            Mode::ApieFull | Mode::ApieCurvatureOnly => Some(Estimator::Apie),
            Mode::Finetune | Mode::Reference => None,
        }
    }

    pub fn accumulation(self) -> Option<Accumulation> {
        match self {
            Mode::Mas | Mode::ApieCurvatureOnly => Some(Accumulation::MasSum),
            Mode::ApieFull | Mode::ApiePeakweightOnly => Some(Accumulation::PeakWeight),
            Mode::Finetune | Mode::Reference => None,
        }
    }

    pub fn is_regularized(self) -> bool {
        self.estimator().is_some()
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

/// Which parameters a task hands to the next one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// The epoch with the highest validation accuracy (earliest on ties).
    #[default]
    BestVal,
    LastEpoch,
}

/// Penalty settings shared by every regularized mode; the accumulation rule
/// comes from the mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Regularization {
    #[serde(default = "default_lambda")]
    pub lambda_per_group: BTreeMap<LambdaGroup, f64>,
    #[serde(default = "half")]
    pub alpha: f64,
    #[serde(default = "half")]
    pub beta: f64,
}

fn default_lambda() -> BTreeMap<LambdaGroup, f64> {
    RegularizerConfig::default().lambda_per_group
}

fn half() -> f64 {
    0.5
}

impl Default for Regularization {
    fn default() -> Self {
        Self { lambda_per_group: default_lambda(), alpha: 0.5, beta: 0.5 }
    }
}

fn default_mode() -> Mode {
    Mode::ApieFull
}
fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    0.01
}
fn default_factor() -> f64 {
    0.2
}
fn default_n_importance() -> usize {
    256
}
fn default_hessian() -> HessianMethod {
    HessianMethod::ExactAnalytic
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "ModelSpec::default_mini_cnn")]
    pub model: ModelSpec,
    #[serde(default)]
    pub tasks: SequenceSpec,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr_initial: f64,
    #[serde(default = "default_factor")]
    pub lr_later_factor: f64,
    #[serde(default)]
    pub regularizer: Regularization,
    #[serde(default = "default_n_importance")]
    pub n_importance: usize,
    #[serde(default = "default_hessian")]
    pub hessian_method: HessianMethod,
    #[serde(default)]
    pub selection: Selection,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

impl RunConfig {
    /// Reads a JSON config. Unknown keys are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.tasks.validate()?;
        if self.model.input_shape != self.tasks.size {
            return Err(Error::Config(format!(
                "model input shape {:?} does not match task image size {:?}",
                self.model.input_shape, self.tasks.size
            )));
        }
        if self.model.num_classes != 2 {
            return Err(Error::Config("detectors must have exactly 2 classes".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return Err(Error::Config(format!("lr_initial must be positive, got {}", self.lr_initial)));
        }
        if !(self.lr_later_factor > 0.0 && self.lr_later_factor <= 1.0) {
            return Err(Error::Config(format!(
                "lr_later_factor must lie in (0, 1], got {}",
                self.lr_later_factor
            )));
        }
        if self.n_importance == 0 {
            return Err(Error::Config("n_importance must be >= 1".into()));
        }
        self.regularizer_config().validate()
    }

    /// The regularizer for this config's mode. Non-regularized modes get the
    /// configured values anyway; they simply never use them.
    pub fn regularizer_config(&self) -> RegularizerConfig {
        RegularizerConfig {
            lambda_per_group: self.regularizer.lambda_per_group.clone(),
            alpha: self.regularizer.alpha,
            beta: self.regularizer.beta,
            accumulation: self.mode.accumulation().unwrap_or_default(),
        }
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        Self { mode, ..self.clone() }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// Learning rate for a task: the initial rate on the first task and for
    /// every fresh reference model, the reduced rate afterwards.
    pub fn learning_rate(&self, task: usize) -> f64 {
        if task == 0 || self.mode == Mode::Reference {
            self.lr_initial
        } else {
            self.lr_initial * self.lr_later_factor
        }
    }

    /// Multiplies every λ by `factor`.
    pub fn scale_lambdas(&mut self, factor: f64) {
        for v in self.regularizer.lambda_per_group.values_mut() {
            *v *= factor;
        }
    }
}
