//! Cross-task importance accumulation and the quadratic consolidation
//! penalty `Σ_i λ_group(i) · Ω_i · (θ_i − θ*_i)²`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::{Estimator, ImportanceVector};
use crate::models::{Checkpoint, ModelSpec};
use crate::params::{GradVector, LambdaGroup, ParamVector};
use crate::scalar::Scalar;

/// How per-task importance vectors are folded into one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Accumulation {
    /// Elementwise sum over tasks.
    #[default]
    MasSum,
    /// `α · max + β · mean` over tasks.
    PeakWeight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerConfig {
    #[serde(default = "default_lambda")]
    pub lambda_per_group: BTreeMap<LambdaGroup, f64>,
    #[serde(default = "half")]
    pub alpha: f64,
    #[serde(default = "half")]
    pub beta: f64,
    #[serde(default)]
    pub accumulation: Accumulation,
}

fn default_lambda() -> BTreeMap<LambdaGroup, f64> {
    BTreeMap::from([(LambdaGroup::Feature, 1.2), (LambdaGroup::Head, 1.0)])
}

fn half() -> f64 {
    0.5
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            lambda_per_group: default_lambda(),
            alpha: 0.5,
            beta: 0.5,
            accumulation: Accumulation::MasSum,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        for (g, l) in &self.lambda_per_group {
            if !(*l >= 0.0) || !l.is_finite() {
                return Err(Error::Config(format!("lambda for group {g} must be finite and >= 0, got {l}")));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// λ for a group; groups missing from the map are unregularized.
    pub fn lambda(&self, group: LambdaGroup) -> f64 {
        self.lambda_per_group.get(&group).copied().unwrap_or(0.0)
    }

    pub fn with_all_lambdas(mut self, value: f64) -> Self {
        for v in self.lambda_per_group.values_mut() {
            *v = value;
        }
        self
    }
}

/// Importance vectors of every completed task, in training order, plus the
/// parameter snapshot taken when the latest task finished.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceHistory<T> {
    per_task: Vec<ImportanceVector<T>>,
    anchor: Option<ParamVector<T>>,
}

impl<T: Scalar> Default for ImportanceHistory<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ImportanceHistory<T> {
    pub fn new() -> Self {
        Self { per_task: Vec::new(), anchor: None }
    }

    /// Builds a history directly; all entries must share layout and estimator.
    pub fn from_parts(per_task: Vec<ImportanceVector<T>>, anchor: Option<ParamVector<T>>) -> Result<Self> {
        let mut h = Self::new();
        for imp in per_task {
            h.push_importance(imp)?;
        }
        if let Some(a) = anchor {
            h.set_anchor(a)?;
        }
        Ok(h)
    }

    fn push_importance(&mut self, imp: ImportanceVector<T>) -> Result<()> {
        if let Some(first) = self.per_task.first() {
            if first.len() != imp.len() {
                return Err(Error::Layout(format!(
                    "importance length {} differs from history length {}",
                    imp.len(),
                    first.len()
                )));
            }
            if first.estimator != imp.estimator {
                return Err(Error::Layout("importance estimators differ within one history".into()));
            }
        }
        self.per_task.push(imp);
        Ok(())
    }

    fn set_anchor(&mut self, anchor: ParamVector<T>) -> Result<()> {
        if let Some(first) = self.per_task.first() {
            if first.len() != anchor.len() {
                return Err(Error::Layout("anchor length differs from importance length".into()));
            }
        }
        self.anchor = Some(anchor);
        Ok(())
    }

    /// Records a finished task: its importance and the parameters at its end.
    pub fn push(&mut self, importance: ImportanceVector<T>, anchor: ParamVector<T>) -> Result<()> {
        if anchor.len() != importance.len() {
            return Err(Error::Layout("anchor length differs from importance length".into()));
        }
        self.push_importance(importance)?;
        self.anchor = Some(anchor);
        Ok(())
    }

    pub fn per_task(&self) -> &[ImportanceVector<T>] {
        &self.per_task
    }

    pub fn anchor(&self) -> Option<&ParamVector<T>> {
        self.anchor.as_ref()
    }

    pub fn len(&self) -> usize {
        self.per_task.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_task.is_empty()
    }

    pub fn estimator(&self) -> Option<Estimator> {
        self.per_task.first().map(|i| i.estimator)
    }

    /// Writes `task_000.imp`, `task_001.imp`, … and `anchor.ckpt` into `dir`.
    pub fn save(&self, dir: &Path, spec: &ModelSpec) -> Result<()> {
        crate::io::create_dir(dir)?;
        for (t, imp) in self.per_task.iter().enumerate() {
            imp.save(&dir.join(format!("task_{t:03}.imp")))?;
        }
        if let Some(anchor) = &self.anchor {
            Checkpoint::new(spec.clone(), anchor.clone())?.save(&dir.join("anchor.ckpt"))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut per_task = Vec::new();
        loop {
            let path = dir.join(format!("task_{:03}.imp", per_task.len()));
            if !path.exists() {
                break;
            }
            per_task.push(ImportanceVector::load(&path)?);
        }
        let anchor_path = dir.join("anchor.ckpt");
        let anchor = if anchor_path.exists() {
            Some(Checkpoint::<T>::load(&anchor_path)?.params)
        } else {
            None
        };
        Self::from_parts(per_task, anchor).map_err(|e| Error::format(dir, e))
    }
}

fn effective_meta<T: Scalar>(history: &ImportanceHistory<T>) -> Result<&ImportanceVector<T>> {
    history.per_task.last().ok_or(Error::Empty("importance history"))
}

/// Elementwise sum of every task's importance.
pub fn accumulate_mas<T: Scalar>(history: &ImportanceHistory<T>) -> Result<ImportanceVector<T>> {
    let last = effective_meta(history)?;
    let mut acc = vec![T::zero(); last.len()];
    for imp in &history.per_task {
        for (a, v) in acc.iter_mut().zip(&imp.values) {
            *a = *a + *v;
        }
    }
    ImportanceVector::new(acc, last.source_task, last.estimator, last.n_samples)
}

/// `α · max_t Ω_t + β · mean_t Ω_t`, elementwise.
pub fn peak_weight<T: Scalar>(history: &ImportanceHistory<T>, alpha: f64, beta: f64) -> Result<ImportanceVector<T>> {
    let last = effective_meta(history)?;
    if !(alpha >= 0.0 && beta >= 0.0) {
        return Err(Error::Config(format!("alpha and beta must be >= 0, got {alpha}, {beta}")));
    }
    let n = last.len();
    let mut peak = vec![T::zero(); n];
    let mut sum = vec![T::zero(); n];
    for imp in &history.per_task {
        for i in 0..n {
            peak[i] = peak[i].max(imp.values[i]);
            sum[i] = sum[i] + imp.values[i];
        }
    }
    let k = T::of(history.per_task.len() as f64);
    let (a, b) = (T::of(alpha), T::of(beta));
    let values = peak
        .into_iter()
        .zip(sum)
        .map(|(p, s)| a * p + b * (s / k))
        .collect();
    ImportanceVector::new(values, last.source_task, last.estimator, last.n_samples)
}

/// `Ω_eff` under the configured accumulation.
pub fn effective_importance<T: Scalar>(history: &ImportanceHistory<T>, cfg: &RegularizerConfig) -> Result<ImportanceVector<T>> {
    match cfg.accumulation {
        Accumulation::MasSum => accumulate_mas(history),
        Accumulation::PeakWeight => peak_weight(history, cfg.alpha, cfg.beta),
    }
}

/// Precomputed per-coordinate weights `λ_group(i) · Ω_eff,i` and the anchor.
/// Built once per task; evaluates the penalty and its gradient cheaply.
#[derive(Debug, Clone)]
pub struct Consolidator<T> {
    weights: Vec<T>,
    anchor: Vec<T>,
}

impl<T: Scalar> Consolidator<T> {
    pub fn new(theta: &ParamVector<T>, history: &ImportanceHistory<T>, cfg: &RegularizerConfig) -> Result<Self> {
        cfg.validate()?;
        let anchor = history
            .anchor()
            .ok_or_else(|| Error::Layout("importance history has no anchor".into()))?;
        if !theta.same_layout(anchor) {
            return Err(Error::Layout("parameter layout differs from the anchor's".into()));
        }
        let omega = effective_importance(history, cfg)?;
        if omega.len() != theta.len() {
            return Err(Error::Layout(format!(
                "importance length {} differs from parameter length {}",
                omega.len(),
                theta.len()
            )));
        }
        let weights = theta
            .groups()
            .into_iter()
            .zip(&omega.values)
            .map(|(g, &w)| T::of(cfg.lambda(g)) * w)
            .collect();
        Ok(Self { weights, anchor: anchor.values().to_vec() })
    }

    pub fn penalty(&self, theta: &[T]) -> T {
        self.weights
            .iter()
            .zip(theta.iter().zip(&self.anchor))
            .fold(T::zero(), |acc, (&w, (&t, &a))| {
                let d = t - a;
                acc + w * d * d
            })
    }

    /// Adds `2 λ Ω (θ − θ*)` into `grad`.
    pub fn add_grad(&self, theta: &[T], grad: &mut [T]) {
        let two = T::of(2.0);
        for i in 0..grad.len() {
            grad[i] = grad[i] + two * self.weights[i] * (theta[i] - self.anchor[i]);
        }
    }
}

pub fn penalty<T: Scalar>(theta: &ParamVector<T>, history: &ImportanceHistory<T>, cfg: &RegularizerConfig) -> Result<T> {
    Ok(Consolidator::new(theta, history, cfg)?.penalty(theta.values()))
}

pub fn penalty_grad<T: Scalar>(
    theta: &ParamVector<T>,
    history: &ImportanceHistory<T>,
    cfg: &RegularizerConfig,
) -> Result<GradVector<T>> {
    let c = Consolidator::new(theta, history, cfg)?;
    let mut g = vec![T::zero(); theta.len()];
    c.add_grad(theta.values(), &mut g);
    Ok(GradVector(g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Segment;
    use proptest::prelude::*;

    fn layout(n: usize) -> Vec<Segment> {
        vec![Segment { name: "w".into(), offset: 0, len: n, group: LambdaGroup::Head }]
    }

    fn imp(v: &[f64]) -> ImportanceVector<f64> {
        ImportanceVector::new(v.to_vec(), 0, Estimator::Mas, 1).unwrap()
    }

    fn history(tasks: &[&[f64]]) -> ImportanceHistory<f64> {
        let n = tasks[0].len();
        let anchor = ParamVector::new(vec![0.0; n], layout(n)).unwrap();
        ImportanceHistory::from_parts(tasks.iter().map(|t| imp(t)).collect(), Some(anchor)).unwrap()
    }

    #[test]
    fn mas_sum_examples() {
        assert_eq!(accumulate_mas(&history(&[&[1.0, 2.0]])).unwrap().values, vec![1.0, 2.0]);
        assert_eq!(accumulate_mas(&history(&[&[1.0, 2.0], &[3.0, 0.0]])).unwrap().values, vec![4.0, 2.0]);
        let v: &[f64] = &[0.5, 1.25];
        assert_eq!(accumulate_mas(&history(&[v, v, v])).unwrap().values, vec![1.5, 3.75]);
        assert!(accumulate_mas(&ImportanceHistory::<f64>::new()).is_err());
    }

    #[test]
    fn peak_weight_examples() {
        assert_eq!(peak_weight(&history(&[&[5.0]]), 0.5, 0.5).unwrap().values, vec![5.0]);
        assert_eq!(peak_weight(&history(&[&[4.0], &[2.0]]), 0.5, 0.5).unwrap().values, vec![3.5]);
        let h = history(&[&[1.0, 7.0], &[3.0, 2.0], &[2.0, 9.0]]);
        assert_eq!(peak_weight(&h, 1.0, 0.0).unwrap().values, vec![3.0, 9.0]);
        assert_eq!(peak_weight(&h, 0.0, 3.0).unwrap().values, accumulate_mas(&h).unwrap().values);
        assert!(peak_weight(&ImportanceHistory::<f64>::new(), 0.5, 0.5).is_err());
    }

    #[test]
    fn mixed_estimators_rejected() {
        let a = imp(&[1.0]);
        let b = ImportanceVector::new(vec![1.0], 1, Estimator::Apie, 1).unwrap();
        assert!(ImportanceHistory::from_parts(vec![a, b], None).is_err());
        assert!(ImportanceHistory::from_parts(vec![imp(&[1.0]), imp(&[1.0, 2.0])], None).is_err());
    }

    fn single(theta: f64, anchor: f64, omega: f64, lambda: f64) -> (ParamVector<f64>, ImportanceHistory<f64>, RegularizerConfig) {
        let a = ParamVector::new(vec![anchor], layout(1)).unwrap();
        let h = ImportanceHistory::from_parts(vec![imp(&[omega])], Some(a)).unwrap();
        let cfg = RegularizerConfig::default().with_all_lambdas(lambda);
        (ParamVector::new(vec![theta], layout(1)).unwrap(), h, cfg)
    }

    #[test]
    fn penalty_examples() {
        let (t, h, c) = single(1.5, 1.0, 2.0, 1.0);
        assert_eq!(penalty(&t, &h, &c).unwrap(), 0.5);
        assert_eq!(penalty_grad(&t, &h, &c).unwrap().values(), &[2.0]);
        let (t, h, c) = single(1.0, 1.0, 2.0, 1.0);
        assert_eq!(penalty(&t, &h, &c).unwrap(), 0.0);
        assert_eq!(penalty_grad(&t, &h, &c).unwrap().values(), &[0.0]);
        let (t, h, c) = single(4.0, 1.0, 2.0, 0.0);
        assert_eq!(penalty(&t, &h, &c).unwrap(), 0.0);
    }

    #[test]
    fn per_group_lambda_applies() {
        let segs = vec![
            Segment { name: "a".into(), offset: 0, len: 1, group: LambdaGroup::Feature },
            Segment { name: "b".into(), offset: 1, len: 1, group: LambdaGroup::Head },
        ];
        let anchor = ParamVector::new(vec![0.0, 0.0], segs.clone()).unwrap();
        let h = ImportanceHistory::from_parts(vec![imp(&[1.0, 1.0])], Some(anchor)).unwrap();
        let theta = ParamVector::new(vec![1.0, 1.0], segs).unwrap();
        let cfg = RegularizerConfig::default();
        assert!((penalty(&theta, &h, &cfg).unwrap() - 2.2).abs() < 1e-15);
    }

    #[test]
    fn layout_mismatch_and_missing_anchor() {
        let (_, h, c) = single(1.0, 1.0, 1.0, 1.0);
        let wrong = ParamVector::new(vec![1.0, 2.0], layout(2)).unwrap();
        assert!(matches!(penalty(&wrong, &h, &c), Err(Error::Layout(_))));
        let no_anchor = ImportanceHistory::from_parts(vec![imp(&[1.0])], None).unwrap();
        let t = ParamVector::new(vec![1.0], layout(1)).unwrap();
        assert!(penalty(&t, &no_anchor, &c).is_err());
    }

    #[test]
    fn history_persists_with_stable_names() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::linear(2, 1, true);
        let anchor = ParamVector::new(vec![0.1, -0.2, 0.3], spec.segments().unwrap()).unwrap();
        let mut h = ImportanceHistory::new();
        h.push(ImportanceVector::new(vec![1.0, 2.0, 3.0], 0, Estimator::Apie, 4).unwrap(), anchor.clone())
            .unwrap();
        h.push(ImportanceVector::new(vec![0.1, 0.2, 1.0 / 3.0], 1, Estimator::Apie, 4).unwrap(), anchor)
            .unwrap();
        h.save(dir.path(), &spec).unwrap();
        for f in ["task_000.imp", "task_001.imp", "anchor.ckpt"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert_eq!(ImportanceHistory::<f64>::load(dir.path()).unwrap(), h);
    }

    proptest! {
        #[test]
        fn penalty_properties(
            theta in prop::collection::vec(-3.0f64..3.0, 4),
            anchor in prop::collection::vec(-3.0f64..3.0, 4),
            omegas in prop::collection::vec(prop::collection::vec(0.0f64..5.0, 4), 1..4),
            c in 0.1f64..10.0,
        ) {
            let a = ParamVector::new(anchor, layout(4)).unwrap();
            let hist = ImportanceHistory::from_parts(omegas.iter().map(|o| imp(o)).collect(), Some(a.clone())).unwrap();
            let scaled = ImportanceHistory::from_parts(
                omegas.iter().map(|o| imp(&o.iter().map(|v| v * c).collect::<Vec<_>>())).collect(),
                Some(a.clone()),
            ).unwrap();
            let t = ParamVector::new(theta, layout(4)).unwrap();
            for acc in [Accumulation::MasSum, Accumulation::PeakWeight] {
                let cfg = RegularizerConfig { accumulation: acc, ..Default::default() };
                let p = penalty(&t, &hist, &cfg).unwrap();
                prop_assert!(p >= 0.0);
                let ps = penalty(&t, &scaled, &cfg).unwrap();
                prop_assert!((ps - c * p).abs() <= 1e-12 * (1.0 + ps.abs()));
                prop_assert_eq!(penalty(&a, &hist, &cfg).unwrap(), 0.0);
            }
            let k = omegas.len() as f64;
            let pw = peak_weight(&hist, 0.0, k).unwrap();
            let sum = accumulate_mas(&hist).unwrap();
            for (x, y) in pw.values.iter().zip(&sum.values) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn peak_component_never_decreases(tasks in prop::collection::vec(prop::collection::vec(0.0f64..5.0, 3), 1..6)) {
            let mut prev = vec![0.0; 3];
            for end in 1..=tasks.len() {
                let h = history(&tasks[..end].iter().map(|v| v.as_slice()).collect::<Vec<_>>());
                let peak = peak_weight(&h, 1.0, 0.0).unwrap().values;
                for (p, q) in peak.iter().zip(&prev) {
                    prop_assert!(p >= q);
                }
                prev = peak;
            }
        }
    }
}
