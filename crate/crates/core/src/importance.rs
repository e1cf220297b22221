//! Per-parameter importance weights.
//!
//! Both estimators scalarize the network output as `‖F(x)‖²` and average over
//! samples. MAS uses the gradient magnitude `|g_i|`; the curvature-augmented
//! estimator scales it by `ln(1 + κ_i) + 1`, where `κ_i = |h_i| / (1 + g_i²)^{3/2}`
//! is the curvature of the scalarized output along parameter `i`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{per_sample_derivatives, HessianMethod};
use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::params::ParamVector;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    Mas,
    Apie,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ImportanceVector<T> {
    pub values: Vec<T>,
    pub source_task: usize,
    pub estimator: Estimator,
    pub n_samples: usize,
}

impl<T: Scalar> ImportanceVector<T> {
    pub fn new(values: Vec<T>, source_task: usize, estimator: Estimator, n_samples: usize) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !(*v >= T::zero()) || !v.is_finite()) {
            return Err(Error::Layout(format!(
                "importance must be finite and non-negative (index {i} is {})",
                values[i]
            )));
        }
        Ok(Self { values, source_task, estimator, n_samples })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn with_source_task(mut self, task: usize) -> Self {
        self.source_task = task;
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let v: Self = crate::io::read_json(path)?;
        Self::new(v.values, v.source_task, v.estimator, v.n_samples).map_err(|e| Error::format(path, e))
    }
}

/// `|h| / (1 + g²)^{3/2}`.
pub fn curvature<T: Scalar>(g: T, h: T) -> T {
    h.abs() / (T::one() + g * g).powf(T::of(1.5))
}

/// `(ln(1 + κ) + 1) · |g|`.
pub fn combined_importance<T: Scalar>(g: T, kappa: T) -> T {
    (kappa.ln_1p() + T::one()) * g.abs()
}

fn mean_over_samples<T: Scalar>(per_sample: impl Iterator<Item = Vec<T>>, n: usize, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for contrib in per_sample {
        for (a, c) in acc.iter_mut().zip(contrib) {
            *a = *a + c;
        }
    }
    let inv = T::of(n as f64);
    acc.into_iter().map(|v| v / inv).collect()
}

/// Mean of `|∂‖F(x_k)‖²/∂θ_i|` over the samples.
pub fn mas_importance<T: Scalar>(
    params: &ParamVector<T>,
    spec: &ModelSpec,
    samples: &[Tensor<T>],
) -> Result<ImportanceVector<T>> {
    if samples.is_empty() {
        return Err(Error::Empty("importance sample list"));
    }
    let derivs = per_sample_derivatives(params, spec, samples, None)?;
    let values = mean_over_samples(
        derivs.into_iter().map(|(g, _)| g.into_iter().map(|v| v.abs()).collect()),
        samples.len(),
        params.len(),
    );
    ImportanceVector::new(values, 0, Estimator::Mas, samples.len())
}

/// Mean of `(ln(1 + κ_i) + 1) · |g_i|` over the samples.
pub fn apie_importance<T: Scalar>(
    params: &ParamVector<T>,
    spec: &ModelSpec,
    samples: &[Tensor<T>],
    hess_method: HessianMethod,
) -> Result<ImportanceVector<T>> {
    if samples.is_empty() {
        return Err(Error::Empty("importance sample list"));
    }
    let derivs = per_sample_derivatives(params, spec, samples, Some(hess_method))?;
    let values = mean_over_samples(
        derivs.into_iter().map(|(g, h)| {
            g.into_iter()
                .zip(h)
                .map(|(g, h)| combined_importance(g, curvature(g, h)))
                .collect()
        }),
        samples.len(),
        params.len(),
    );
    ImportanceVector::new(values, 0, Estimator::Apie, samples.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::init_params;
    use proptest::prelude::*;

    fn scalar_model() -> (ModelSpec, ParamVector<f64>) {
        let spec = ModelSpec::linear(1, 1, false);
        let p = ParamVector::new(vec![1.0], spec.segments().unwrap()).unwrap();
        (spec, p)
    }

    fn two_param() -> (ModelSpec, ParamVector<f64>) {
        // F = θ1 x1 + θ2 x2 with θ = (1, 1); g = 2 F x
        let spec = ModelSpec::linear(2, 1, false);
        let p = ParamVector::new(vec![1.0, 1.0], spec.segments().unwrap()).unwrap();
        (spec, p)
    }

    fn x(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn curvature_values() {
        assert_eq!(curvature(0.0, 0.0), 0.0);
        assert_eq!(curvature(0.0, 2.0), 2.0);
        assert_eq!(curvature(0.0, -2.0), 2.0);
        assert!((curvature(2.0f64, 2.0) - 2.0 / 5f64.powf(1.5)).abs() < 1e-15);
        assert!((curvature(2.0f64, 2.0) - 0.178885).abs() < 1e-6);
    }

    #[test]
    fn combined_importance_values() {
        assert_eq!(combined_importance(3.0, 0.0), 3.0);
        assert_eq!(combined_importance(-3.0, 0.0), 3.0);
        assert!((combined_importance(1.0f64, std::f64::consts::E - 1.0) - 2.0).abs() < 1e-15);
        assert_eq!(combined_importance(0.0, 17.0), 0.0);
    }

    #[test]
    fn mas_single_sample_is_absolute_gradient() {
        // F = x1 + x2 at x = (0.75, -2): F = -1.25, g = 2F x = (-1.875, 5)
        let (spec, p) = two_param();
        let imp = mas_importance(&p, &spec, &[x(&[0.75, -2.0])]).unwrap();
        assert_eq!(imp.values, vec![1.875, 5.0]);
        assert_eq!(imp.estimator, Estimator::Mas);
        assert_eq!(imp.n_samples, 1);
    }

    #[test]
    fn mas_is_a_sample_mean() {
        // |g| = 2 θ x² = 2x²: x = sqrt(0.5) -> 1, x = sqrt(1.5) -> 3
        let (spec, p) = scalar_model();
        let imp = mas_importance(&p, &spec, &[x(&[0.5f64.sqrt()]), x(&[1.5f64.sqrt()])]).unwrap();
        assert!((imp.values[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_samples_rejected() {
        let (spec, p) = scalar_model();
        assert!(mas_importance(&p, &spec, &[]).is_err());
        assert!(apie_importance(&p, &spec, &[], HessianMethod::ExactAnalytic).is_err());
    }

    #[test]
    fn zero_output_gives_zero_importance() {
        let spec = ModelSpec::mlp([2, 2], &[3]);
        let p: ParamVector<f64> = init_params(&spec, 0).unwrap();
        let p = p.with_values(vec![0.0; p.len()]).unwrap();
        let s = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let imp = mas_importance(&p, &spec, std::slice::from_ref(&s)).unwrap();
        assert!(imp.values.iter().all(|&v| v == 0.0));
        let imp = apie_importance(&p, &spec, &[s], HessianMethod::GradFd).unwrap();
        assert!(imp.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn analytic_scalar_pipeline() {
        let (spec, p) = scalar_model();
        let kappa = 8.0 / 65f64.powf(1.5);
        let expected = (kappa.ln_1p() + 1.0) * 8.0;
        assert!((expected - 8.1212).abs() < 1e-4);
        for m in [HessianMethod::ExactAnalytic, HessianMethod::GradFd] {
            let imp = apie_importance(&p, &spec, &[x(&[2.0])], m).unwrap();
            assert!((imp.values[0] - expected).abs() < 1e-9, "{m:?}");
        }
    }

    #[test]
    fn duplicating_samples_keeps_the_mean() {
        let spec = ModelSpec::mlp([2, 2], &[3]);
        let p: ParamVector<f64> = init_params(&spec, 4).unwrap();
        let samples: Vec<_> = (0..3)
            .map(|k| Tensor::new(vec![1, 2, 2], vec![0.1 * k as f64, -0.4, 0.7, 0.2]).unwrap())
            .collect();
        let doubled: Vec<_> = samples.iter().chain(samples.iter()).cloned().collect();
        let a = apie_importance(&p, &spec, &samples, HessianMethod::ExactAnalytic).unwrap();
        let b = apie_importance(&p, &spec, &doubled, HessianMethod::ExactAnalytic).unwrap();
        for (u, v) in a.values.iter().zip(&b.values) {
            assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()));
        }
    }

    #[test]
    fn negative_importance_rejected() {
        assert!(ImportanceVector::new(vec![1.0, -0.5], 0, Estimator::Mas, 1).is_err());
        assert!(ImportanceVector::new(vec![f64::NAN], 0, Estimator::Mas, 1).is_err());
    }

    proptest! {
        #[test]
        fn combined_is_monotone_in_kappa(g in -10.0f64..10.0, k1 in 0.0f64..50.0, dk in 0.0f64..50.0) {
            let a = combined_importance(g, k1);
            let b = combined_importance(g, k1 + dk);
            prop_assert!(a >= g.abs());
            prop_assert!(b >= a);
            prop_assert!(curvature(g, k1 - 25.0) >= 0.0);
        }

        #[test]
        fn apie_dominates_mas_and_ignores_order(seed in 0u64..200, rot in 0usize..5) {
            let spec = ModelSpec::mlp([2, 2], &[3]);
            let p: ParamVector<f64> = init_params(&spec, seed).unwrap();
            let mut rng = crate::rng::rng_for(seed, &[1]);
            use rand::Rng;
            let samples: Vec<_> = (0..5)
                .map(|_| Tensor::new(vec![1, 2, 2], (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
                .collect();
            let mas = mas_importance(&p, &spec, &samples).unwrap();
            let apie = apie_importance(&p, &spec, &samples, HessianMethod::ExactAnalytic).unwrap();
            for (a, m) in apie.values.iter().zip(&mas.values) {
                prop_assert!(*a >= *m);
            }
            let mut rotated = samples.clone();
            rotated.rotate_left(rot);
            let apie_r = apie_importance(&p, &spec, &rotated, HessianMethod::ExactAnalytic).unwrap();
            for (a, b) in apie.values.iter().zip(&apie_r.values) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
            let off = apie_importance(&p, &spec, &samples, HessianMethod::Disabled).unwrap();
            for (a, m) in off.values.iter().zip(&mas.values) {
                prop_assert!((a - m).abs() <= 1e-12);
            }
        }
    }
}
