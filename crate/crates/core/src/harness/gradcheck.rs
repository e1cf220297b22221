//! Derivative self-checks against forward-only finite differences.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::fd::{central_gradient, kink_aware_gradient, max_relative_error, mean_cross_entropy, output_l2sq, piecewise_second_difference};
use crate::autodiff::{loss_grad, output_l2sq_diag_hessian, output_l2sq_grad, HessianMethod, LossKind};
use crate::consolidation::{penalty, penalty_grad, Accumulation, ImportanceHistory, RegularizerConfig};
use crate::error::Result;
use crate::importance::{combined_importance, curvature, Estimator, ImportanceVector};
use crate::models::{init_params, InputFilter, LabelVector, ModelSpec};
use crate::params::{LambdaGroup, ParamVector, Segment};
use crate::rng::rng_for;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }
}

/// A small random model from one of the built-in families, with random
/// weights and biases.
pub fn random_model(rng: &mut ChaCha8Rng) -> (ModelSpec, ParamVector<f64>) {
    let mut spec = match rng.gen_range(0..3) {
        0 => {
            let hidden: Vec<usize> = (0..rng.gen_range(1..=2)).map(|_| rng.gen_range(2..=6)).collect();
            ModelSpec::mlp([rng.gen_range(2..=4), rng.gen_range(2..=4)], &hidden)
        }
        1 => ModelSpec::mini_cnn([8, 8], [rng.gen_range(1..=3), rng.gen_range(1..=3)], rng.gen_range(2..=5)),
        _ => ModelSpec::mini_cnn([4, 4], [2, 2], 3),
    };
    if rng.gen::<bool>() {
        spec.input_filter = if spec.input_filter == InputFilter::None { InputFilter::Laplacian } else { InputFilter::None };
    }
    let mut p: ParamVector<f64> = init_params(&spec, rng.gen()).expect("valid spec");
    let segs = p.segments().to_vec();
    for s in segs.iter().filter(|s| s.name.ends_with("bias")) {
        for v in &mut p.values_mut()[s.offset..s.offset + s.len] {
            *v = rng.gen_range(-0.3..0.3);
        }
    }
    (spec, p)
}

pub fn random_batch(rng: &mut ChaCha8Rng, spec: &ModelSpec, rows: usize) -> Tensor<f64> {
    let mut shape = vec![rows];
    shape.extend_from_slice(&spec.input_shape);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sized from shape")
}

/// Mean cross-entropy gradient vs kink-aware central differences (step `1e-6 (1 + |θ|)`),
/// relative error with denominator floor `1e-3`.
pub fn check_loss_grad(seed: u64, models: usize) -> Result<CheckResult> {
    let mut rng = rng_for(seed, &[0x6c6f7373]);
    let mut worst = 0.0f64;
    for _ in 0..models {
        let (spec, p) = random_model(&mut rng);
        let x = random_batch(&mut rng, &spec, 4);
        let y = LabelVector::new((0..4).map(|_| rng.gen_range(0..2)).collect(), 2)?;
        let (_, g) = loss_grad(&p, &spec, &x, &y, LossKind::CrossEntropy)?;
        let fd = kink_aware_gradient(&p, 1e-6, |q| mean_cross_entropy(q, &spec, &x, &y))?;
        worst = worst.max(max_relative_error(g.values(), &fd, 1e-3));
    }
    Ok(CheckResult { name: "loss-gradient", cases: models, max_error: worst, tolerance: 1e-5 })
}

/// Gradient-difference Hessian diagonal vs the second difference of `‖F‖²`,
/// relative error over entries with `|h| > 1e-6`.
pub fn check_hessian_diagonal(seed: u64, models: usize) -> Result<CheckResult> {
    let mut rng = rng_for(seed, &[0x68657373]);
    let mut worst = 0.0f64;
    for _ in 0..models {
        let (spec, p) = random_model(&mut rng);
        let x = random_batch(&mut rng, &spec, 1);
        let h = output_l2sq_diag_hessian(&p, &spec, &x, HessianMethod::GradFd)?;
        let oracle = piecewise_second_difference(&p, |q| output_l2sq(q, &spec, &x))?;
        for (a, b) in h.values().iter().zip(&oracle) {
            if b.abs() > 1e-6 {
                worst = worst.max((a - b).abs() / b.abs());
            }
        }
    }
    Ok(CheckResult { name: "hessian-diagonal", cases: models, max_error: worst, tolerance: 1e-3 })
}

/// `F = θ x` with `θ = 1, x = 2`: `g = 8`, `h = 8`, `κ = 8 / 65^{3/2}`,
/// importance `(ln(1 + κ) + 1) · 8`.
pub fn check_scalar_case() -> Result<CheckResult> {
    let spec = ModelSpec::linear(1, 1, false);
    let p = ParamVector::new(vec![1.0], spec.segments()?)?;
    let x = Tensor::new(vec![1, 1], vec![2.0])?;
    let g: f64 = output_l2sq_grad(&p, &spec, &x)?.values()[0];
    let h: f64 = output_l2sq_diag_hessian(&p, &spec, &x, HessianMethod::GradFd)?.values()[0];
    let kappa = curvature(g, h);
    let omega = combined_importance(g, kappa);
    let want_kappa = 8.0 / 65f64.powf(1.5);
    let want_omega = ((1.0 + want_kappa).ln() + 1.0) * 8.0;
    let err = [(g - 8.0).abs(), (h - 8.0).abs(), (kappa - want_kappa).abs(), (omega - want_omega).abs()]
        .into_iter()
        .fold(0.0, f64::max);
    Ok(CheckResult { name: "scalar-closed-form", cases: 1, max_error: err, tolerance: 1e-9 })
}

/// A random penalty setup: two parameter groups, one to three tasks of
/// importance, random λ and accumulation.
pub fn random_penalty_case(rng: &mut ChaCha8Rng) -> (ParamVector<f64>, ImportanceHistory<f64>, RegularizerConfig) {
    let n = rng.gen_range(2..=12);
    let split = rng.gen_range(1..n);
    let segs = vec![
        Segment { name: "a".into(), offset: 0, len: split, group: LambdaGroup::Feature },
        Segment { name: "b".into(), offset: split, len: n - split, group: LambdaGroup::Head },
    ];
    let vec = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| (0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<f64>>();
    let anchor = ParamVector::new(vec(rng, -2.0, 2.0), segs.clone()).expect("valid layout");
    let theta = ParamVector::new(vec(rng, -2.0, 2.0), segs).expect("valid layout");
    let tasks = rng.gen_range(1..=3);
    let imps = (0..tasks)
        .map(|t| ImportanceVector::new(vec(rng, 0.0, 3.0), t, Estimator::Apie, 1).expect("non-negative"))
        .collect();
    let history = ImportanceHistory::from_parts(imps, Some(anchor)).expect("consistent history");
    let cfg = RegularizerConfig {
        lambda_per_group: [(LambdaGroup::Feature, rng.gen_range(0.0..2.0)), (LambdaGroup::Head, rng.gen_range(0.0..2.0))].into(),
        alpha: rng.gen_range(0.0..1.0),
        beta: rng.gen_range(0.0..1.0),
        accumulation: if rng.gen::<bool>() { Accumulation::PeakWeight } else { Accumulation::MasSum },
    };
    (theta, history, cfg)
}

/// Penalty gradient vs central differences. The penalty is quadratic in
/// each coordinate, so a large step (`1e-2`) has no truncation error and
/// keeps rounding error small; denominator floor `1e-3`.
pub fn check_penalty_grad(seed: u64, configs: usize) -> Result<CheckResult> {
    let mut rng = rng_for(seed, &[0x70656e]);
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let (theta, history, cfg) = random_penalty_case(&mut rng);
        let g = penalty_grad(&theta, &history, &cfg)?;
        let fd = central_gradient(&theta, 1e-2, |q| penalty(q, &history, &cfg))?;
        worst = worst.max(max_relative_error(g.values(), &fd, 1e-3));
    }
    Ok(CheckResult { name: "penalty-gradient", cases: configs, max_error: worst, tolerance: 1e-8 })
}

/// The full oracle suite.
pub fn run_gradcheck(seed: u64) -> Result<GradcheckReport> {
    Ok(GradcheckReport {
        seed,
        checks: vec![
            check_loss_grad(seed, 20)?,
            check_hessian_diagonal(seed, 10)?,
            check_scalar_case()?,
            check_penalty_grad(seed, 10)?,
        ],
    })
}
