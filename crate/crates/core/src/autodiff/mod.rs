//! Forward evaluation and derivatives of the built-in models: loss gradients
//! for training, and first/second derivatives of the squared output norm
//! used for parameter importance.

pub mod fd;
mod network;

use serde::{Deserialize, Serialize};

pub use network::{Network, Scratch, Trace};

use crate::error::{Error, Result};
use crate::models::{LabelVector, ModelSpec};
use crate::params::{GradVector, ParamVector};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
}

/// How the diagonal of `∂²‖F‖²/∂θ²` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HessianMethod {
    /// Central difference of the reverse-mode gradient, one coordinate at a
    /// time with step `1e-4 * (1 + |θ_i|)`, shrunk near ReLU kinks. Costs two
    /// gradients per parameter.
    #[default]
    GradFd,
    /// `2 Σ_o (∂F_o/∂θ_i)²`. Exact wherever the network is differentiable,
    /// because every built-in model is piecewise linear in each single
    /// parameter, so the `F · ∂²F/∂θ_i²` term vanishes. Costs one reverse
    /// pass per output.
    ExactAnalytic,
    /// Reports `h = 0` everywhere; switches the curvature term off.
    Disabled,
}

/// Relative step used by [`HessianMethod::GradFd`].
pub const GRAD_FD_STEP: f64 = 1e-4;

/// Checks parameter count and batch shape against the compiled network.
fn check_inputs<T: Scalar>(
    net: &Network,
    spec: &ModelSpec,
    params: &ParamVector<T>,
    batch: &Tensor<T>,
) -> Result<()> {
    if params.len() != net.num_params() {
        return Err(Error::Layout(format!(
            "model expects {} parameters, got {}",
            net.num_params(),
            params.len()
        )));
    }
    let shape = batch.shape();
    if shape.len() != spec.input_shape.len() + 1 {
        return Err(Error::Rank {
            context: "model input batch".into(),
            expected: spec.input_shape.len() + 1,
            actual: shape.len(),
        });
    }
    for (d, (&got, &want)) in shape[1..].iter().zip(&spec.input_shape).enumerate() {
        if got != want {
            return Err(Error::Shape {
                context: "model input batch".into(),
                dim: d + 1,
                expected: want,
                actual: got,
            });
        }
    }
    Ok(())
}

fn single_sample<T: Scalar>(sample: &Tensor<T>) -> Result<()> {
    if sample.rows() != 1 {
        return Err(Error::Shape {
            context: "single-sample input".into(),
            dim: 0,
            expected: 1,
            actual: sample.rows(),
        });
    }
    Ok(())
}

/// Compiled network plus reusable buffers; the hot path for training and
/// importance estimation.
#[derive(Debug, Clone)]
pub struct Evaluator<T> {
    net: Network,
    trace: Trace<T>,
    scratch: Scratch<T>,
    dout: Vec<T>,
}

impl<T: Scalar> Evaluator<T> {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        let net = Network::new(spec)?;
        Ok(Self {
            trace: net.trace(),
            scratch: net.scratch(),
            dout: vec![T::zero(); net.output_len()],
            net,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn logits(&mut self, params: &[T], input: &[T]) -> Result<&[T]> {
        self.net.forward(params, input, &mut self.trace)?;
        Ok(self.trace.output())
    }

    /// Adds the gradient of the summed cross-entropy over `rows` of `batch`
    /// to `grad`, scaled by `weight`; returns the summed (unscaled) loss.
    pub fn cross_entropy_accumulate(
        &mut self,
        params: &[T],
        batch: &Tensor<T>,
        labels: &[usize],
        rows: &[usize],
        weight: T,
        grad: &mut [T],
    ) -> Result<T> {
        let mut total = T::zero();
        for &r in rows {
            self.net.forward(params, batch.row(r), &mut self.trace)?;
            let logits = self.trace.output();
            let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let sum_exp: T = logits.iter().map(|&z| (z - max).exp()).sum();
            let log_z = max + sum_exp.ln();
            let label = labels[r];
            let loss = log_z - logits[label];
            if !loss.is_finite() {
                return Err(Error::NonFinite { layer: "cross-entropy".into() });
            }
            total = total + loss;
            for (o, d) in self.dout.iter_mut().enumerate() {
                let p = (logits[o] - log_z).exp();
                let y = if o == label { T::one() } else { T::zero() };
                *d = (p - y) * weight;
            }
            self.net
                .backward(params, &self.trace, &self.dout, grad, &mut self.scratch);
        }
        Ok(total)
    }

    /// Output `F(x)` and the gradient of `‖F(x)‖²` for one sample.
    pub fn l2sq_grad(&mut self, params: &[T], input: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        self.net.forward(params, input, &mut self.trace)?;
        let out = self.trace.output().to_vec();
        for (d, &f) in self.dout.iter_mut().zip(&out) {
            *d = f + f;
        }
        let mut grad = vec![T::zero(); self.net.num_params()];
        self.net
            .backward(params, &self.trace, &self.dout, &mut grad, &mut self.scratch);
        Ok((out, grad))
    }

    /// Output and Jacobian rows `∂F_o/∂θ` for one sample.
    pub fn jacobian(&mut self, params: &[T], input: &[T]) -> Result<(Vec<T>, Vec<Vec<T>>)> {
        self.net.forward(params, input, &mut self.trace)?;
        let out = self.trace.output().to_vec();
        let mut rows = Vec::with_capacity(out.len());
        for o in 0..out.len() {
            self.dout.iter_mut().enumerate().for_each(|(i, d)| {
                *d = if i == o { T::one() } else { T::zero() }
            });
            let mut row = vec![T::zero(); self.net.num_params()];
            self.net
                .backward(params, &self.trace, &self.dout, &mut row, &mut self.scratch);
            rows.push(row);
        }
        Ok((out, rows))
    }

    /// Gradient `g` and Hessian diagonal `h` of `‖F(x)‖²` for one sample.
    pub fn l2sq_derivatives(
        &mut self,
        params: &[T],
        input: &[T],
        method: HessianMethod,
    ) -> Result<(Vec<T>, Vec<T>)> {
        match method {
            HessianMethod::ExactAnalytic => {
                let (out, rows) = self.jacobian(params, input)?;
                let two = T::of(2.0);
                let n = self.net.num_params();
                let mut g = vec![T::zero(); n];
                let mut h = vec![T::zero(); n];
                for (f, row) in out.iter().zip(&rows) {
                    for i in 0..n {
                        g[i] = g[i] + two * *f * row[i];
                        h[i] = h[i] + two * row[i] * row[i];
                    }
                }
                Ok((g, h))
            }
            HessianMethod::GradFd => {
                let (_, g) = self.l2sq_grad(params, input)?;
                let h = self.grad_fd_diagonal(params, input, &g)?;
                Ok((g, h))
            }
            HessianMethod::Disabled => {
                let (_, g) = self.l2sq_grad(params, input)?;
                let n = g.len();
                Ok((g, vec![T::zero(); n]))
            }
        }
    }

    /// Central difference of the gradient. The networks are piecewise linear,
    /// so away from a ReLU kink the forward and backward gradient slopes agree
    /// to rounding; when they do not, a kink sits inside the stencil and the
    /// step shrinks tenfold, as long as it stays above `sqrt(eps)`.
    fn grad_fd_diagonal(&mut self, params: &[T], input: &[T], g0: &[T]) -> Result<Vec<T>> {
        let mut theta = params.to_vec();
        let mut h = Vec::with_capacity(params.len());
        let min_rel = T::epsilon().sqrt().as_f64();
        for i in 0..params.len() {
            let x = params[i];
            let mut rel = GRAD_FD_STEP;
            let v = loop {
                let step = T::of(rel) * (T::one() + x.abs());
                let (up, down) = (x + step, x - step);
                if up == x || down == x || !up.is_finite() || !down.is_finite() {
                    return Err(Error::StepUnderflow { index: i, value: x.as_f64() });
                }
                theta[i] = up;
                let gp = self.l2sq_grad(&theta, input)?.1[i];
                theta[i] = down;
                let gm = self.l2sq_grad(&theta, input)?.1[i];
                theta[i] = x;
                let central = (gp - gm) / (up - down);
                let fwd = ((gp - g0[i]) / (up - x)).as_f64();
                let bwd = ((g0[i] - gm) / (x - down)).as_f64();
                let gap = (fwd - bwd).abs() / fwd.abs().max(bwd.abs()).max(1e-6);
                if gap <= 1e-4 || rel / 10.0 < min_rel {
                    break central;
                }
                rel /= 10.0;
            };
            if !v.is_finite() {
                return Err(Error::NonFinite { layer: format!("hessian diagonal (parameter {i})") });
            }
            h.push(v);
        }
        Ok(h)
    }
}

/// Logits for every row of `batch`, one output row per sample.
pub fn forward<T: Scalar>(
    params: &ParamVector<T>,
    spec: &ModelSpec,
    batch: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut ev = Evaluator::new(spec)?;
    check_inputs(&ev.net, spec, params, batch)?;
    let k = ev.net.output_len();
    let mut data = Vec::with_capacity(batch.rows() * k);
    for r in 0..batch.rows() {
        data.extend_from_slice(ev.logits(params.values(), batch.row(r))?);
    }
    Tensor::new(vec![batch.rows(), k], data)
}

/// Mean loss over the batch and its exact gradient.
pub fn loss_grad<T: Scalar>(
    params: &ParamVector<T>,
    spec: &ModelSpec,
    batch: &Tensor<T>,
    labels: &LabelVector,
    loss: LossKind,
) -> Result<(T, GradVector<T>)> {
    let LossKind::CrossEntropy = loss;
    let mut ev = Evaluator::new(spec)?;
    check_inputs(&ev.net, spec, params, batch)?;
    if labels.len() != batch.rows() {
        return Err(Error::Shape {
            context: "labels".into(),
            dim: 0,
            expected: batch.rows(),
            actual: labels.len(),
        });
    }
    let checked = LabelVector::new(labels.as_slice().to_vec(), ev.net.output_len())?;
    let rows: Vec<usize> = (0..batch.rows()).collect();
    let inv = T::one() / T::of(rows.len() as f64);
    let mut grad = vec![T::zero(); params.len()];
    let total = ev.cross_entropy_accumulate(params.values(), batch, checked.as_slice(), &rows, inv, &mut grad)?;
    Ok((total * inv, GradVector(grad)))
}

/// Gradient of `‖F(x)‖²` for a single sample (a batch of one).
pub fn output_l2sq_grad<T: Scalar>(
    params: &ParamVector<T>,
    spec: &ModelSpec,
    sample: &Tensor<T>,
) -> Result<GradVector<T>> {
    let mut ev = Evaluator::new(spec)?;
    check_inputs(&ev.net, spec, params, sample)?;
    single_sample(sample)?;
    Ok(GradVector(ev.l2sq_grad(params.values(), sample.row(0))?.1))
}

/// Diagonal of the Hessian of `‖F(x)‖²` for a single sample.
pub fn output_l2sq_diag_hessian<T: Scalar>(
    params: &ParamVector<T>,
    spec: &ModelSpec,
    sample: &Tensor<T>,
    method: HessianMethod,
) -> Result<GradVector<T>> {
    let mut ev = Evaluator::new(spec)?;
    check_inputs(&ev.net, spec, params, sample)?;
    single_sample(sample)?;
    let h = match method {
        HessianMethod::GradFd => {
            let (_, g) = ev.l2sq_grad(params.values(), sample.row(0))?;
            ev.grad_fd_diagonal(params.values(), sample.row(0), &g)?
        }
        _ => ev.l2sq_derivatives(params.values(), sample.row(0), method)?.1,
    };
    Ok(GradVector(h))
}

/// `(g, h)` for every sample, evaluated in parallel and returned in sample
/// order.
pub(crate) fn per_sample_derivatives<T: Scalar>(
    params: &ParamVector<T>,
    spec: &ModelSpec,
    samples: &[Tensor<T>],
    method: Option<HessianMethod>,
) -> Result<Vec<(Vec<T>, Vec<T>)>> {
    use rayon::prelude::*;
    let proto = Evaluator::new(spec)?;
    for s in samples {
        check_inputs(&proto.net, spec, params, s)?;
        single_sample(s)?;
    }
    samples
        .par_iter()
        .map_init(
            || proto.clone(),
            |ev, s| match method {
                Some(m) => ev.l2sq_derivatives(params.values(), s.row(0), m),
                None => ev.l2sq_grad(params.values(), s.row(0)).map(|(_, g)| (g, Vec::new())),
            },
        )
        .collect()
}
