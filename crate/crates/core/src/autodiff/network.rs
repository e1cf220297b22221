//! Layer-by-layer evaluation of the built-in models with a hand-written
//! reverse pass. One sample at a time; the activation trace of the forward
//! pass is kept so the backward pass can replay it.

use crate::error::{Error, Result};
use crate::models::{InputFilter, LayerShape, ModelKind, ModelSpec};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
enum Op {
    Filter { height: usize, width: usize },
    Conv { in_ch: usize, out_ch: usize, height: usize, width: usize, w_off: usize, b_off: Option<usize> },
    Relu,
    Pool { ch: usize, height: usize, width: usize },
    Dense { inputs: usize, outputs: usize, w_off: usize, b_off: Option<usize> },
}

/// Compiled form of a [`ModelSpec`].
#[derive(Debug, Clone)]
pub struct Network {
    ops: Vec<Op>,
    labels: Vec<String>,
    sizes: Vec<usize>,
    num_params: usize,
}

/// Activations of one forward pass: `acts[0]` is the input, `acts[k + 1]`
/// the output of op `k`.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    acts: Vec<Vec<T>>,
    cols: Vec<T>,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().expect("trace holds the input at least")
    }
}

/// Reusable buffers for the reverse pass.
#[derive(Debug, Clone)]
pub struct Scratch<T> {
    a: Vec<T>,
    b: Vec<T>,
    cols: Vec<T>,
    dcols: Vec<T>,
}

impl Network {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        let layers = spec.layers()?;
        let mut ops = Vec::new();
        let mut labels = Vec::new();
        let mut sizes = vec![spec.input_len()];
        let mut offset = 0;
        let mut push = |op: Op, label: String, size: usize, ops: &mut Vec<Op>| {
            ops.push(op);
            labels.push(label);
            sizes.push(size);
        };
        if spec.input_filter == InputFilter::Laplacian {
            let (h, w) = (spec.input_shape[0], spec.input_shape[1]);
            push(Op::Filter { height: h, width: w }, "input-filter".into(), h * w, &mut ops);
        }
        let n = layers.len();
        for (i, layer) in layers.iter().enumerate() {
            let w_off = offset;
            offset += layer.shape.weight_count();
            let b_off = spec.bias.then(|| {
                let b = offset;
                offset += layer.shape.bias_count();
                b
            });
            match layer.shape {
                LayerShape::Conv { in_ch, out_ch, height, width } => {
                    push(
                        Op::Conv { in_ch, out_ch, height, width, w_off, b_off },
                        layer.name.clone(),
                        out_ch * height * width,
                        &mut ops,
                    );
                    push(Op::Relu, format!("{}.relu", layer.name), out_ch * height * width, &mut ops);
                    push(
                        Op::Pool { ch: out_ch, height, width },
                        format!("{}.pool", layer.name),
                        out_ch * (height / 2) * (width / 2),
                        &mut ops,
                    );
                }
                LayerShape::Dense { inputs, outputs } => {
                    push(
                        Op::Dense { inputs, outputs, w_off, b_off },
                        layer.name.clone(),
                        outputs,
                        &mut ops,
                    );
                    if i + 1 < n && spec.kind != ModelKind::Linear {
                        push(Op::Relu, format!("{}.relu", layer.name), outputs, &mut ops);
                    }
                }
            }
        }
        Ok(Self { ops, labels, sizes, num_params: offset })
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_len(&self) -> usize {
        *self.sizes.last().expect("network has an input size")
    }

    /// Largest patch matrix any conv op needs.
    fn cols_len(&self) -> usize {
        self.ops
            .iter()
            .map(|op| match *op {
                Op::Conv { in_ch, height, width, .. } => 9 * in_ch * height * width,
                _ => 0,
            })
            .max()
            .unwrap_or(0)
    }

    pub fn trace<T: Scalar>(&self) -> Trace<T> {
        Trace {
            acts: self.sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            cols: vec![T::zero(); self.cols_len()],
        }
    }

    pub fn scratch<T: Scalar>(&self) -> Scratch<T> {
        let m = self.sizes.iter().copied().max().unwrap_or(0);
        let c = self.cols_len();
        Scratch { a: vec![T::zero(); m], b: vec![T::zero(); m], cols: vec![T::zero(); c], dcols: vec![T::zero(); c] }
    }

    /// Fills `trace` for one input sample. Fails with the label of the first
    /// op that produces a non-finite value.
    pub fn forward<T: Scalar>(&self, params: &[T], input: &[T], trace: &mut Trace<T>) -> Result<()> {
        debug_assert_eq!(params.len(), self.num_params);
        debug_assert_eq!(input.len(), self.sizes[0]);
        trace.acts[0].copy_from_slice(input);
        let cols = &mut trace.cols;
        for (k, op) in self.ops.iter().enumerate() {
            let (head, tail) = trace.acts.split_at_mut(k + 1);
            let x = &head[k];
            let y = &mut tail[0];
            match *op {
                Op::Filter { height, width } => filter_forward(x, y, height, width),
                Op::Conv { in_ch, out_ch, height, width, w_off, b_off } => conv_forward(
                    params, x, y, cols, in_ch, out_ch, height, width, w_off, b_off,
                ),
                Op::Relu => {
                    for (o, &v) in y.iter_mut().zip(x.iter()) {
                        *o = v.max(T::zero());
                    }
                }
                Op::Pool { ch, height, width } => pool_forward(x, y, ch, height, width),
                Op::Dense { inputs, outputs, w_off, b_off } => {
                    dense_forward(params, x, y, inputs, outputs, w_off, b_off)
                }
            }
            if !y.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { layer: self.labels[k].clone() });
            }
        }
        Ok(())
    }

    /// Reverse pass: accumulates `d(output · dout)/dθ` into `grad`.
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        trace: &Trace<T>,
        dout: &[T],
        grad: &mut [T],
        scratch: &mut Scratch<T>,
    ) {
        debug_assert_eq!(dout.len(), self.output_len());
        let Scratch { a, b, cols, dcols } = scratch;
        let (mut cur, mut next) = (a, b);
        cur[..dout.len()].copy_from_slice(dout);
        for k in (0..self.ops.len()).rev() {
            let x = &trace.acts[k];
            let n_out = self.sizes[k + 1];
            let n_in = self.sizes[k];
            let dy = &cur[..n_out];
            // nothing upstream of op 0 needs an input gradient
            let need_dx = self.ops[..k].iter().any(|o| !matches!(o, Op::Filter { .. }));
            let dx = &mut next[..n_in];
            match self.ops[k] {
                Op::Filter { .. } => {}
                Op::Conv { in_ch, out_ch, height, width, w_off, b_off } => conv_backward(
                    params, x, dy, dx, grad, cols, dcols, need_dx, in_ch, out_ch, height, width, w_off, b_off,
                ),
                Op::Relu => {
                    for ((d, &g), &v) in dx.iter_mut().zip(dy.iter()).zip(x.iter()) {
                        *d = if v > T::zero() { g } else { T::zero() };
                    }
                }
                Op::Pool { ch, height, width } => pool_backward(dy, dx, ch, height, width),
                Op::Dense { inputs, outputs, w_off, b_off } => {
                    dense_backward(params, x, dy, dx, grad, need_dx, inputs, outputs, w_off, b_off)
                }
            }
            if !need_dx {
                break;
            }
            std::mem::swap(&mut cur, &mut next);
        }
    }
}

const LAPLACIAN: [[f64; 3]; 3] = [[0.0, -1.0, 0.0], [-1.0, 4.0, -1.0], [0.0, -1.0, 0.0]];

fn filter_forward<T: Scalar>(x: &[T], y: &mut [T], h: usize, w: usize) {
    y.iter_mut().for_each(|v| *v = T::zero());
    for (ky, row) in LAPLACIAN.iter().enumerate() {
        for (kx, &kv) in row.iter().enumerate() {
            if kv == 0.0 {
                continue;
            }
            shifted_axpy(T::of(kv), x, y, h, w, ky, kx);
        }
    }
}

/// Valid output range along one axis for a 3x3 "same" kernel tap.
#[inline]
fn tap_range(k: usize, n: usize) -> (usize, usize) {
    match k {
        0 => (1, n),
        1 => (0, n),
        _ => (0, n - 1),
    }
}

/// `y[r][c] += a * x[r + ky - 1][c + kx - 1]` over the in-bounds region.
#[inline]
fn shifted_axpy<T: Scalar>(a: T, x: &[T], y: &mut [T], h: usize, w: usize, ky: usize, kx: usize) {
    let (r0, r1) = tap_range(ky, h);
    let (c0, c1) = tap_range(kx, w);
    for r in r0..r1 {
        let src = (r + ky - 1) * w + kx;
        let yr = &mut y[r * w + c0..r * w + c1];
        let xr = &x[src + c0 - 1..src + c1 - 1];
        for (o, &v) in yr.iter_mut().zip(xr) {
            *o = *o + a * v;
        }
    }
}

/// Dot product with four interleaved partial sums, so the reduction is not
/// one long dependency chain. The summation order is fixed.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o = *o + a * v;
    }
}

/// Zero-padded 3x3 patches: row `ci * 9 + ky * 3 + kx` holds
/// `x[ci][r + ky - 1][c + kx - 1]` for every output pixel `(r, c)`.
fn im2col<T: Scalar>(x: &[T], cols: &mut [T], in_ch: usize, h: usize, w: usize) {
    let hw = h * w;
    cols[..9 * in_ch * hw].iter_mut().for_each(|v| *v = T::zero());
    for ci in 0..in_ch {
        let xc = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                let (r0, r1) = tap_range(ky, h);
                let (c0, c1) = tap_range(kx, w);
                for r in r0..r1 {
                    let src = (r + ky - 1) * w + kx;
                    row[r * w + c0..r * w + c1].copy_from_slice(&xc[src + c0 - 1..src + c1 - 1]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto `dx`.
fn col2im_add<T: Scalar>(dcols: &[T], dx: &mut [T], in_ch: usize, h: usize, w: usize) {
    let hw = h * w;
    for ci in 0..in_ch {
        let dxc = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &dcols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                let (r0, r1) = tap_range(ky, h);
                let (c0, c1) = tap_range(kx, w);
                for r in r0..r1 {
                    let dst = (r + ky - 1) * w + kx;
                    axpy(T::one(), &row[r * w + c0..r * w + c1], &mut dxc[dst + c0 - 1..dst + c1 - 1]);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Scalar>(
    p: &[T],
    x: &[T],
    y: &mut [T],
    cols: &mut [T],
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
    w_off: usize,
    b_off: Option<usize>,
) {
    let hw = h * w;
    let taps = 9 * in_ch;
    im2col(x, cols, in_ch, h, w);
    for co in 0..out_ch {
        let yc = &mut y[co * hw..(co + 1) * hw];
        let b = b_off.map_or(T::zero(), |o| p[o + co]);
        yc.iter_mut().for_each(|v| *v = b);
        let kernel = &p[w_off + co * taps..w_off + (co + 1) * taps];
        for (k, &wk) in kernel.iter().enumerate() {
            axpy(wk, &cols[k * hw..(k + 1) * hw], yc);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    p: &[T],
    x: &[T],
    dy: &[T],
    dx: &mut [T],
    grad: &mut [T],
    cols: &mut [T],
    dcols: &mut [T],
    need_dx: bool,
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
    w_off: usize,
    b_off: Option<usize>,
) {
    let hw = h * w;
    let taps = 9 * in_ch;
    im2col(x, cols, in_ch, h, w);
    if need_dx {
        dcols[..taps * hw].iter_mut().for_each(|v| *v = T::zero());
    }
    for co in 0..out_ch {
        let dyc = &dy[co * hw..(co + 1) * hw];
        if let Some(o) = b_off {
            grad[o + co] = grad[o + co] + dyc.iter().copied().sum::<T>();
        }
        let kbase = w_off + co * taps;
        for k in 0..taps {
            let row = &cols[k * hw..(k + 1) * hw];
            grad[kbase + k] = grad[kbase + k] + dot(row, dyc);
            if need_dx {
                axpy(p[kbase + k], dyc, &mut dcols[k * hw..(k + 1) * hw]);
            }
        }
    }
    if need_dx {
        dx.iter_mut().for_each(|v| *v = T::zero());
        col2im_add(dcols, dx, in_ch, h, w);
    }
}

fn pool_forward<T: Scalar>(x: &[T], y: &mut [T], ch: usize, h: usize, w: usize) {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    for c in 0..ch {
        for r in 0..oh {
            for col in 0..ow {
                let i = c * h * w + 2 * r * w + 2 * col;
                y[c * oh * ow + r * ow + col] = (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]) * quarter;
            }
        }
    }
}

fn pool_backward<T: Scalar>(dy: &[T], dx: &mut [T], ch: usize, h: usize, w: usize) {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    for c in 0..ch {
        for r in 0..oh {
            for col in 0..ow {
                let g = dy[c * oh * ow + r * ow + col] * quarter;
                let i = c * h * w + 2 * r * w + 2 * col;
                dx[i] = g;
                dx[i + 1] = g;
                dx[i + w] = g;
                dx[i + w + 1] = g;
            }
        }
    }
}

fn dense_forward<T: Scalar>(
    p: &[T],
    x: &[T],
    y: &mut [T],
    inputs: usize,
    outputs: usize,
    w_off: usize,
    b_off: Option<usize>,
) {
    for o in 0..outputs {
        let row = &p[w_off + o * inputs..w_off + (o + 1) * inputs];
        y[o] = dot(row, &x[..inputs]) + b_off.map_or(T::zero(), |b| p[b + o]);
    }
}

#[allow(clippy::too_many_arguments)]
fn dense_backward<T: Scalar>(
    p: &[T],
    x: &[T],
    dy: &[T],
    dx: &mut [T],
    grad: &mut [T],
    need_dx: bool,
    inputs: usize,
    outputs: usize,
    w_off: usize,
    b_off: Option<usize>,
) {
    if need_dx {
        dx.iter_mut().for_each(|v| *v = T::zero());
    }
    for o in 0..outputs {
        let g = dy[o];
        if let Some(b) = b_off {
            grad[b + o] = grad[b + o] + g;
        }
        if g == T::zero() {
            continue;
        }
        let base = w_off + o * inputs;
        axpy(g, &x[..inputs], &mut grad[base..base + inputs]);
        if need_dx {
            axpy(g, &p[base..base + inputs], &mut dx[..inputs]);
        }
    }
}
