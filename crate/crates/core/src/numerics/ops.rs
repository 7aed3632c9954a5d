//! Forward kernels shared by the autodiff tape and by direct callers.

use super::Tensor;
use crate::error::{Error, Result};

/// Variance epsilon used by every layer normalization in the model.
pub const LAYER_NORM_EPS: f64 = 1e-12;

const GELU_COEF: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Strided read-only view of a matrix.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Column block `[start, start + width)` of a row-major matrix with `stride` columns.
    pub fn block(data: &'a [f64], rows: usize, stride: usize, start: usize, width: usize) -> Self {
        Self {
            data: &data[start..],
            rows,
            cols: width,
            rs: stride as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = a * b + beta * c`, with `c` a dense row-major `a.rows x b.cols` matrix
/// starting at `c[0]` with row stride `c_rs`.
pub(crate) fn gemm_into(a: MatRef, b: MatRef, beta: f64, c: &mut [f64], c_rs: usize) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * c_rs..i * c_rs + n] {
                *v *= beta;
            }
        }
        return;
    }
    assert!(c.len() >= (m - 1) * c_rs + n);
    // SAFETY: the asserts above bound every index the kernel touches; the
    // views were built from slices long enough for their strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            c_rs as isize,
            1,
        );
    }
}

pub(crate) fn gemm(a: MatRef, b: MatRef) -> Vec<f64> {
    let mut out = vec![0.0; a.rows * b.cols];
    gemm_into(a, b, 0.0, &mut out, b.cols);
    out
}

fn check_matrix(name: &str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("{name} must be 2-D, got {s:?}"))),
    }
}

fn check_bias(b: &Tensor, width: usize) -> Result<()> {
    if b.shape() != [width] {
        return Err(Error::Shape(format!(
            "bias shape {:?} does not match output width {width}",
            b.shape()
        )));
    }
    Ok(())
}

/// `x * w + b` for `x: n x p`, `w: p x q`, `b: q`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, p) = check_matrix("x", x)?;
    let (p2, q) = check_matrix("w", w)?;
    if p != p2 {
        return Err(Error::Shape(format!(
            "inner dimensions differ: x is {n}x{p}, w is {p2}x{q}"
        )));
    }
    check_bias(b, q)?;
    let mut out = Vec::with_capacity(n * q);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    gemm_into(
        MatRef::new(x.data(), n, p),
        MatRef::new(w.data(), p, q),
        1.0,
        &mut out,
        q,
    );
    Tensor::new(vec![n, q], out)
}

/// `x * w^T + b` for `x: n x p`, `w: q x p`, `b: q`.
pub fn affine_transposed(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, p) = check_matrix("x", x)?;
    let (q, p2) = check_matrix("w", w)?;
    if p != p2 {
        return Err(Error::Shape(format!(
            "inner dimensions differ: x is {n}x{p}, w^T is {p2}x{q}"
        )));
    }
    check_bias(b, q)?;
    let mut out = Vec::with_capacity(n * q);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    gemm_into(
        MatRef::new(x.data(), n, p),
        MatRef::new(w.data(), q, p).t(),
        1.0,
        &mut out,
        q,
    );
    Tensor::new(vec![n, q], out)
}

/// In-place max-subtracted softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Softmax over the trailing dimension.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    if out.cols() == 0 {
        return out;
    }
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

/// Normalized values and per-row inverse standard deviations.
pub(crate) fn normalize_rows(x: &Tensor, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let d = x.cols();
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        xhat.extend(row.iter().map(|v| (v - mean) * inv));
        inv_std.push(inv);
    }
    (xhat, inv_std)
}

/// Layer normalization over the trailing dimension, `eps` added to the variance.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.cols();
    if d == 0 || gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::Shape(format!(
            "layer_norm over width {d} with gain {:?} and bias {:?}",
            gain.shape(),
            bias.shape()
        )));
    }
    let (mut out, _) = normalize_rows(x, eps);
    for row in out.chunks_mut(d) {
        for ((v, g), b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = *v * g + b;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn gelu_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Tanh-approximated GELU, elementwise.
pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Mean negative log-likelihood over positions whose target is not `ignore_id`.
pub fn cross_entropy(logits: &Tensor, targets: &[u32], ignore_id: u32) -> Result<f64> {
    let (n, v) = check_matrix("logits", logits)?;
    if targets.len() != n {
        return Err(Error::Shape(format!(
            "{} targets for {n} logit rows",
            targets.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &t) in targets.iter().enumerate() {
        if t == ignore_id {
            continue;
        }
        let t = t as usize;
        if t >= v {
            return Err(Error::UnknownToken(t as u32));
        }
        total += -log_softmax_at(logits.row(i), t);
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok(total / count as f64)
}

pub(crate) fn log_softmax_at(row: &[f64], index: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[index] - lse
}
