//! Forward and backward kernels.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    data: &'a [T],
    off: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Scalar> View<'a, T> {
    /// Contiguous row-major `rows×cols` view.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "view exceeds buffer");
        Self {
            data,
            off: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn of(t: &'a Tensor<T>) -> Self {
        Self::new(t.data(), t.rows(), t.cols())
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    /// Columns `[c0, c1)`.
    pub fn cols_range(self, c0: usize, c1: usize) -> Self {
        assert!(c0 <= c1 && c1 <= self.cols);
        Self {
            off: self.off + c0 * self.cs,
            cols: c1 - c0,
            ..self
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.off + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "view out of bounds");
        }
    }
}

/// Strided mutable matrix view.
pub struct ViewMut<'a, T> {
    data: &'a mut [T],
    off: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Scalar> ViewMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "view exceeds buffer");
        Self {
            data,
            off: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn of(t: &'a mut Tensor<T>) -> Self {
        let (r, c) = (t.rows(), t.cols());
        Self::new(t.data_mut(), r, c)
    }

    pub fn cols_range(self, c0: usize, c1: usize) -> Self {
        assert!(c0 <= c1 && c1 <= self.cols);
        Self {
            off: self.off + c0 * self.cs,
            cols: c1 - c0,
            ..self
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.off + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "view out of bounds");
        }
    }
}

/// `C = alpha·A·B + beta·C` on strided views.
pub fn gemm<T: Scalar>(alpha: T, a: View<'_, T>, b: View<'_, T>, beta: T, c: ViewMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "gemm output shape");
    a.check();
    b.check();
    c.check();
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        // Empty inner product: only the beta scaling applies.
        for i in 0..c.rows {
            for j in 0..c.cols {
                let idx = c.off + i * c.rs + j * c.cs;
                c.data[idx] = if beta == T::zero() {
                    T::zero()
                } else {
                    beta * c.data[idx]
                };
            }
        }
        return;
    }
    // SAFETY: the bounds of all three views were checked above.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.off),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

fn require_2d<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.shape().len() == 2 {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what} must be 2-D, got {:?}", t.shape())))
    }
}

/// Matrix product of `M×K` and `K×N` tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    require_2d(a, "matmul lhs")?;
    require_2d(b, "matmul rhs")?;
    if a.cols() != b.rows() {
        return Err(Error::Shape(format!(
            "matmul {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut c = Tensor::zeros(&[a.rows(), b.cols()]);
    gemm(T::one(), View::of(a), View::of(b), T::zero(), ViewMut::of(&mut c));
    Ok(c)
}

/// Gradients of `C = A·B`: `dA = dC·Bᵀ`, `dB = Aᵀ·dC`.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let mut da = Tensor::zeros(a.shape());
    let mut db = Tensor::zeros(b.shape());
    gemm(T::one(), View::of(dc), View::of(b).t(), T::zero(), ViewMut::of(&mut da));
    gemm(T::one(), View::of(a).t(), View::of(dc), T::zero(), ViewMut::of(&mut db));
    (da, db)
}

/// Unfolds `x: Cin×H×W` into `(Cin·k·k)×(H·W)` columns with zero padding `(k-1)/2`.
pub fn im2col<T: Scalar>(x: &Tensor<T>, k: usize) -> Tensor<T> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if k == 1 {
        return x.clone().reshape(&[cin, h * w]).expect("same element count");
    }
    let pad = (k - 1) / 2;
    let mut cols = Tensor::zeros(&[cin * k * k, h * w]);
    let xd = x.data();
    let cd = cols.data_mut();
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cd[row * h * w..(row + 1) * h * w];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &xd[(c * h + sy as usize) * w..(c * h + sy as usize + 1) * w];
                    for xo in 0..w {
                        let sx = xo as isize + kx as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            dst[y * w + xo] = src[sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub fn col2im<T: Scalar>(cols: &Tensor<T>, cin: usize, h: usize, w: usize, k: usize) -> Tensor<T> {
    if k == 1 {
        return cols.clone().reshape(&[cin, h, w]).expect("same element count");
    }
    let pad = (k - 1) / 2;
    let mut x = Tensor::zeros(&[cin, h, w]);
    let cd = cols.data();
    let xd = x.data_mut();
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cd[row * h * w..(row + 1) * h * w];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = (c * h + sy as usize) * w;
                    for xo in 0..w {
                        let sx = xo as isize + kx as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            xd[base + sx as usize] += src[y * w + xo];
                        }
                    }
                }
            }
        }
    }
    x
}

fn check_conv<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<usize> {
    if x.shape().len() != 3 || w.shape().len() != 4 {
        return Err(Error::Shape(format!(
            "conv2d expects Cin×H×W input and Cout×Cin×k×k weight, got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let k = w.shape()[2];
    if w.shape()[3] != k || !(k == 1 || k == 3) {
        return Err(Error::InvalidArgument(format!(
            "unsupported kernel {}x{}",
            w.shape()[2],
            w.shape()[3]
        )));
    }
    if w.shape()[1] != x.shape()[0] {
        return Err(Error::Shape(format!(
            "conv2d weight expects {} input channels, got {}",
            w.shape()[1],
            x.shape()[0]
        )));
    }
    Ok(k)
}

/// Same-resolution convolution; also returns the unfolded input for backward.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let k = check_conv(x, w)?;
    let (h, wd) = (x.shape()[1], x.shape()[2]);
    let cout = w.shape()[0];
    let cols = im2col(x, k);
    let mut y = Tensor::zeros(&[cout, h, wd]);
    gemm(
        T::one(),
        View::new(w.data(), cout, cols.rows()),
        View::of(&cols),
        T::zero(),
        ViewMut::new(y.data_mut(), cout, h * wd),
    );
    Ok((y, cols))
}

/// `conv2d(x, w)` with zero padding `(k-1)/2`, `k ∈ {1, 3}`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    conv2d_forward(x, w).map(|(y, _)| y)
}

/// Returns `(dx, dw)` given the cached columns from [`conv2d_forward`].
pub fn conv2d_backward<T: Scalar>(
    x_shape: &[usize],
    cols: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (cin, h, wd) = (x_shape[0], x_shape[1], x_shape[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let kk = cin * k * k;
    let hw = h * wd;
    let mut dw = Tensor::zeros(w.shape());
    gemm(
        T::one(),
        View::new(dy.data(), cout, hw),
        View::of(cols).t(),
        T::zero(),
        ViewMut::new(dw.data_mut(), cout, kk),
    );
    let mut dcols = Tensor::zeros(&[kk, hw]);
    gemm(
        T::one(),
        View::new(w.data(), cout, kk).t(),
        View::new(dy.data(), cout, hw),
        T::zero(),
        ViewMut::of(&mut dcols),
    );
    (col2im(&dcols, cin, h, wd, k), dw)
}

/// Row-wise softmax, stabilized by subtracting the row maximum.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    softmax_rows_inplace(y.data_mut(), x.cols());
    y
}

pub fn softmax_rows_inplace<T: Scalar>(data: &mut [T], cols: usize) {
    if cols == 0 {
        return;
    }
    for row in data.chunks_mut(cols) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        let inv = T::one() / s;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// `dx = y ⊙ (dy − Σ_j dy_j y_j)` per row.
pub fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    softmax_backward_inplace(y.data(), dx.data_mut(), y.cols());
    dx
}

/// Overwrites `d` (holding dy) with dx.
pub fn softmax_backward_inplace<T: Scalar>(y: &[T], d: &mut [T], cols: usize) {
    if cols == 0 {
        return;
    }
    for (yr, dr) in y.chunks(cols).zip(d.chunks_mut(cols)) {
        let dot: T = yr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
        for (dv, &yv) in dr.iter_mut().zip(yr) {
            *dv = yv * (*dv - dot);
        }
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
    y
}

/// Gradient of relu given its input.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
    y
}

/// Gradient of sigmoid given its output.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &s) in dx.data_mut().iter_mut().zip(y.data()) {
        *d *= s * (T::one() - s);
    }
    dx
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalized activations and inverse standard deviations kept for backward.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Per-row layer normalization over the last axis with gain and bias.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &[T],
    bias: &[T],
) -> (Tensor<T>, LayerNormCache<T>) {
    let c = x.cols();
    let n = T::of(c as f64);
    let eps = T::of(LAYER_NORM_EPS);
    let mut xhat = x.clone();
    let mut y = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for (xr, (hr, yr)) in x
        .data()
        .chunks(c)
        .zip(xhat.data_mut().chunks_mut(c).zip(y.data_mut().chunks_mut(c)))
    {
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        for j in 0..c {
            hr[j] = (xr[j] - mean) * inv;
            yr[j] = hr[j] * gain[j] + bias[j];
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gain: &[T],
    dy: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let c = dy.cols();
    let n = T::of(c as f64);
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgain = vec![T::zero(); c];
    let mut dbias = vec![T::zero(); c];
    let mut dxhat = vec![T::zero(); c];
    for (r, (dyr, hr)) in dy
        .data()
        .chunks(c)
        .zip(cache.xhat.data().chunks(c))
        .enumerate()
    {
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for j in 0..c {
            dgain[j] += dyr[j] * hr[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
            s1 += dxhat[j];
            s2 += dxhat[j] * hr[j];
        }
        let inv = cache.inv_std[r];
        let dxr = dx.row_mut(r);
        for j in 0..c {
            dxr[j] = inv / n * (n * dxhat[j] - s1 - hr[j] * s2);
        }
    }
    (dx, dgain, dbias)
}
