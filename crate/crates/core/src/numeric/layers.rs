//! Parameterized layers. Each holds ids into a [`ParamStore`].

use rand::Rng;

use super::ops::{self, gemm, LayerNormCache, View, ViewMut};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// `y = x·W + b` with `W: in×out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[fan_in, fan_out], fan_in, rng);
        let b = store.add_zeros(format!("{name}.b"), &[fan_out]);
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape().len() != 2 || x.cols() != self.fan_in {
            return Err(Error::Shape(format!(
                "linear expects N×{}, got {:?}",
                self.fan_in,
                x.shape()
            )));
        }
        let n = x.rows();
        let b = store.value(self.b).data();
        let mut y = Tensor::zeros(&[n, self.fan_out]);
        for r in 0..n {
            y.row_mut(r).copy_from_slice(b);
        }
        gemm(
            T::one(),
            View::of(x),
            View::of(store.value(self.w)),
            T::one(),
            ViewMut::of(&mut y),
        );
        Ok(y)
    }

    /// Accumulates parameter gradients and returns `dx`.
    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let mut dx = Tensor::zeros(x.shape());
        gemm(
            T::one(),
            View::of(dy),
            View::of(store.value(self.w)).t(),
            T::zero(),
            ViewMut::of(&mut dx),
        );
        gemm(
            T::one(),
            View::of(x).t(),
            View::of(dy),
            T::one(),
            ViewMut::of(store.grad_mut(self.w)),
        );
        let db = store.grad_mut(self.b).data_mut();
        for r in 0..dy.rows() {
            for (a, &g) in db.iter_mut().zip(dy.row(r)) {
                *a += g;
            }
        }
        dx
    }

    pub fn flops(&self, rows: usize) -> u64 {
        2 * (rows * self.fan_in * self.fan_out) as u64
    }
}

/// Per-row layer normalization with learned gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gain = store.add_filled(format!("{name}.gain"), &[dim], 1.0);
        let bias = store.add_zeros(format!("{name}.bias"), &[dim]);
        Self { gain, bias, dim }
    }

    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> (Tensor<T>, LayerNormCache<T>) {
        assert_eq!(x.cols(), self.dim, "layer norm width");
        ops::layer_norm(x, store.value(self.gain).data(), store.value(self.bias).data())
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        cache: &LayerNormCache<T>,
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let (dx, dg, db) = ops::layer_norm_backward(cache, store.value(self.gain).data(), dy);
        store.accumulate(self.gain, &dg);
        store.accumulate(self.bias, &db);
        dx
    }
}

/// Same-resolution 2-D convolution with bias, kernel 1 or 3.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

/// Forward state kept for [`Conv2d::backward`].
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    x_shape: Vec<usize>,
    cols: Tensor<T>,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        assert!(k == 1 || k == 3, "kernel must be 1 or 3");
        // He-uniform: keeps activation scale through stacked relu convs.
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        let w = store.add_uniform_bound(format!("{name}.w"), &[cout, cin, k, k], bound, rng);
        let b = store.add_zeros(format!("{name}.b"), &[cout]);
        Self { w, b, cin, cout, k }
    }

    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, ConvCache<T>)> {
        let (mut y, cols) = ops::conv2d_forward(x, store.value(self.w))?;
        let hw = x.shape()[1] * x.shape()[2];
        let b = store.value(self.b).data();
        for (ch, plane) in y.data_mut().chunks_mut(hw).enumerate() {
            plane.iter_mut().for_each(|v| *v += b[ch]);
        }
        Ok((
            y,
            ConvCache {
                x_shape: x.shape().to_vec(),
                cols,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        cache: &ConvCache<T>,
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let (dx, dw) = ops::conv2d_backward(&cache.x_shape, &cache.cols, store.value(self.w), dy);
        store.accumulate(self.w, dw.data());
        let hw = cache.x_shape[1] * cache.x_shape[2];
        let db: Vec<T> = dy.data().chunks(hw).map(|p| p.iter().copied().sum()).collect();
        store.accumulate(self.b, &db);
        dx
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        2 * (h * w * self.cin * self.cout * self.k * self.k) as u64
    }
}
