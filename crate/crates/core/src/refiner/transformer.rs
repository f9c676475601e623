//! Post-norm transformer encoder layer with multi-head self-attention.

use rand::Rng;

use crate::error::Result;
use crate::numeric::ops::{gemm, relu_backward, softmax_backward_inplace, softmax_rows_inplace, LayerNormCache, View, ViewMut};
use crate::numeric::{LayerNorm, Linear, ParamStore, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub heads: usize,
    pub dim: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    x: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// Attention weights per head, `T×T`.
    probs: Vec<Tensor<T>>,
    attn: Tensor<T>,
    ln1: LayerNormCache<T>,
    x1: Tensor<T>,
    pre: Tensor<T>,
    hidden: Tensor<T>,
    ln2: LayerNormCache<T>,
}

impl EncoderLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_mult: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            heads,
            dim,
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, ffn_mult * dim, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), ffn_mult * dim, dim, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
        }
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, LayerCache<T>)> {
        let n = x.rows();
        let dh = self.head_dim();
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let q = self.q.forward(store, x)?;
        let k = self.k.forward(store, x)?;
        let v = self.v.forward(store, x)?;
        let mut attn = Tensor::zeros(&[n, self.dim]);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let mut s = Tensor::zeros(&[n, n]);
            gemm(
                scale,
                View::of(&q).cols_range(a, b),
                View::of(&k).cols_range(a, b).t(),
                T::zero(),
                ViewMut::of(&mut s),
            );
            softmax_rows_inplace(s.data_mut(), n);
            gemm(
                T::one(),
                View::of(&s),
                View::of(&v).cols_range(a, b),
                T::zero(),
                ViewMut::of(&mut attn).cols_range(a, b),
            );
            probs.push(s);
        }
        let mut r1 = self.o.forward(store, &attn)?;
        r1.add_assign(x);
        let (x1, ln1) = self.ln1.forward(store, &r1);
        let pre = self.ff1.forward(store, &x1)?;
        let mut hidden = pre.clone();
        hidden.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
        let mut r2 = self.ff2.forward(store, &hidden)?;
        r2.add_assign(&x1);
        let (y, ln2) = self.ln2.forward(store, &r2);
        let cache = LayerCache {
            x: x.clone(),
            q,
            k,
            v,
            probs,
            attn,
            ln1,
            x1,
            pre,
            hidden,
            ln2,
        };
        Ok((y, cache))
    }

    pub fn backward<T: Scalar>(&self, store: &mut ParamStore<T>, cache: &LayerCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let n = cache.x.rows();
        let dh = self.head_dim();
        let scale = T::of(1.0 / (dh as f64).sqrt());

        let dr2 = self.ln2.backward(store, &cache.ln2, dy);
        let dhidden = self.ff2.backward(store, &cache.hidden, &dr2);
        let dpre = relu_backward(&cache.pre, &dhidden);
        let mut dx1 = self.ff1.backward(store, &cache.x1, &dpre);
        dx1.add_assign(&dr2);
        let dr1 = self.ln1.backward(store, &cache.ln1, &dx1);
        let dattn = self.o.backward(store, &cache.attn, &dr1);

        let mut dq = Tensor::zeros(&[n, self.dim]);
        let mut dk = Tensor::zeros(&[n, self.dim]);
        let mut dv = Tensor::zeros(&[n, self.dim]);
        let mut ds = Tensor::zeros(&[n, n]);
        for (h, p) in cache.probs.iter().enumerate() {
            let (a, b) = (h * dh, (h + 1) * dh);
            gemm(
                T::one(),
                View::of(&dattn).cols_range(a, b),
                View::of(&cache.v).cols_range(a, b).t(),
                T::zero(),
                ViewMut::of(&mut ds),
            );
            gemm(
                T::one(),
                View::of(p).t(),
                View::of(&dattn).cols_range(a, b),
                T::zero(),
                ViewMut::of(&mut dv).cols_range(a, b),
            );
            softmax_backward_inplace(p.data(), ds.data_mut(), n);
            gemm(
                scale,
                View::of(&ds),
                View::of(&cache.k).cols_range(a, b),
                T::zero(),
                ViewMut::of(&mut dq).cols_range(a, b),
            );
            gemm(
                scale,
                View::of(&ds).t(),
                View::of(&cache.q).cols_range(a, b),
                T::zero(),
                ViewMut::of(&mut dk).cols_range(a, b),
            );
        }
        let mut dx = dr1;
        dx.add_assign(&self.q.backward(store, &cache.x, &dq));
        dx.add_assign(&self.k.backward(store, &cache.x, &dk));
        dx.add_assign(&self.v.backward(store, &cache.x, &dv));
        dx
    }

    /// Forward FLOPs for `t` tokens (one multiply-add = 2).
    pub fn flops(&self, t: usize) -> u64 {
        let (t, c) = (t as u64, self.dim as u64);
        let proj = 4 * 2 * t * c * c;
        let attn = 2 * 2 * t * t * c;
        let ffn = 2 * 2 * t * c * self.ff1.fan_out as u64;
        proj + attn + ffn
    }
}
