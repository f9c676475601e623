//! Sparse node refinement: node encoder, transformer encoder over nodes plus
//! reference tokens, pixel decoder, and the MLP and dense baselines.

mod encode;
mod train;
mod transformer;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use encode::{coarse_patch, encode_position, TokenInputs, POSITION_SCALE, REFERENCE_SLOT};
pub use train::{train, EpochLog, RefineExample, TrainConfig, TrainOutcome};
pub use transformer::{EncoderLayer, LayerCache};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, ProbMap};
use crate::metrics::{memory_model, CostConfig};
use crate::numeric::ops::relu_backward;
use crate::numeric::{Linear, ParamId, ParamStore, Scalar, Tensor};
use crate::pyramid::{FeaturePyramid, REFERENCE_SIZE};
use crate::quadtree::PointQuadtree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Transformer,
    Mlp,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(ModelKind::Transformer),
            "mlp" => Ok(ModelKind::Mlp),
            _ => Err(Error::Config(format!("unknown model kind {s:?} (transformer|mlp)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinerConfig {
    pub kind: ModelKind,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Transformer,
            dim: 64,
            heads: 4,
            layers: 3,
            ffn_mult: 4,
        }
    }
}

#[derive(Debug, Clone)]
enum Body {
    Transformer { layers: Vec<EncoderLayer>, dec: [Linear; 2] },
    Mlp { layers: [Linear; 4] },
}

/// Node encoder plus either the transformer stack or the per-node MLP.
#[derive(Debug, Clone)]
pub struct Refiner {
    pub config: RefinerConfig,
    pub channels: usize,
    ctx: Linear,
    cue: Linear,
    fuse: Linear,
    level: ParamId,
    body: Body,
}

#[derive(Debug, Clone)]
struct EncodeCache<T> {
    context: Tensor<T>,
    cue: Tensor<T>,
    cat: Tensor<T>,
    slot: Vec<usize>,
}

#[derive(Debug, Clone)]
enum BodyCache<T> {
    Transformer {
        layers: Vec<LayerCache<T>>,
        top: Tensor<T>,
        pre: Tensor<T>,
        hidden: Tensor<T>,
    },
    Mlp {
        inputs: Vec<Tensor<T>>,
        pres: Vec<Tensor<T>>,
    },
}

/// Forward state for [`Refiner::backward`].
#[derive(Debug, Clone)]
pub struct RefinerCache<T> {
    encode: EncodeCache<T>,
    body: BodyCache<T>,
    /// Sigmoid outputs for every token.
    out: Vec<T>,
}

impl<T> RefinerCache<T> {
    pub fn outputs(&self) -> &[T] {
        &self.out
    }
}

impl Refiner {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        config: RefinerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = config.dim;
        if d == 0 || d % 2 != 0 || config.heads == 0 || d % config.heads != 0 {
            return Err(Error::Config(format!(
                "dim {d} must be even and divisible by heads {}",
                config.heads
            )));
        }
        let ctx = Linear::new(store, &format!("{prefix}enc.ctx"), 9 * channels, d, rng);
        let cue = Linear::new(store, &format!("{prefix}enc.cue"), 9, d, rng);
        let fuse = Linear::new(store, &format!("{prefix}enc.fuse"), channels + 2 * d, d, rng);
        let level = store.add_zeros(format!("{prefix}enc.level"), &[REFERENCE_SLOT + 1, d]);
        let body = match config.kind {
            ModelKind::Transformer => {
                let layers = (0..config.layers)
                    .map(|i| EncoderLayer::new(store, &format!("{prefix}layer{i}"), d, config.heads, config.ffn_mult, rng))
                    .collect();
                let dec = [
                    Linear::new(store, &format!("{prefix}dec0"), d, d, rng),
                    Linear::new(store, &format!("{prefix}dec1"), d, 1, rng),
                ];
                Body::Transformer { layers, dec }
            }
            ModelKind::Mlp => Body::Mlp {
                layers: [
                    Linear::new(store, &format!("{prefix}mlp0"), d, d, rng),
                    Linear::new(store, &format!("{prefix}mlp1"), d, d, rng),
                    Linear::new(store, &format!("{prefix}mlp2"), d, d, rng),
                    Linear::new(store, &format!("{prefix}mlp3"), d, 1, rng),
                ],
            },
        };
        Ok(Self {
            config,
            channels,
            ctx,
            cue,
            fuse,
            level,
            body,
        })
    }

    /// Node encodings `T×D`: fused cues plus position and level embedding.
    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, inputs: &TokenInputs<T>) -> Result<Tensor<T>> {
        Ok(self.encode_cached(store, inputs)?.0)
    }

    fn encode_cached<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        inputs: &TokenInputs<T>,
    ) -> Result<(Tensor<T>, EncodeCache<T>)> {
        let d = self.config.dim;
        if inputs.channels() != self.channels || inputs.position.cols() != d {
            return Err(Error::Shape(format!(
                "token inputs have {} channels / {} position dims, model expects {} / {d}",
                inputs.channels(),
                inputs.position.cols(),
                self.channels
            )));
        }
        let n = inputs.len();
        let hctx = self.ctx.forward(store, &inputs.context)?;
        let hcue = self.cue.forward(store, &inputs.cue)?;
        let width = self.channels + 2 * d;
        let mut cat = Tensor::zeros(&[n, width]);
        for i in 0..n {
            let row = cat.row_mut(i);
            row[..self.channels].copy_from_slice(inputs.fine.row(i));
            row[self.channels..self.channels + d].copy_from_slice(hctx.row(i));
            row[self.channels + d..].copy_from_slice(hcue.row(i));
        }
        let mut z = self.fuse.forward(store, &cat)?;
        z.add_assign(&inputs.position);
        let emb = store.value(self.level);
        for (i, &s) in inputs.slot.iter().enumerate() {
            for (v, &e) in z.row_mut(i).iter_mut().zip(emb.row(s)) {
                *v += e;
            }
        }
        let cache = EncodeCache {
            context: inputs.context.clone(),
            cue: inputs.cue.clone(),
            cat,
            slot: inputs.slot.clone(),
        };
        Ok((z, cache))
    }

    fn encode_backward<T: Scalar>(&self, store: &mut ParamStore<T>, cache: &EncodeCache<T>, dz: &Tensor<T>) {
        let d = self.config.dim;
        let mut dlevel = Tensor::<T>::zeros(&[REFERENCE_SLOT + 1, d]);
        for (i, &s) in cache.slot.iter().enumerate() {
            for (g, &v) in dlevel.row_mut(s).iter_mut().zip(dz.row(i)) {
                *g += v;
            }
        }
        store.accumulate(self.level, dlevel.data());
        let dcat = self.fuse.backward(store, &cache.cat, dz);
        let n = dz.rows();
        let c = self.channels;
        let mut dctx = Tensor::zeros(&[n, d]);
        let mut dcue = Tensor::zeros(&[n, d]);
        for i in 0..n {
            dctx.row_mut(i).copy_from_slice(&dcat.row(i)[c..c + d]);
            dcue.row_mut(i).copy_from_slice(&dcat.row(i)[c + d..]);
        }
        self.ctx.backward(store, &cache.context, &dctx);
        self.cue.backward(store, &cache.cue, &dcue);
    }

    /// Sigmoid outputs for every token (nodes first, then any reference tokens).
    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, inputs: &TokenInputs<T>) -> Result<RefinerCache<T>> {
        let (z, encode) = self.encode_cached(store, inputs)?;
        let (logits, body) = match &self.body {
            Body::Transformer { layers, dec } => {
                let mut x = z;
                let mut caches = Vec::with_capacity(layers.len());
                for layer in layers {
                    let (y, c) = layer.forward(store, &x)?;
                    caches.push(c);
                    x = y;
                }
                let pre = dec[0].forward(store, &x)?;
                let hidden = relu_of(&pre);
                let logits = dec[1].forward(store, &hidden)?;
                (
                    logits,
                    BodyCache::Transformer {
                        layers: caches,
                        top: x,
                        pre,
                        hidden,
                    },
                )
            }
            Body::Mlp { layers } => {
                let mut inputs_ = Vec::with_capacity(4);
                let mut pres = Vec::with_capacity(3);
                let mut h = z;
                for (i, l) in layers.iter().enumerate() {
                    let pre = l.forward(store, &h)?;
                    inputs_.push(h);
                    if i + 1 == layers.len() {
                        h = pre;
                    } else {
                        h = relu_of(&pre);
                        pres.push(pre);
                    }
                }
                (h, BodyCache::Mlp { inputs: inputs_, pres })
            }
        };
        if !logits.is_finite() {
            return Err(Error::NonFinite("refiner activations".into()));
        }
        let out = logits.data().iter().map(|&v| crate::numeric::ops::sigmoid_scalar(v)).collect();
        Ok(RefinerCache { encode, body, out })
    }

    /// Accumulates parameter gradients given `d loss / d output` per token.
    pub fn backward<T: Scalar>(&self, store: &mut ParamStore<T>, cache: &RefinerCache<T>, dout: &[T]) {
        let n = cache.out.len();
        assert_eq!(dout.len(), n, "one output gradient per token");
        let dl: Vec<T> = cache
            .out
            .iter()
            .zip(dout)
            .map(|(&y, &g)| g * y * (T::one() - y))
            .collect();
        let dlogits = Tensor::from_vec(&[n, 1], dl).expect("logit shape");
        let dz = match (&self.body, &cache.body) {
            (
                Body::Transformer { layers, dec },
                BodyCache::Transformer {
                    layers: caches,
                    top,
                    pre,
                    hidden,
                },
            ) => {
                let dh = dec[1].backward(store, hidden, &dlogits);
                let dpre = relu_backward(pre, &dh);
                let mut dx = dec[0].backward(store, top, &dpre);
                for (layer, c) in layers.iter().zip(caches).rev() {
                    dx = layer.backward(store, c, &dx);
                }
                dx
            }
            (Body::Mlp { layers }, BodyCache::Mlp { inputs, pres }) => {
                let mut dh = dlogits;
                for (i, l) in layers.iter().enumerate().rev() {
                    if i + 1 < layers.len() {
                        dh = relu_backward(&pres[i], &dh);
                    }
                    dh = l.backward(store, &inputs[i], &dh);
                }
                dh
            }
            _ => unreachable!("cache built by a different model"),
        };
        self.encode_backward(store, &cache.encode, &dz);
    }

    /// Per-node values in (0,1) for `nodes` with the reference grid appended
    /// (transformer) or alone (MLP, which ignores other tokens).
    pub fn refine<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        nodes: &TokenInputs<T>,
        reference: Option<&TokenInputs<T>>,
    ) -> Result<Vec<T>> {
        if nodes.nodes == 0 {
            return Ok(Vec::new());
        }
        let seq = match (reference, self.config.kind) {
            (Some(r), ModelKind::Transformer) => nodes.with_appended(r)?,
            _ => nodes.clone(),
        };
        let cache = self.forward(store, &seq)?;
        Ok(cache.out[..nodes.nodes].to_vec())
    }

    /// Dense attention over every pixel of an `S×S` grid (`S` = 14 uses the
    /// reference grid). Rejects grids whose attention memory exceeds `budget`.
    pub fn dense_baseline(
        &self,
        store: &ParamStore<f32>,
        pyr: &FeaturePyramid,
        coarse: &ProbMap,
        size: usize,
        budget_bytes: u64,
    ) -> Result<ProbMap> {
        let tokens = size * size;
        let need = memory_model(&self.cost_config(tokens));
        if need > budget_bytes {
            return Err(Error::InvalidArgument(format!(
                "dense {size}x{size} grid needs ~{:.1} MB of activations, budget is {:.1} MB",
                need as f64 / 1e6,
                budget_bytes as f64 / 1e6
            )));
        }
        let inputs = TokenInputs::dense_grid(pyr, coarse, size, self.config.dim)?;
        let out = self.refine(store, &inputs, None)?;
        ProbMap::new(size, size, out)
    }

    pub fn cost_config(&self, tokens: usize) -> CostConfig {
        let mlp = self.config.kind == ModelKind::Mlp;
        CostConfig {
            tokens,
            dim: self.config.dim,
            heads: if mlp { 0 } else { self.config.heads },
            layers: if mlp { 0 } else { self.config.layers },
            ffn_mult: self.config.ffn_mult,
        }
    }
}

fn relu_of<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
    y
}

/// Ground-truth label of each node: `gt` sampled (top-left phase) at the
/// node's level resolution.
pub fn node_labels(tree: &PointQuadtree, ids: &[usize], gt: &BinaryMask) -> Result<Vec<f32>> {
    ids.iter()
        .map(|&id| {
            let n = tree.node(id);
            let s = tree.level_size(n.level);
            if gt.height() % s != 0 {
                return Err(Error::Shape(format!("gt {} not a multiple of level size {s}", gt.height())));
            }
            let f = gt.height() / s;
            Ok(if gt.get(n.row * f, n.col * f) { 1.0 } else { 0.0 })
        })
        .collect()
}

/// Row-major 14×14 labels for the reference tokens.
pub fn reference_labels(gt: &BinaryMask) -> Result<Vec<f32>> {
    let s = REFERENCE_SIZE;
    if gt.height() % s != 0 || gt.width() != gt.height() {
        return Err(Error::Shape(format!("gt {}x{} not a multiple of 14", gt.height(), gt.width())));
    }
    let f = gt.height() / s;
    Ok((0..s * s)
        .map(|i| if gt.get((i / s) * f, (i % s) * f) { 1.0 } else { 0.0 })
        .collect())
}

/// `λ·(mean |y − g| over nodes + mean |y − g| over reference tokens)`.
///
/// `outputs` holds node outputs followed by reference outputs. Returns the
/// loss and its gradient with respect to `outputs`.
pub fn refine_loss<T: Scalar>(
    outputs: &[T],
    node_labels: &[f32],
    reference_labels: &[f32],
    weight: f64,
) -> Result<(T, Vec<T>)> {
    let n = node_labels.len();
    if outputs.len() != n + reference_labels.len() {
        return Err(Error::Shape(format!(
            "{} outputs for {} node and {} reference labels",
            outputs.len(),
            n,
            reference_labels.len()
        )));
    }
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); outputs.len()];
    for (range, labels) in [(0..n, node_labels), (n..outputs.len(), reference_labels)] {
        if labels.is_empty() {
            continue;
        }
        let inv = T::of(weight / labels.len() as f64);
        for (i, &g) in range.zip(labels) {
            let diff = outputs[i] - T::of(f64::from(g));
            loss += diff.abs() * inv;
            grad[i] = if diff > T::zero() {
                inv
            } else if diff < T::zero() {
                -inv
            } else {
                T::zero()
            };
        }
    }
    Ok((loss, grad))
}
