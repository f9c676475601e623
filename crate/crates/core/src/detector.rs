//! Incoherence detection: exact oracle and a learned cascaded FCN with
//! lower-level guidance.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, IncoherencePyramid, ProbMap};
use crate::numeric::layers::ConvCache;
use crate::numeric::ops::{relu, relu_backward, sigmoid_scalar};
use crate::numeric::{Conv2d, LrSchedule, ParamStore, Scalar, Sgd, SgdConfig, Tensor};
use crate::pyramid::{FeatureMap, FeaturePyramid, LEVEL_SIZES};

/// Exact incoherence pyramid of `gt` (coarsest level first).
pub fn detect_oracle(gt: &BinaryMask, depth: usize) -> Result<IncoherencePyramid> {
    IncoherencePyramid::from_ground_truth(gt, depth)
}

/// Oracle pyramid closed upward so that it satisfies the guidance restriction.
pub fn oracle_targets(gt: &BinaryMask, depth: usize) -> Result<IncoherencePyramid> {
    Ok(detect_oracle(gt, depth)?.close_upward())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub trunk_width: usize,
    pub fusion_width: usize,
    /// Feed the upsampled coarser probability map to finer stages.
    pub guidance: bool,
    pub threshold: f32,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            trunk_width: 16,
            fusion_width: 16,
            guidance: true,
            threshold: 0.5,
        }
    }
}

/// Cascaded detector: a 3×3 trunk at the coarsest level and a 1×1
/// fusion/classifier pair per finer level.
#[derive(Debug, Clone)]
pub struct Detector {
    pub config: DetectorConfig,
    pub channels: usize,
    trunk: [Conv2d; 4],
    head: Conv2d,
    fusion: Vec<Conv2d>,
    classifier: Vec<Conv2d>,
}

/// Network input in the working precision.
#[derive(Debug, Clone)]
pub struct DetectorInput<T> {
    /// `C×S×S` per refinement level, coarsest first.
    pub levels: Vec<Tensor<T>>,
    /// `1×28×28`.
    pub coarse: Tensor<T>,
}

pub fn feature_tensor<T: Scalar>(fm: &FeatureMap) -> Tensor<T> {
    let data = fm.data.iter().map(|&v| T::of(v as f64)).collect();
    Tensor::from_vec(&[fm.channels, fm.height, fm.width], data).expect("feature map is consistent")
}

impl<T: Scalar> DetectorInput<T> {
    pub fn new(pyr: &FeaturePyramid, coarse: &ProbMap) -> Result<Self> {
        let s0 = pyr.level(0).height;
        if coarse.height != s0 || coarse.width != s0 {
            return Err(Error::Shape(format!(
                "coarse map {}x{} does not match the {s0}x{s0} feature level",
                coarse.height, coarse.width
            )));
        }
        let data = coarse.data.iter().map(|&v| T::of(v as f64)).collect();
        Ok(Self {
            levels: pyr.levels().iter().map(feature_tensor).collect(),
            coarse: Tensor::from_vec(&[1, s0, s0], data)?,
        })
    }
}

/// Concatenates two `C×H×W` tensors along channels.
fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let shape = [a.shape()[0] + b.shape()[0], a.shape()[1], a.shape()[2]];
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&shape, data).expect("concat shape")
}

/// Nearest-neighbor ×2 upsampling of a `1×H×W` map.
fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[1, 2 * h, 2 * w]);
    let d = out.data_mut();
    for r in 0..2 * h {
        for c in 0..2 * w {
            d[r * 2 * w + c] = x.data()[(r / 2) * w + c / 2];
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2×2 block.
fn upsample2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (h2, w2) = (dy.shape()[1], dy.shape()[2]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros(&[1, h, w]);
    let d = out.data_mut();
    for r in 0..h2 {
        for c in 0..w2 {
            d[(r / 2) * w + c / 2] += dy.data()[r * w2 + c];
        }
    }
    out
}

/// Forward state for [`Detector::backward`].
#[derive(Debug, Clone)]
pub struct DetectorCache<T> {
    trunk: Vec<(ConvCache<T>, Tensor<T>)>,
    head: ConvCache<T>,
    stages: Vec<StageCache<T>>,
    /// Sigmoid outputs per level.
    probs: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
struct StageCache<T> {
    fusion: ConvCache<T>,
    pre: Tensor<T>,
    classifier: ConvCache<T>,
}

impl Detector {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        levels: usize,
        config: DetectorConfig,
        rng: &mut R,
    ) -> Self {
        let w = config.trunk_width;
        let trunk = [
            Conv2d::new(store, &format!("{prefix}trunk0"), channels + 1, w, 3, rng),
            Conv2d::new(store, &format!("{prefix}trunk1"), w, w, 3, rng),
            Conv2d::new(store, &format!("{prefix}trunk2"), w, w, 3, rng),
            Conv2d::new(store, &format!("{prefix}trunk3"), w, w, 3, rng),
        ];
        let head = Conv2d::new(store, &format!("{prefix}head"), w, 1, 1, rng);
        let f = config.fusion_width;
        let mut fusion = Vec::new();
        let mut classifier = Vec::new();
        for l in 1..levels {
            fusion.push(Conv2d::new(store, &format!("{prefix}fusion{l}"), channels + 1, f, 1, rng));
            classifier.push(Conv2d::new(store, &format!("{prefix}cls{l}"), f, 1, 1, rng));
        }
        Self {
            config,
            channels,
            trunk,
            head,
            fusion,
            classifier,
        }
    }

    pub fn levels(&self) -> usize {
        self.fusion.len() + 1
    }

    /// Per-level logits `1×S×S`, coarsest first.
    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        input: &DetectorInput<T>,
    ) -> Result<(Vec<Tensor<T>>, DetectorCache<T>)> {
        if input.levels.len() < self.levels() {
            return Err(Error::Shape(format!(
                "detector needs {} feature levels, got {}",
                self.levels(),
                input.levels.len()
            )));
        }
        if input.levels.iter().any(|l| l.shape()[0] != self.channels) {
            return Err(Error::Shape(format!(
                "detector expects {} feature channels",
                self.channels
            )));
        }
        let mut h = concat_channels(&input.levels[0], &input.coarse);
        let mut trunk = Vec::with_capacity(4);
        for conv in &self.trunk {
            let (z, cache) = conv.forward(store, &h)?;
            h = relu(&z);
            trunk.push((cache, z));
        }
        let (logit, head) = self.head.forward(store, &h)?;
        let mut probs = vec![sigmoid_map(&logit)];
        let mut logits = vec![logit];
        let mut stages = Vec::with_capacity(self.fusion.len());
        for (l, (fusion, cls)) in self.fusion.iter().zip(&self.classifier).enumerate() {
            let feat = &input.levels[l + 1];
            let guide = if self.config.guidance {
                upsample2(&probs[l])
            } else {
                Tensor::zeros(&[1, feat.shape()[1], feat.shape()[2]])
            };
            let x = concat_channels(feat, &guide);
            let (pre, fc) = fusion.forward(store, &x)?;
            let (logit, cc) = cls.forward(store, &relu(&pre))?;
            probs.push(sigmoid_map(&logit));
            logits.push(logit);
            stages.push(StageCache {
                fusion: fc,
                pre,
                classifier: cc,
            });
        }
        Ok((
            logits,
            DetectorCache {
                trunk,
                head,
                stages,
                probs,
            },
        ))
    }

    /// Accumulates parameter gradients given per-level logit gradients.
    pub fn backward<T: Scalar>(&self, store: &mut ParamStore<T>, cache: &DetectorCache<T>, dlogits: &[Tensor<T>]) {
        // Gradient reaching each level's probability map through guidance.
        let mut dprob: Vec<Option<Tensor<T>>> = vec![None; self.levels()];
        for l in (1..self.levels()).rev() {
            let st = &cache.stages[l - 1];
            let mut dlogit = dlogits[l].clone();
            if let Some(dp) = &dprob[l] {
                add_sigmoid_grad(&mut dlogit, &cache.probs[l], dp);
            }
            let dact = self.classifier[l - 1].backward(store, &st.classifier, &dlogit);
            let dpre = relu_backward(&st.pre, &dact);
            let dx = self.fusion[l - 1].backward(store, &st.fusion, &dpre);
            if self.config.guidance {
                let hw = dx.shape()[1] * dx.shape()[2];
                let dguide = Tensor::from_vec(&[1, dx.shape()[1], dx.shape()[2]], dx.data()[self.channels * hw..].to_vec())
                    .expect("guide channel");
                dprob[l - 1] = Some(upsample2_backward(&dguide));
            }
        }
        let mut dlogit = dlogits[0].clone();
        if let Some(dp) = &dprob[0] {
            add_sigmoid_grad(&mut dlogit, &cache.probs[0], dp);
        }
        let mut dh = self.head.backward(store, &cache.head, &dlogit);
        for (conv, (cc, z)) in self.trunk.iter().zip(&cache.trunk).rev() {
            let dz = relu_backward(z, &dh);
            dh = conv.backward(store, cc, &dz);
        }
    }

    /// Thresholded, guidance-restricted detection.
    pub fn detect(&self, store: &ParamStore<f32>, pyr: &FeaturePyramid, coarse: &ProbMap) -> Result<DetectionResult> {
        let input = DetectorInput::new(pyr, coarse)?;
        let (_, cache) = self.forward(store, &input)?;
        let probs: Vec<ProbMap> = cache
            .probs
            .iter()
            .map(|p| ProbMap::new(p.shape()[1], p.shape()[2], p.data().to_vec()))
            .collect::<Result<_>>()?;
        DetectionResult::from_probs(probs, self.config.threshold)
    }

    pub fn flops(&self) -> u64 {
        let s0 = LEVEL_SIZES[0];
        let mut f: u64 = self.trunk.iter().map(|c| c.flops(s0, s0)).sum();
        f += self.head.flops(s0, s0);
        for (l, (a, b)) in self.fusion.iter().zip(&self.classifier).enumerate() {
            let s = LEVEL_SIZES[l + 1];
            f += a.flops(s, s) + b.flops(s, s);
        }
        f
    }
}

fn sigmoid_map<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
    y
}

fn add_sigmoid_grad<T: Scalar>(dlogit: &mut Tensor<T>, p: &Tensor<T>, dp: &Tensor<T>) {
    for ((d, &s), &g) in dlogit.data_mut().iter_mut().zip(p.data()).zip(dp.data()) {
        *d += g * s * (T::one() - s);
    }
}

/// Per-level probabilities and restricted binary masks.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub probs: Vec<ProbMap>,
    pub masks: IncoherencePyramid,
}

impl DetectionResult {
    pub fn from_probs(probs: Vec<ProbMap>, threshold: f32) -> Result<Self> {
        let raw = IncoherencePyramid::new(probs.iter().map(|p| p.threshold(threshold)).collect())?;
        Ok(Self {
            masks: raw.restrict(),
            probs,
        })
    }
}

/// Target jitter: with probability `p`, dilate a level by a radius in `0..=r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterConfig {
    pub p: f64,
    pub r: usize,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self { p: 0.5, r: 1 }
    }
}

pub fn jitter_targets<R: Rng>(target: &IncoherencePyramid, jitter: &JitterConfig, rng: &mut R) -> Vec<BinaryMask> {
    target
        .levels()
        .iter()
        .map(|m| {
            let hit = rng.gen_bool(jitter.p.clamp(0.0, 1.0));
            let radius = rng.gen_range(0..=jitter.r);
            if hit && radius > 0 {
                m.dilate(radius)
            } else {
                m.clone()
            }
        })
        .collect()
}

/// Mean over levels of the per-level mean binary cross-entropy with logits.
/// Returns the loss and the gradient with respect to each level's logits.
pub fn detector_loss<T: Scalar>(logits: &[Tensor<T>], targets: &[BinaryMask]) -> Result<(T, Vec<Tensor<T>>)> {
    if logits.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit levels vs {} target levels",
            logits.len(),
            targets.len()
        )));
    }
    let nl = T::of(logits.len() as f64);
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(logits.len());
    for (z, y) in logits.iter().zip(targets) {
        if z.numel() != y.len() {
            return Err(Error::Shape("logit and target sizes differ".into()));
        }
        let n = T::of(z.numel() as f64);
        let mut g = Tensor::zeros(z.shape());
        let mut sum = T::zero();
        for ((gv, &zv), &yv) in g.data_mut().iter_mut().zip(z.data()).zip(y.as_slice()) {
            let t = if yv != 0 { T::one() } else { T::zero() };
            sum += zv.max(T::zero()) - zv * t + (T::one() + (-zv.abs()).exp()).ln();
            *gv = (sigmoid_scalar(zv) - t) / (n * nl);
        }
        total += sum / n;
        grads.push(g);
    }
    Ok((total / nl, grads))
}

/// Mean binary cross-entropy of probabilities clipped to `[eps, 1 - eps]`.
pub fn bce_from_probs(probs: &ProbMap, target: &BinaryMask, eps: f32) -> f64 {
    let n = probs.data.len().max(1) as f64;
    probs
        .data
        .iter()
        .zip(target.as_slice())
        .map(|(&p, &t)| {
            let p = f64::from(p.clamp(eps, 1.0 - eps));
            if t != 0 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / n
}

/// Recall and precision of detected incoherent pixels, pooled over levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorMetrics {
    pub recall: f64,
    /// Precision over detected pixels.
    pub accuracy: f64,
    /// Pixel accuracy over all pixels of all levels.
    pub pixel_accuracy: f64,
}

pub fn detector_metrics(pred: &IncoherencePyramid, oracle: &IncoherencePyramid) -> Result<DetectorMetrics> {
    if pred.depth() != oracle.depth() {
        return Err(Error::Shape("prediction and oracle depths differ".into()));
    }
    let (mut tp, mut np, mut no, mut agree, mut total) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for (p, o) in pred.levels().iter().zip(oracle.levels()) {
        if !p.same_shape(o) {
            return Err(Error::Shape("prediction and oracle level sizes differ".into()));
        }
        tp += p.intersection_count(o);
        np += p.count_ones();
        no += o.count_ones();
        agree += p.len() - p.xor(o)?.count_ones();
        total += p.len();
    }
    let recall = if no == 0 { 1.0 } else { tp as f64 / no as f64 };
    let accuracy = if np == 0 {
        if no == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        tp as f64 / np as f64
    };
    Ok(DetectorMetrics {
        recall,
        accuracy,
        pixel_accuracy: if total == 0 { 1.0 } else { agree as f64 / total as f64 },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub sgd: SgdConfig,
    pub schedule: LrSchedule,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
    pub jitter: JitterConfig,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 1,
            sgd: SgdConfig {
                lr: 0.2,
                ..SgdConfig::default()
            },
            schedule: LrSchedule::Constant,
            clip: 1.0,
            jitter: JitterConfig::default(),
            seed: 0,
        }
    }
}

/// One training example: network input and closed oracle targets.
#[derive(Debug, Clone)]
pub struct DetectorExample {
    pub input: DetectorInput<f32>,
    pub target: IncoherencePyramid,
}

impl DetectorExample {
    pub fn new(pyr: &FeaturePyramid, coarse: &ProbMap, gt: &BinaryMask, depth: usize) -> Result<Self> {
        Ok(Self {
            input: DetectorInput::new(pyr, coarse)?,
            target: oracle_targets(gt, depth)?,
        })
    }
}

/// Runs one epoch of SGD starting at global step `step`; returns the mean loss.
pub fn detector_epoch<R: Rng>(
    det: &Detector,
    store: &mut ParamStore<f32>,
    opt: &mut Sgd<f32>,
    examples: &[DetectorExample],
    cfg: &DetectorTrainConfig,
    step: &mut usize,
    rng: &mut R,
) -> Result<f64> {
    let batch = cfg.batch.max(1);
    let total_steps = cfg.epochs * examples.len().div_ceil(batch);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for chunk in order.chunks(batch) {
        store.zero_grad();
        for &i in chunk {
            let ex = &examples[i];
            let (logits, cache) = det.forward(store, &ex.input)?;
            let targets = jitter_targets(&ex.target, &cfg.jitter, rng);
            let (loss, dl) = detector_loss(&logits, &targets)?;
            total += f64::from(loss);
            det.backward(store, &cache, &dl);
        }
        store.scale_grads(1.0 / chunk.len() as f32);
        if !store.grads_finite() {
            return Err(Error::NonFinite("detector gradients".into()));
        }
        if cfg.clip > 0.0 {
            store.clip_grad_norm(cfg.clip);
        }
        opt.config.lr = cfg.sgd.lr * cfg.schedule.factor(*step, total_steps);
        opt.step(store);
        *step += 1;
    }
    Ok(total / examples.len().max(1) as f64)
}

/// Trains a fresh detector; returns the model, its parameters and per-epoch losses.
pub fn train_detector(
    examples: &[DetectorExample],
    channels: usize,
    det_cfg: DetectorConfig,
    cfg: &DetectorTrainConfig,
) -> Result<(Detector, ParamStore<f32>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let levels = examples.first().map_or(LEVEL_SIZES.len(), |e| e.target.depth());
    let det = Detector::new(&mut store, "", channels, levels, det_cfg, &mut rng);
    let mut opt = Sgd::new(cfg.sgd);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        losses.push(detector_epoch(&det, &mut store, &mut opt, examples, cfg, &mut step, &mut rng)?);
    }
    Ok((det, store, losses))
}
