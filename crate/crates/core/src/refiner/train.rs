//! Joint training loop: the detector on its own loss, the refiner on
//! teacher-forced quadtree nodes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{node_labels, reference_labels, refine_loss, ModelKind, RefinerConfig, TokenInputs};
use crate::detector::{
    detector_loss, jitter_targets, oracle_targets, DetectionResult, DetectorConfig, DetectorInput, JitterConfig,
};
use crate::error::{Error, Result};
use crate::mask::{IncoherencePyramid, ProbMap};
use crate::numeric::ops::sigmoid_scalar;
use crate::numeric::{LrSchedule, Sgd, SgdConfig, Tensor};
use crate::pipeline::{mean_boundary_iou, ModelSpec, Models, Propagation};
use crate::quadtree::PointQuadtree;
use crate::synth::Sample;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub model: RefinerConfig,
    pub detector: DetectorConfig,
    pub depth: usize,
    pub epochs: usize,
    /// Samples per optimizer step.
    pub batch: usize,
    pub refiner_sgd: SgdConfig,
    pub detector_sgd: SgdConfig,
    pub schedule: LrSchedule,
    /// Linear warm-up steps applied on top of the schedule; 0 disables.
    pub warmup: usize,
    /// Per-model global gradient-norm clip; 0 disables.
    pub clip: f64,
    /// Nodes drawn per level per sample; `None` uses every node.
    pub cap: Option<usize>,
    pub jitter: JitterConfig,
    /// Select refiner nodes from the detector being trained instead of the oracle.
    pub joint: bool,
    pub refine_weight: f64,
    pub inc_weight: f64,
    /// Validation samples scored per epoch (from the front of the set).
    pub val_limit: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: RefinerConfig::default(),
            detector: DetectorConfig::default(),
            depth: 3,
            epochs: 10,
            batch: 1,
            refiner_sgd: SgdConfig {
                lr: 0.05,
                ..SgdConfig::default()
            },
            detector_sgd: SgdConfig {
                lr: 0.2,
                ..SgdConfig::default()
            },
            schedule: LrSchedule::Constant,
            warmup: 0,
            clip: 1.0,
            cap: Some(100),
            jitter: JitterConfig::default(),
            joint: false,
            refine_weight: 1.0,
            inc_weight: 0.5,
            val_limit: 10,
            seed: 0,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub refine_l1: f64,
    pub inc_bce: f64,
    pub val_biou: f64,
}

impl EpochLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log line serializes")
    }
}

/// Precomputed per-sample training state.
#[derive(Debug, Clone)]
pub struct RefineExample {
    pub target: IncoherencePyramid,
    pub tree: PointQuadtree,
    pub reference_labels: Vec<f32>,
}

impl RefineExample {
    pub fn new(sample: &Sample, depth: usize) -> Result<Self> {
        let target = oracle_targets(&sample.gt, depth)?;
        Ok(Self {
            tree: PointQuadtree::build(&target)?,
            target,
            reference_labels: reference_labels(&sample.gt)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub models: Models,
    pub log: Vec<EpochLog>,
    /// Set when training stopped on a non-finite loss; `models` then holds
    /// the parameters from the end of the last finite epoch.
    pub aborted: Option<String>,
}

fn detection_from_logits(logits: &[Tensor<f32>], threshold: f32) -> Result<IncoherencePyramid> {
    let probs = logits
        .iter()
        .map(|l| {
            let data = l.data().iter().map(|&v| sigmoid_scalar(v)).collect();
            ProbMap::new(l.shape()[1], l.shape()[2], data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DetectionResult::from_probs(probs, threshold)?.masks)
}

/// Trains a detector and a refiner on `train`; `val` feeds the per-epoch
/// boundary IoU. Deterministic for a given config.
pub fn train(train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let channels = train
        .first()
        .or(val.first())
        .map(|s| s.features.channels())
        .ok_or_else(|| Error::InvalidArgument("no training samples".into()))?;
    let spec = ModelSpec {
        channels,
        depth: cfg.depth,
        detector: cfg.detector,
        refiner: cfg.model,
    };
    let mut models = Models::init(spec, cfg.seed)?;
    let examples = train
        .iter()
        .map(|s| RefineExample::new(s, cfg.depth))
        .collect::<Result<Vec<_>>>()?;
    let val = &val[..val.len().min(cfg.val_limit)];

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut ref_opt = Sgd::new(cfg.refiner_sgd);
    let mut det_opt = Sgd::new(cfg.detector_sgd);
    let batch = cfg.batch.max(1);
    let total_steps = cfg.epochs * examples.len().div_ceil(batch);
    let dim = cfg.model.dim;
    let det_scale = if cfg.joint { cfg.inc_weight as f32 } else { 1.0 };
    let mut step = 0usize;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let good = (models.detector_params.clone(), models.refiner_params.clone());
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        let (mut refine_total, mut inc_total) = (0.0f64, 0.0f64);
        let mut failure = None;
        for chunk in order.chunks(batch) {
            models.detector_params.zero_grad();
            models.refiner_params.zero_grad();
            for &i in chunk {
                let (sample, ex) = (&train[i], &examples[i]);
                let input = DetectorInput::new(&sample.features, &sample.coarse)?;
                let (logits, cache) = models.detector.forward(&models.detector_params, &input)?;
                let targets = jitter_targets(&ex.target, &cfg.jitter, &mut rng);
                let (bce, mut dl) = detector_loss(&logits, &targets)?;
                inc_total += f64::from(bce);
                dl.iter_mut().for_each(|t| t.scale(det_scale));
                models.detector.backward(&mut models.detector_params, &cache, &dl);

                let learned;
                let tree = if cfg.joint {
                    let det = detection_from_logits(&logits, cfg.detector.threshold)?;
                    learned = PointQuadtree::build(&det)?;
                    &learned
                } else {
                    &ex.tree
                };
                let ids = tree.node_sequence(cfg.cap, &mut rng);
                let nodes = TokenInputs::for_nodes(tree, &ids, &sample.features, &sample.coarse, dim)?;
                let reference = TokenInputs::reference(&sample.features, &sample.coarse, dim)?;
                let seq = nodes.with_appended(&reference)?;
                let cache = models.refiner.forward(&models.refiner_params, &seq)?;
                let labels = node_labels(tree, &ids, &sample.gt)?;
                let (loss, grad) = refine_loss(cache.outputs(), &labels, &ex.reference_labels, cfg.refine_weight)?;
                if !loss.is_finite() || !bce.is_finite() {
                    failure = Some(format!("non-finite loss at epoch {epoch}"));
                    break;
                }
                refine_total += f64::from(loss);
                models.refiner.backward(&mut models.refiner_params, &cache, &grad);
            }
            if failure.is_some() {
                break;
            }
            let factor = cfg.schedule.factor(step, total_steps)
                * if cfg.warmup > 0 {
                    ((step + 1) as f64 / cfg.warmup as f64).min(1.0)
                } else {
                    1.0
                };
            for (store, opt, base) in [
                (&mut models.refiner_params, &mut ref_opt, cfg.refiner_sgd.lr),
                (&mut models.detector_params, &mut det_opt, cfg.detector_sgd.lr),
            ] {
                store.scale_grads(1.0 / chunk.len() as f32);
                if !store.grads_finite() {
                    failure = Some(format!("non-finite gradient at epoch {epoch}"));
                    break;
                }
                if cfg.clip > 0.0 {
                    store.clip_grad_norm(cfg.clip);
                }
                opt.config.lr = base * factor;
                opt.step(store);
            }
            if failure.is_some() {
                break;
            }
            step += 1;
        }
        if failure.is_none() && !(models.refiner_params.values_finite() && models.detector_params.values_finite()) {
            failure = Some(format!("non-finite parameters after epoch {epoch}"));
        }
        if let Some(msg) = failure {
            models.detector_params = good.0;
            models.refiner_params = good.1;
            return Ok(TrainOutcome {
                models,
                log,
                aborted: Some(msg),
            });
        }
        let n = examples.len().max(1) as f64;
        let val_biou = mean_boundary_iou(&models, val, cfg.depth, Propagation::Full)?;
        log.push(EpochLog {
            epoch,
            refine_l1: refine_total / n,
            inc_bce: inc_total / n,
            val_biou,
        });
    }
    Ok(TrainOutcome {
        models,
        log,
        aborted: None,
    })
}

impl TrainConfig {
    /// The same config with the per-node MLP in place of the transformer.
    pub fn with_kind(mut self, kind: ModelKind) -> Self {
        self.model.kind = kind;
        self
    }
}
