//! End-to-end inference: detection, quadtree, node refinement, propagation.
//! Also checkpoint save/load for the trained pair of models.

use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::mask::{BinaryMask, IncoherencePyramid, ProbMap};
use crate::metrics::{boundary_iou, default_band, downsample_to, mask_iou};
use crate::numeric::ParamStore;
use crate::pyramid::{FeaturePyramid, LEVEL_SIZES};
use crate::quadtree::PointQuadtree;
use crate::refiner::{Refiner, RefinerConfig, TokenInputs};
use crate::synth::Sample;

/// Output side of refined masks.
pub const OUTPUT_SIZE: usize = 112;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Propagation {
    #[default]
    Full,
    Finest,
}

impl FromStr for Propagation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Propagation::Full),
            "finest" => Ok(Propagation::Finest),
            _ => Err(Error::Config(format!("unknown propagation {s:?} (full|finest)"))),
        }
    }
}

/// Architecture description stored next to checkpointed parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub channels: usize,
    pub depth: usize,
    pub detector: DetectorConfig,
    pub refiner: RefinerConfig,
}

/// A detector and a refiner with their parameters.
#[derive(Debug, Clone)]
pub struct Models {
    pub spec: ModelSpec,
    pub detector: Detector,
    pub detector_params: ParamStore<f32>,
    pub refiner: Refiner,
    pub refiner_params: ParamStore<f32>,
}

impl Models {
    /// Freshly initialized models, seeded deterministically.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut detector_params = ParamStore::new();
        let detector = Detector::new(&mut detector_params, "", spec.channels, spec.depth, spec.detector, &mut rng);
        let mut refiner_params = ParamStore::new();
        let refiner = Refiner::new(&mut refiner_params, "", spec.channels, spec.refiner, &mut rng)?;
        Ok(Self {
            spec,
            detector,
            detector_params,
            refiner,
            refiner_params,
        })
    }

    /// Writes `model.json` and one tensor file per parameter.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(&self.spec).expect("spec serializes");
        write_atomic(&dir.join("model.json"), format!("{json}\n").as_bytes())?;
        self.detector_params.save(dir, "detector.")?;
        self.refiner_params.save(dir, "refiner.")
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let spec: ModelSpec = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let mut m = Self::init(spec, 0)?;
        m.detector_params.load(dir, "detector.")?;
        m.refiner_params.load(dir, "refiner.")?;
        Ok(m)
    }
}

/// Writes refined values into every node of `tree` (incoherent nodes and
/// their quadrant children). Returns the number of refined nodes.
pub fn refine_tree(
    refiner: &Refiner,
    params: &ParamStore<f32>,
    tree: &mut PointQuadtree,
    pyr: &FeaturePyramid,
    coarse: &ProbMap,
) -> Result<usize> {
    let ids: Vec<usize> = (0..tree.len()).collect();
    if ids.is_empty() {
        return Ok(0);
    }
    let dim = refiner.config.dim;
    let nodes = TokenInputs::for_nodes(tree, &ids, pyr, coarse, dim)?;
    let reference = TokenInputs::reference(pyr, coarse, dim)?;
    let values = refiner.refine(params, &nodes, Some(&reference))?;
    for (&id, v) in ids.iter().zip(values) {
        tree.set_value(id, v);
    }
    Ok(ids.len())
}

#[derive(Debug, Clone)]
pub struct Inference {
    /// Restricted detection truncated to the requested depth.
    pub detection: IncoherencePyramid,
    pub tree: PointQuadtree,
    pub prob: ProbMap,
    pub mask: BinaryMask,
}

/// Full pipeline on one sample at `depth` (1..=3), output at 112×112.
pub fn infer(
    models: &Models,
    pyr: &FeaturePyramid,
    coarse: &ProbMap,
    depth: usize,
    propagation: Propagation,
) -> Result<Inference> {
    if depth == 0 || depth > models.spec.depth {
        return Err(Error::InvalidArgument(format!(
            "depth {depth} outside 1..={}",
            models.spec.depth
        )));
    }
    let det = models.detector.detect(&models.detector_params, pyr, coarse)?;
    let detection = det.masks.truncated(depth);
    let mut tree = PointQuadtree::build(&detection)?;
    refine_tree(&models.refiner, &models.refiner_params, &mut tree, pyr, coarse)?;
    let prob = propagate_with(&tree, coarse, propagation)?;
    Ok(Inference {
        detection,
        mask: prob.threshold(0.5),
        tree,
        prob,
    })
}

pub fn propagate_with(tree: &PointQuadtree, coarse: &ProbMap, propagation: Propagation) -> Result<ProbMap> {
    match propagation {
        Propagation::Full => tree.propagate_prob(coarse, OUTPUT_SIZE),
        Propagation::Finest => tree.finest_only_propagate_prob(coarse, OUTPUT_SIZE),
    }
}

/// Ground truth at the output resolution.
pub fn target_mask(gt: &BinaryMask) -> Result<BinaryMask> {
    downsample_to(gt, OUTPUT_SIZE)
}

/// Thresholded coarse mask upsampled to the output resolution.
pub fn coarse_baseline(coarse: &ProbMap) -> BinaryMask {
    coarse.threshold(0.5).upsample_by(OUTPUT_SIZE / coarse.height)
}

/// `(mask IoU, boundary IoU)` of `pred` against `gt` at the output resolution.
pub fn score(pred: &BinaryMask, gt: &BinaryMask) -> Result<(f64, f64)> {
    let truth = target_mask(gt)?;
    let d = default_band(OUTPUT_SIZE, OUTPUT_SIZE);
    Ok((mask_iou(pred, &truth)?, boundary_iou(pred, &truth, d)?))
}

/// Mean boundary IoU of the pipeline over `samples`.
pub fn mean_boundary_iou(models: &Models, samples: &[Sample], depth: usize, propagation: Propagation) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in samples {
        let out = infer(models, &s.features, &s.coarse, depth, propagation)?;
        total += score(&out.mask, &s.gt)?.1;
    }
    Ok(total / samples.len() as f64)
}

/// Default detection depth: one level per refinement feature level.
pub const DEFAULT_DEPTH: usize = LEVEL_SIZES.len();
