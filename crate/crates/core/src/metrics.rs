//! Mask and boundary IoU, incoherence statistics, and the analytic cost model
//! of the refinement stage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, IncoherencePyramid, ProbMap};
use crate::quadtree::PointQuadtree;

fn check_shapes(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// `|a∩b| / |a∪b|`, 1.0 when both are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_shapes(a, b)?;
    let u = a.union_count(b);
    Ok(if u == 0 {
        1.0
    } else {
        a.intersection_count(b) as f64 / u as f64
    })
}

/// Band distance `max(1, round(0.02 · diagonal))`.
pub fn default_band(height: usize, width: usize) -> usize {
    let diag = ((height * height + width * width) as f64).sqrt();
    ((0.02 * diag).round() as usize).max(1)
}

/// IoU of the parts of `a` and `b` within distance `d` of their own contours.
pub fn boundary_iou(a: &BinaryMask, b: &BinaryMask, d: usize) -> Result<f64> {
    check_shapes(a, b)?;
    let ba = a.and(&a.boundary_band(d)?)?;
    let bb = b.and(&b.boundary_band(d)?)?;
    mask_iou(&ba, &bb)
}

/// Incoherence statistics of a coarse prediction against its ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncoherenceStats {
    /// Closed incoherent region (union over levels at gt resolution) over the gt bounding box.
    pub area_fraction: f64,
    /// Finest-level incoherent pixels alone, over the gt bounding box.
    pub finest_fraction: f64,
    /// Fraction of wrongly predicted pixels inside the incoherent region.
    pub err_recall: f64,
    /// Fraction of incoherent-region pixels the coarse prediction gets right.
    pub err_acc: f64,
}

/// Statistics for `coarse` (thresholded at 0.5 and upsampled to `gt`).
///
/// The region is the upward-closed incoherence pyramid of `gt` with `depth`
/// levels, so every non-constant coarse block is covered.
pub fn incoherence_stats(gt: &BinaryMask, coarse: &ProbMap, depth: usize) -> Result<IncoherenceStats> {
    let Some((r0, c0, r1, c1)) = gt.bounding_box() else {
        return Err(Error::InvalidArgument("empty ground truth".into()));
    };
    if gt.height() % coarse.height != 0 || gt.width() % coarse.width != 0 {
        return Err(Error::Shape(format!(
            "coarse {}x{} does not divide gt {}x{}",
            coarse.height,
            coarse.width,
            gt.height(),
            gt.width()
        )));
    }
    let pyr = IncoherencePyramid::from_ground_truth(gt, depth)?;
    if pyr.level(0).height() != coarse.height {
        return Err(Error::Shape(format!(
            "depth {depth} puts the coarsest level at {}, coarse map is {}",
            pyr.level(0).height(),
            coarse.height
        )));
    }
    let (h, w) = (gt.height(), gt.width());
    let region = pyr.close_upward().union_at(h, w);
    let finest = pyr.level(depth - 1).upsample_by(h / pyr.level(depth - 1).height());
    let pred = coarse.threshold(0.5).upsample_by(h / coarse.height);
    let wrong = pred.xor(gt)?;
    let bbox = ((r1 - r0) * (c1 - c0)) as f64;
    let region_n = region.count_ones();
    let wrong_n = wrong.count_ones();
    let wrong_in = wrong.intersection_count(&region);
    Ok(IncoherenceStats {
        area_fraction: region_n as f64 / bbox,
        finest_fraction: finest.count_ones() as f64 / bbox,
        err_recall: if wrong_n == 0 { 1.0 } else { wrong_in as f64 / wrong_n as f64 },
        err_acc: if region_n == 0 {
            1.0
        } else {
            (region_n - wrong_in) as f64 / region_n as f64
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleFill {
    pub iou_coarse: f64,
    pub iou_filled: f64,
}

/// IoU at `target` resolution before and after writing ground-truth values
/// into every node of the tree built from `det`.
pub fn oracle_fill_study(
    gt: &BinaryMask,
    coarse: &ProbMap,
    det: &IncoherencePyramid,
    target: usize,
) -> Result<OracleFill> {
    let truth = downsample_to(gt, target)?;
    let before = coarse.threshold(0.5).upsample_by(target / coarse.height);
    let mut tree = PointQuadtree::build(det)?;
    tree.fill_from_gt(gt, true)?;
    let after = tree.propagate(coarse, target)?;
    Ok(OracleFill {
        iou_coarse: mask_iou(&before, &truth)?,
        iou_filled: mask_iou(&after, &truth)?,
    })
}

/// Repeated top-left-phase halving of `gt` down to `size`.
pub fn downsample_to(gt: &BinaryMask, size: usize) -> Result<BinaryMask> {
    let mut m = gt.clone();
    while m.height() > size {
        m = m.downsample_nn();
    }
    if m.height() != size || m.width() != size {
        return Err(Error::Shape(format!(
            "{}x{} does not halve to {size}x{size}",
            gt.height(),
            gt.width()
        )));
    }
    Ok(m)
}

/// One evaluated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub mask_iou: f64,
    pub boundary_iou: f64,
    pub band: usize,
    pub recall: Option<f64>,
    pub accuracy: Option<f64>,
    pub area_fraction: f64,
    pub nodes: usize,
    pub flops: u64,
    pub memory_bytes: u64,
}

/// Means over a set of records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub samples: usize,
    pub mask_iou: f64,
    pub boundary_iou: f64,
    pub recall: Option<f64>,
    pub accuracy: Option<f64>,
    pub area_fraction: f64,
    pub nodes: f64,
    pub flops: f64,
    pub memory_bytes: f64,
}

impl EvalSummary {
    pub fn of(records: &[EvalRecord]) -> Self {
        let n = records.len();
        let mean = |f: &dyn Fn(&EvalRecord) -> f64| {
            if n == 0 {
                0.0
            } else {
                records.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let opt_mean = |f: &dyn Fn(&EvalRecord) -> Option<f64>| {
            let v: Vec<f64> = records.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Self {
            samples: n,
            mask_iou: mean(&|r| r.mask_iou),
            boundary_iou: mean(&|r| r.boundary_iou),
            recall: opt_mean(&|r| r.recall),
            accuracy: opt_mean(&|r| r.accuracy),
            area_fraction: mean(&|r| r.area_fraction),
            nodes: mean(&|r| r.nodes as f64),
            flops: mean(&|r| r.flops as f64),
            memory_bytes: mean(&|r| r.memory_bytes as f64),
        }
    }
}

/// Inputs of the cost model. `layers = 0` models the per-node MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostConfig {
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
}

/// Per-token activations kept per layer, in units of `dim`: input, q, k, v,
/// attention output, first residual, FFN hidden (`ffn_mult`), output.
fn activation_width(ffn_mult: usize) -> u64 {
    7 + ffn_mult as u64 + 1
}

/// Forward FLOPs (one multiply-add = 2) of the encoder layers and decoder.
pub fn flops_model(cfg: &CostConfig) -> u64 {
    let (t, c) = (cfg.tokens as u64, cfg.dim as u64);
    let per_layer = 4 * 2 * t * c * c + 2 * 2 * t * t * c + 2 * 2 * t * c * (cfg.ffn_mult as u64 * c);
    let decoder = if cfg.layers == 0 {
        // Three hidden C×C layers and the C×1 output.
        3 * 2 * t * c * c + 2 * t * c
    } else {
        2 * t * c * c + 2 * t * c
    };
    cfg.layers as u64 * per_layer + decoder
}

/// Peak activation bytes at 4 bytes per value: one layer's attention
/// matrices plus its per-token activations.
pub fn memory_model(cfg: &CostConfig) -> u64 {
    let (t, c) = (cfg.tokens as u64, cfg.dim as u64);
    if cfg.layers == 0 {
        return 4 * 4 * t * c;
    }
    4 * (cfg.heads as u64 * t * t + activation_width(cfg.ffn_mult) * t * c)
}

/// Model shape shared by every row of a cost comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostShape {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
}

/// One row of the sparse / MLP / dense comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: String,
    pub nodes_mean: f64,
    pub tokens_mean: f64,
    pub tokens_max: usize,
    pub flops_mean: f64,
    /// At `tokens_max`.
    pub flops_max: u64,
    pub memory_mean: f64,
    pub memory_max: u64,
    /// `flops_max` and `memory_max` over the dense 56×56 row.
    pub flops_ratio: f64,
    pub memory_ratio: f64,
}

/// Reference tokens appended to every sparse sequence.
pub const REFERENCE_TOKENS: usize = 196;

/// Cost rows for measured per-sample node counts: the sparse refiner
/// (`N + 196` tokens), the per-node MLP (`N`) and dense grids of 28, 56 and 112.
pub fn bench_table(node_counts: &[usize], shape: CostShape) -> Vec<BenchRow> {
    let cost = |tokens: usize, mlp: bool| CostConfig {
        tokens,
        dim: shape.dim,
        heads: if mlp { 0 } else { shape.heads },
        layers: if mlp { 0 } else { shape.layers },
        ffn_mult: shape.ffn_mult,
    };
    let dense56 = cost(56 * 56, false);
    let (ref_flops, ref_mem) = (flops_model(&dense56) as f64, memory_model(&dense56) as f64);
    let n = node_counts.len().max(1) as f64;
    let nodes_mean = node_counts.iter().sum::<usize>() as f64 / n;
    let row = |model: &str, tokens: &dyn Fn(usize) -> usize, mlp: bool| {
        let ts: Vec<usize> = if node_counts.is_empty() {
            vec![tokens(0)]
        } else {
            node_counts.iter().map(|&c| tokens(c)).collect()
        };
        let t_max = ts.iter().copied().max().unwrap_or(0);
        let k = ts.len() as f64;
        let flops_max = flops_model(&cost(t_max, mlp));
        let memory_max = memory_model(&cost(t_max, mlp));
        BenchRow {
            model: model.to_string(),
            nodes_mean,
            tokens_mean: ts.iter().sum::<usize>() as f64 / k,
            tokens_max: t_max,
            flops_mean: ts.iter().map(|&t| flops_model(&cost(t, mlp)) as f64).sum::<f64>() / k,
            flops_max,
            memory_mean: ts.iter().map(|&t| memory_model(&cost(t, mlp)) as f64).sum::<f64>() / k,
            memory_max,
            flops_ratio: flops_max as f64 / ref_flops,
            memory_ratio: memory_max as f64 / ref_mem,
        }
    };
    vec![
        row("sparse", &|c| c + REFERENCE_TOKENS, false),
        row("mlp", &|c| c, true),
        row("dense28", &|_| 28 * 28, false),
        row("dense56", &|_| 56 * 56, false),
        row("dense112", &|_| 112 * 112, false),
    ]
}
