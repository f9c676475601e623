//! Raw per-token inputs: fine feature, 3×3 context, coarse cue, position, level.

use crate::error::{Error, Result};
use crate::mask::ProbMap;
use crate::numeric::{Scalar, Tensor};
use crate::pyramid::{sample_feature, FeatureMap, FeaturePyramid, REFERENCE_SIZE};
use crate::quadtree::PointQuadtree;

/// Normalized coordinates are scaled to finest-level pixels before the
/// sinusoid, so neighbouring 112×112 pixels differ by one radian at the
/// lowest wavelength.
pub const POSITION_SCALE: f64 = 112.0;

/// Level-embedding slot used by reference tokens.
pub const REFERENCE_SLOT: usize = 3;

/// Fixed 2-D sinusoidal encoding: the first `dim/2` entries encode `x`, the
/// rest `y`; even entries are sines and odd entries cosines.
pub fn encode_position(x: f64, y: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for (axis, coord) in [x, y].into_iter().enumerate() {
        for i in 0..half {
            let k = (i / 2) as f64;
            let wavelength = 10000f64.powf(2.0 * k / half as f64);
            let angle = coord * POSITION_SCALE / wavelength;
            out[axis * half + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// Fixed (non-trainable) inputs of a token sequence. The first `nodes` rows
/// are quadtree nodes; any remaining rows are reference tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenInputs<T = f32> {
    /// `T×C` features sampled at the token position.
    pub fine: Tensor<T>,
    /// `T×9C` border-clamped 3×3 neighbourhood, neighbour-major.
    pub context: Tensor<T>,
    /// `T×9` coarse probabilities around the token.
    pub cue: Tensor<T>,
    /// `T×D` positional encodings.
    pub position: Tensor<T>,
    /// Level-embedding slot per token (0..=3).
    pub slot: Vec<usize>,
    pub nodes: usize,
}

/// One token position: a pixel `(row, col)` of `map` plus its embedding slot.
struct TokenSpec<'a> {
    map: &'a FeatureMap,
    cue_map: &'a ProbMap,
    row: usize,
    col: usize,
    slot: usize,
}

impl<T: Scalar> TokenInputs<T> {
    pub fn empty(channels: usize, dim: usize) -> Self {
        Self {
            fine: Tensor::zeros(&[0, channels]),
            context: Tensor::zeros(&[0, 9 * channels]),
            cue: Tensor::zeros(&[0, 9]),
            position: Tensor::zeros(&[0, dim]),
            slot: Vec::new(),
            nodes: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.slot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slot.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.fine.cols()
    }

    fn build(specs: &[TokenSpec<'_>], channels: usize, dim: usize, nodes: usize) -> Self {
        let n = specs.len();
        let mut fine = Vec::with_capacity(n * channels);
        let mut context = Vec::with_capacity(n * 9 * channels);
        let mut cue = Vec::with_capacity(n * 9);
        let mut position = Vec::with_capacity(n * dim);
        let mut slot = Vec::with_capacity(n);
        for s in specs {
            let (h, w) = (s.map.height, s.map.width);
            let x = (s.col as f64 + 0.5) / w as f64;
            let y = (s.row as f64 + 0.5) / h as f64;
            fine.extend(sample_feature(s.map, x as f32, y as f32).into_iter().map(|v| T::of(f64::from(v))));
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let r = (s.row as isize + dr).clamp(0, h as isize - 1) as usize;
                    let c = (s.col as isize + dc).clamp(0, w as isize - 1) as usize;
                    context.extend((0..channels).map(|ch| T::of(f64::from(s.map.at(ch, r, c)))));
                }
            }
            cue.extend(coarse_patch(s.cue_map, x, y).into_iter().map(|v| T::of(f64::from(v))));
            position.extend(encode_position(x, y, dim).into_iter().map(T::of));
            slot.push(s.slot);
        }
        Self {
            fine: Tensor::from_vec(&[n, channels], fine).expect("fine shape"),
            context: Tensor::from_vec(&[n, 9 * channels], context).expect("context shape"),
            cue: Tensor::from_vec(&[n, 9], cue).expect("cue shape"),
            position: Tensor::from_vec(&[n, dim], position).expect("position shape"),
            slot,
            nodes,
        }
    }

    /// Inputs for the given tree nodes, in order.
    pub fn for_nodes(
        tree: &PointQuadtree,
        ids: &[usize],
        pyr: &FeaturePyramid,
        coarse: &ProbMap,
        dim: usize,
    ) -> Result<Self> {
        check_coarse(pyr, coarse)?;
        let mut specs = Vec::with_capacity(ids.len());
        for &id in ids {
            let n = tree.node(id);
            if n.level == 0 || n.level > pyr.levels().len() {
                return Err(Error::Shape(format!("node at level {} has no feature level", n.level)));
            }
            let map = pyr.level(n.level - 1);
            if tree.level_size(n.level) != map.height {
                return Err(Error::Shape(format!(
                    "tree level {} is {} wide but features are {}",
                    n.level,
                    tree.level_size(n.level),
                    map.height
                )));
            }
            specs.push(TokenSpec {
                map,
                cue_map: coarse,
                row: n.row,
                col: n.col,
                slot: n.level - 1,
            });
        }
        Ok(Self::build(&specs, pyr.channels(), dim, ids.len()))
    }

    /// The 14×14 reference grid; its coarse cue comes from the pooled coarse map.
    pub fn reference(pyr: &FeaturePyramid, coarse: &ProbMap, dim: usize) -> Result<Self> {
        check_coarse(pyr, coarse)?;
        let pooled = coarse.avg_pool(coarse.height / REFERENCE_SIZE)?;
        let map = pyr.reference();
        let specs: Vec<TokenSpec<'_>> = (0..REFERENCE_SIZE * REFERENCE_SIZE)
            .map(|i| TokenSpec {
                map,
                cue_map: &pooled,
                row: i / REFERENCE_SIZE,
                col: i % REFERENCE_SIZE,
                slot: REFERENCE_SLOT,
            })
            .collect();
        Ok(Self::build(&specs, pyr.channels(), dim, 0))
    }

    /// Every pixel of one grid as a node token: `size` 14 is the reference
    /// grid, otherwise a refinement level.
    pub fn dense_grid(pyr: &FeaturePyramid, coarse: &ProbMap, size: usize, dim: usize) -> Result<Self> {
        if size == REFERENCE_SIZE {
            let mut t = Self::reference(pyr, coarse, dim)?;
            t.nodes = t.len();
            return Ok(t);
        }
        check_coarse(pyr, coarse)?;
        let Some(l) = pyr.levels().iter().position(|m| m.height == size) else {
            return Err(Error::InvalidArgument(format!("no feature level of size {size}")));
        };
        let map = pyr.level(l);
        let specs: Vec<TokenSpec<'_>> = (0..size * size)
            .map(|i| TokenSpec {
                map,
                cue_map: coarse,
                row: i / size,
                col: i % size,
                slot: l,
            })
            .collect();
        Ok(Self::build(&specs, pyr.channels(), dim, size * size))
    }

    /// Node rows of `self` followed by all rows of `other` (as non-node tokens).
    pub fn with_appended(&self, other: &TokenInputs<T>) -> Result<Self> {
        Ok(Self {
            fine: Tensor::vstack(&[&self.fine, &other.fine])?,
            context: Tensor::vstack(&[&self.context, &other.context])?,
            cue: Tensor::vstack(&[&self.cue, &other.cue])?,
            position: Tensor::vstack(&[&self.position, &other.position])?,
            slot: self.slot.iter().chain(&other.slot).copied().collect(),
            nodes: self.nodes,
        })
    }

    /// Rows reordered so that row `i` of the result is row `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let pick = |t: &Tensor<T>| {
            let c = t.cols();
            let mut data = Vec::with_capacity(order.len() * c);
            for &i in order {
                data.extend_from_slice(t.row(i));
            }
            Tensor::from_vec(&[order.len(), c], data).expect("permuted shape")
        };
        Self {
            fine: pick(&self.fine),
            context: pick(&self.context),
            cue: pick(&self.cue),
            position: pick(&self.position),
            slot: order.iter().map(|&i| self.slot[i]).collect(),
            nodes: self.nodes,
        }
    }

    pub fn cast<U: Scalar>(&self) -> TokenInputs<U> {
        TokenInputs {
            fine: self.fine.cast(),
            context: self.context.cast(),
            cue: self.cue.cast(),
            position: self.position.cast(),
            slot: self.slot.clone(),
            nodes: self.nodes,
        }
    }
}

fn check_coarse(pyr: &FeaturePyramid, coarse: &ProbMap) -> Result<()> {
    let s = pyr.level(0).height;
    if coarse.height != s || coarse.width != s {
        return Err(Error::Shape(format!(
            "coarse map {}x{} does not match the {s}x{s} feature level",
            coarse.height, coarse.width
        )));
    }
    Ok(())
}

/// Bilinear samples of `map` on a 3×3 stencil around normalized `(x, y)`
/// with a spacing of one `map` pixel, border clamped.
pub fn coarse_patch(map: &ProbMap, x: f64, y: f64) -> [f32; 9] {
    let (h, w) = (map.height, map.width);
    let mut out = [0.0f32; 9];
    for (i, (dy, dx)) in (-1i32..=1).flat_map(|a| (-1i32..=1).map(move |b| (a, b))).enumerate() {
        let px = ((x + f64::from(dx) / w as f64) * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
        let py = ((y + f64::from(dy) / h as f64) * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (px.floor() as usize, py.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (ax, ay) = ((px - x0 as f64) as f32, (py - y0 as f64) as f32);
        let top = map.get(y0, x0) * (1.0 - ax) + map.get(y0, x1) * ax;
        let bot = map.get(y1, x0) * (1.0 - ax) + map.get(y1, x1) * ax;
        out[i] = top * (1.0 - ay) + bot * ay;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_encoding_is_sin_zero_cos_one() {
        let e = encode_position(0.0, 0.0, 16);
        for (i, v) in e.iter().enumerate() {
            let want = if i % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(*v, want, "index {i}");
        }
    }

    #[test]
    fn neighbouring_fine_pixels_differ() {
        let a = encode_position(10.5 / 112.0, 0.3, 64);
        let b = encode_position(11.5 / 112.0, 0.3, 64);
        let d: f64 = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum();
        assert!(d > 0.5, "{d}");
        assert_eq!(a[32..], b[32..]);
    }

    #[test]
    fn patch_at_pixel_centres_reads_neighbours() {
        let m = ProbMap::new(3, 3, (0..9).map(|v| v as f32).collect()).unwrap();
        let p = coarse_patch(&m, 0.5, 0.5);
        assert_eq!(p, [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let p = coarse_patch(&m, 0.5 / 3.0, 0.5 / 3.0);
        assert_eq!(p, [0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 3.0, 3.0, 4.0]);
    }
}
