//! Binary masks and the down/upsampling algebra used to locate incoherent
//! regions.
//!
//! A pixel of the incoherence map at scale `l` is set when the 2×2 block it
//! covers in the finer mask cannot be reproduced by nearest-neighbor
//! downsampling followed by nearest-neighbor upsampling:
//!
//! ```text
//! D_l = or_pool( M_{l-1} xor up( down( M_{l-1} ) ) )
//! ```
//!
//! Nearest-neighbor downsampling keeps the top-left pixel of every 2×2
//! block. Odd-sized inputs are zero padded on the bottom and right edge
//! before any 2× resampling.

use crate::error::{Error, Result};

/// Dense row-major binary mask. Every value is 0 or 1.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "BinaryMask {}x{}", self.height, self.width)?;
        if self.height * self.width <= 1024 {
            for r in 0..self.height {
                let row: String = (0..self.width)
                    .map(|c| if self.get(r, c) { '#' } else { '.' })
                    .collect();
                writeln!(f, "  {row}")?;
            }
        }
        Ok(())
    }
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    /// Builds a mask from raw bytes; any non-zero byte becomes 1.
    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask data has {} values, expected {}x{}",
                data.len(),
                height,
                width
            )));
        }
        let data = data.into_iter().map(|v| u8::from(v != 0)).collect();
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(u8::from(f(r, c)));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Convenience constructor for small literal masks.
    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Self {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(height * width);
        for row in rows {
            assert_eq!(row.as_ref().len(), width, "ragged mask rows");
            data.extend(row.as_ref().iter().map(|&v| u8::from(v != 0)));
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c] != 0
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.width + c] = u8::from(v);
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_constant(&self) -> bool {
        self.data.windows(2).all(|w| w[0] == w[1])
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    fn check_shape(&self, other: &BinaryMask) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(u8, u8) -> u8) -> Result<BinaryMask> {
        self.check_shape(other)?;
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn xor(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a ^ b)
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a & b)
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a | b)
    }

    pub fn and_not(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a & (b ^ 1))
    }

    /// True if every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.same_shape(other)
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(&a, &b)| a <= b)
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a & b != 0)
            .count()
    }

    pub fn union_count(&self, other: &BinaryMask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a | b != 0)
            .count()
    }

    /// Zero pads the bottom/right edge up to even dimensions.
    pub fn pad_even(&self) -> BinaryMask {
        let h = self.height + self.height % 2;
        let w = self.width + self.width % 2;
        if h == self.height && w == self.width {
            return self.clone();
        }
        BinaryMask::from_fn(h, w, |r, c| r < self.height && c < self.width && self.get(r, c))
    }

    /// 2× nearest-neighbor downsampling (top-left pixel of each 2×2 block).
    pub fn downsample_nn(&self) -> BinaryMask {
        let m = self.pad_even();
        BinaryMask::from_fn(m.height / 2, m.width / 2, |r, c| m.get(2 * r, 2 * c))
    }

    /// 2× nearest-neighbor upsampling; every pixel becomes a 2×2 block.
    pub fn upsample_nn(&self) -> BinaryMask {
        self.upsample_by(2)
    }

    /// Integer-factor nearest-neighbor upsampling.
    pub fn upsample_by(&self, factor: usize) -> BinaryMask {
        BinaryMask::from_fn(self.height * factor, self.width * factor, |r, c| {
            self.get(r / factor, c / factor)
        })
    }

    /// 2× downsampling taking the logical or of each 2×2 block.
    pub fn orpool_downsample(&self) -> BinaryMask {
        let m = self.pad_even();
        BinaryMask::from_fn(m.height / 2, m.width / 2, |r, c| {
            m.get(2 * r, 2 * c)
                || m.get(2 * r, 2 * c + 1)
                || m.get(2 * r + 1, 2 * c)
                || m.get(2 * r + 1, 2 * c + 1)
        })
    }

    /// Incoherence map of this mask at half resolution.
    pub fn incoherence(&self) -> BinaryMask {
        let m = self.pad_even();
        let rebuilt = m.downsample_nn().upsample_nn();
        m.xor(&rebuilt)
            .expect("reconstruction has the padded shape")
            .orpool_downsample()
    }

    /// Foreground pixels with at least one in-bounds background 4-neighbor.
    pub fn contour(&self) -> BinaryMask {
        let (h, w) = (self.height, self.width);
        BinaryMask::from_fn(h, w, |r, c| {
            self.get(r, c)
                && ((r > 0 && !self.get(r - 1, c))
                    || (r + 1 < h && !self.get(r + 1, c))
                    || (c > 0 && !self.get(r, c - 1))
                    || (c + 1 < w && !self.get(r, c + 1)))
        })
    }

    /// Chebyshev (square structuring element) dilation.
    pub fn dilate(&self, radius: usize) -> BinaryMask {
        if radius == 0 {
            return self.clone();
        }
        let (h, w) = (self.height, self.width);
        // Separable: horizontal then vertical running max.
        let mut horiz = BinaryMask::zeros(h, w);
        for r in 0..h {
            for c in 0..w {
                let lo = c.saturating_sub(radius);
                let hi = (c + radius).min(w - 1);
                let row = &self.data[r * w..(r + 1) * w];
                horiz.data[r * w + c] = u8::from(row[lo..=hi].iter().any(|&v| v != 0));
            }
        }
        BinaryMask::from_fn(h, w, |r, c| {
            let lo = r.saturating_sub(radius);
            let hi = (r + radius).min(h - 1);
            (lo..=hi).any(|rr| horiz.get(rr, c))
        })
    }

    /// Pixels within Chebyshev distance `d` of a contour pixel.
    ///
    /// Empty and full masks have no contour and therefore an empty band.
    pub fn boundary_band(&self, d: usize) -> Result<BinaryMask> {
        if d == 0 {
            return Err(Error::InvalidArgument("band distance must be >= 1".into()));
        }
        Ok(self.contour().dilate(d))
    }

    /// Tight bounding box of the foreground as `(row0, col0, row1, col1)`, exclusive end.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    bbox = Some(match bbox {
                        None => (r, c, r + 1, c + 1),
                        Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r + 1), c1.max(c + 1)),
                    });
                }
            }
        }
        bbox
    }

    pub fn to_prob(&self) -> ProbMap {
        ProbMap {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f32::from(v)).collect(),
        }
    }
}

/// Per-level incoherence maps, ordered coarsest first. Each level has twice
/// the resolution of the previous one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IncoherencePyramid {
    levels: Vec<BinaryMask>,
}

impl IncoherencePyramid {
    pub fn new(levels: Vec<BinaryMask>) -> Result<Self> {
        for pair in levels.windows(2) {
            let (coarse, fine) = (&pair[0], &pair[1]);
            if fine.height() != 2 * coarse.height() || fine.width() != 2 * coarse.width() {
                return Err(Error::Shape(format!(
                    "pyramid level {}x{} does not double {}x{}",
                    fine.height(),
                    fine.width(),
                    coarse.height(),
                    coarse.width()
                )));
            }
        }
        Ok(Self { levels })
    }

    /// Incoherence (non-constant 2×2 blocks) at every scale of `gt`.
    ///
    /// The returned levels run from `gt / 2^depth` (coarsest) to `gt / 2`.
    pub fn from_ground_truth(gt: &BinaryMask, depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::InvalidArgument("depth must be >= 1".into()));
        }
        let div = 1usize << depth;
        if gt.height() % div != 0 || gt.width() % div != 0 {
            return Err(Error::InvalidArgument(format!(
                "mask {}x{} is not divisible by 2^{depth}",
                gt.height(),
                gt.width()
            )));
        }
        let mut levels = Vec::with_capacity(depth);
        let mut current = gt.clone();
        for _ in 0..depth {
            levels.push(current.incoherence());
            current = current.downsample_nn();
        }
        levels.reverse();
        Ok(Self { levels })
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[BinaryMask] {
        &self.levels
    }

    /// Level by zero-based index (0 = coarsest).
    pub fn level(&self, idx: usize) -> &BinaryMask {
        &self.levels[idx]
    }

    pub fn into_levels(self) -> Vec<BinaryMask> {
        self.levels
    }

    pub fn total_count(&self) -> usize {
        self.levels.iter().map(BinaryMask::count_ones).sum()
    }

    /// Keeps only the first `depth` levels.
    pub fn truncated(&self, depth: usize) -> IncoherencePyramid {
        IncoherencePyramid {
            levels: self.levels.iter().take(depth).cloned().collect(),
        }
    }

    /// Marks every ancestor of a set pixel, so that each finer detection
    /// lies inside the upsampled coarser detection.
    pub fn close_upward(&self) -> IncoherencePyramid {
        let mut levels = self.levels.clone();
        for i in (1..levels.len()).rev() {
            let parents = levels[i].orpool_downsample();
            levels[i - 1] = levels[i - 1].or(&parents).expect("pyramid shapes are consistent");
        }
        IncoherencePyramid { levels }
    }

    /// Drops every finer pixel whose parent is not set.
    pub fn restrict(&self) -> IncoherencePyramid {
        let mut levels = self.levels.clone();
        for i in 1..levels.len() {
            let allowed = levels[i - 1].upsample_nn();
            levels[i] = levels[i].and(&allowed).expect("pyramid shapes are consistent");
        }
        IncoherencePyramid { levels }
    }

    /// First pixel (level index, row, col) violating the guidance restriction.
    pub fn guidance_violation(&self) -> Option<(usize, usize, usize)> {
        for i in 1..self.levels.len() {
            let (coarse, fine) = (&self.levels[i - 1], &self.levels[i]);
            for r in 0..fine.height() {
                for c in 0..fine.width() {
                    if fine.get(r, c) && !coarse.get(r / 2, c / 2) {
                        return Some((i, r, c));
                    }
                }
            }
        }
        None
    }

    /// Union of all levels at `resolution`, which must be a multiple of every level.
    pub fn union_at(&self, height: usize, width: usize) -> BinaryMask {
        let mut out = BinaryMask::zeros(height, width);
        for level in &self.levels {
            let f = height / level.height();
            let up = level.upsample_by(f);
            out = out.or(&up).expect("union resolution is a multiple of every level");
        }
        out
    }
}

/// Row-major probability map with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "probability map has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        Self {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.width + c] = v;
    }

    /// Foreground where the probability is at least `t`.
    pub fn threshold(&self, t: f32) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |r, c| self.get(r, c) >= t)
    }

    pub fn upsample_by(&self, factor: usize) -> ProbMap {
        let (h, w) = (self.height * factor, self.width * factor);
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                data.push(self.get(r / factor, c / factor));
            }
        }
        ProbMap {
            height: h,
            width: w,
            data,
        }
    }

    /// Block-average downsampling by an integer factor that divides both sides.
    pub fn avg_pool(&self, factor: usize) -> Result<ProbMap> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot pool {}x{} by {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let inv = 1.0 / (factor * factor) as f32;
        let mut data = vec![0.0f32; h * w];
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0f32;
                for dr in 0..factor {
                    for dc in 0..factor {
                        acc += self.get(r * factor + dr, c * factor + dc);
                    }
                }
                data[r * w + c] = acc * inv;
            }
        }
        Ok(ProbMap {
            height: h,
            width: w,
            data,
        })
    }
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn mask_strategy(max: usize) -> impl Strategy<Value = BinaryMask> {
        (1..=max, 1..=max).prop_flat_map(|(h, w)| {
            proptest::collection::vec(0u8..2, 4 * h * w)
                .prop_map(move |d| BinaryMask::from_vec(2 * h, 2 * w, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn roundtrip_iff_coherent(m in mask_strategy(6)) {
            let rebuilt = m.downsample_nn().upsample_nn();
            let coherent = m.incoherence().count_ones() == 0;
            prop_assert_eq!(rebuilt == m, coherent);
        }

        #[test]
        fn block_constant_masks_roundtrip(coarse in mask_strategy(5)) {
            let m = coarse.upsample_nn();
            prop_assert_eq!(m.downsample_nn().upsample_nn(), m);
        }

        #[test]
        fn incoherent_blocks_contain_contour(m in mask_strategy(8)) {
            let d = m.incoherence();
            let contour = m.contour();
            for r in 0..d.height() {
                for c in 0..d.width() {
                    if d.get(r, c) {
                        let hit = (0..2).any(|dr| (0..2).any(|dc| contour.get(2 * r + dr, 2 * c + dc)));
                        prop_assert!(hit, "incoherent ({}, {}) has no contour pixel", r, c);
                    }
                }
            }
        }

        #[test]
        fn band_is_monotone(m in mask_strategy(8), d1 in 1usize..4, extra in 0usize..3) {
            let a = m.boundary_band(d1).unwrap();
            let b = m.boundary_band(d1 + extra).unwrap();
            prop_assert!(a.is_subset_of(&b));
        }
    }
}
