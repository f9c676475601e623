//! RoI feature pyramid: three refinement levels (28, 56, 112) plus a 14×14
//! reference grid, and bilinear lookups into them.

use crate::error::{Error, Result};
use crate::io::RawTensor;

/// Square sizes of the refinement levels, coarse to fine.
pub const LEVEL_SIZES: [usize; 3] = [28, 56, 112];
/// Side of the reference grid appended to every node sequence.
pub const REFERENCE_SIZE: usize = 14;

/// `C×H×W` row-major f32 feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "feature map has {} values, expected {channels}x{height}x{width}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature map value {i}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_raw(t: RawTensor) -> Result<Self> {
        Self::new(t.channels, t.height, t.width, t.data)
    }

    pub fn to_raw(&self) -> RawTensor {
        RawTensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.clone(),
        }
    }

    #[inline]
    pub fn at(&self, c: usize, r: usize, col: usize) -> f32 {
        self.data[(c * self.height + r) * self.width + col]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// All channels at one pixel.
    pub fn pixel(&self, r: usize, col: usize) -> Vec<f32> {
        (0..self.channels).map(|c| self.at(c, r, col)).collect()
    }

    /// 2×2 block average.
    pub fn avg_pool2(&self) -> Result<FeatureMap> {
        if self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(Error::Shape(format!(
                "cannot 2x pool a {}x{} map",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / 2, self.width / 2);
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for r in 0..h {
                for col in 0..w {
                    let s = self.at(c, 2 * r, 2 * col)
                        + self.at(c, 2 * r, 2 * col + 1)
                        + self.at(c, 2 * r + 1, 2 * col)
                        + self.at(c, 2 * r + 1, 2 * col + 1);
                    data.push(0.25 * s);
                }
            }
        }
        Ok(FeatureMap {
            channels: self.channels,
            height: h,
            width: w,
            data,
        })
    }

    /// Bilinear sample at pixel coordinates (pixel centers on integers), border clamped.
    pub fn sample_px(&self, px: f32, py: f32, out: &mut [f32]) {
        let fx = px.clamp(0.0, (self.width - 1) as f32);
        let fy = py.clamp(0.0, (self.height - 1) as f32);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = fx - x0 as f32;
        let ay = fy - y0 as f32;
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            let top = self.at(c, y0, x0) * (1.0 - ax) + self.at(c, y0, x1) * ax;
            let bot = self.at(c, y1, x0) * (1.0 - ax) + self.at(c, y1, x1) * ax;
            *o = top * (1.0 - ay) + bot * ay;
        }
    }

    /// Bilinear resample of the whole map to `height×width` (half-pixel centers).
    pub fn resize(&self, height: usize, width: usize) -> FeatureMap {
        let mut out = FeatureMap::zeros(self.channels, height, width);
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        let mut buf = vec![0.0f32; self.channels];
        for r in 0..height {
            for col in 0..width {
                let py = (r as f32 + 0.5) * sy - 0.5;
                let px = (col as f32 + 0.5) * sx - 0.5;
                self.sample_px(px, py, &mut buf);
                for (c, v) in buf.iter().enumerate() {
                    out.data[(c * height + r) * width + col] = *v;
                }
            }
        }
        out
    }
}

/// Bilinear sample in normalized coordinates: `x = 0` is the left edge of the
/// first pixel and `x = 1` the right edge of the last one.
pub fn sample_feature(fm: &FeatureMap, x: f32, y: f32) -> Vec<f32> {
    let mut out = vec![0.0; fm.channels];
    fm.sample_px(x * fm.width as f32 - 0.5, y * fm.height as f32 - 0.5, &mut out);
    out
}

/// Per-RoI features: refinement levels coarse→fine and the reference grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<FeatureMap>,
    reference: FeatureMap,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<FeatureMap>, reference: FeatureMap) -> Result<Self> {
        if levels.len() != LEVEL_SIZES.len() {
            return Err(Error::Shape(format!(
                "expected {} refinement levels, got {}",
                LEVEL_SIZES.len(),
                levels.len()
            )));
        }
        for (fm, &s) in levels.iter().zip(LEVEL_SIZES.iter()) {
            if fm.height != s || fm.width != s {
                return Err(Error::Shape(format!(
                    "level of size {}x{} where {s}x{s} is required",
                    fm.height, fm.width
                )));
            }
        }
        if reference.height != REFERENCE_SIZE || reference.width != REFERENCE_SIZE {
            return Err(Error::Shape("reference grid must be 14x14".into()));
        }
        let c = reference.channels;
        if levels.iter().any(|l| l.channels != c) {
            return Err(Error::Shape("pyramid levels disagree on channel count".into()));
        }
        Ok(Self { levels, reference })
    }

    /// Builds all levels from the 112×112 map by repeated 2×2 averaging.
    pub fn from_finest(finest: FeatureMap) -> Result<Self> {
        let l56 = finest.avg_pool2()?;
        let l28 = l56.avg_pool2()?;
        let reference = l28.avg_pool2()?;
        Self::new(vec![l28, l56, finest], reference)
    }

    pub fn channels(&self) -> usize {
        self.reference.channels
    }

    /// Refinement level by zero-based index (0 → 28×28).
    pub fn level(&self, idx: usize) -> &FeatureMap {
        &self.levels[idx]
    }

    pub fn levels(&self) -> &[FeatureMap] {
        &self.levels
    }

    pub fn reference(&self) -> &FeatureMap {
        &self.reference
    }

    pub fn finest(&self) -> &FeatureMap {
        &self.levels[self.levels.len() - 1]
    }
}

/// FPN start level for an RoI: `floor(4 + log2(sqrt(w·h) / 224))`, clamped to [4, 5].
pub fn roi_level_select(w: f64, h: f64) -> Result<usize> {
    if !(w >= 1.0 && h >= 1.0) {
        return Err(Error::InvalidArgument(format!("RoI {w}x{h} must be at least 1x1")));
    }
    let raw = (4.0 + ((w * h).sqrt() / 224.0).log2()).floor();
    Ok(raw.clamp(4.0, 5.0) as usize)
}

/// Whole-image FPN features; level `k` has stride `2^k` pixels.
#[derive(Debug, Clone)]
pub struct FpnFeatures {
    levels: Vec<(usize, FeatureMap)>,
}

impl FpnFeatures {
    pub fn new(levels: Vec<(usize, FeatureMap)>) -> Self {
        Self { levels }
    }

    pub fn level(&self, k: usize) -> Option<&FeatureMap> {
        self.levels.iter().find(|(i, _)| *i == k).map(|(_, f)| f)
    }
}

/// Axis-aligned box in image pixels, `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiBox {
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
}

impl RoiBox {
    pub fn width(&self) -> f32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f32 {
        self.y1 - self.y0
    }
}

fn crop_resize(fm: &FeatureMap, stride: f32, b: &RoiBox, size: usize) -> FeatureMap {
    let mut out = FeatureMap::zeros(fm.channels, size, size);
    let mut buf = vec![0.0f32; fm.channels];
    let sx = b.width() / size as f32;
    let sy = b.height() / size as f32;
    for r in 0..size {
        for col in 0..size {
            let ix = b.x0 + (col as f32 + 0.5) * sx;
            let iy = b.y0 + (r as f32 + 0.5) * sy;
            fm.sample_px(ix / stride - 0.5, iy / stride - 0.5, &mut buf);
            for (c, v) in buf.iter().enumerate() {
                out.data[(c * size + r) * size + col] = *v;
            }
        }
    }
    out
}

/// Crops `b` from `{P_i, P_{i-1}, P_{i-2}}` at 28, 56 and 112 and pools the
/// 28 level into the reference grid.
pub fn roi_extract(features: &FpnFeatures, b: &RoiBox) -> Result<FeaturePyramid> {
    if !(b.width() > 0.0 && b.height() > 0.0) {
        return Err(Error::InvalidArgument("RoI box has zero area".into()));
    }
    let start = roi_level_select(f64::from(b.width()).max(1.0), f64::from(b.height()).max(1.0))?;
    let mut levels = Vec::with_capacity(3);
    for (offset, &size) in LEVEL_SIZES.iter().enumerate() {
        let k = start - offset;
        let fm = features
            .level(k)
            .ok_or_else(|| Error::InvalidArgument(format!("FPN level P{k} missing")))?;
        let stride = (1usize << k) as f32;
        let (img_w, img_h) = (fm.width as f32 * stride, fm.height as f32 * stride);
        if b.x0 < 0.0 || b.y0 < 0.0 || b.x1 > img_w || b.y1 > img_h {
            return Err(Error::InvalidArgument(format!(
                "RoI {b:?} exceeds image bounds {img_w}x{img_h}"
            )));
        }
        levels.push(crop_resize(fm, stride, b, size));
    }
    let reference = levels[0].avg_pool2()?;
    FeaturePyramid::new(levels, reference)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, s: usize) -> FeatureMap {
        let data = (0..c * s * s).map(|i| (i % 97) as f32 * 0.25 - 3.0).collect();
        FeatureMap::new(c, s, s, data).unwrap()
    }

    #[test]
    fn level_select_examples() {
        assert_eq!(roi_level_select(224.0, 224.0).unwrap(), 4);
        assert_eq!(roi_level_select(112.0, 112.0).unwrap(), 4);
        assert_eq!(roi_level_select(448.0, 448.0).unwrap(), 5);
        assert!(roi_level_select(0.0, 3.0).is_err());
    }

    #[test]
    fn level_select_doubles_until_clamp() {
        // Unclamped formula rises by one per doubling; observable only inside [4, 5].
        assert_eq!(roi_level_select(300.0, 300.0).unwrap(), 4);
        assert_eq!(roi_level_select(600.0, 600.0).unwrap(), 5);
        assert_eq!(roi_level_select(1200.0, 1200.0).unwrap(), 5);
        assert_eq!(roi_level_select(224.0, 900.0).unwrap(), 5);
    }

    #[test]
    fn sample_feature_examples() {
        let fm = FeatureMap::new(1, 1, 2, vec![2.0, 6.0]).unwrap();
        assert_eq!(sample_feature(&fm, 0.0, 0.0), vec![2.0]);
        assert_eq!(sample_feature(&fm, 0.5, 0.5), vec![4.0]);
        assert_eq!(sample_feature(&fm, 1.0, 1.0), vec![6.0]);
        let k = FeatureMap::new(2, 3, 3, vec![1.5; 18]).unwrap();
        for (x, y) in [(0.1, 0.9), (0.33, 0.5), (1.0, 0.0)] {
            assert_eq!(sample_feature(&k, x, y), vec![1.5, 1.5]);
        }
    }

    #[test]
    fn feature_map_rejects_non_finite() {
        assert!(FeatureMap::new(1, 1, 1, vec![f32::NAN]).is_err());
        assert!(FeatureMap::new(1, 1, 2, vec![0.0]).is_err());
    }

    #[test]
    fn crop_at_matching_size_is_identity() {
        // Full canvas of a stride-16 map resampled to its own size.
        let p4 = ramp(2, 28);
        let canvas = RoiBox { x0: 0.0, y0: 0.0, x1: 448.0, y1: 448.0 };
        assert_eq!(crop_resize(&p4, 16.0, &canvas, 28), p4);
        assert_eq!(p4.resize(28, 28), p4);
    }

    #[test]
    fn extract_uses_levels_i_to_i_minus_2() {
        // sqrt(wh) = 224 selects P4 for the 28 grid, P3 for 56 and P2 for 112.
        let fpn = FpnFeatures::new(vec![(2, ramp(2, 112)), (3, ramp(2, 56)), (4, ramp(2, 28))]);
        let b = RoiBox { x0: 0.0, y0: 0.0, x1: 224.0, y1: 224.0 };
        let pyr = roi_extract(&fpn, &b).unwrap();
        // Top-left output pixel of the 112 crop sits at image (1, 1) → P2 pixel (-0.25) → clamped to 0.
        assert_eq!(pyr.level(2).at(1, 0, 0), fpn.level(2).unwrap().at(1, 0, 0));
        assert_eq!(pyr.reference(), &pyr.level(0).avg_pool2().unwrap());
        let outside = RoiBox { x1: 500.0, ..b };
        assert!(roi_extract(&fpn, &outside).is_err());
    }

    #[test]
    fn constant_levels_give_constant_crops() {
        let k = |s| FeatureMap::new(1, s, s, vec![0.75; s * s]).unwrap();
        let fpn = FpnFeatures::new(vec![(2, k(112)), (3, k(56)), (4, k(28))]);
        let b = RoiBox {
            x0: 13.0,
            y0: 40.5,
            x1: 250.0,
            y1: 300.0,
        };
        let pyr = roi_extract(&fpn, &b).unwrap();
        for l in pyr.levels().iter().chain(std::iter::once(pyr.reference())) {
            assert!(l.data.iter().all(|&v| (v - 0.75).abs() < 1e-6));
        }
        let degenerate = RoiBox { x1: 13.0, ..b };
        assert!(roi_extract(&fpn, &degenerate).is_err());
    }

    #[test]
    fn disjoint_boxes_extract_independently() {
        let p4 = ramp(1, 28);
        let fpn = FpnFeatures::new(vec![(2, ramp(1, 112)), (3, ramp(1, 56)), (4, p4)]);
        let a = RoiBox { x0: 0.0, y0: 0.0, x1: 200.0, y1: 250.0 };
        let b = RoiBox { x0: 220.0, y0: 190.0, x1: 440.0, y1: 440.0 };
        let pa = roi_extract(&fpn, &a).unwrap();
        let pb = roi_extract(&fpn, &b).unwrap();
        let pa2 = roi_extract(&fpn, &a).unwrap();
        assert_eq!(pa, pa2);
        assert_ne!(pa, pb);
    }

    #[test]
    fn output_sizes_do_not_depend_on_aspect_ratio() {
        let fpn = FpnFeatures::new(vec![(2, ramp(1, 112)), (3, ramp(1, 56)), (4, ramp(1, 28)), (5, ramp(1, 14))]);
        for (w, h) in [(10.0, 400.0), (300.0, 20.0), (440.0, 440.0), (64.0, 64.0)] {
            let b = RoiBox { x0: 0.0, y0: 0.0, x1: w, y1: h };
            let pyr = roi_extract(&fpn, &b).unwrap();
            let sizes: Vec<_> = pyr.levels().iter().map(|l| (l.height, l.width)).collect();
            assert_eq!(sizes, vec![(28, 28), (56, 56), (112, 112)]);
            assert_eq!((pyr.reference().height, pyr.reference().width), (14, 14));
        }
    }

    #[test]
    fn from_finest_builds_consistent_levels() {
        let pyr = FeaturePyramid::from_finest(ramp(2, 112)).unwrap();
        assert_eq!(pyr.channels(), 2);
        let expect = pyr.level(1).avg_pool2().unwrap();
        assert_eq!(pyr.level(0), &expect);
    }
}
