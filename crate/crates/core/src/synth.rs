//! Synthetic single-object samples: analytic shapes, degraded coarse
//! predictions and simulated feature maps.

use std::f64::consts::{PI, TAU};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::{read_ftns, read_pgm, write_ftns, write_pgm, Manifest, ManifestEntry, RawTensor, Split};
use crate::mask::{BinaryMask, ProbMap};
use crate::pyramid::{FeatureMap, FeaturePyramid, LEVEL_SIZES};

/// Side length of ground-truth masks.
pub const GT_SIZE: usize = 224;
/// Side length of coarse predictions.
pub const COARSE_SIZE: usize = 28;
/// Clip distance of the signed-distance channel, in ground-truth pixels.
pub const SDF_CLIP: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    Polygon,
    Star,
}

/// Analytic shape in normalized canvas coordinates (`x` right, `y` down).
///
/// `size` holds the ellipse semi-axes, the polygon's x/y radii, or the
/// star's outer and inner radii.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub center: (f64, f64),
    pub size: (f64, f64),
    pub rotation: f64,
    pub vertices: usize,
    /// Relative radial jitter of polygon vertices.
    pub irregularity: f64,
    pub seed: u64,
}

impl ShapeSpec {
    pub fn ellipse(center: (f64, f64), a: f64, b: f64, rotation: f64) -> Self {
        Self {
            kind: ShapeKind::Ellipse,
            center,
            size: (a, b),
            rotation,
            vertices: 0,
            irregularity: 0.0,
            seed: 0,
        }
    }

    /// Regular polygon with vertices on an ellipse of radii `rx`, `ry`.
    pub fn polygon(center: (f64, f64), rx: f64, ry: f64, vertices: usize, rotation: f64) -> Self {
        Self {
            kind: ShapeKind::Polygon,
            center,
            size: (rx, ry),
            rotation,
            vertices,
            irregularity: 0.0,
            seed: 0,
        }
    }

    pub fn star(center: (f64, f64), outer: f64, inner: f64, points: usize, rotation: f64) -> Self {
        Self {
            kind: ShapeKind::Star,
            center,
            size: (outer, inner),
            rotation,
            vertices: points,
            irregularity: 0.0,
            seed: 0,
        }
    }

    /// Draws a shape from the default distribution.
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let center = (0.5 + rng.gen_range(-0.06..0.06), 0.5 + rng.gen_range(-0.06..0.06));
        let rotation = rng.gen_range(0.0..PI);
        let seed = rng.gen();
        match rng.gen_range(0..3) {
            0 => Self {
                seed,
                ..Self::ellipse(center, rng.gen_range(0.15..0.36), rng.gen_range(0.15..0.36), rotation)
            },
            1 => {
                let rx = rng.gen_range(0.22..0.36);
                Self {
                    irregularity: 0.2,
                    seed,
                    ..Self::polygon(center, rx, rx * rng.gen_range(0.7..1.0), rng.gen_range(3..=8), rotation)
                }
            }
            _ => {
                let outer = rng.gen_range(0.25..0.38);
                Self {
                    seed,
                    ..Self::star(center, outer, outer * rng.gen_range(0.45..0.75), rng.gen_range(4..=7), rotation)
                }
            }
        }
    }

    /// Outline vertices in normalized coordinates (polygon and star only).
    fn outline(&self) -> Vec<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (n, step) = match self.kind {
            ShapeKind::Star => (2 * self.vertices, PI / self.vertices as f64),
            _ => (self.vertices, TAU / self.vertices as f64),
        };
        let (sr, cr) = self.rotation.sin_cos();
        (0..n)
            .map(|k| {
                let t = k as f64 * step;
                let (mut x, mut y) = match self.kind {
                    ShapeKind::Star => {
                        let r = if k % 2 == 0 { self.size.0 } else { self.size.1 };
                        (r * t.cos(), r * t.sin())
                    }
                    _ => (self.size.0 * t.cos(), self.size.1 * t.sin()),
                };
                if self.irregularity > 0.0 {
                    let j = 1.0 + rng.gen_range(-self.irregularity..self.irregularity);
                    x *= j;
                    y *= j;
                }
                (self.center.0 + cr * x - sr * y, self.center.1 + sr * x + cr * y)
            })
            .collect()
    }
}

/// Even-odd point-in-polygon test.
fn inside_polygon(pts: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let (xi, yi) = pts[i];
        let (xj, yj) = pts[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Samples the shape at pixel centers.
pub fn rasterize(spec: &ShapeSpec, resolution: usize) -> Result<BinaryMask> {
    if resolution < 32 {
        return Err(Error::InvalidArgument(format!(
            "resolution {resolution} is below 32"
        )));
    }
    let s = resolution as f64;
    let mask = match spec.kind {
        ShapeKind::Ellipse => {
            let (a, b) = spec.size;
            if a <= 0.0 || b <= 0.0 {
                return Err(Error::InvalidArgument("ellipse has zero area".into()));
            }
            let (sr, cr) = spec.rotation.sin_cos();
            BinaryMask::from_fn(resolution, resolution, |r, c| {
                let dx = (c as f64 + 0.5) / s - spec.center.0;
                let dy = (r as f64 + 0.5) / s - spec.center.1;
                let u = cr * dx + sr * dy;
                let v = -sr * dx + cr * dy;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            })
        }
        ShapeKind::Polygon | ShapeKind::Star => {
            if spec.vertices < 3 {
                return Err(Error::InvalidArgument(format!(
                    "{} vertices, need at least 3",
                    spec.vertices
                )));
            }
            if spec.size.0 <= 0.0 || spec.size.1 <= 0.0 {
                return Err(Error::InvalidArgument("shape has zero area".into()));
            }
            let pts = spec.outline();
            BinaryMask::from_fn(resolution, resolution, |r, c| {
                inside_polygon(&pts, (c as f64 + 0.5) / s, (r as f64 + 0.5) / s)
            })
        }
    };
    match mask.bounding_box() {
        None => Err(Error::InvalidArgument("shape rasterizes to an empty mask".into())),
        Some((r0, c0, r1, c1)) if r0 < 2 || c0 < 2 || r1 + 2 > resolution || c1 + 2 > resolution => {
            Err(Error::InvalidArgument("shape comes within 2 px of the canvas border".into()))
        }
        Some(_) => Ok(mask),
    }
}

/// Boundary-localized perturbation of the pooled ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradeConfig {
    /// Probability that a band pixel is perturbed.
    pub p: f64,
    /// Maximum erosion/dilation radius in coarse pixels.
    pub radius: usize,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self { p: 0.5, radius: 2 }
    }
}

/// Average-pools `gt` to 28×28 and randomly erodes or dilates band pixels.
///
/// The direction (erode vs dilate) follows a smooth angular field around the
/// mask centroid so errors come in coherent runs along the contour.
pub fn degrade_to_coarse(gt: &BinaryMask, cfg: &DegradeConfig, seed: u64) -> Result<ProbMap> {
    if gt.height() != GT_SIZE || gt.width() != GT_SIZE {
        return Err(Error::Shape(format!(
            "ground truth must be {GT_SIZE}x{GT_SIZE}, got {}x{}",
            gt.height(),
            gt.width()
        )));
    }
    let pooled = gt.to_prob().avg_pool(GT_SIZE / COARSE_SIZE)?;
    if cfg.p <= 0.0 || cfg.radius == 0 {
        return Ok(pooled);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let freq = rng.gen_range(1..=4) as f64;
    let phase = rng.gen_range(0.0..TAU);
    let fg = pooled.threshold(0.5);
    let band = if fg.count_ones() == 0 {
        BinaryMask::zeros(COARSE_SIZE, COARSE_SIZE)
    } else {
        fg.boundary_band(cfg.radius)?
    };
    let (cy, cx) = centroid(&fg);
    let n = COARSE_SIZE as isize;
    let mut out = pooled.clone();
    for r in 0..COARSE_SIZE {
        for c in 0..COARSE_SIZE {
            // Draw for every pixel so the stream does not depend on the band.
            let hit = rng.gen_bool(cfg.p.min(1.0));
            let rad = rng.gen_range(1..=cfg.radius) as isize;
            if !hit || !band.get(r, c) {
                continue;
            }
            let theta = (r as f64 + 0.5 - cy).atan2(c as f64 + 0.5 - cx);
            let dilate = (freq * theta + phase).sin() >= 0.0;
            let mut v = pooled.get(r, c);
            for rr in (r as isize - rad).max(0)..=(r as isize + rad).min(n - 1) {
                for cc in (c as isize - rad).max(0)..=(c as isize + rad).min(n - 1) {
                    let x = pooled.get(rr as usize, cc as usize);
                    v = if dilate { v.max(x) } else { v.min(x) };
                }
            }
            out.set(r, c, v.clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

fn centroid(m: &BinaryMask) -> (f64, f64) {
    let (mut sr, mut sc, mut n) = (0.0, 0.0, 0.0);
    for r in 0..m.height() {
        for c in 0..m.width() {
            if m.get(r, c) {
                sr += r as f64 + 0.5;
                sc += c as f64 + 0.5;
                n += 1.0;
            }
        }
    }
    if n == 0.0 {
        (m.height() as f64 / 2.0, m.width() as f64 / 2.0)
    } else {
        (sr / n, sc / n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub channels: usize,
    /// Amplitude of the smooth texture added to the intensity channel.
    pub texture: f64,
    /// Standard deviation of per-pixel intensity noise.
    pub grain: f64,
    /// Standard deviation of the noise added to the signed-distance channel.
    pub sdf_sigma: f64,
    /// Seed of the fixed patch projections, shared by all samples.
    pub projection_seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            texture: 0.3,
            grain: 0.1,
            sdf_sigma: 0.2,
            projection_seed: 0x5eed,
        }
    }
}

impl FeatureConfig {
    pub fn noiseless(channels: usize) -> Self {
        Self {
            channels,
            texture: 0.0,
            grain: 0.0,
            sdf_sigma: 0.0,
            ..Self::default()
        }
    }
}

/// Smooth value noise in `[0, 1]` from a bilinearly interpolated random grid.
fn value_noise<R: Rng>(size: usize, cells: usize, rng: &mut R) -> Vec<f64> {
    let g = cells + 1;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.gen()).collect();
    let scale = cells as f64 / size as f64;
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        let fy = (r as f64 + 0.5) * scale;
        let y0 = (fy.floor() as usize).min(cells - 1);
        let ty = fy - y0 as f64;
        for c in 0..size {
            let fx = (c as f64 + 0.5) * scale;
            let x0 = (fx.floor() as usize).min(cells - 1);
            let tx = fx - x0 as f64;
            let at = |yy: usize, xx: usize| grid[yy * g + xx];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Euclidean distance from pixel `(r, c)` to the nearest pixel of the other
/// class, searched up to `SDF_CLIP + 1`.
fn distance_to_other(gt: &BinaryMask, r: usize, c: usize) -> f64 {
    let reach = SDF_CLIP as isize + 1;
    let v = gt.get(r, c);
    let (h, w) = (gt.height() as isize, gt.width() as isize);
    let mut best = f64::INFINITY;
    for dr in -reach..=reach {
        let rr = r as isize + dr;
        if rr < 0 || rr >= h {
            continue;
        }
        for dc in -reach..=reach {
            let cc = c as isize + dc;
            if cc < 0 || cc >= w || gt.get(rr as usize, cc as usize) == v {
                continue;
            }
            let d = ((dr * dr + dc * dc) as f64).sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Signed distance, positive inside, with boundary pixels at `±0.5`.
///
/// The magnitude is clipped to [`SDF_CLIP`], normalized and compressed by a
/// signed cube root.
pub fn signed_distance(gt: &BinaryMask, r: usize, c: usize) -> f64 {
    let d = (distance_to_other(gt, r, c) - 0.5).min(SDF_CLIP);
    let s = (d / SDF_CLIP).cbrt();
    if gt.get(r, c) {
        s
    } else {
        -s
    }
}

/// Simulated backbone features, sampled at the 112×112 level and pooled to
/// the coarser levels.
pub fn synth_features(gt: &BinaryMask, cfg: &FeatureConfig, seed: u64) -> Result<FeaturePyramid> {
    if cfg.channels < 4 {
        return Err(Error::InvalidArgument(format!(
            "{} feature channels, need at least 4",
            cfg.channels
        )));
    }
    if gt.height() != GT_SIZE || gt.width() != GT_SIZE {
        return Err(Error::Shape(format!("ground truth must be {GT_SIZE}x{GT_SIZE}")));
    }
    let n = GT_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texture = value_noise(n, 14, &mut rng);
    let grain = Normal::new(0.0, cfg.grain.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let sdf_noise =
        Normal::new(0.0, cfg.sdf_sigma.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut intensity = vec![0.0f64; n * n];
    for (i, v) in intensity.iter_mut().enumerate() {
        let base = f64::from(u8::from(gt.get(i / n, i % n)));
        let mut x = base;
        if cfg.texture > 0.0 {
            x += cfg.texture * (2.0 * texture[i] - 1.0);
        }
        if cfg.grain > 0.0 {
            x += grain.sample(&mut rng);
        }
        *v = x;
    }
    let at = |r: isize, c: isize| -> f64 {
        let r = r.clamp(0, n as isize - 1) as usize;
        let c = c.clamp(0, n as isize - 1) as usize;
        intensity[r * n + c]
    };

    let mut proj_rng = ChaCha8Rng::seed_from_u64(cfg.projection_seed);
    let unit = Normal::new(0.0, 1.0 / 3.0).expect("valid normal");
    let projections: Vec<[f64; 9]> = (3..cfg.channels)
        .map(|_| std::array::from_fn(|_| unit.sample(&mut proj_rng)))
        .collect();

    let s = LEVEL_SIZES[LEVEL_SIZES.len() - 1];
    let stride = n / s;
    let plane = s * s;
    let mut data = vec![0.0f32; cfg.channels * plane];
    for r in 0..s {
        for c in 0..s {
            let (gr, gc) = ((r * stride) as isize, (c * stride) as isize);
            let i = r * s + c;
            data[i] = at(gr, gc) as f32;
            let mut sd = signed_distance(gt, gr as usize, gc as usize);
            if cfg.sdf_sigma > 0.0 {
                sd += sdf_noise.sample(&mut rng);
            }
            data[plane + i] = sd as f32;
            let gx = (at(gr, gc + 1) - at(gr, gc - 1)) / 2.0;
            let gy = (at(gr + 1, gc) - at(gr - 1, gc)) / 2.0;
            data[2 * plane + i] = (gx * gx + gy * gy).sqrt() as f32;
            let mut patch = [0.0f64; 9];
            for (k, p) in patch.iter_mut().enumerate() {
                *p = at(gr + k as isize / 3 - 1, gc + k as isize % 3 - 1);
            }
            for (j, w) in projections.iter().enumerate() {
                let v: f64 = w.iter().zip(&patch).map(|(a, b)| a * b).sum();
                data[(3 + j) * plane + i] = v as f32;
            }
        }
    }
    FeaturePyramid::from_finest(FeatureMap::new(cfg.channels, s, s, data)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub train_fraction: f64,
    pub degrade: DegradeConfig,
    pub features: FeatureConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 250,
            train_fraction: 0.8,
            degrade: DegradeConfig::default(),
            features: FeatureConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn train_count(&self) -> usize {
        ((self.count as f64) * self.train_fraction).round() as usize
    }

    pub fn split_of(&self, index: usize) -> Split {
        if index < self.train_count() {
            Split::Train
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub gt: BinaryMask,
    pub coarse: ProbMap,
    pub features: FeaturePyramid,
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

/// Generates sample `index`; a pure function of `(cfg, seed, index)`.
pub fn generate_sample(index: usize, cfg: &SynthConfig, seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let gt = loop {
        let spec = ShapeSpec::random(&mut rng);
        if let Ok(m) = rasterize(&spec, GT_SIZE) {
            break m;
        }
    };
    let coarse = degrade_to_coarse(&gt, &cfg.degrade, rng.gen())?;
    let features = synth_features(&gt, &cfg.features, rng.gen())?;
    Ok(Sample {
        id: sample_id(index),
        gt,
        coarse,
        features,
    })
}

/// Generates all samples in memory, split into train and test.
pub fn generate_in_memory(cfg: &SynthConfig, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for i in 0..cfg.count {
        let s = generate_sample(i, cfg, seed)?;
        match cfg.split_of(i) {
            Split::Train => train.push(s),
            Split::Test => test.push(s),
        }
    }
    Ok((train, test))
}

fn entry_paths(id: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        PathBuf::from(format!("gt/{id}.pgm")),
        PathBuf::from(format!("coarse/{id}.ftns")),
        PathBuf::from(format!("features/{id}.ftns")),
    )
}

pub fn write_sample(dir: &Path, sample: &Sample, split: Split) -> Result<ManifestEntry> {
    let (gt_path, coarse_path, feature_path) = entry_paths(&sample.id);
    write_pgm(&dir.join(&gt_path), &sample.gt)?;
    let c = &sample.coarse;
    write_ftns(
        &dir.join(&coarse_path),
        &RawTensor::new(1, c.height, c.width, c.data.clone())?,
    )?;
    write_ftns(&dir.join(&feature_path), &sample.features.finest().to_raw())?;
    Ok(ManifestEntry {
        id: sample.id.clone(),
        gt_path,
        coarse_path,
        feature_path,
        split,
    })
}

/// Writes `cfg.count` samples under `dir` and returns the manifest, which is
/// also written to `dir/manifest.tsv`.
pub fn generate_dataset(dir: &Path, cfg: &SynthConfig, seed: u64) -> Result<Manifest> {
    let mut entries = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let s = generate_sample(i, cfg, seed)?;
        entries.push(write_sample(dir, &s, cfg.split_of(i))?);
    }
    let manifest = Manifest {
        root: dir.to_path_buf(),
        entries,
    };
    manifest.write(&dir.join("manifest.tsv"))?;
    Ok(manifest)
}

pub fn load_sample(manifest: &Manifest, entry: &ManifestEntry) -> Result<Sample> {
    let gt = read_pgm(&manifest.resolve(&entry.gt_path))?;
    let coarse_path = manifest.resolve(&entry.coarse_path);
    let raw = read_ftns(&coarse_path)?;
    if raw.channels != 1 {
        return Err(Error::format(coarse_path, "coarse tensor must have one channel"));
    }
    let coarse = ProbMap::new(raw.height, raw.width, raw.data)?;
    let finest = FeatureMap::from_raw(read_ftns(&manifest.resolve(&entry.feature_path))?)?;
    Ok(Sample {
        id: entry.id.clone(),
        gt,
        coarse,
        features: FeaturePyramid::from_finest(finest)?,
    })
}

/// Loads every sample of `split` in manifest order.
pub fn load_split(manifest: &Manifest, split: Split) -> Result<Vec<Sample>> {
    manifest.split(split).map(|e| load_sample(manifest, e)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_area_close_to_analytic() {
        let m = rasterize(&ShapeSpec::ellipse((0.5, 0.5), 0.25, 0.25, 0.0), 224).unwrap();
        let expect = PI * (0.25f64 * 224.0).powi(2);
        let got = m.count_ones() as f64;
        assert!((got - expect).abs() / expect < 0.02, "{got} vs {expect}");
    }

    #[test]
    fn square_covers_exact_pixels() {
        let half = 0.25 * 2f64.sqrt();
        let m = rasterize(&ShapeSpec::polygon((0.5, 0.5), half, half, 4, PI / 4.0), 224).unwrap();
        assert_eq!(m.count_ones(), 12544);
        assert_eq!(m.bounding_box(), Some((56, 56, 168, 168)));
    }

    #[test]
    fn rejects_degenerate_and_border_shapes() {
        assert!(rasterize(&ShapeSpec::ellipse((0.5, 0.5), 0.0, 0.2, 0.0), 224).is_err());
        assert!(rasterize(&ShapeSpec::ellipse((0.5, 0.5), 0.499, 0.2, 0.0), 224).is_err());
        assert!(rasterize(&ShapeSpec::polygon((0.5, 0.5), 0.2, 0.2, 2, 0.0), 224).is_err());
        assert!(rasterize(&ShapeSpec::ellipse((0.5, 0.5), 0.2, 0.2, 0.0), 16).is_err());
    }

    #[test]
    fn zero_noise_coarse_is_pooled_gt() {
        let gt = rasterize(&ShapeSpec::star((0.5, 0.5), 0.35, 0.2, 5, 0.3), 224).unwrap();
        let cfg = DegradeConfig { p: 0.0, radius: 2 };
        assert_eq!(degrade_to_coarse(&gt, &cfg, 7).unwrap(), gt.to_prob().avg_pool(8).unwrap());
    }

    #[test]
    fn noiseless_intensity_is_gt() {
        let gt = rasterize(&ShapeSpec::ellipse((0.5, 0.5), 0.3, 0.2, 0.4), 224).unwrap();
        let fp = synth_features(&gt, &FeatureConfig::noiseless(4), 1).unwrap();
        let f = fp.finest();
        for r in 0..112 {
            for c in 0..112 {
                assert_eq!(f.at(0, r, c), f32::from(u8::from(gt.get(2 * r, 2 * c))));
            }
        }
    }

    #[test]
    fn too_few_channels_rejected() {
        let gt = rasterize(&ShapeSpec::ellipse((0.5, 0.5), 0.3, 0.2, 0.4), 224).unwrap();
        assert!(synth_features(&gt, &FeatureConfig::noiseless(3), 1).is_err());
    }
}
