//! Flat `key=value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use quadmask_core::detector::{DetectorConfig, JitterConfig};
use quadmask_core::metrics::CostShape;
use quadmask_core::numeric::{LrSchedule, SgdConfig};
use quadmask_core::pipeline::Propagation;
use quadmask_core::refiner::{ModelKind, RefinerConfig, TrainConfig};
use quadmask_core::synth::{DegradeConfig, FeatureConfig, SynthConfig};
use quadmask_core::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: usize,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,

    pub count: usize,
    pub train_fraction: f64,
    pub channels: usize,
    pub degrade_p: f64,
    pub degrade_radius: usize,
    pub texture: f64,
    pub grain: f64,
    pub sdf_sigma: f64,
    pub projection_seed: u64,

    pub model: ModelKind,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
    pub depth: usize,
    /// Nodes per level per training sample; 0 keeps every node.
    pub cap: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub detector_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub warmup: usize,
    pub schedule: LrSchedule,
    pub joint: bool,
    pub refine_weight: f64,
    pub inc_weight: f64,
    pub val_limit: usize,

    pub guidance: bool,
    pub trunk_width: usize,
    pub fusion_width: usize,
    pub threshold: f32,
    pub jitter_p: f64,
    pub jitter_r: usize,

    pub propagation: Propagation,
    pub bench_dim: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let train = TrainConfig::default();
        let det = DetectorConfig::default();
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            jobs: 1,
            manifest: None,
            checkpoint: None,
            count: synth.count,
            train_fraction: synth.train_fraction,
            channels: synth.features.channels,
            degrade_p: synth.degrade.p,
            degrade_radius: synth.degrade.radius,
            texture: synth.features.texture,
            grain: synth.features.grain,
            sdf_sigma: synth.features.sdf_sigma,
            projection_seed: synth.features.projection_seed,
            model: train.model.kind,
            dim: train.model.dim,
            heads: train.model.heads,
            layers: train.model.layers,
            ffn_mult: train.model.ffn_mult,
            depth: train.depth,
            cap: train.cap.unwrap_or(0),
            epochs: train.epochs,
            batch: train.batch,
            lr: train.refiner_sgd.lr,
            detector_lr: train.detector_sgd.lr,
            momentum: train.refiner_sgd.momentum,
            weight_decay: train.refiner_sgd.weight_decay,
            clip: train.clip,
            warmup: train.warmup,
            schedule: train.schedule,
            joint: train.joint,
            refine_weight: train.refine_weight,
            inc_weight: train.inc_weight,
            val_limit: train.val_limit,
            guidance: det.guidance,
            trunk_width: det.trunk_width,
            fusion_width: det.fusion_width,
            threshold: det.threshold,
            jitter_p: train.jitter.p,
            jitter_r: train.jitter.r,
            propagation: Propagation::Full,
            bench_dim: 256,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn schedule_name(s: LrSchedule) -> &'static str {
    match s {
        LrSchedule::Constant => "constant",
        LrSchedule::Cosine => "cosine",
    }
}

fn kind_name(k: ModelKind) -> &'static str {
    match k {
        ModelKind::Transformer => "transformer",
        ModelKind::Mlp => "mlp",
    }
}

fn propagation_name(p: Propagation) -> &'static str {
    match p {
        Propagation::Full => "full",
        Propagation::Finest => "finest",
    }
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Applies one `key=value` pair. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "jobs" => self.jobs = parse(key, v)?,
            "manifest" => self.manifest = parse_path(v),
            "checkpoint" => self.checkpoint = parse_path(v),
            "count" => self.count = parse(key, v)?,
            "train_fraction" => self.train_fraction = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "degrade_p" => self.degrade_p = parse(key, v)?,
            "degrade_radius" => self.degrade_radius = parse(key, v)?,
            "texture" => self.texture = parse(key, v)?,
            "grain" => self.grain = parse(key, v)?,
            "sdf_sigma" => self.sdf_sigma = parse(key, v)?,
            "projection_seed" => self.projection_seed = parse(key, v)?,
            "model" => self.model = v.parse().map_err(|_| Error::Config(format!("model: unknown kind {v:?}")))?,
            "dim" => self.dim = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "ffn_mult" => self.ffn_mult = parse(key, v)?,
            "depth" => self.depth = parse(key, v)?,
            "cap" => self.cap = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "detector_lr" => self.detector_lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "clip" => self.clip = parse(key, v)?,
            "warmup" => self.warmup = parse(key, v)?,
            "schedule" => {
                self.schedule = match v {
                    "constant" => LrSchedule::Constant,
                    "cosine" => LrSchedule::Cosine,
                    _ => return Err(Error::Config(format!("schedule: unknown {v:?} (constant|cosine)"))),
                }
            }
            "joint" => self.joint = parse_bool(key, v)?,
            "refine_weight" => self.refine_weight = parse(key, v)?,
            "inc_weight" => self.inc_weight = parse(key, v)?,
            "val_limit" => self.val_limit = parse(key, v)?,
            "guidance" => self.guidance = parse_bool(key, v)?,
            "trunk_width" => self.trunk_width = parse(key, v)?,
            "fusion_width" => self.fusion_width = parse(key, v)?,
            "threshold" => self.threshold = parse(key, v)?,
            "jitter_p" => self.jitter_p = parse(key, v)?,
            "jitter_r" => self.jitter_r = parse(key, v)?,
            "propagation" => self.propagation = v.parse().map_err(|_| Error::Config(format!("propagation: unknown {v:?}")))?,
            "bench_dim" => self.bench_dim = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines on top of the defaults. `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key=value", i + 1)));
            };
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, e.to_string().trim_start_matches("config: "))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, why: &str| Err(Error::Config(format!("{k}: {why}")));
        if self.jobs == 0 {
            return bad("jobs", "must be at least 1");
        }
        if !(1..=3).contains(&self.depth) {
            return bad("depth", "must be 1, 2 or 3");
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return bad("train_fraction", "must lie in [0, 1]");
        }
        if self.channels < 4 {
            return bad("channels", "must be at least 4");
        }
        if self.dim == 0 || self.dim % 2 != 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad("dim", "must be even and divisible by heads");
        }
        if self.bench_dim == 0 || self.bench_dim % self.heads != 0 {
            return bad("bench_dim", "must be divisible by heads");
        }
        if !(0.0..=1.0).contains(&self.degrade_p) || !(0.0..=1.0).contains(&self.jitter_p) {
            return bad("degrade_p/jitter_p", "probabilities must lie in [0, 1]");
        }
        Ok(())
    }

    /// Every key with its resolved value, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("seed", self.seed.to_string());
        put("out", self.out.display().to_string());
        put("jobs", self.jobs.to_string());
        put("manifest", path_text(&self.manifest));
        put("checkpoint", path_text(&self.checkpoint));
        put("count", self.count.to_string());
        put("train_fraction", self.train_fraction.to_string());
        put("channels", self.channels.to_string());
        put("degrade_p", self.degrade_p.to_string());
        put("degrade_radius", self.degrade_radius.to_string());
        put("texture", self.texture.to_string());
        put("grain", self.grain.to_string());
        put("sdf_sigma", self.sdf_sigma.to_string());
        put("projection_seed", self.projection_seed.to_string());
        put("model", kind_name(self.model).into());
        put("dim", self.dim.to_string());
        put("heads", self.heads.to_string());
        put("layers", self.layers.to_string());
        put("ffn_mult", self.ffn_mult.to_string());
        put("depth", self.depth.to_string());
        put("cap", self.cap.to_string());
        put("epochs", self.epochs.to_string());
        put("batch", self.batch.to_string());
        put("lr", self.lr.to_string());
        put("detector_lr", self.detector_lr.to_string());
        put("momentum", self.momentum.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("clip", self.clip.to_string());
        put("warmup", self.warmup.to_string());
        put("schedule", schedule_name(self.schedule).into());
        put("joint", self.joint.to_string());
        put("refine_weight", self.refine_weight.to_string());
        put("inc_weight", self.inc_weight.to_string());
        put("val_limit", self.val_limit.to_string());
        put("guidance", self.guidance.to_string());
        put("trunk_width", self.trunk_width.to_string());
        put("fusion_width", self.fusion_width.to_string());
        put("threshold", self.threshold.to_string());
        put("jitter_p", self.jitter_p.to_string());
        put("jitter_r", self.jitter_r.to_string());
        put("propagation", propagation_name(self.propagation).into());
        put("bench_dim", self.bench_dim.to_string());
        s
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            count: self.count,
            train_fraction: self.train_fraction,
            degrade: DegradeConfig {
                p: self.degrade_p,
                radius: self.degrade_radius,
            },
            features: FeatureConfig {
                channels: self.channels,
                texture: self.texture,
                grain: self.grain,
                sdf_sigma: self.sdf_sigma,
                projection_seed: self.projection_seed,
            },
        }
    }

    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig {
            trunk_width: self.trunk_width,
            fusion_width: self.fusion_width,
            guidance: self.guidance,
            threshold: self.threshold,
        }
    }

    pub fn refiner(&self) -> RefinerConfig {
        RefinerConfig {
            kind: self.model,
            dim: self.dim,
            heads: self.heads,
            layers: self.layers,
            ffn_mult: self.ffn_mult,
        }
    }

    pub fn train(&self) -> TrainConfig {
        let sgd = |lr| SgdConfig {
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        };
        TrainConfig {
            model: self.refiner(),
            detector: self.detector(),
            depth: self.depth,
            epochs: self.epochs,
            batch: self.batch,
            refiner_sgd: sgd(self.lr),
            detector_sgd: sgd(self.detector_lr),
            schedule: self.schedule,
            warmup: self.warmup,
            clip: self.clip,
            cap: (self.cap > 0).then_some(self.cap),
            jitter: JitterConfig {
                p: self.jitter_p,
                r: self.jitter_r,
            },
            joint: self.joint,
            refine_weight: self.refine_weight,
            inc_weight: self.inc_weight,
            val_limit: self.val_limit,
            seed: self.seed,
        }
    }

    pub fn cost_shape(&self) -> CostShape {
        CostShape {
            dim: self.bench_dim,
            heads: self.heads,
            layers: self.layers,
            ffn_mult: self.ffn_mult,
        }
    }
}
