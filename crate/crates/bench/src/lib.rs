//! Shared fixtures for the criterion benches.

use quadmask_core::pipeline::{ModelSpec, Models, DEFAULT_DEPTH};
use quadmask_core::refiner::{ModelKind, RefinerConfig};
use quadmask_core::synth::{generate_sample, Sample, SynthConfig};
use quadmask_core::detector::DetectorConfig;

/// A held-out sample of the default synthetic dataset.
pub fn sample() -> Sample {
    let cfg = SynthConfig::default();
    generate_sample(cfg.train_count(), &cfg, 0).expect("default sample generates")
}

/// Untrained models of the default shape; timing does not depend on the weights.
pub fn models(channels: usize, kind: ModelKind) -> Models {
    let spec = ModelSpec {
        channels,
        depth: DEFAULT_DEPTH,
        detector: DetectorConfig::default(),
        refiner: RefinerConfig {
            kind,
            ..RefinerConfig::default()
        },
    };
    Models::init(spec, 0).expect("default models initialize")
}
