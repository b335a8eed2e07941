//! Shared fixtures for the criterion benches.

use keystep_core::data::{gen_synthetic, FamilyCounts, SynthConfig};
use keystep_core::trainer::TrainConfig;
use keystep_core::{Model, Result, SceneSet};

/// `per_family` scenes of every family, default noise.
pub fn scenes(per_family: usize, seed: u64) -> Result<SceneSet> {
    let cfg = SynthConfig {
        counts: FamilyCounts::uniform(per_family),
        ..SynthConfig::default()
    };
    gen_synthetic(&cfg, seed)
}

/// Untrained model at the default widths.
pub fn model(seed: u64) -> Result<(Model, TrainConfig)> {
    let tc = TrainConfig::default();
    Ok((Model::init(tc.model_config(), seed)?, tc))
}
