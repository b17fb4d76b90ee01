//! Fixtures shared by the benchmarks.

use trackhijack::detector::{Detector, DetectorConfig, DetectorWeights};
use trackhijack::harness::{benchmark, Scenario, SceneSpec};

/// Detector with seeded random weights; timing does not depend on training.
pub fn detector() -> Detector {
    let cfg = DetectorConfig::default();
    let w = DetectorWeights::init(&cfg, 1);
    Detector::new(cfg, w).expect("default detector config is valid")
}

/// First benchmark scenario at default settings.
pub fn scenario() -> Scenario {
    benchmark(&SceneSpec::default(), 1, 3).expect("default scene spec is valid").remove(0)
}
