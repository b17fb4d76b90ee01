//! Resolved run configuration: JSON file first, flags on top.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use trackhijack::attackopt::AttackConfig;
use trackhijack::detector::{DetectorConfig, TrainConfig};
use trackhijack::harness::{CorpusSpec, LocationStrategy, PlanConfig, RunOptions, SceneSpec};
use trackhijack::imaging::DefenseKind;
use trackhijack::mot::MotConfig;
use trackhijack::stage1::Stage1Config;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    /// Scenarios per goal.
    pub per_goal: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self { per_goal: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanSettings {
    pub location: LocationStrategy,
    /// Total optimizer iterations per patch, location search included.
    pub budget: usize,
}

impl Default for PlanSettings {
    fn default() -> Self {
        Self { location: LocationStrategy::Preselect, budget: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Every random choice of a command derives from this.
    pub seed: u64,
    pub scene: SceneSpec,
    pub corpus: CorpusSpec,
    pub benchmark: BenchmarkSpec,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub stage1: Stage1Config,
    pub plan: PlanSettings,
    pub mot: MotConfig,
    pub run: RunOptions,
    /// Sweep used by `defense-eval` when no `--defense` is given.
    pub defenses: Vec<DefenseKind>,
    /// Largest number of manipulated frames tried by `baseline-maxcap`.
    pub max_frames: usize,
    /// Consecutive frames preselected by `stage1` for the stability report.
    pub stability_frames: usize,
    /// SLRM weights tried by `baseline-slrm` when no `--eta` is given.
    pub slrm_etas: Vec<f64>,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneSpec::default(),
            corpus: CorpusSpec::default(),
            benchmark: BenchmarkSpec::default(),
            detector: DetectorConfig::default(),
            train: TrainConfig::default(),
            attack: AttackConfig::default(),
            stage1: Stage1Config::default(),
            plan: PlanSettings::default(),
            mot: MotConfig::default(),
            run: RunOptions::default(),
            defenses: vec![
                DefenseKind::Identity,
                DefenseKind::BitDepth { bits: 8 },
                DefenseKind::BitDepth { bits: 4 },
                DefenseKind::GaussianNoise { std: 0.03, seed: 0 },
                DefenseKind::MedianBlur { kernel: 3 },
                DefenseKind::MedianBlur { kernel: 5 },
                DefenseKind::MedianBlur { kernel: 9 },
            ],
            max_frames: 4,
            stability_frames: 5,
            slrm_etas: vec![0.1, 1.0, 10.0],
            jobs: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let bytes = fs::read(p).map_err(|e| CliError::Validation(format!("config {}: {e}", p.display())))?;
                serde_json::from_slice(&bytes).map_err(|e| CliError::Validation(format!("config {}: {e}", p.display())))
            }
        }
    }

    /// Pushes the top-level seed into every seeded component.
    pub fn propagate_seed(&mut self) {
        let s = self.seed;
        self.train.seed = s;
        self.corpus.seed = s;
        self.attack.seed = s;
        self.stage1.seed = s;
    }

    pub fn plan_config(&self) -> PlanConfig {
        PlanConfig {
            attack: self.attack.clone(),
            stage1: self.stage1.clone(),
            location: self.plan.location,
            budget: self.plan.budget,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.scene.validate()?;
        self.detector.validate()?;
        self.attack.validate()?;
        self.stage1.validate()?;
        self.mot.validate()?;
        self.run.defense.validate()?;
        for d in &self.defenses {
            d.validate()?;
        }
        if self.benchmark.per_goal == 0 {
            return Err(CliError::Validation("benchmark.per_goal must be >= 1".into()));
        }
        if self.plan.budget == 0 {
            return Err(CliError::Validation("plan.budget must be >= 1".into()));
        }
        Ok(())
    }
}
