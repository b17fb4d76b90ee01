//! On-disk artifacts shared between commands: scenario sets, patch files
//! and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trackhijack::attackopt::PatchSidecar;
use trackhijack::detector::{load_weights, weights_digest, Detector};
use trackhijack::geometry::Vec2;
use trackhijack::harness::{config_hash, load_scenario, AttackPlan, PlacedPatch, Scenario};
use trackhijack::imaging::{read_image, write_image};
use trackhijack::targeting::Goal;

use crate::config::RunConfig;
use crate::CliError;

/// Index written by `scene-gen`: scenario files relative to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub scenarios: Vec<String>,
}

/// Scenarios named by their file stems. `path` is either a set index or a
/// single scenario file.
pub fn load_set(path: &Path) -> Result<Vec<(String, Scenario)>, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let value: serde_json::Value = serde_json::from_slice(&bytes)?;
    let files: Vec<PathBuf> = if value.get("scenarios").is_some() {
        let set: ScenarioSet = serde_json::from_value(value)?;
        set.scenarios.iter().map(|s| dir.join(s)).collect()
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(CliError::Validation(format!("{} lists no scenarios", path.display())));
    }
    files
        .iter()
        .map(|f| {
            let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("scenario").to_string();
            Ok((stem, load_scenario(f)?))
        })
        .collect()
}

/// Detector plus the digest downstream artifacts must carry.
pub fn load_detector(path: &Path) -> Result<(Detector, String), CliError> {
    let (cfg, w) = load_weights(path)?;
    let digest = weights_digest(&cfg, &w);
    Ok((Detector::new(cfg, w)?, digest))
}

/// Sidecar of a saved patch, with what is needed to reject mismatched use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchFile {
    #[serde(flatten)]
    pub sidecar: PatchSidecar,
    pub goal: Goal,
    pub direction: Vec2,
    pub scenario_seed: u64,
}

pub fn save_patch(dir: &Path, stem: &str, plan: &AttackPlan, file: &PatchFile) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let p = plan.patches.first().ok_or_else(|| CliError::Runtime("plan without a patch".into()))?;
    write_image(&dir.join(format!("{stem}.ppm")), &p.pixels)?;
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(file)?)?;
    Ok(())
}

/// Loads the patch for `stem`, rejecting patches made under other weights
/// or for another scenario.
pub fn load_patch(dir: &Path, stem: &str, sc: &Scenario, weights_hash: &str) -> Result<AttackPlan, CliError> {
    let meta_path = dir.join(format!("{stem}.json"));
    let bytes = fs::read(&meta_path).map_err(|e| CliError::Validation(format!("{}: {e}", meta_path.display())))?;
    let file: PatchFile = serde_json::from_slice(&bytes)?;
    if file.sidecar.weights_hash != weights_hash {
        return Err(CliError::Validation(format!(
            "patch {stem} was generated under detector {} but {} is loaded",
            file.sidecar.weights_hash, weights_hash
        )));
    }
    if file.scenario_seed != sc.seed {
        return Err(CliError::Validation(format!(
            "patch {stem} belongs to scenario seed {}, not {}",
            file.scenario_seed, sc.seed
        )));
    }
    let pixels = read_image(&dir.join(format!("{stem}.ppm")))?;
    if (pixels.height(), pixels.width()) != file.sidecar.size {
        return Err(CliError::Validation(format!("patch {stem} image does not match its recorded size")));
    }
    Ok(AttackPlan {
        patches: vec![PlacedPatch { pixels, offset: file.sidecar.offset }],
        goal: file.goal,
        direction: file.direction,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Result<Self, CliError> {
        Ok(Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            config: config.clone(),
            config_hash: config_hash(config)?,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.to_string(), path.display().to_string());
    }

    pub fn output(&mut self, name: impl Into<String>) {
        self.outputs.push(name.into());
    }

    pub fn write(&mut self, out: &Path) -> Result<(), CliError> {
        self.outputs.sort();
        fs::write(out.join("manifest.json"), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}
