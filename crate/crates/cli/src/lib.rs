//! Command-line drivers over the `trackhijack` library.
//!
//! Every command reads an optional JSON config, applies its flags on top,
//! writes its outputs under `--out` and leaves a `manifest.json` beside
//! them. Exit codes: 0 success, 2 invalid input, 3 runtime failure.

pub mod artifacts;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use trackhijack::Error;

pub use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configs or inputs (exit code 2).
    Validation(String),
    /// Failure while running a valid request (exit code 3).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "runtime failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match &e {
            Error::NonFinite(_) | Error::StepCapReached(_) | Error::MissingProposal { .. } => {
                CliError::Runtime(e.to_string())
            }
            Error::Io(io) if io.kind() != std::io::ErrorKind::NotFound => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "trackhijack", version, about = "Tracker-hijacking patch attacks on a synthetic driving benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct MotArgs {
    #[arg(long = "mot-cov")]
    pub mot_cov: Option<f64>,
    /// Consecutive hits needed to confirm a track.
    #[arg(long = "mot-h")]
    pub mot_h: Option<u32>,
    /// Misses tolerated before a track is deleted.
    #[arg(long = "mot-r")]
    pub mot_r: Option<u32>,
    #[arg(long = "t-iou")]
    pub t_iou: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct AttackArgs {
    /// Total iteration budget per patch.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Expected attack direction; must agree with the scenarios.
    #[arg(long, value_enum)]
    pub direction: Option<DirectionArg>,
}

#[derive(Debug, Clone, Args)]
pub struct DefenseArgs {
    #[arg(long, value_enum)]
    pub defense: Option<DefenseArg>,
    /// Bits, noise std or kernel size, depending on the defense.
    #[arg(long)]
    pub strength: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Conditional,
    Slrm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    L2r,
    R2l,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GoalArg {
    MoveIn,
    MoveOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DefenseArg {
    None,
    Bitdepth,
    Gauss,
    Median,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the detector on the synthetic corpus.
    DetectorTrain {
        #[command(flatten)]
        common: Common,
    },
    /// Benchmark AP and finite-difference checks of every objective.
    DetectorCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Render the benchmark (or one goal's scenarios).
    SceneGen {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        goal: Option<GoalArg>,
    },
    /// Patch-location preselection and its frame-to-frame stability.
    Stage1 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum)]
        direction: Option<DirectionArg>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Generate one hijacking patch per scenario.
    AttackGen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        #[command(flatten)]
        attack: AttackArgs,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Run scenarios with (or without) patches through detector and tracker.
    AttackEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        /// Directory written by a generating command; omitted means benign.
        #[arg(long)]
        patches: Option<PathBuf>,
        #[command(flatten)]
        mot: MotArgs,
        #[command(flatten)]
        defense: DefenseArgs,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Fixed-weight optimizer baseline: generate and evaluate.
    BaselineSlrm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        #[command(flatten)]
        mot: MotArgs,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Detector-bypassing hijack ceiling.
    BaselineMaxcap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        #[command(flatten)]
        mot: MotArgs,
        /// Largest number of manipulated frames.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Random patch location inside the region: generate and evaluate.
    BaselineRandloc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        #[command(flatten)]
        mot: MotArgs,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Attack success and AP@0.5 under input-transformation defenses.
    DefenseEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        patches: PathBuf,
        #[command(flatten)]
        mot: MotArgs,
        #[command(flatten)]
        defense: DefenseArgs,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Merge the evaluation tables of earlier runs.
    Report {
        #[command(flatten)]
        common: Common,
        /// Output directories of earlier runs.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use std::fs;
    use std::path::Path;

    use super::*;

    fn run(args: &[&str]) -> i32 {
        run_cli(std::iter::once("trackhijack").chain(args.iter().copied()))
    }

    fn small_config(dir: &Path) -> String {
        let mut cfg = RunConfig::default();
        cfg.corpus.scenes = 2;
        cfg.train.epochs = 1;
        cfg.benchmark.per_goal = 1;
        let path = dir.join("config.json");
        fs::write(&path, serde_json::to_vec(&cfg).unwrap()).unwrap();
        path.display().to_string()
    }

    #[test]
    fn bad_flags_exit_with_validation_code() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("o").display().to_string();
        assert_eq!(run(&["no-such-command"]), 2);
        assert_eq!(run(&["scene-gen"]), 2);
        assert_eq!(run(&["attack-eval", "--out", &out, "--weights", "missing.bin", "--scenario", "missing.json"]), 2);
        assert_eq!(run(&["attack-eval", "--out", &out, "--weights", "w", "--scenario", "s", "--strength", "3"]), 2);
        assert_eq!(run(&["attack-gen", "--out", &out, "--weights", "w", "--scenario", "s", "--eta", "1"]), 2);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.benchmark.per_goal = 0;
        let path = tmp.path().join("c.json");
        fs::write(&path, serde_json::to_vec(&cfg).unwrap()).unwrap();
        let out = tmp.path().join("o").display().to_string();
        assert_eq!(run(&["scene-gen", "--config", &path.display().to_string(), "--out", &out]), 2);
        fs::write(&path, b"{\"seed\": \"x\"}").unwrap();
        assert_eq!(run(&["scene-gen", "--config", &path.display().to_string(), "--out", &out]), 2);
    }

    #[test]
    fn unwritable_output_is_a_runtime_failure() {
        let tmp = tempfile::tempdir().unwrap();
        let file = tmp.path().join("taken");
        fs::write(&file, b"").unwrap();
        assert_eq!(run(&["scene-gen", "--out", &file.display().to_string()]), 3);
    }

    #[test]
    fn pipeline_outputs_and_patch_guards() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path();
        let c = small_config(root);
        let p = |s: &str| root.join(s).display().to_string();
        assert_eq!(run(&["detector-train", "--config", &c, "--seed", "1", "--out", &p("a")]), 0);
        assert_eq!(run(&["detector-train", "--config", &c, "--seed", "2", "--out", &p("b")]), 0);
        assert_eq!(run(&["scene-gen", "--config", &c, "--out", &p("scenes")]), 0);
        let (wa, wb, set) = (p("a/weights.bin"), p("b/weights.bin"), p("scenes/bench.json"));
        for f in ["weights.bin", "train_log.csv", "train.json", "manifest.json"] {
            assert!(root.join("a").join(f).exists(), "{f}");
        }
        assert_eq!(fs::read(root.join("scenes/bench.json")).map(|b| b.is_empty()).ok(), Some(false));

        let gen = ["attack-gen", "--config", &c, "--weights", &wa, "--scenario", &set, "--iters", "24", "--out", &p("gen")];
        assert_eq!(run(&gen), 0);
        let patches = p("gen/patches");
        assert_eq!(run(&["attack-eval", "--config", &c, "--weights", &wa, "--scenario", &set, "--patches", &patches, "--out", &p("ev")]), 0);
        // patches made under detector A must not be evaluated against B
        assert_eq!(run(&["attack-eval", "--config", &c, "--weights", &wb, "--scenario", &set, "--patches", &patches, "--out", &p("ev_b")]), 2);
        assert!(!root.join("ev_b/summary.json").exists());

        assert_eq!(run(&["attack-eval", "--config", &c, "--weights", &wa, "--scenario", &set, "--out", &p("benign")]), 0);
        let summary = fs::read_to_string(root.join("benign/summary.json")).unwrap();
        assert!(summary.contains("\"benign\""));
        assert!(root.join("benign/tracks").is_dir());

        let first = root.join("scenes/scenes/s00_move-in.json");
        let one = first.display().to_string();
        let codes: Vec<i32> = ["l2r", "r2l"]
            .iter()
            .map(|d| run(&["stage1", "--config", &c, "--weights", &wa, "--scenario", &one, "--direction", d, "--out", &p("s1")]))
            .collect();
        assert!(codes == [0, 2] || codes == [2, 0], "{codes:?}");

        assert_eq!(run(&["report", "--out", &p("rep"), &p("ev"), &p("benign")]), 0);
        let table = fs::read_to_string(root.join("rep/report.csv")).unwrap();
        assert_eq!(table.lines().count(), 3);
        assert_eq!(run(&["report", "--out", &p("rep2"), &p("a")]), 2);
    }
}
