//! Benchmark aggregation, defense sweeps and report files.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::run::{generate_plan, run_attack, AttackPlan, Generated, Outcome, PlanConfig, RunOptions};
use super::scene::{Scenario, VEHICLE};
use crate::detector::{average_precision, Detector};
use crate::error::{Error, Result};
use crate::imaging::{defense_transform, DefenseKind};
use crate::mot::MotConfig;

/// Maps `f` over `items` on up to `jobs` threads, keeping input order.
/// The first error wins.
pub fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("result slots poisoned")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

/// Hex SHA-256 of a value's JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

/// Success rate and mean frames-to-success over successes only.
pub fn aggregate(outcomes: &[(bool, Option<usize>)]) -> Result<(f64, Option<f64>)> {
    if outcomes.is_empty() {
        return Err(Error::InvalidParameter("no scenarios to aggregate".into()));
    }
    let wins: Vec<usize> = outcomes.iter().filter(|o| o.0).map(|o| o.1.unwrap_or(0)).collect();
    let asr = wins.len() as f64 / outcomes.len() as f64;
    let frames = (!wins.is_empty()).then(|| wins.iter().sum::<usize>() as f64 / wins.len() as f64);
    Ok((asr, frames))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub label: String,
    pub scenario: usize,
    pub seed: u64,
    pub goal: String,
    pub mot_cov: f64,
    pub success: bool,
    pub frames_to_success: Option<usize>,
    pub terminal: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub label: String,
    pub mot_cov: f64,
    pub t_iou: f64,
    pub scenarios: usize,
    pub successes: usize,
    pub asr: f64,
    /// Empty when nothing succeeded.
    pub mean_frames: Option<f64>,
}

/// Per-config rows from per-scenario rows; order-independent.
pub fn summarize(label: &str, mot: &MotConfig, rows: &[ScenarioRow]) -> Result<EvalRow> {
    let outcomes: Vec<(bool, Option<usize>)> = rows.iter().map(|r| (r.success, r.frames_to_success)).collect();
    let (asr, mean_frames) = aggregate(&outcomes)?;
    Ok(EvalRow {
        label: label.to_string(),
        mot_cov: mot.cov,
        t_iou: mot.t_iou,
        scenarios: rows.len(),
        successes: rows.iter().filter(|r| r.success).count(),
        asr,
        mean_frames,
    })
}

fn scenario_row(label: &str, i: usize, sc: &Scenario, mot: &MotConfig, o: &Outcome, terminal: Option<bool>) -> ScenarioRow {
    ScenarioRow {
        label: label.to_string(),
        scenario: i,
        seed: sc.seed,
        goal: sc.goal.as_str().to_string(),
        mot_cov: mot.cov,
        success: o.success,
        frames_to_success: o.frames_to_success,
        terminal,
    }
}

/// Patch generation for every scenario, in benchmark order.
pub fn generate_all(bench: &[Scenario], det: &Detector, cfg: &PlanConfig, jobs: usize) -> Result<Vec<Generated>> {
    par_map(bench, jobs, |sc| generate_plan(sc, det, cfg))
}

/// Runs the given plans under every MOT configuration.
pub fn evaluate_plans(
    label: &str,
    bench: &[Scenario],
    plans: &[AttackPlan],
    terminal: &[Option<bool>],
    det: &Detector,
    mots: &[MotConfig],
    opts: &RunOptions,
    jobs: usize,
) -> Result<(Vec<EvalRow>, Vec<ScenarioRow>)> {
    if bench.is_empty() || bench.len() != plans.len() {
        return Err(Error::InvalidParameter(format!("{} scenarios but {} plans", bench.len(), plans.len())));
    }
    let idx: Vec<usize> = (0..bench.len()).collect();
    let mut rows = Vec::new();
    let mut per = Vec::new();
    for mot in mots {
        let these = par_map(&idx, jobs, |&i| {
            let o = run_attack(&bench[i], &plans[i], det, mot, opts)?;
            Ok(scenario_row(label, i, &bench[i], mot, &o, terminal.get(i).copied().flatten()))
        })?;
        rows.push(summarize(label, mot, &these)?);
        per.extend(these);
    }
    Ok((rows, per))
}

/// Generates a patch per scenario, then evaluates under every MOT config.
pub fn evaluate(
    label: &str,
    bench: &[Scenario],
    det: &Detector,
    cfg: &PlanConfig,
    mots: &[MotConfig],
    opts: &RunOptions,
    jobs: usize,
) -> Result<(Vec<EvalRow>, Vec<ScenarioRow>, Vec<Generated>)> {
    let generated = generate_all(bench, det, cfg, jobs)?;
    let plans: Vec<AttackPlan> = generated.iter().map(|g| g.plan.clone()).collect();
    let terminal: Vec<Option<bool>> = generated.iter().map(|g| Some(g.result.terminal)).collect();
    let (rows, per) = evaluate_plans(label, bench, &plans, &terminal, det, mots, opts, jobs)?;
    Ok((rows, per, generated))
}

/// AP@0.5 of the vehicle class over every frame, after a defense.
pub fn benchmark_ap(bench: &[Scenario], det: &Detector, defense: &DefenseKind, jobs: usize) -> Result<f64> {
    let per = par_map(bench, jobs, |sc| {
        (0..sc.len())
            .map(|t| {
                let x = defense_transform(&sc.frames[t], defense)?;
                Ok((det.forward(&x)?.detections_of(VEHICLE), vec![sc.targets[t]]))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let images: Vec<_> = per.into_iter().flatten().collect();
    Ok(average_precision(&images, 0.5))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseRow {
    pub defense: String,
    pub strength: f64,
    pub asr: f64,
    pub ap: f64,
}

/// Numeric strength of a defense for reporting.
pub fn defense_strength(kind: &DefenseKind) -> f64 {
    match *kind {
        DefenseKind::Identity => 0.0,
        DefenseKind::BitDepth { bits } => f64::from(bits),
        DefenseKind::GaussianNoise { std, .. } => std,
        DefenseKind::MedianBlur { kernel } => kernel as f64,
    }
}

/// Attack success and detector utility under each defense, with fixed
/// patches.
pub fn defense_eval(
    bench: &[Scenario],
    plans: &[AttackPlan],
    det: &Detector,
    mot: &MotConfig,
    defenses: &[DefenseKind],
    horizon: usize,
    jobs: usize,
) -> Result<Vec<DefenseRow>> {
    defenses
        .iter()
        .map(|d| {
            d.validate()?;
            let opts = RunOptions { defense: *d, horizon };
            let (rows, _) = evaluate_plans(&d.label(), bench, plans, &[], det, &[*mot], &opts, jobs)?;
            Ok(DefenseRow {
                defense: d.label(),
                strength: defense_strength(d),
                asr: rows[0].asr,
                ap: benchmark_ap(bench, det, d, jobs)?,
            })
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn write_eval_rows<W: Write>(out: W, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["label", "mot_cov", "t_iou", "scenarios", "successes", "asr", "mean_frames"])?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.mot_cov.to_string(),
            r.t_iou.to_string(),
            r.scenarios.to_string(),
            r.successes.to_string(),
            format!("{:.6}", r.asr),
            fmt_opt(r.mean_frames),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_scenario_rows<W: Write>(out: W, rows: &[ScenarioRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["label", "scenario", "seed", "goal", "mot_cov", "success", "frames_to_success", "terminal"])?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.scenario.to_string(),
            r.seed.to_string(),
            r.goal.clone(),
            r.mot_cov.to_string(),
            r.success.to_string(),
            r.frames_to_success.map(|f| f.to_string()).unwrap_or_default(),
            r.terminal.map(|t| t.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_defense_rows<W: Write>(out: W, rows: &[DefenseRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["defense", "strength", "asr", "ap50"])?;
    for r in rows {
        w.write_record([r.defense.clone(), r.strength.to_string(), format!("{:.6}", r.asr), format!("{:.6}", r.ap)])?;
    }
    w.flush()?;
    Ok(())
}

/// Summary JSON written once per benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub weights_hash: String,
    pub rows: Vec<EvalRow>,
}

pub fn write_summary(path: &Path, s: &Summary) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(s)?)?;
    Ok(())
}
