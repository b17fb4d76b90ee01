//! One scenario through detector and tracker: benign, patched and
//! detector-bypassing runs, the hijack predicate and patch generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::Scenario;
use crate::attackopt::{generate_patch, AttackConfig, AttackFrame, AttackResult};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Vec2};
use crate::imaging::{apply_patch, defense_transform, DefenseKind, Image, PatchSpec};
use crate::mot::{Mot, MotConfig, TrackLogRow, TrackStatus};
use crate::stage1::{preselect_location, Stage1Config, Stage1Result};
use crate::targeting::{default_step_cap, find_target_bbox, AttackDirection, Goal, TargetMode};

/// Minimum IOU for a detection to count as the target's.
pub const TARGET_MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunOptions {
    pub defense: DefenseKind,
    /// Number of patch-free frames after the window on which the target's
    /// detection must stay away from every pre-existing track.
    pub horizon: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { defense: DefenseKind::Identity, horizon: 1 }
    }
}

/// Patch pixels with their offset from the target box's rounded top-left.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedPatch {
    pub pixels: Image,
    pub offset: (i64, i64),
}

impl PlacedPatch {
    /// Absolute placement on a frame whose target box is `b`.
    pub fn on(&self, b: &BBox) -> PatchSpec {
        PatchSpec::new(self.pixels.clone(), b.x1.round() as i64 + self.offset.0, b.y1.round() as i64 + self.offset.1)
    }
}

/// Patches for one scenario plus the direction they were generated for.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackPlan {
    pub patches: Vec<PlacedPatch>,
    pub goal: Goal,
    pub direction: Vec2,
}

impl AttackPlan {
    /// A plain mid-gray patch of the scenario's size, centered in its
    /// region on the first attacked frame.
    pub fn gray(sc: &Scenario) -> Self {
        let (dh, dw) = sc.patch_size;
        let b = sc.targets[sc.t_start];
        let r = sc.regions[sc.t_start];
        let x = r.x0 + (r.width() - dw as i64) / 2 - b.x1.round() as i64;
        let y = r.y0 + (r.height() - dh as i64) / 2 - b.y1.round() as i64;
        AttackPlan {
            patches: vec![PlacedPatch { pixels: Image::filled(dh, dw, 0.5), offset: (x, y) }],
            goal: sc.goal,
            direction: sc.direction,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub log: Vec<TrackLogRow>,
    pub success: bool,
    /// Fewest attacked frames that already succeed; only set on success.
    pub frames_to_success: Option<usize>,
    /// Track holding the target on the frame before the window.
    pub target_track: Option<u64>,
    /// Index of the target's detection on every frame.
    pub target_detections: Vec<Option<usize>>,
    /// Frames on which the predicate was checked.
    pub check_frames: Vec<usize>,
    /// Track the target's detection joined on each check frame.
    pub post_attack: Vec<Option<u64>>,
    /// Frames that carried an attack.
    pub attacked_frames: usize,
}

type Detections = Vec<(BBox, f64)>;

/// Class-agnostic post-NMS detections of one frame, after the defense.
pub fn detect(det: &Detector, frame: &Image, defense: &DefenseKind) -> Result<Detections> {
    let x = match defense {
        DefenseKind::Identity => None,
        d => Some(defense_transform(frame, d)?),
    };
    let out = det.forward(x.as_ref().unwrap_or(frame))?;
    Ok(out.detections().into_iter().map(|(b, c, _)| (b, c)).collect())
}

/// Detection overlapping `gt` most, if at least [`TARGET_MATCH_IOU`].
pub fn target_detection(dets: &[(BBox, f64)], gt: &BBox) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (b, _)) in dets.iter().enumerate() {
        let v = iou(b, gt);
        if v >= TARGET_MATCH_IOU && best.is_none_or(|(_, bv)| v > bv) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Frames checked after an attack ending at `last_attacked`.
pub fn check_frames(last_attacked: usize, horizon: usize, len: usize) -> Vec<usize> {
    (last_attacked + 1..len.min(last_attacked + 1 + horizon.max(1))).collect()
}

/// The hijack predicate from a track log alone: on every check frame the
/// target's detection belongs to a track that did not exist while the
/// attack ran. A missing detection or check frame means failure.
pub fn success_from_log(rows: &[TrackLogRow], last_attacked: usize, checks: &[usize], target_dets: &[Option<usize>]) -> bool {
    if checks.is_empty() {
        return false;
    }
    checks.iter().all(|&c| {
        let Some(d) = target_dets.get(c).copied().flatten() else {
            return false;
        };
        let Some(row) = rows.iter().find(|r| r.frame == c && r.detection == d as i64) else {
            return false;
        };
        !rows.iter().any(|r| r.frame <= last_attacked && r.track_id == row.track_id)
    })
}

fn track_of(rows: &[TrackLogRow], frame: usize, det: Option<usize>) -> Option<u64> {
    let d = det? as i64;
    rows.iter().find(|r| r.frame == frame && r.detection == d && r.status != TrackStatus::Deleted).map(|r| r.track_id)
}

fn run_stream(stream: &[Detections], cfg: &MotConfig) -> Result<Vec<TrackLogRow>> {
    let mut mot = Mot::new(*cfg)?;
    let mut log = Vec::new();
    for dets in stream {
        log.extend(mot.step(dets).log);
    }
    Ok(log)
}

struct Judged {
    log: Vec<TrackLogRow>,
    success: bool,
    target_track: Option<u64>,
    target_detections: Vec<Option<usize>>,
    checks: Vec<usize>,
    post: Vec<Option<u64>>,
}

fn judge(sc: &Scenario, stream: &[Detections], log: Vec<TrackLogRow>, last_attacked: usize, horizon: usize) -> Judged {
    let target_detections: Vec<Option<usize>> =
        stream.iter().zip(&sc.targets).map(|(d, gt)| target_detection(d, gt)).collect();
    let checks = check_frames(last_attacked, horizon, stream.len());
    let success = success_from_log(&log, last_attacked, &checks, &target_detections);
    let before = sc.t_start.saturating_sub(1);
    let target_track = track_of(&log, before, target_detections[before]);
    let post = checks.iter().map(|&c| track_of(&log, c, target_detections[c])).collect();
    Judged { log, success, target_track, target_detections, checks, post }
}

fn outcome(j: Judged, frames_to_success: Option<usize>, attacked_frames: usize) -> Outcome {
    Outcome {
        log: j.log,
        success: j.success,
        frames_to_success,
        target_track: j.target_track,
        target_detections: j.target_detections,
        check_frames: j.checks,
        post_attack: j.post,
        attacked_frames,
    }
}

/// Clean detections of every frame.
pub fn clean_detections(sc: &Scenario, det: &Detector, defense: &DefenseKind) -> Result<Vec<Detections>> {
    sc.frames.iter().map(|f| detect(det, f, defense)).collect()
}

/// Full pipeline without any patch, judged as if the window had been
/// attacked.
pub fn run_benign(sc: &Scenario, det: &Detector, mot: &MotConfig, opts: &RunOptions) -> Result<Outcome> {
    let stream = clean_detections(sc, det, &opts.defense)?;
    let log = run_stream(&stream, mot)?;
    Ok(outcome(judge(sc, &stream, log, sc.t_end, opts.horizon), None, 0))
}

/// Frame `t` with every patch of `plan` riding the target box.
pub fn patched_frame(sc: &Scenario, plan: &AttackPlan, t: usize) -> Result<Image> {
    let mut img = sc.frames[t].clone();
    for p in &plan.patches {
        img = apply_patch(&img, &p.on(&sc.targets[t]))?.image;
    }
    Ok(img.quantized8())
}

/// Runs the scenario with the patches pasted on every window frame and
/// reports the hijack predicate and the fewest frames that suffice.
pub fn run_attack(sc: &Scenario, plan: &AttackPlan, det: &Detector, mot: &MotConfig, opts: &RunOptions) -> Result<Outcome> {
    if plan.goal != sc.goal || plan.direction != sc.direction {
        return Err(Error::DirectionMismatch(format!(
            "patch made for {} {:?}, scenario wants {} {:?}",
            plan.goal.as_str(),
            plan.direction,
            sc.goal.as_str(),
            sc.direction
        )));
    }
    let clean = clean_detections(sc, det, &opts.defense)?;
    let window = sc.t_end - sc.t_start + 1;
    let mut attacked = Vec::with_capacity(window);
    for t in sc.t_start..=sc.t_end {
        attacked.push(detect(det, &patched_frame(sc, plan, t)?, &opts.defense)?);
    }
    let stream_for = |k: usize| -> Vec<Detections> {
        let mut s = clean.clone();
        for i in 0..k {
            s[sc.t_start + i] = attacked[i].clone();
        }
        s
    };
    let full = stream_for(window);
    let log = run_stream(&full, mot)?;
    let judged = judge(sc, &full, log, sc.t_end, opts.horizon);
    let mut frames = None;
    if judged.success {
        for k in 1..=window {
            let s = stream_for(k);
            let last = sc.t_start + k - 1;
            if judge(sc, &s, run_stream(&s, mot)?, last, opts.horizon).success {
                frames = Some(k);
                break;
            }
        }
    }
    Ok(outcome(judged, frames, window))
}

/// Detector-bypassing ceiling: on `attacked_frames` frames from the window
/// start, the target's detection is replaced by the largest in-gate shift
/// of the hijacked track's own prediction along the attack direction.
pub fn max_capability(
    sc: &Scenario,
    dir: &AttackDirection,
    det: &Detector,
    mot: &MotConfig,
    attacked_frames: usize,
    opts: &RunOptions,
) -> Result<Outcome> {
    let clean = clean_detections(sc, det, &opts.defense)?;
    max_capability_on(sc, &clean, dir, mot, attacked_frames, opts)
}

/// [`max_capability`] over precomputed clean detections.
pub fn max_capability_on(
    sc: &Scenario,
    clean: &[Detections],
    dir: &AttackDirection,
    mot: &MotConfig,
    attacked_frames: usize,
    opts: &RunOptions,
) -> Result<Outcome> {
    let k = attacked_frames.min(sc.len() - sc.t_start);
    let (h, w) = (sc.frames[0].height(), sc.frames[0].width());
    let cap = default_step_cap(h, w, dir.v);
    let mut tracker = Mot::new(*mot)?;
    let mut log = Vec::new();
    let mut hijacked = None;
    for (t, dets) in clean.iter().enumerate() {
        let mut dets = dets.clone();
        let td = target_detection(&dets, &sc.targets[t]);
        if t >= sc.t_start && t < sc.t_start + k {
            if let Some(i) = td {
                let anchor = hijacked.and_then(|id| tracker.tracker(id)).map(|tr| tr.predicted_bbox()).unwrap_or(dets[i].0);
                dets[i].0 = find_target_bbox(&anchor, dir.v, mot.t_iou, TargetMode::LastAboveThreshold, cap)?;
            }
        }
        let res = tracker.step(&dets);
        if t + 1 == sc.t_start || (t == sc.t_start && hijacked.is_none()) {
            hijacked = td.and_then(|i| res.matched_track(i));
        }
        log.extend(res.log);
    }
    let last = if k == 0 { sc.t_end } else { sc.t_start + k - 1 };
    Ok(outcome(judge(sc, clean, log, last, opts.horizon), None, k))
}

/// Where the patch sits inside the allowed region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocationStrategy {
    /// Stage I mask optimization on the first attacked frame.
    Preselect,
    /// Seeded uniform window inside the region.
    Random,
    /// Region center.
    Center,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanConfig {
    pub attack: AttackConfig,
    pub stage1: Stage1Config,
    pub location: LocationStrategy,
    /// Total iteration budget; Stage I iterations come out of it.
    pub budget: usize,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            attack: AttackConfig::default(),
            stage1: Stage1Config::default(),
            location: LocationStrategy::Preselect,
            budget: 1000,
        }
    }
}

/// Generated plan together with the optimizer artifacts.
#[derive(Debug, Clone)]
pub struct Generated {
    pub plan: AttackPlan,
    pub result: AttackResult,
    pub stage1: Option<Stage1Result>,
}

/// Offset of the chosen window relative to the first attacked frame.
pub fn choose_offset(sc: &Scenario, det: &Detector, cfg: &PlanConfig) -> Result<((i64, i64), Option<Stage1Result>)> {
    let (dh, dw) = sc.patch_size;
    let t = sc.t_start;
    let b = sc.targets[t];
    let r = sc.regions[t];
    let origin = (b.x1.round() as i64, b.y1.round() as i64);
    let (free_x, free_y) = (r.width() - dw as i64, r.height() - dh as i64);
    if free_x < 0 || free_y < 0 {
        return Err(Error::InvalidParameter(format!("patch {dh}x{dw} does not fit its region")));
    }
    let (x, y, s1) = match cfg.location {
        LocationStrategy::Center => (r.x0 + free_x / 2, r.y0 + free_y / 2, None),
        LocationStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.attack.seed ^ sc.seed.wrapping_mul(0x2545_f491_4f6c_dd1d));
            (r.x0 + rng.random_range(0..=free_x), r.y0 + rng.random_range(0..=free_y), None)
        }
        LocationStrategy::Preselect => {
            let s1cfg = Stage1Config { window: (dh, dw), seed: cfg.attack.seed, ..cfg.stage1.clone() };
            let res = preselect_location(det, &sc.frames[t], &b, &sc.attack_direction(), r, &s1cfg)?;
            (res.location.0, res.location.1, Some(res))
        }
    };
    Ok(((x - origin.0, y - origin.1), s1))
}

/// Chooses the location, then optimizes the patch over the window's clean
/// frames with the rest of the iteration budget.
pub fn generate_plan(sc: &Scenario, det: &Detector, cfg: &PlanConfig) -> Result<Generated> {
    let (offset, stage1) = choose_offset(sc, det, cfg)?;
    let used = stage1.as_ref().map_or(0, |_| cfg.stage1.iterations);
    let iterations = cfg.budget.checked_sub(used).filter(|n| *n > 0).ok_or_else(|| {
        Error::InvalidParameter(format!("budget {} leaves nothing after {used} location iterations", cfg.budget))
    })?;
    let frames: Vec<AttackFrame> = (sc.t_start..=sc.t_end)
        .map(|t| {
            let b = sc.targets[t];
            AttackFrame {
                image: sc.frames[t].clone(),
                b_o: b,
                location: (b.x1.round() as i64 + offset.0, b.y1.round() as i64 + offset.1),
            }
        })
        .collect();
    let acfg = AttackConfig { iterations, patch_size: sc.patch_size, ..cfg.attack.clone() };
    let result = generate_patch(det, &frames, &sc.attack_direction(), &acfg)?;
    let plan = AttackPlan {
        patches: vec![PlacedPatch { pixels: result.patch.pixels.clone(), offset }],
        goal: sc.goal,
        direction: sc.direction,
    };
    Ok(Generated { plan, result, stage1 })
}
