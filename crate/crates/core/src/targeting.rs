//! Target box search and proposal filtering.
//!
//! [`find_target_bbox`] slides the original box along the attack direction
//! as far as the tracker's association gate allows. [`split`] then picks
//! the single proposal to fabricate at that location and the set of
//! proposals to erase around the original object.

use serde::{Deserialize, Serialize};

use crate::detector::{DetectionOutput, DetectorConfig};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Goal {
    MoveIn,
    MoveOut,
}

impl Goal {
    pub fn as_str(&self) -> &'static str {
        match self {
            Goal::MoveIn => "move-in",
            Goal::MoveOut => "move-out",
        }
    }
}

/// Per-step shift together with the goal it serves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackDirection {
    pub v: Vec2,
    pub goal: Goal,
}

impl AttackDirection {
    pub fn new(v: Vec2, goal: Goal) -> Result<Self> {
        if v.is_zero() || !v.is_finite() {
            return Err(Error::InvalidParameter(format!("direction {v:?} must be finite and non-zero")));
        }
        Ok(Self { v, goal })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Largest shift whose IOU with the original still exceeds the gate.
    #[default]
    LastAboveThreshold,
    /// First shift at or below the gate.
    Literal,
}

/// Step cap `ceil(diagonal / |v|)`.
pub fn default_step_cap(height: usize, width: usize, v: Vec2) -> usize {
    ((height as f64).hypot(width as f64) / v.norm()).ceil() as usize
}

pub fn find_target_bbox(b_o: &BBox, v: Vec2, t_iou: f64, mode: TargetMode, k_max: usize) -> Result<BBox> {
    if v.is_zero() || !v.is_finite() {
        return Err(Error::InvalidParameter("direction must be finite and non-zero".into()));
    }
    if !(t_iou > 0.0 && t_iou < 1.0) {
        return Err(Error::InvalidParameter(format!("association threshold {t_iou} not in (0,1)")));
    }
    if b_o.is_degenerate() || !b_o.is_finite() {
        return Err(Error::InvalidBox(format!("{b_o:?}")));
    }
    for k in 1..=k_max {
        let shifted = b_o.shifted(v, k as u32);
        if iou(&shifted, b_o) <= t_iou {
            return Ok(match mode {
                TargetMode::LastAboveThreshold => b_o.shifted(v, k as u32 - 1),
                TargetMode::Literal => shifted,
            });
        }
    }
    Err(Error::StepCapReached(k_max))
}

/// Fabrication proposal and erasure set of one pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterResult {
    pub fabricate: usize,
    pub erase: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Extra center shift (pixels, along the direction) used by anchor-free
    /// detectors; `None` means one stride.
    pub k_s: Option<f64>,
    /// IOU with the original box above which a confident proposal is
    /// erased.
    pub erase_iou: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { k_s: None, erase_iou: 0.3 }
    }
}

fn grid_cell(cfg: &DetectorConfig, x: f64, y: f64) -> (usize, usize) {
    let s = cfg.scale();
    let clamp = |v: f64, n: usize| ((v / s).floor().max(0.0) as usize).min(n - 1);
    (clamp(x, cfg.grid_width()), clamp(y, cfg.grid_height()))
}

/// Proposal to fabricate: the best anchor (by IOU with `b_t`) in the cell
/// holding `b_t`'s center. Anchor-free detectors first push the center
/// `k_s` pixels along `v`.
pub fn cbbox_filter(det: &DetectionOutput, b_t: &BBox, cfg: &DetectorConfig, v: Vec2, k_s: f64) -> usize {
    let (mut cx, mut cy) = b_t.center();
    if cfg.anchor_free {
        let n = v.norm();
        if n > 0.0 {
            cx += k_s * v.dx / n;
            cy += k_s * v.dy / n;
        }
        let (gx, gy) = grid_cell(cfg, cx, cy);
        return cfg.proposal_index(gx, gy, 0);
    }
    let (gx, gy) = grid_cell(cfg, cx, cy);
    let mut best = cfg.proposal_index(gx, gy, 0);
    let mut best_iou = f64::NEG_INFINITY;
    for a in 0..cfg.num_anchors() {
        let p = cfg.proposal_index(gx, gy, a);
        let v = iou(&det.proposals[p].bbox, b_t);
        if v > best_iou {
            best_iou = v;
            best = p;
        }
    }
    best
}

/// Proposals that could keep the original object alive. Anchor-based:
/// every anchor of every cell whose center lies inside `b_o`, plus any
/// confident proposal overlapping `b_o` above `erase_iou`. Anchor-free:
/// only the latter. `fabricate` is always excluded. Sorted ascending.
pub fn erasure_filter(
    det: &DetectionOutput,
    b_o: &BBox,
    fabricate: Option<usize>,
    cfg: &DetectorConfig,
    erase_iou: f64,
) -> Vec<usize> {
    let mut set = vec![false; det.proposals.len()];
    if !cfg.anchor_free {
        let s = cfg.scale();
        for gy in 0..cfg.grid_height() {
            for gx in 0..cfg.grid_width() {
                if b_o.contains_point((gx as f64 + 0.5) * s, (gy as f64 + 0.5) * s) {
                    for a in 0..cfg.num_anchors() {
                        set[cfg.proposal_index(gx, gy, a)] = true;
                    }
                }
            }
        }
    }
    for (i, p) in det.proposals.iter().enumerate() {
        if p.confidence > cfg.conf_threshold && iou(&p.bbox, b_o) > erase_iou {
            set[i] = true;
        }
    }
    if let Some(f) = fabricate {
        if f < set.len() {
            set[f] = false;
        }
    }
    set.iter().enumerate().filter(|(_, &s)| s).map(|(i, _)| i).collect()
}

/// Both filters against the current pass.
pub fn split(
    det: &DetectionOutput,
    b_t: &BBox,
    b_o: &BBox,
    cfg: &DetectorConfig,
    v: Vec2,
    fc: &FilterConfig,
) -> Result<FilterResult> {
    if det.proposals.len() != cfg.num_proposals() {
        return Err(Error::UnsupportedDetector(format!(
            "expected {} grid proposals, got {}",
            cfg.num_proposals(),
            det.proposals.len()
        )));
    }
    let k_s = fc.k_s.unwrap_or(cfg.stride as f64);
    let fabricate = cbbox_filter(det, b_t, cfg, v, k_s);
    let erase = erasure_filter(det, b_o, Some(fabricate), cfg, fc.erase_iou);
    Ok(FilterResult { fabricate, erase })
}
