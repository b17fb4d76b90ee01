//! Scalar attack objectives and their derivatives.
//!
//! Every loss that reads detector outputs is expressed as a [`LossSpec`].
//! Freezing a spec against a [`DetectionOutput`] pins its discrete choices
//! (score indicator, branch, class used in each confidence), producing a
//! [`FrozenLoss`]: a weighted sum of smooth per-proposal terms that can be
//! evaluated on any trace, with exact gradients on the raw head values.

use serde::{Deserialize, Serialize};

use crate::detector::{decode_diff, DecodedDiff, DetectionOutput, DetectorConfig, Trace, BOX_FIELDS, T_H, T_OBJ, T_W, T_X, T_Y};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::imaging::{Image, CHANNELS};
use crate::targeting::FilterResult;

/// Smoothing inside the total-variation square root.
pub const TV_DELTA: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossHyper {
    /// Weight of the fabrication term in the score loss.
    pub mu1: f64,
    /// Weight of the center distance in the regression loss.
    pub beta: f64,
    /// Weight of total variation in the full objective.
    pub mu2: f64,
    /// Score threshold of the erasure indicator.
    pub conf_threshold: f64,
    /// Floor applied to IOU inside the log.
    pub iou_floor: f64,
}

impl Default for LossHyper {
    fn default() -> Self {
        Self { mu1: 1.0, beta: 0.01, mu2: 0.1, conf_threshold: 0.25, iou_floor: 1e-6 }
    }
}

impl LossHyper {
    pub fn validate(&self) -> Result<()> {
        let all = [self.mu1, self.beta, self.mu2, self.conf_threshold];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidParameter("loss weights must be finite and >= 0".into()));
        }
        if !(self.iou_floor > 0.0 && self.iou_floor <= 1e-3) {
            return Err(Error::InvalidParameter("iou_floor must lie in (0, 1e-3]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Score,
    Regression,
    /// Fixed-weight sum of both losses.
    Combined,
}

impl Branch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::Score => "score",
            Branch::Regression => "regression",
            Branch::Combined => "combined",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreTerms {
    pub total: f64,
    pub erase: f64,
    pub fabricate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionTerms {
    pub total: f64,
    pub iou: f64,
    pub center: f64,
}

/// Every loss of one iteration, for logging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub score: f64,
    pub erase: f64,
    pub fabricate: f64,
    pub regression: f64,
    pub iou: f64,
    pub center: f64,
    pub tv: f64,
    pub adv: f64,
    pub branch: Branch,
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        values.sum::<f64>() / n as f64
    }
}

/// `L_e = mean_{B_e} 1[c > T] c²`, `L_f = mean_{B_f} (1 − c)²`,
/// `L_s = L_e + μ1 L_f`.
pub fn score_loss(erase_confs: &[f64], fab_confs: &[f64], hyper: &LossHyper) -> Result<ScoreTerms> {
    if fab_confs.is_empty() {
        return Err(Error::InvalidParameter("score loss needs a fabrication proposal".into()));
    }
    let t = hyper.conf_threshold;
    let erase = mean(erase_confs.iter().map(|&c| if c > t { c * c } else { 0.0 }), erase_confs.len());
    let fabricate = mean(fab_confs.iter().map(|&c| (1.0 - c) * (1.0 - c)), fab_confs.len());
    Ok(ScoreTerms { total: erase + hyper.mu1 * fabricate, erase, fabricate })
}

fn center_sq(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).powi(2) + (ay - by).powi(2)
}

/// `L_IOU = mean −log max(IOU, ε)`, `L_center = mean |c − c_t|²`,
/// `L_r = L_IOU + β L_center`.
pub fn regression_loss(fab_boxes: &[BBox], target: &BBox, hyper: &LossHyper) -> Result<RegressionTerms> {
    if fab_boxes.is_empty() {
        return Err(Error::InvalidParameter("regression loss needs a fabrication proposal".into()));
    }
    let n = fab_boxes.len();
    let iou_term = mean(fab_boxes.iter().map(|b| -iou(b, target).max(hyper.iou_floor).ln()), n);
    let center = mean(fab_boxes.iter().map(|b| center_sq(b, target)), n);
    Ok(RegressionTerms { total: iou_term + hyper.beta * center, iou: iou_term, center })
}

/// Mean squared confidence over the erasure set; 0 when empty.
pub fn erase_loss(confs: &[f64]) -> f64 {
    mean(confs.iter().map(|c| c * c), confs.len())
}

/// Smoothed isotropic total variation over interior pixels, summed over
/// channels.
pub fn tv_loss(patch: &Image) -> Result<f64> {
    Ok(tv_loss_grad(patch)?.0)
}

/// Total variation and its gradient with respect to every patch value.
pub fn tv_loss_grad(patch: &Image) -> Result<(f64, Vec<f64>)> {
    let (h, w) = (patch.height(), patch.width());
    if h < 2 || w < 2 {
        return Err(Error::ShapeMismatch(format!("total variation needs a patch of at least 2x2, got {h}x{w}")));
    }
    let mut grad = vec![0.0; patch.len()];
    let mut total = 0.0;
    for c in 0..CHANNELS {
        for i in 0..h - 1 {
            for j in 0..w - 1 {
                let p = patch.get(c, i, j);
                let a = patch.get(c, i + 1, j) - p;
                let b = patch.get(c, i, j + 1) - p;
                let t = (a * a + b * b + TV_DELTA * TV_DELTA).sqrt();
                total += t;
                grad[patch.index(c, i + 1, j)] += a / t;
                grad[patch.index(c, i, j + 1)] += b / t;
                grad[patch.index(c, i, j)] -= (a + b) / t;
            }
        }
    }
    Ok((total, grad))
}

/// Branch of the conditional objective: regression once the fabricated
/// proposal survives NMS and no erasure proposal does.
pub fn select_branch(det: &DetectionOutput, fr: &FilterResult) -> Branch {
    if det.is_kept(fr.fabricate) && fr.erase.iter().all(|&e| !det.is_kept(e)) {
        Branch::Regression
    } else {
        Branch::Score
    }
}

fn check_indices(det: &DetectionOutput, idx: &[usize]) -> Result<()> {
    for &i in idx {
        det.proposal(i)?;
    }
    Ok(())
}

fn score_of(det: &DetectionOutput, fr: &FilterResult, hyper: &LossHyper) -> Result<ScoreTerms> {
    check_indices(det, &fr.erase)?;
    let e: Vec<f64> = fr.erase.iter().map(|&i| det.proposals[i].confidence).collect();
    let f = [det.proposal(fr.fabricate)?.confidence];
    score_loss(&e, &f, hyper)
}

fn regression_of(det: &DetectionOutput, fr: &FilterResult, target: &BBox, hyper: &LossHyper) -> Result<RegressionTerms> {
    regression_loss(&[det.proposal(fr.fabricate)?.bbox], target, hyper)
}

/// Conditional adversarial loss with both component losses reported.
/// `tv` is left at 0 for the caller to fill in.
pub fn conditional_adv_loss(det: &DetectionOutput, fr: &FilterResult, target: &BBox, hyper: &LossHyper) -> Result<LossBreakdown> {
    let s = score_of(det, fr, hyper)?;
    let r = regression_of(det, fr, target, hyper)?;
    let branch = select_branch(det, fr);
    let adv = if branch == Branch::Regression { r.total } else { s.total };
    Ok(breakdown(s, r, adv, branch))
}

/// Fixed-weight objective `L_r + η L_s`.
pub fn slrm_adv_loss(det: &DetectionOutput, fr: &FilterResult, target: &BBox, eta: f64, hyper: &LossHyper) -> Result<LossBreakdown> {
    let s = score_of(det, fr, hyper)?;
    let r = regression_of(det, fr, target, hyper)?;
    Ok(breakdown(s, r, r.total + eta * s.total, Branch::Combined))
}

fn breakdown(s: ScoreTerms, r: RegressionTerms, adv: f64, branch: Branch) -> LossBreakdown {
    LossBreakdown {
        score: s.total,
        erase: s.erase,
        fabricate: s.fabricate,
        regression: r.total,
        iou: r.iou,
        center: r.center,
        tv: 0.0,
        adv,
        branch,
    }
}

/// A differentiable objective over detector outputs.
#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    Score { erase: Vec<usize>, fabricate: Vec<usize> },
    Regression { fabricate: Vec<usize>, target: BBox },
    /// Mean squared confidence (dual-patch disappearance objective).
    Erase { erase: Vec<usize> },
    Conditional { filter: FilterResult, target: BBox },
    Slrm { filter: FilterResult, target: BBox, eta: f64 },
    /// Total variation of a patch that does not depend on the input.
    PatchTv { patch: Image },
    Scaled { factor: f64, inner: Box<LossSpec> },
    Sum(Vec<LossSpec>),
}

/// One smooth per-proposal term, weighted.
#[derive(Debug, Clone, PartialEq)]
enum Term {
    ConfSq { p: usize, class: usize, w: f64 },
    OneMinusConfSq { p: usize, class: usize, w: f64 },
    NegLogIou { p: usize, target: BBox, floor: f64, w: f64 },
    CenterSq { p: usize, target: BBox, w: f64 },
}

/// A loss with all discrete choices pinned.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenLoss {
    terms: Vec<Term>,
    constant: f64,
    /// Branch chosen by the outermost conditional spec, if any.
    pub branch: Option<Branch>,
}

impl LossSpec {
    pub fn scaled(self, factor: f64) -> LossSpec {
        LossSpec::Scaled { factor, inner: Box::new(self) }
    }

    /// Pins indicators, classes and branch to their values in `det`.
    pub fn freeze(&self, det: &DetectionOutput, hyper: &LossHyper) -> Result<FrozenLoss> {
        hyper.validate()?;
        let mut f = FrozenLoss { terms: Vec::new(), constant: 0.0, branch: None };
        self.freeze_into(det, hyper, 1.0, &mut f)?;
        Ok(f)
    }

    fn freeze_into(&self, det: &DetectionOutput, hyper: &LossHyper, scale: f64, f: &mut FrozenLoss) -> Result<()> {
        let class = |p: usize| det.proposals[p].class_id;
        match self {
            LossSpec::Score { erase, fabricate } => {
                check_indices(det, erase)?;
                check_indices(det, fabricate)?;
                if fabricate.is_empty() {
                    return Err(Error::InvalidParameter("score loss needs a fabrication proposal".into()));
                }
                let we = scale / erase.len().max(1) as f64;
                for &p in erase {
                    if det.proposals[p].confidence > hyper.conf_threshold {
                        f.terms.push(Term::ConfSq { p, class: class(p), w: we });
                    }
                }
                let wf = scale * hyper.mu1 / fabricate.len() as f64;
                for &p in fabricate {
                    f.terms.push(Term::OneMinusConfSq { p, class: class(p), w: wf });
                }
            }
            LossSpec::Regression { fabricate, target } => {
                check_indices(det, fabricate)?;
                if fabricate.is_empty() {
                    return Err(Error::InvalidParameter("regression loss needs a fabrication proposal".into()));
                }
                let w = scale / fabricate.len() as f64;
                for &p in fabricate {
                    f.terms.push(Term::NegLogIou { p, target: *target, floor: hyper.iou_floor, w });
                    f.terms.push(Term::CenterSq { p, target: *target, w: w * hyper.beta });
                }
            }
            LossSpec::Erase { erase } => {
                check_indices(det, erase)?;
                let w = scale / erase.len().max(1) as f64;
                for &p in erase {
                    f.terms.push(Term::ConfSq { p, class: class(p), w });
                }
            }
            LossSpec::Conditional { filter, target } => {
                let branch = select_branch(det, filter);
                f.branch.get_or_insert(branch);
                let inner = match branch {
                    Branch::Regression => {
                        LossSpec::Regression { fabricate: vec![filter.fabricate], target: *target }
                    }
                    _ => LossSpec::Score { erase: filter.erase.clone(), fabricate: vec![filter.fabricate] },
                };
                inner.freeze_into(det, hyper, scale, f)?;
            }
            LossSpec::Slrm { filter, target, eta } => {
                f.branch.get_or_insert(Branch::Combined);
                LossSpec::Regression { fabricate: vec![filter.fabricate], target: *target }
                    .freeze_into(det, hyper, scale, f)?;
                LossSpec::Score { erase: filter.erase.clone(), fabricate: vec![filter.fabricate] }
                    .freeze_into(det, hyper, scale * eta, f)?;
            }
            LossSpec::PatchTv { patch } => f.constant += scale * tv_loss(patch)?,
            LossSpec::Scaled { factor, inner } => inner.freeze_into(det, hyper, scale * factor, f)?,
            LossSpec::Sum(parts) => {
                for s in parts {
                    s.freeze_into(det, hyper, scale, f)?;
                }
            }
        }
        Ok(())
    }
}

/// Gradient of the negative log IOU with respect to `(x1, y1, x2, y2)`.
fn iou_with_grad(c: &BBox, t: &BBox) -> (f64, [f64; 4]) {
    let iw = c.x2.min(t.x2) - c.x1.max(t.x1);
    let ih = c.y2.min(t.y2) - c.y1.max(t.y1);
    if iw <= 0.0 || ih <= 0.0 || c.is_degenerate() {
        return (0.0, [0.0; 4]);
    }
    let inter = iw * ih;
    let (cw, ch) = (c.width(), c.height());
    let union = cw * ch + t.area() - inter;
    let d_iw = [if c.x1 > t.x1 { -1.0 } else { 0.0 }, 0.0, if c.x2 < t.x2 { 1.0 } else { 0.0 }, 0.0];
    let d_ih = [0.0, if c.y1 > t.y1 { -1.0 } else { 0.0 }, 0.0, if c.y2 < t.y2 { 1.0 } else { 0.0 }];
    let d_area = [-ch, -cw, ch, cw];
    let mut g = [0.0; 4];
    for k in 0..4 {
        let d_inter = d_iw[k] * ih + d_ih[k] * iw;
        g[k] = (d_inter * union - inter * (d_area[k] - d_inter)) / (union * union);
    }
    (inter / union, g)
}

impl Term {
    fn proposal(&self) -> usize {
        match *self {
            Term::ConfSq { p, .. } | Term::OneMinusConfSq { p, .. } | Term::NegLogIou { p, .. } | Term::CenterSq { p, .. } => p,
        }
    }

    fn class(&self, det_class: usize) -> usize {
        match *self {
            Term::ConfSq { class, .. } | Term::OneMinusConfSq { class, .. } => class,
            _ => det_class,
        }
    }

    /// Value and gradient with respect to `(cx, cy, w, h, conf)`.
    fn eval(&self, d: &DecodedDiff) -> (f64, [f64; 5]) {
        match *self {
            Term::ConfSq { w, .. } => (w * d.conf * d.conf, [0.0, 0.0, 0.0, 0.0, 2.0 * w * d.conf]),
            Term::OneMinusConfSq { w, .. } => {
                let r = 1.0 - d.conf;
                (w * r * r, [0.0, 0.0, 0.0, 0.0, -2.0 * w * r])
            }
            Term::NegLogIou { target, floor, w, .. } => {
                let (v, g) = iou_with_grad(&d.bbox(), &target);
                if v > floor {
                    let s = -w / v;
                    let (gx1, gy1, gx2, gy2) = (s * g[0], s * g[1], s * g[2], s * g[3]);
                    (-w * v.ln(), [gx1 + gx2, gy1 + gy2, (gx2 - gx1) / 2.0, (gy2 - gy1) / 2.0, 0.0])
                } else {
                    (-w * floor.ln(), [0.0; 5])
                }
            }
            Term::CenterSq { target, w, .. } => {
                let (tx, ty) = target.center();
                let (dx, dy) = (d.cx - tx, d.cy - ty);
                (w * (dx * dx + dy * dy), [2.0 * w * dx, 2.0 * w * dy, 0.0, 0.0, 0.0])
            }
        }
    }
}

impl FrozenLoss {
    /// Distinct proposals referenced by the loss.
    pub fn proposals(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.terms.iter().map(Term::proposal).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Value and gradient with respect to each referenced proposal's raw
    /// head values. `raw_of(p)` supplies the raw values of proposal `p`.
    pub fn evaluate_raw(&self, cfg: &DetectorConfig, raw_of: impl Fn(usize) -> Vec<f64>) -> (f64, Vec<(usize, Vec<f64>)>) {
        let mut total = self.constant;
        let mut grads: Vec<(usize, Vec<f64>)> = Vec::new();
        for term in &self.terms {
            let p = term.proposal();
            let raw = raw_of(p);
            let (gx, gy, a) = cfg.proposal_cell(p);
            let argmax = (0..cfg.num_classes)
                .fold(0, |best, j| if raw[BOX_FIELDS + j] > raw[BOX_FIELDS + best] { j } else { best });
            let class = term.class(argmax);
            let d = decode_diff(cfg, &raw, gx, gy, a, class);
            let (v, g) = term.eval(&d);
            total += v;
            let slot = match grads.iter().position(|(q, _)| *q == p) {
                Some(i) => i,
                None => {
                    grads.push((p, vec![0.0; cfg.fields()]));
                    grads.len() - 1
                }
            };
            let gr = &mut grads[slot].1;
            gr[T_X] += g[0] * d.dcx_dtx;
            gr[T_Y] += g[1] * d.dcy_dty;
            gr[T_W] += g[2] * d.dw_dtw;
            gr[T_H] += g[3] * d.dh_dth;
            gr[T_OBJ] += g[4] * d.dconf_dobj;
            gr[BOX_FIELDS + class] += g[4] * d.dconf_dcls;
        }
        (total, grads)
    }

    /// Value and dense head gradient for a trace.
    pub fn evaluate(&self, cfg: &DetectorConfig, trace: &Trace) -> (f64, Vec<f64>) {
        let (v, sparse) = self.evaluate_raw(cfg, |p| trace.raw(cfg, p));
        let mut head = vec![0.0; Trace::head_len(cfg)];
        for (p, g) in sparse {
            for (field, gv) in g.into_iter().enumerate() {
                head[Trace::head_offset(cfg, p, field)] += gv;
            }
        }
        (v, head)
    }

    /// Value only.
    pub fn value(&self, cfg: &DetectorConfig, trace: &Trace) -> f64 {
        self.evaluate_raw(cfg, |p| trace.raw(cfg, p)).0
    }
}
