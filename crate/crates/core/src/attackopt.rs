//! Patch optimization loops: the branch-switching optimizer, the
//! fixed-weight baseline and the dual-patch variant.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{Detector, DetectionOutput, Trace};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::imaging::{apply_eot, sample_eot, EotParams, EotSample, Image, PatchSpec, PixelRect};
use crate::losses::{
    conditional_adv_loss, select_branch, slrm_adv_loss, tv_loss_grad, Branch, LossBreakdown, LossHyper, LossSpec,
};
use crate::targeting::{default_step_cap, erasure_filter, find_target_bbox, split, AttackDirection, FilterConfig, TargetMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    /// Score loss until the fabricated box survives alone, regression after.
    Conditional,
    /// Fixed weighting `L_r + η L_s`.
    Slrm { eta: f64 },
}

impl Optimizer {
    pub fn label(&self) -> String {
        match self {
            Optimizer::Conditional => "conditional".into(),
            Optimizer::Slrm { eta } => format!("slrm-{eta}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchInit {
    /// Every pixel 0.5.
    #[default]
    Gray,
    /// Uniform noise from the run seed.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub iterations: usize,
    pub optimizer: Optimizer,
    pub adam: AdamParams,
    pub hyper: LossHyper,
    pub eot: EotParams,
    pub seed: u64,
    /// `(Δh, Δw)`.
    pub patch_size: (usize, usize),
    pub init: PatchInit,
    pub filter: FilterConfig,
    pub target_mode: TargetMode,
    /// Association gate assumed when searching the target box.
    pub t_iou: f64,
    /// Also optimize a disappearance patch.
    pub dual: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            optimizer: Optimizer::Conditional,
            adam: AdamParams::default(),
            hyper: LossHyper::default(),
            eot: EotParams::default(),
            seed: 0,
            patch_size: (5, 14),
            init: PatchInit::Gray,
            filter: FilterConfig::default(),
            target_mode: TargetMode::LastAboveThreshold,
            t_iou: 0.3,
            dual: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidParameter("iterations must be >= 1".into()));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate {} must be > 0", self.adam.lr)));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) || !(self.adam.eps > 0.0) {
            return Err(Error::InvalidParameter("Adam betas must lie in [0,1) and eps > 0".into()));
        }
        if let Optimizer::Slrm { eta } = self.optimizer {
            if !(eta >= 0.0 && eta.is_finite()) {
                return Err(Error::InvalidParameter(format!("eta {eta} must be >= 0")));
            }
        }
        if self.patch_size.0 == 0 || self.patch_size.1 == 0 {
            return Err(Error::InvalidParameter("patch size must be positive".into()));
        }
        if !(self.t_iou > 0.0 && self.t_iou < 1.0) {
            return Err(Error::InvalidParameter(format!("t_iou {} not in (0,1)", self.t_iou)));
        }
        self.hyper.validate()?;
        self.eot.validate()
    }

    /// Transformation draws of one iteration, keyed by the run seed.
    fn eot_samples(&self, iteration: usize) -> Result<Vec<EotSample>> {
        let params = EotParams { seed: self.eot.seed ^ self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15), ..self.eot.clone() };
        sample_eot(&params, iteration as u64)
    }
}

/// Per-pixel Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// Bias-corrected Adam update followed by projection onto `[0,1]`.
pub fn adam_step(state: &mut AdamState, patch: &mut Image, grad: &[f64], p: &AdamParams) -> Result<()> {
    if grad.len() != patch.len() || state.m.len() != patch.len() {
        return Err(Error::ShapeMismatch(format!(
            "gradient {} / moments {} / patch {}",
            grad.len(),
            state.m.len(),
            patch.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("patch gradient at index {i}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let (bc1, bc2) = (1.0 - p.beta1.powi(t), 1.0 - p.beta2.powi(t));
    for (i, &g) in grad.iter().enumerate() {
        state.m[i] = p.beta1 * state.m[i] + (1.0 - p.beta1) * g;
        state.v[i] = p.beta2 * state.v[i] + (1.0 - p.beta2) * g * g;
        let upd = p.lr * (state.m[i] / bc1) / ((state.v[i] / bc2).sqrt() + p.eps);
        patch.set_flat(i, patch.data()[i] - upd);
    }
    Ok(())
}

/// One training frame: the clean image, the target's box and the patch's
/// top-left in this frame.
#[derive(Debug, Clone)]
pub struct AttackFrame {
    pub image: Image,
    pub b_o: BBox,
    pub location: (i64, i64),
}

/// One loss-log row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossLogRow {
    pub iteration: usize,
    pub frame: usize,
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    /// Patch pixels, placed at the first frame's location.
    pub patch: PatchSpec,
    /// Disappearance patch of the dual mode.
    pub disappearance: Option<PatchSpec>,
    pub log: Vec<LossLogRow>,
    /// Fabricated box kept and every erasure proposal suppressed on the
    /// last iteration's frame, re-evaluated without transformation after
    /// the final update.
    pub terminal: bool,
    pub iterations: usize,
}

struct Prepared<'a> {
    frame: &'a AttackFrame,
    trace: Trace,
    target: BBox,
}

fn prepare<'a>(det: &Detector, frames: &'a [AttackFrame], dir: &AttackDirection, cfg: &AttackConfig) -> Result<Vec<Prepared<'a>>> {
    if frames.is_empty() {
        return Err(Error::InvalidParameter("at least one attack frame is required".into()));
    }
    frames
        .iter()
        .map(|f| {
            let cap = default_step_cap(f.image.height(), f.image.width(), dir.v);
            let target = find_target_bbox(&f.b_o, dir.v, cfg.t_iou, cfg.target_mode, cap)?;
            Ok(Prepared { frame: f, trace: det.trace(&f.image)?, target })
        })
        .collect()
}

fn initial_patch(cfg: &AttackConfig, salt: u64) -> Image {
    let (h, w) = cfg.patch_size;
    match cfg.init {
        PatchInit::Gray => Image::filled(h, w, 0.5),
        PatchInit::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ salt);
            let mut img = Image::new(h, w);
            for i in 0..img.len() {
                img.set_flat(i, rng.random::<f64>());
            }
            img
        }
    }
}

/// Pastes `pixels` at the frame's location under transformation `t` and
/// runs the detector incrementally.
fn transformed_pass(det: &Detector, p: &Prepared, pixels: &Image, t: &EotSample) -> Result<(Trace, DetectionOutput, crate::imaging::IndexMap, PixelRect)> {
    let spec = PatchSpec::new(pixels.clone(), p.frame.location.0, p.frame.location.1);
    let (x, map) = apply_eot(&p.frame.image, &spec, t);
    let changed = map.bounds.unwrap_or(PixelRect::new(0, 0, 0, 0));
    let trace = if changed.is_empty() { p.trace.clone() } else { det.trace_patched(&p.trace, &x, changed)? };
    let out = det.decode(&trace);
    Ok((trace, out, map, changed))
}

/// Objective of one transformed pass: returns the logged breakdown (without
/// TV) and the frozen spec to differentiate.
type Objective<'a> = dyn Fn(&DetectionOutput, &Prepared) -> Result<(LossBreakdown, LossSpec)> + 'a;

fn optimize(
    det: &Detector,
    prepared: &[Prepared],
    cfg: &AttackConfig,
    mut patch: Image,
    objective: &Objective,
) -> Result<(Image, Vec<LossLogRow>)> {
    let mut adam = AdamState::new(patch.len());
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut grad = vec![0.0; patch.len()];
    for it in 0..cfg.iterations {
        let fi = it % prepared.len();
        let p = &prepared[fi];
        let samples = cfg.eot_samples(it)?;
        let weight = 1.0 / samples.len() as f64;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut row = None;
        let mut adv_mean = 0.0;
        for t in &samples {
            let (trace, out, map, changed) = transformed_pass(det, p, &patch, t)?;
            let (breakdown, spec) = objective(&out, p)?;
            let frozen = spec.freeze(&out, &cfg.hyper)?;
            let (value, head_grad) = frozen.evaluate(&det.config, &trace);
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("loss at iteration {it}")));
            }
            adv_mean += weight * value;
            if !changed.is_empty() {
                let img_grad = det.backward_input(&trace, &head_grad, Some(changed));
                map.route_into(&img_grad, &mut grad, weight);
            }
            row.get_or_insert(breakdown);
        }
        let (tv, tv_grad) = tv_loss_grad(&patch)?;
        for (g, tg) in grad.iter_mut().zip(&tv_grad) {
            *g += cfg.hyper.mu2 * tg;
        }
        let mut losses = row.expect("at least one sample");
        losses.tv = tv;
        if !(adv_mean + cfg.hyper.mu2 * tv).is_finite() {
            return Err(Error::NonFinite(format!("objective at iteration {it}")));
        }
        log.push(LossLogRow { iteration: it, frame: fi, losses });
        adam_step(&mut adam, &mut patch, &grad, &cfg.adam)?;
    }
    Ok((patch, log))
}

fn hijack_objective<'a>(det: &'a Detector, cfg: &'a AttackConfig, dir: AttackDirection) -> Box<Objective<'a>> {
    Box::new(move |out: &DetectionOutput, p: &Prepared| {
        let fr = split(out, &p.target, &p.frame.b_o, &det.config, dir.v, &cfg.filter)?;
        match cfg.optimizer {
            Optimizer::Conditional => {
                let b = conditional_adv_loss(out, &fr, &p.target, &cfg.hyper)?;
                Ok((b, LossSpec::Conditional { filter: fr, target: p.target }))
            }
            Optimizer::Slrm { eta } => {
                let b = slrm_adv_loss(out, &fr, &p.target, eta, &cfg.hyper)?;
                Ok((b, LossSpec::Slrm { filter: fr, target: p.target, eta }))
            }
        }
    })
}

/// Erasure candidates currently above the score threshold.
pub fn disappearance_set(det: &Detector, out: &DetectionOutput, b_o: &BBox, cfg: &AttackConfig) -> Vec<usize> {
    erasure_filter(out, b_o, None, &det.config, cfg.filter.erase_iou)
        .into_iter()
        .filter(|&i| out.proposals[i].confidence > cfg.hyper.conf_threshold)
        .collect()
}

fn disappearance_objective<'a>(det: &'a Detector, cfg: &'a AttackConfig) -> Box<Objective<'a>> {
    Box::new(move |out: &DetectionOutput, p: &Prepared| {
        let erase = disappearance_set(det, out, &p.frame.b_o, cfg);
        let value = crate::losses::erase_loss(&erase.iter().map(|&i| out.proposals[i].confidence).collect::<Vec<_>>());
        let b = LossBreakdown {
            score: value,
            erase: value,
            fabricate: 0.0,
            regression: 0.0,
            iou: 0.0,
            center: 0.0,
            tv: 0.0,
            adv: value,
            branch: Branch::Score,
        };
        Ok((b, LossSpec::Erase { erase }))
    })
}

/// Whether the fabricated proposal survives NMS alone on the untransformed
/// paste.
fn terminal_condition(det: &Detector, p: &Prepared, patch: &Image, cfg: &AttackConfig, dir: &AttackDirection) -> Result<bool> {
    let (_, out, _, _) = transformed_pass(det, p, patch, &EotSample::IDENTITY)?;
    let fr = split(&out, &p.target, &p.frame.b_o, &det.config, dir.v, &cfg.filter)?;
    Ok(select_branch(&out, &fr) == Branch::Regression)
}

fn run(det: &Detector, frames: &[AttackFrame], dir: &AttackDirection, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    let prepared = prepare(det, frames, dir, cfg)?;
    let objective = hijack_objective(det, cfg, *dir);
    let (pixels, log) = optimize(det, &prepared, cfg, initial_patch(cfg, 0), &objective)?;
    let last = &prepared[(cfg.iterations - 1) % prepared.len()];
    let terminal = terminal_condition(det, last, &pixels, cfg, dir)?;
    let disappearance = if cfg.dual {
        let objective = disappearance_objective(det, cfg);
        let (d, _) = optimize(det, &prepared, cfg, initial_patch(cfg, 0xd1a1), &objective)?;
        Some(PatchSpec::new(d, frames[0].location.0, frames[0].location.1))
    } else {
        None
    };
    Ok(AttackResult {
        patch: PatchSpec::new(pixels, frames[0].location.0, frames[0].location.1),
        disappearance,
        iterations: log.len(),
        log,
        terminal,
    })
}

/// Patch generation with the optimizer selected in `cfg`.
pub fn generate_patch(det: &Detector, frames: &[AttackFrame], dir: &AttackDirection, cfg: &AttackConfig) -> Result<AttackResult> {
    run(det, frames, dir, &AttackConfig { dual: false, ..cfg.clone() })
}

/// Fixed-weight baseline with weight `eta` on the score loss.
pub fn slrm_generate(det: &Detector, frames: &[AttackFrame], dir: &AttackDirection, cfg: &AttackConfig, eta: f64) -> Result<AttackResult> {
    run(det, frames, dir, &AttackConfig { optimizer: Optimizer::Slrm { eta }, dual: false, ..cfg.clone() })
}

/// Hijacking patch plus an independently optimized disappearance patch.
pub fn dual_generate(det: &Detector, frames: &[AttackFrame], dir: &AttackDirection, cfg: &AttackConfig) -> Result<AttackResult> {
    run(det, frames, dir, &AttackConfig { dual: true, ..cfg.clone() })
}

/// Writes the loss log as CSV with a header.
pub fn write_loss_log<W: Write>(out: W, rows: &[LossLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "iteration", "frame", "branch", "adv", "score", "erase", "fabricate", "regression", "iou", "center", "tv",
    ])?;
    for r in rows {
        let l = &r.losses;
        let mut rec = vec![r.iteration.to_string(), r.frame.to_string(), l.branch.as_str().to_string()];
        rec.extend([l.adv, l.score, l.erase, l.fabricate, l.regression, l.iou, l.center, l.tv].iter().map(|v| format!("{v:.9e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Metadata written beside a patch image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSidecar {
    /// Patch top-left relative to the target box's top-left corner.
    pub offset: (i64, i64),
    /// `(Δh, Δw)`.
    pub size: (usize, usize),
    pub seed: u64,
    pub optimizer: String,
    pub config_hash: String,
    pub weights_hash: String,
    pub terminal: bool,
    pub iterations: usize,
}
