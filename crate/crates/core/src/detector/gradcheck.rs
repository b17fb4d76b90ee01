//! Central finite-difference verification of input gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Detector, Trace, SIZE_CLAMP, T_H, T_W};
use crate::error::{Error, Result};
use crate::imaging::{Image, PixelRect, CHANNELS};
use crate::losses::{FrozenLoss, LossHyper, LossSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub n_pixels: usize,
    pub eps: f64,
    pub tol: f64,
    pub seed: u64,
    /// Pixels to sample from; defaults to the union of the receptive fields
    /// of the proposals the loss reads.
    pub region: Option<PixelRect>,
    /// Denominator guard of the relative error.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { n_pixels: 64, eps: 1e-3, tol: 1e-3, seed: 0, region: None, abs_floor: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub checked: usize,
    /// Samples discarded because a leaky-ReLU unit or the size clamp
    /// switched sides between `x − eps` and `x + eps`.
    pub skipped: usize,
    pub pass: bool,
}

fn clamp_state(det: &Detector, t: &Trace, frozen: &FrozenLoss) -> Vec<bool> {
    frozen
        .proposals()
        .into_iter()
        .flat_map(|p| {
            let raw = t.raw(&det.config, p);
            [raw[T_W].abs() < SIZE_CLAMP, raw[T_H].abs() < SIZE_CLAMP]
        })
        .collect()
}

/// Compares analytic input gradients with central differences at seeded
/// random pixels. Samples straddling a kink are redrawn.
pub fn grad_check(
    det: &Detector,
    x: &Image,
    loss: &LossSpec,
    hyper: &LossHyper,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(opts.eps.is_finite() && opts.eps > 0.0) {
        return Err(Error::InvalidParameter(format!("finite-difference step must be > 0, got {}", opts.eps)));
    }
    if opts.n_pixels == 0 {
        return Err(Error::InvalidParameter("at least one pixel must be checked".into()));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidParameter("tolerance must be > 0".into()));
    }
    let cfg = &det.config;
    let trace = det.trace(x)?;
    let out = det.decode(&trace);
    let frozen = loss.freeze(&out, hyper)?;
    let (_, head_grad) = frozen.evaluate(cfg, &trace);
    let analytic = det.backward_input(&trace, &head_grad, None);

    let full = PixelRect::full(x.height(), x.width());
    let region = opts.region.unwrap_or_else(|| {
        frozen
            .proposals()
            .into_iter()
            .map(|p| {
                let (gx, gy, _) = cfg.proposal_cell(p);
                cfg.receptive_field(gx, gy)
            })
            .fold(PixelRect::new(0, 0, 0, 0), |acc, r| acc.union(&r))
    });
    let region = if region.is_empty() { full } else { region.intersect(&full) };
    if region.is_empty() {
        return Err(Error::InvalidParameter("sampling region lies outside the image".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (mut checked, mut skipped) = (0, 0);
    let (mut max_err, mut sum_err) = (0.0f64, 0.0);
    let max_attempts = 20 * opts.n_pixels;
    while checked < opts.n_pixels && checked + skipped < max_attempts {
        let c = rng.random_range(0..CHANNELS);
        let py = rng.random_range(region.y0..region.y1);
        let px = rng.random_range(region.x0..region.x1);
        let idx = x.index(c, py as usize, px as usize);
        let one = PixelRect::new(px, py, px + 1, py + 1);
        let mut xp = x.clone();
        xp.perturb_unclamped(idx, opts.eps);
        let mut xm = x.clone();
        xm.perturb_unclamped(idx, -opts.eps);
        let tp = det.trace_patched(&trace, &xp, one)?;
        let tm = det.trace_patched(&trace, &xm, one)?;
        if !tp.same_activation_pattern(&tm) || clamp_state(det, &tp, &frozen) != clamp_state(det, &tm, &frozen) {
            skipped += 1;
            continue;
        }
        let fd = (frozen.value(cfg, &tp) - frozen.value(cfg, &tm)) / (2.0 * opts.eps);
        let a = analytic[idx];
        let denom = a.abs().max(fd.abs()).max(opts.abs_floor);
        let err = (a - fd).abs() / denom;
        max_err = max_err.max(err);
        sum_err += err;
        checked += 1;
    }
    let mean = if checked == 0 { 0.0 } else { sum_err / checked as f64 };
    Ok(GradCheckReport {
        max_rel_err: max_err,
        mean_rel_err: mean,
        checked,
        skipped,
        pass: checked == opts.n_pixels && max_err <= opts.tol,
    })
}
