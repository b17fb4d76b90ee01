//! Finite-difference checks of every attack objective on a scenario frame.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::scene::Scenario;
use crate::detector::{grad_check, Detector, GradCheckOptions, GradCheckReport};
use crate::error::Result;
use crate::imaging::Image;
use crate::losses::{tv_loss, tv_loss_grad, LossHyper, LossSpec};
use crate::targeting::{default_step_cap, find_target_bbox, split, FilterConfig, TargetMode};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientRow {
    pub loss: String,
    pub report: GradCheckReport,
}

/// Central differences of the total variation at random patch pixels.
pub fn tv_grad_check(patch: &Image, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (_, analytic) = tv_loss_grad(patch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7f);
    let (mut max_err, mut sum) = (0.0f64, 0.0);
    for _ in 0..opts.n_pixels {
        let i = rng.random_range(0..patch.len());
        let mut p = patch.clone();
        p.perturb_unclamped(i, opts.eps);
        let mut m = patch.clone();
        m.perturb_unclamped(i, -opts.eps);
        let fd = (tv_loss(&p)? - tv_loss(&m)?) / (2.0 * opts.eps);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(opts.abs_floor);
        max_err = max_err.max(err);
        sum += err;
    }
    Ok(GradCheckReport {
        max_rel_err: max_err,
        mean_rel_err: sum / opts.n_pixels as f64,
        checked: opts.n_pixels,
        skipped: 0,
        pass: max_err <= opts.tol,
    })
}

/// Score, regression, erasure and the frozen-branch conditional objective
/// on frame `t`, plus the patch smoothness term on a random patch.
pub fn gradient_suite(
    det: &Detector,
    sc: &Scenario,
    t: usize,
    hyper: &LossHyper,
    opts: &GradCheckOptions,
) -> Result<Vec<GradientRow>> {
    let x = &sc.frames[t];
    let b_o = sc.targets[t];
    let out = det.forward(x)?;
    let cap = default_step_cap(x.height(), x.width(), sc.direction);
    let target = find_target_bbox(&b_o, sc.direction, 0.3, TargetMode::LastAboveThreshold, cap)?;
    let fr = split(&out, &target, &b_o, &det.config, sc.direction, &FilterConfig::default())?;
    let specs = [
        ("score", LossSpec::Score { erase: fr.erase.clone(), fabricate: vec![fr.fabricate] }),
        ("regression", LossSpec::Regression { fabricate: vec![fr.fabricate], target }),
        ("erase", LossSpec::Erase { erase: fr.erase.clone() }),
        ("conditional", LossSpec::Conditional { filter: fr.clone(), target }),
    ];
    let mut rows = Vec::with_capacity(specs.len() + 1);
    for (name, spec) in specs {
        rows.push(GradientRow { loss: name.into(), report: grad_check(det, x, &spec, hyper, opts)? });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (dh, dw) = sc.patch_size;
    let (ph, pw) = (dh.max(2), dw.max(2));
    let patch = Image::from_planar(ph, pw, (0..3 * ph * pw).map(|_| rng.random()).collect())?;
    rows.push(GradientRow { loss: "tv".into(), report: tv_grad_check(&patch, opts)? });
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{DetectorConfig, DetectorWeights};
    use crate::harness::scene::{gen_scene, SceneSpec};
    use crate::targeting::Goal;

    #[test]
    fn suite_covers_every_objective_and_passes() {
        let cfg = DetectorConfig::default();
        let det = Detector::new(cfg.clone(), DetectorWeights::init(&cfg, 11)).unwrap();
        let sc = gen_scene(&SceneSpec::default(), Goal::MoveIn, 8).unwrap();
        let opts = GradCheckOptions { n_pixels: 64, ..GradCheckOptions::default() };
        let rows = gradient_suite(&det, &sc, sc.t_start, &LossHyper::default(), &opts).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.loss.as_str()).collect();
        assert_eq!(names, ["score", "regression", "erase", "conditional", "tv"]);
        for r in &rows {
            assert!(r.report.checked >= 64, "{}: {:?}", r.loss, r.report);
            assert!(r.report.pass, "{}: {:?}", r.loss, r.report);
        }
    }

    #[test]
    fn tv_check_passes_and_respects_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let patch = Image::from_planar(5, 6, (0..90).map(|_| rng.random()).collect()).unwrap();
        let ok = tv_grad_check(&patch, &GradCheckOptions::default()).unwrap();
        assert!(ok.pass, "{ok:?}");
        let strict = tv_grad_check(&patch, &GradCheckOptions { tol: 0.0, ..GradCheckOptions::default() }).unwrap();
        assert_eq!(strict.pass, strict.max_rel_err == 0.0);
    }
}
