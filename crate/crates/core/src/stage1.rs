//! Patch location preselection: a soft mask optimized jointly with a
//! full-frame perturbation, then a sliding-window search for the densest
//! patch-sized window inside the allowed region.

use serde::{Deserialize, Serialize};

use crate::attackopt::{adam_step, AdamParams, AdamState};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::imaging::{apply_soft_mask, Image, Mask, PixelRect, CHANNELS};
use crate::losses::{conditional_adv_loss, LossHyper, LossSpec};
use crate::targeting::{default_step_cap, find_target_bbox, split, AttackDirection, FilterConfig, TargetMode};

/// Parameter value that pins a mask block to (numerically) zero.
pub const FROZEN_PARAM: f64 = -10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    /// Weight of the cluster loss (signed).
    pub alpha: f64,
    /// Sharpness of the tanh mask mapping.
    pub gamma: f64,
    /// Mask block size in pixels.
    pub granularity: usize,
    /// `(Δh, Δw)` of the searched window.
    pub window: (usize, usize),
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
    pub hyper: LossHyper,
    pub filter: FilterConfig,
    pub target_mode: TargetMode,
    pub t_iou: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            gamma: 1.0,
            granularity: 2,
            window: (5, 14),
            iterations: 20,
            lr: 0.1,
            seed: 0,
            hyper: LossHyper::default(),
            filter: FilterConfig::default(),
            target_mode: TargetMode::LastAboveThreshold,
            t_iou: 0.3,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.granularity == 0 || self.iterations == 0 {
            return Err(Error::InvalidParameter("granularity and iterations must be >= 1".into()));
        }
        if self.window.0 == 0 || self.window.1 == 0 {
            return Err(Error::InvalidParameter("window must be non-empty".into()));
        }
        if !(self.lr > 0.0) || !self.gamma.is_finite() || !self.alpha.is_finite() {
            return Err(Error::InvalidParameter("lr must be > 0; gamma and alpha finite".into()));
        }
        self.hyper.validate()
    }
}

/// Unconstrained mask parameters on a block grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskParams {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MaskParams {
    /// Grid covering an `h × w` image with `s × s` blocks.
    pub fn zeros(h: usize, w: usize, s: usize) -> Self {
        let (rows, cols) = (h.div_ceil(s), w.div_ceil(s));
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// `M[i,j] = ½ tanh(γ m[⌊i/s⌋, ⌊j/s⌋]) + ½`.
pub fn mask_from_params(m: &MaskParams, gamma: f64, s: usize, h: usize, w: usize) -> Result<Mask> {
    if s == 0 || m.rows * s < h || m.cols * s < w {
        return Err(Error::ShapeMismatch(format!("{}x{} blocks of {s} cannot cover {h}x{w}", m.rows, m.cols)));
    }
    if m.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mask parameters".into()));
    }
    let mut mask = Mask::filled(h, w, 0.0);
    for i in 0..h {
        for j in 0..w {
            mask.set(i, j, 0.5 * (gamma * m.get(i / s, j / s)).tanh() + 0.5);
        }
    }
    Ok(mask)
}

/// Averages of `M` over every fully contained window.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ScoreMap {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Window top-left `(row, col)` with the largest score among those
    /// accepted by `allow`; ties go to the smallest `(row, col)`.
    pub fn argmax_where(&self, allow: impl Fn(usize, usize) -> bool) -> Option<(usize, usize)> {
        let mut best: Option<((usize, usize), f64)> = None;
        for r in 0..self.rows {
            for c in 0..self.cols {
                if !allow(r, c) {
                    continue;
                }
                let v = self.get(r, c);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some(((r, c), v));
                }
            }
        }
        best.map(|(rc, _)| rc)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Grayscale view, zero-padded to `h × w`.
    pub fn to_mask(&self, h: usize, w: usize) -> Mask {
        let mut m = Mask::filled(h, w, 0.0);
        for r in 0..self.rows {
            for c in 0..self.cols {
                m.set(r, c, self.get(r, c));
            }
        }
        m
    }
}

/// Uniform-weight window correlation over valid positions, via summed-area
/// tables.
pub fn window_scores(mask: &Mask, dh: usize, dw: usize) -> Result<ScoreMap> {
    let (h, w) = (mask.height, mask.width);
    if dh == 0 || dw == 0 || dh > h || dw > w {
        return Err(Error::InvalidParameter(format!("window {dh}x{dw} does not fit a {h}x{w} mask")));
    }
    let mut sat = vec![0.0; (h + 1) * (w + 1)];
    for i in 0..h {
        let mut row = 0.0;
        for j in 0..w {
            row += mask.get(i, j);
            sat[(i + 1) * (w + 1) + j + 1] = sat[i * (w + 1) + j + 1] + row;
        }
    }
    let (rows, cols) = (h - dh + 1, w - dw + 1);
    let norm = (dh * dw) as f64;
    let at = |i: usize, j: usize| sat[i * (w + 1) + j];
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let s = at(r + dh, c + dw) - at(r, c + dw) - at(r + dh, c) + at(r, c);
            data.push(s / norm);
        }
    }
    Ok(ScoreMap { rows, cols, data })
}

/// `|max(M′) − Σ M′ / (h·w)|` with `M′` zero-padded to the image size.
pub fn cluster_loss(scores: &ScoreMap, h: usize, w: usize) -> f64 {
    let mean = scores.data.iter().sum::<f64>() / (h * w) as f64;
    (scores.max() - mean).abs()
}

/// Gradient of [`cluster_loss`] with respect to the mask.
fn cluster_loss_grad(scores: &ScoreMap, mask: &Mask, dh: usize, dw: usize) -> Vec<f64> {
    let (h, w) = (mask.height, mask.width);
    let hw = (h * w) as f64;
    let mean = scores.data.iter().sum::<f64>() / hw;
    let (ar, ac) = scores.argmax_where(|_, _| true).expect("non-empty score map");
    let sign = if scores.max() - mean >= 0.0 { 1.0 } else { -1.0 };
    // d L / d M′[r,c], then the adjoint of the window average
    let norm = (dh * dw) as f64;
    let mut g = vec![0.0; h * w];
    // every valid window receives −sign/hw; spread it through a summed-area
    // table of the window indicator counts
    let mut count = vec![0.0; (h + 1) * (w + 1)];
    for r in 0..scores.rows {
        for c in 0..scores.cols {
            let d = -sign / hw + if (r, c) == (ar, ac) { sign } else { 0.0 };
            let k = d / norm;
            count[r * (w + 1) + c] += k;
            count[r * (w + 1) + c + dw] -= k;
            count[(r + dh) * (w + 1) + c] -= k;
            count[(r + dh) * (w + 1) + c + dw] += k;
        }
    }
    for i in 0..h {
        for j in 0..w {
            let up = if i > 0 { count[(i - 1) * (w + 1) + j] } else { 0.0 };
            let left = if j > 0 { count[i * (w + 1) + j - 1] } else { 0.0 };
            let diag = if i > 0 && j > 0 { count[(i - 1) * (w + 1) + j - 1] } else { 0.0 };
            count[i * (w + 1) + j] += up + left - diag;
            g[i * w + j] = count[i * (w + 1) + j];
        }
    }
    g
}

/// Result of one preselection run.
#[derive(Debug, Clone)]
pub struct Stage1Result {
    /// Top-left `(x, y)` of the chosen window.
    pub location: (i64, i64),
    pub mask: Mask,
    pub scores: ScoreMap,
    /// `(adversarial loss, cluster loss)` per iteration.
    pub loss_log: Vec<(f64, f64)>,
}

/// Jointly optimizes a perturbation and a region-restricted mask, then
/// picks the best patch-sized window fully inside `region`.
pub fn preselect_location(
    det: &Detector,
    frame: &Image,
    b_o: &BBox,
    dir: &AttackDirection,
    region: PixelRect,
    cfg: &Stage1Config,
) -> Result<Stage1Result> {
    cfg.validate()?;
    let (h, w) = (frame.height(), frame.width());
    let (dh, dw) = cfg.window;
    let region = region.intersect(&PixelRect::full(h, w));
    if region.height() < dh as i64 || region.width() < dw as i64 {
        return Err(Error::InvalidParameter(format!(
            "region {}x{} smaller than the {dh}x{dw} window",
            region.height().max(0),
            region.width().max(0)
        )));
    }
    let s = cfg.granularity;
    let mut m = MaskParams::zeros(h, w, s);
    let mut free = vec![false; m.data.len()];
    for r in 0..m.rows {
        for c in 0..m.cols {
            let block = PixelRect::new((c * s) as i64, (r * s) as i64, ((c + 1) * s) as i64, ((r + 1) * s) as i64);
            free[r * m.cols + c] = !block.intersect(&region).is_empty();
            if !free[r * m.cols + c] {
                m.data[r * m.cols + c] = FROZEN_PARAM;
            }
        }
    }
    let cap = default_step_cap(h, w, dir.v);
    let target = find_target_bbox(b_o, dir.v, cfg.t_iou, cfg.target_mode, cap)?;
    let adam = AdamParams { lr: cfg.lr, ..AdamParams::default() };

    let mut p = frame.clone();
    let mut p_state = AdamState::new(p.len());
    // m lives outside [0,1]; Adam runs on a shifted copy without clamping
    let (mut m_m, mut m_v) = (vec![0.0; m.data.len()], vec![0.0; m.data.len()]);
    let mut loss_log = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mask = mask_from_params(&m, cfg.gamma, s, h, w)?;
        let x = apply_soft_mask(frame, &p, &mask)?;
        let trace = det.trace(&x)?;
        let out = det.decode(&trace);
        let fr = split(&out, &target, b_o, &det.config, dir.v, &cfg.filter)?;
        let adv = conditional_adv_loss(&out, &fr, &target, &cfg.hyper)?.adv;
        let frozen = LossSpec::Conditional { filter: fr, target }.freeze(&out, &cfg.hyper)?;
        let (_, head_grad) = frozen.evaluate(&det.config, &trace);
        let gx = det.backward_input(&trace, &head_grad, None);
        let scores = window_scores(&mask, dh, dw)?;
        let cl = cluster_loss(&scores, h, w);
        if !(adv + cfg.alpha * cl).is_finite() {
            return Err(Error::NonFinite(format!("stage-one objective at iteration {it}")));
        }
        loss_log.push((adv, cl));

        // d/dM: adversarial path summed over channels plus the cluster term
        let mut g_mask = cluster_loss_grad(&scores, &mask, dh, dw);
        g_mask.iter_mut().for_each(|g| *g *= cfg.alpha);
        let mut g_p = vec![0.0; p.len()];
        for c in 0..CHANNELS {
            for i in 0..h {
                for j in 0..w {
                    let k = frame.index(c, i, j);
                    let mv = mask.get(i, j);
                    g_mask[i * w + j] += gx[k] * (p.data()[k] - frame.data()[k]);
                    g_p[k] = gx[k] * mv;
                }
            }
        }
        let mut g_m = vec![0.0; m.data.len()];
        for i in 0..h {
            for j in 0..w {
                let b = (i / s) * m.cols + j / s;
                if free[b] {
                    let t = (cfg.gamma * m.data[b]).tanh();
                    g_m[b] += g_mask[i * w + j] * 0.5 * cfg.gamma * (1.0 - t * t);
                }
            }
        }
        adam_step(&mut p_state, &mut p, &g_p, &adam)?;
        let t = (it + 1) as i32;
        let (bc1, bc2) = (1.0 - adam.beta1.powi(t), 1.0 - adam.beta2.powi(t));
        for b in 0..m.data.len() {
            if !free[b] {
                continue;
            }
            let g = g_m[b];
            if !g.is_finite() {
                return Err(Error::NonFinite("mask gradient".into()));
            }
            m_m[b] = adam.beta1 * m_m[b] + (1.0 - adam.beta1) * g;
            m_v[b] = adam.beta2 * m_v[b] + (1.0 - adam.beta2) * g * g;
            m.data[b] -= adam.lr * (m_m[b] / bc1) / ((m_v[b] / bc2).sqrt() + adam.eps);
        }
    }
    let mask = mask_from_params(&m, cfg.gamma, s, h, w)?;
    let scores = window_scores(&mask, dh, dw)?;
    let inside = |r: usize, c: usize| {
        region.contains_rect(&PixelRect::new(c as i64, r as i64, (c + dw) as i64, (r + dh) as i64))
    };
    let (r, c) = scores.argmax_where(inside).expect("region holds at least one window");
    Ok(Stage1Result { location: (c as i64, r as i64), mask, scores, loss_log })
}

/// One frame for the stability analysis.
#[derive(Debug, Clone)]
pub struct StabilityFrame {
    pub image: Image,
    pub b_o: BBox,
    pub region: PixelRect,
}

/// Preselects every frame and reports the displacement between consecutive
/// window centers, measured relative to the target box.
pub fn location_stability(
    det: &Detector,
    frames: &[StabilityFrame],
    dir: &AttackDirection,
    cfg: &Stage1Config,
) -> Result<Vec<f64>> {
    if frames.len() < 2 {
        return Err(Error::InvalidParameter("location stability needs at least two frames".into()));
    }
    let mut offsets = Vec::with_capacity(frames.len());
    for f in frames {
        let r = preselect_location(det, &f.image, &f.b_o, dir, f.region, cfg)?;
        offsets.push((r.location.0 as f64 - f.b_o.x1.round(), r.location.1 as f64 - f.b_o.y1.round()));
    }
    Ok(offsets.windows(2).map(|p| (p[1].0 - p[0].0).hypot(p[1].1 - p[0].1)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{DetectorConfig, DetectorWeights};
    use crate::geometry::Vec2;
    use crate::targeting::Goal;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// The window average exactly as a double sum.
    fn literal_scores(m: &Mask, dh: usize, dw: usize) -> Vec<f64> {
        let wgt = 1.0 / (dh * dw) as f64;
        let mut out = Vec::new();
        for i in 0..=m.height - dh {
            for j in 0..=m.width - dw {
                let mut s = 0.0;
                for z1 in 0..dh {
                    for z2 in 0..dw {
                        s += m.get(i + z1, j + z2) * wgt;
                    }
                }
                out.push(s);
            }
        }
        out
    }

    #[test]
    fn mask_examples() {
        let m = MaskParams::zeros(16, 16, 8);
        assert!(mask_from_params(&m, 1.0, 8, 16, 16).unwrap().data.iter().all(|v| *v == 0.5));
        let mut big = m.clone();
        big.data = vec![50.0, -50.0, 0.0, 0.0];
        let mask = mask_from_params(&big, 1.0, 8, 16, 16).unwrap();
        assert!((mask.get(0, 0) - 1.0).abs() < 1e-12 && mask.get(0, 8) < 1e-12);
        let mut one = m.clone();
        one.data[3] = 0.7;
        let mask = mask_from_params(&one, 2.0, 8, 16, 16).unwrap();
        let block: Vec<f64> = (8..16).flat_map(|i| (8..16).map(move |j| (i, j))).map(|(i, j)| mask.get(i, j)).collect();
        assert_eq!(block.len(), 64);
        assert!(block.iter().all(|v| *v == block[0]));
        assert!(mask.get(7, 8) != block[0]);
    }

    #[test]
    fn window_score_examples() {
        let c = Mask::filled(20, 30, 0.37);
        let s = window_scores(&c, 4, 6).unwrap();
        assert_eq!((s.rows, s.cols), (17, 25));
        assert!(s.data.iter().all(|v| (v - 0.37).abs() < 1e-12));

        let mut m = Mask::filled(40, 40, 0.0);
        for i in 10..15 {
            for j in 10..18 {
                m.set(i, j, 1.0);
            }
        }
        let s = window_scores(&m, 5, 8).unwrap();
        assert_eq!(s.max(), 1.0);
        assert_eq!(s.argmax_where(|_, _| true), Some((10, 10)));
        let brute: Vec<(usize, usize)> = (0..s.rows)
            .flat_map(|r| (0..s.cols).map(move |c| (r, c)))
            .filter(|&(r, c)| s.get(r, c) == 1.0)
            .collect();
        assert_eq!(brute, vec![(10, 10)]);
        assert!(window_scores(&m, 41, 1).is_err());
    }

    #[test]
    fn window_scores_match_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let (h, w) = (rng.random_range(4..40), rng.random_range(4..40));
            let (dh, dw) = (rng.random_range(1..=h), rng.random_range(1..=w));
            let mut m = Mask::filled(h, w, 0.0);
            m.data.iter_mut().for_each(|v| *v = rng.random());
            let fast = window_scores(&m, dh, dw).unwrap();
            for (a, b) in fast.data.iter().zip(literal_scores(&m, dh, dw)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn cluster_loss_examples() {
        let m = Mask::filled(8, 8, 0.6);
        let s = window_scores(&m, 1, 1).unwrap();
        assert!(cluster_loss(&s, 8, 8).abs() < 1e-15);
        let s = ScoreMap { rows: 1, cols: 10, data: vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0] };
        assert!((cluster_loss(&s, 1, 10) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn cluster_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = Mask::filled(9, 11, 0.0);
        m.data.iter_mut().for_each(|v| *v = rng.random());
        let (dh, dw) = (3, 4);
        let s = window_scores(&m, dh, dw).unwrap();
        let g = cluster_loss_grad(&s, &m, dh, dw);
        for k in 0..m.data.len() {
            let eps = 1e-6;
            let mut p = m.clone();
            p.data[k] += eps;
            let mut q = m.clone();
            q.data[k] -= eps;
            let fd = (cluster_loss(&window_scores(&p, dh, dw).unwrap(), 9, 11)
                - cluster_loss(&window_scores(&q, dh, dw).unwrap(), 9, 11))
                / (2.0 * eps);
            assert!((fd - g[k]).abs() < 1e-6, "{k}: {fd} vs {}", g[k]);
        }
    }

    fn toy() -> (Detector, Image, BBox, AttackDirection) {
        let cfg = DetectorConfig::default();
        let det = Detector::new(cfg.clone(), DetectorWeights::init(&cfg, 2)).unwrap();
        let img = Image::from_fn(128, 128, |c, y, x| ((c * 3 + y * 5 + x * 2) % 13) as f64 / 12.0);
        let b_o = BBox::new(40.0, 50.0, 68.0, 72.0).unwrap();
        (det, img, b_o, AttackDirection::new(Vec2::new(3.5, 0.0), Goal::MoveOut).unwrap())
    }

    #[test]
    fn window_sized_region_is_returned() {
        let (det, img, b_o, dir) = toy();
        let region = PixelRect::new(47, 63, 61, 68);
        let cfg = Stage1Config { iterations: 2, ..Stage1Config::default() };
        let r = preselect_location(&det, &img, &b_o, &dir, region, &cfg).unwrap();
        assert_eq!(r.location, (47, 63));
        assert_eq!(r.loss_log.len(), 2);
        let small = PixelRect::new(47, 63, 60, 68);
        assert!(preselect_location(&det, &img, &b_o, &dir, small, &cfg).is_err());
    }

    #[test]
    fn selection_respects_region_and_is_deterministic() {
        let (det, img, b_o, dir) = toy();
        let region = PixelRect::new(40, 61, 68, 72);
        let cfg = Stage1Config { iterations: 4, ..Stage1Config::default() };
        let a = preselect_location(&det, &img, &b_o, &dir, region, &cfg).unwrap();
        let b = preselect_location(&det, &img, &b_o, &dir, region, &cfg).unwrap();
        assert_eq!(a.location, b.location);
        assert_eq!(a.mask, b.mask);
        let (x, y) = a.location;
        assert!(region.contains_rect(&PixelRect::new(x, y, x + 14, y + 5)));
        assert!(a.mask.get(5, 5) < 1e-8);
        let frames = vec![StabilityFrame { image: img.clone(), b_o, region }; 3];
        assert_eq!(location_stability(&det, &frames, &dir, &cfg).unwrap(), vec![0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn mask_is_bounded_and_monotone(a in -3.0..3.0f64, d in 0.001..2.0f64, gamma in 0.1..2.0f64) {
            let mut m = MaskParams::zeros(2, 2, 2);
            m.data[0] = a;
            let lo = mask_from_params(&m, gamma, 2, 2, 2).unwrap().get(0, 0);
            m.data[0] = a + d;
            let hi = mask_from_params(&m, gamma, 2, 2, 2).unwrap().get(0, 0);
            prop_assert!(lo > 0.0 && hi < 1.0);
            prop_assert!(hi >= lo);
        }

        #[test]
        fn window_max_is_bounded_by_mask_max(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = Mask::filled(12, 12, 0.0);
            m.data.iter_mut().for_each(|v| *v = rng.random());
            let s = window_scores(&m, 3, 5).unwrap();
            let mmax = m.data.iter().copied().fold(0.0, f64::max);
            prop_assert!(s.max() <= mmax + 1e-12);
            prop_assert!(cluster_loss(&s, 12, 12) >= 0.0);
        }
    }
}
