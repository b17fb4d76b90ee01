//! Supervised training on labelled frames and average precision.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{backward_params, full_trace, round_f32};
use super::{sigmoid, Detector, DetectorConfig, DetectorWeights, Trace, BOX_FIELDS, SIZE_CLAMP, T_H, T_OBJ, T_W, T_X, T_Y};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::imaging::Image;

/// One labelled frame: boxes with class ids.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: Image,
    pub boxes: Vec<(BBox, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Weight of objectness loss on negative anchors.
    pub noobj_weight: f64,
    /// Weight of the squared error on box targets.
    pub box_weight: f64,
    /// Negatives whose decoded box overlaps a ground truth above this IOU
    /// carry no objectness loss.
    pub ignore_iou: f64,
    /// Cosine decay of the learning rate down to this fraction of `lr` at
    /// the last epoch; 1 keeps it constant.
    pub final_lr_fraction: f64,
    /// Objectness targets become `ε` and `1 − ε`.
    pub obj_smoothing: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            noobj_weight: 0.5,
            box_weight: 2.0,
            ignore_iou: 0.5,
            final_lr_fraction: 0.05,
            obj_smoothing: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub weights: DetectorWeights,
    /// Mean per-image loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(0.01, 0.99);
    (p / (1.0 - p)).ln()
}

struct Assignment {
    proposal: usize,
    targets: [f64; 4],
    class: usize,
}

fn assign(cfg: &DetectorConfig, boxes: &[(BBox, usize)]) -> Vec<Assignment> {
    let s = cfg.stride as f64;
    let mut out: Vec<Assignment> = Vec::new();
    for &(b, class) in boxes {
        let (cx, cy) = b.center();
        let gx = ((cx / s).floor() as usize).min(cfg.grid_width() - 1);
        let gy = ((cy / s).floor() as usize).min(cfg.grid_height() - 1);
        let shape = BBox::from_center(0.0, 0.0, b.width(), b.height());
        let mut anchor = 0;
        let mut best = -1.0;
        for (a, &(aw, ah)) in cfg.anchors.iter().enumerate() {
            let v = iou(&shape, &BBox::from_center(0.0, 0.0, aw, ah));
            if v > best {
                best = v;
                anchor = a;
            }
        }
        let (fx, fy) = (cx / s - gx as f64, cy / s - gy as f64);
        let (tx, ty) = if cfg.anchor_free {
            (logit((fx + 0.5) / 2.0), logit((fy + 0.5) / 2.0))
        } else {
            (logit(fx), logit(fy))
        };
        let (aw, ah) = cfg.anchors[anchor];
        let tw = (b.width() / aw).ln().clamp(-SIZE_CLAMP, SIZE_CLAMP);
        let th = (b.height() / ah).ln().clamp(-SIZE_CLAMP, SIZE_CLAMP);
        let proposal = cfg.proposal_index(gx, gy, anchor);
        out.retain(|a| a.proposal != proposal);
        out.push(Assignment { proposal, targets: [tx, ty, tw, th], class });
    }
    out
}

fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Training loss of one frame and its gradient on the head tensor.
fn frame_loss(cfg: &DetectorConfig, tc: &TrainConfig, trace: &Trace, boxes: &[(BBox, usize)]) -> (f64, Vec<f64>) {
    let det = super::decode(cfg, trace);
    let assigned = assign(cfg, boxes);
    let mut grad = vec![0.0; Trace::head_len(cfg)];
    let mut loss = 0.0;
    for (p, prop) in det.proposals.iter().enumerate() {
        if assigned.iter().any(|a| a.proposal == p) {
            continue;
        }
        if boxes.iter().any(|(b, _)| iou(&prop.bbox, b) > tc.ignore_iou) {
            continue;
        }
        let o = sigmoid(prop.raw[T_OBJ]);
        let y = tc.obj_smoothing;
        loss += tc.noobj_weight * bce(o, y);
        grad[Trace::head_offset(cfg, p, T_OBJ)] += tc.noobj_weight * (o - y);
    }
    for a in &assigned {
        let raw = &det.proposals[a.proposal].raw;
        let o = sigmoid(raw[T_OBJ]);
        let y = 1.0 - tc.obj_smoothing;
        loss += bce(o, y);
        grad[Trace::head_offset(cfg, a.proposal, T_OBJ)] += o - y;
        for j in 0..cfg.num_classes {
            let y = if j == a.class { 1.0 } else { 0.0 };
            let c = sigmoid(raw[BOX_FIELDS + j]);
            loss += bce(c, y);
            grad[Trace::head_offset(cfg, a.proposal, BOX_FIELDS + j)] += c - y;
        }
        for (k, field) in [T_X, T_Y, T_W, T_H].into_iter().enumerate() {
            let d = raw[field] - a.targets[k];
            loss += tc.box_weight * d * d;
            grad[Trace::head_offset(cfg, a.proposal, field)] += 2.0 * tc.box_weight * d;
        }
    }
    (loss, grad)
}

fn validate_corpus(corpus: &[TrainSample], cfg: &DetectorConfig) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::InvalidParameter("training corpus is empty".into()));
    }
    for (i, s) in corpus.iter().enumerate() {
        if s.image.height() != cfg.input_height || s.image.width() != cfg.input_width {
            return Err(Error::ShapeMismatch(format!("corpus image {i} has the wrong size")));
        }
        for (b, class) in &s.boxes {
            let inside = b.x1 >= 0.0
                && b.y1 >= 0.0
                && b.x2 <= cfg.input_width as f64
                && b.y2 <= cfg.input_height as f64
                && !b.is_degenerate();
            if !inside {
                return Err(Error::InvalidBox(format!("corpus image {i}: box {b:?} outside the frame")));
            }
            if *class >= cfg.num_classes {
                return Err(Error::InvalidParameter(format!("corpus image {i}: class {class} out of range")));
            }
        }
    }
    Ok(())
}

/// Deterministic Adam training from a seeded initialization.
pub fn train(corpus: &[TrainSample], cfg: &DetectorConfig, tc: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    validate_corpus(corpus, cfg)?;
    if tc.batch_size == 0 || !(tc.lr > 0.0) {
        return Err(Error::InvalidParameter("batch size and learning rate must be positive".into()));
    }
    if !(0.0..0.5).contains(&tc.obj_smoothing) {
        return Err(Error::InvalidParameter(format!("objectness smoothing {} not in [0,0.5)", tc.obj_smoothing)));
    }
    if !(tc.final_lr_fraction > 0.0 && tc.final_lr_fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!("final lr fraction {} not in (0,1]", tc.final_lr_fraction)));
    }
    let mut w = DetectorWeights::init(cfg, tc.seed);
    let mut m = DetectorWeights::zeros(cfg);
    let mut v = DetectorWeights::zeros(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut step = 0i32;
    let mut epoch_losses = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let progress = if tc.epochs > 1 { epoch as f64 / (tc.epochs - 1) as f64 } else { 0.0 };
        let lr = tc.lr * (tc.final_lr_fraction + (1.0 - tc.final_lr_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let mut g = DetectorWeights::zeros(cfg);
            for &i in batch {
                let s = &corpus[i];
                let trace = full_trace(cfg, &w, &s.image);
                let (l, hg) = frame_loss(cfg, tc, &trace, &s.boxes);
                total += l;
                backward_params(cfg, &w, &s.image, &trace, &hg, &mut g);
            }
            step += 1;
            let (bc1, bc2) = (1.0 - tc.beta1.powi(step), 1.0 - tc.beta2.powi(step));
            let scale = 1.0 / batch.len() as f64;
            let ws = w.tensors_mut();
            let ms = m.tensors_mut();
            let vs = v.tensors_mut();
            for (((wt, mt), vt), gt) in ws.into_iter().zip(ms).zip(vs).zip(g.tensors()) {
                for j in 0..wt.len() {
                    let gj = gt[j] * scale;
                    mt[j] = tc.beta1 * mt[j] + (1.0 - tc.beta1) * gj;
                    vt[j] = tc.beta2 * vt[j] + (1.0 - tc.beta2) * gj * gj;
                    let upd = lr * (mt[j] / bc1) / ((vt[j] / bc2).sqrt() + tc.adam_eps);
                    wt[j] = round_f32(wt[j] - upd);
                }
            }
        }
        let mean = total / corpus.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("training loss {mean}")));
        }
        epoch_losses.push(mean);
    }
    w.validate(cfg)?;
    Ok(TrainReport { weights: w, epoch_losses })
}

/// All-point interpolated average precision at an IOU threshold. Each
/// element pairs one image's detections `(box, confidence)` with its
/// ground-truth boxes. Returns 0 when there is no ground truth.
pub fn average_precision(images: &[(Vec<(BBox, f64)>, Vec<BBox>)], iou_threshold: f64) -> f64 {
    let n_gt: usize = images.iter().map(|(_, g)| g.len()).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut dets: Vec<(f64, usize, BBox)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, (d, _))| d.iter().map(move |&(b, c)| (c, i, b)))
        .collect();
    dets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut used: Vec<Vec<bool>> = images.iter().map(|(_, g)| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(dets.len());
    for (_, img, b) in dets {
        let gts = &images[img].1;
        let mut best = (-1.0, usize::MAX);
        for (j, g) in gts.iter().enumerate() {
            let v = iou(&b, g);
            if v > best.0 {
                best = (v, j);
            }
        }
        if best.0 >= iou_threshold && !used[img][best.1] {
            used[img][best.1] = true;
            tp += 1;
        } else {
            fp += 1;
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..curve.len() {
        let (r, _) = curve[i];
        if r > prev_recall {
            let p_max = curve[i..].iter().map(|c| c.1).fold(0.0, f64::max);
            ap += (r - prev_recall) * p_max;
            prev_recall = r;
        }
    }
    ap
}

impl Detector {
    /// AP@`iou_threshold` of one class over labelled frames.
    pub fn average_precision(&self, corpus: &[TrainSample], class: usize, iou_threshold: f64) -> Result<f64> {
        let mut rows = Vec::with_capacity(corpus.len());
        for s in corpus {
            let out = self.forward(&s.image)?;
            let gts = s.boxes.iter().filter(|(_, c)| *c == class).map(|(b, _)| *b).collect();
            rows.push((out.detections_of(class), gts));
        }
        Ok(average_precision(&rows, iou_threshold))
    }
}
