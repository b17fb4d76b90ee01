//! Small grid/anchor object detector with hand-written reverse mode.
//!
//! Network: `conv(k8, s4, p2) -> leaky ReLU -> conv(k4, s2, p1) -> leaky
//! ReLU -> 1x1 head`, overall stride 8. Each feature cell carries one
//! prediction per anchor: `(t_x, t_y, t_w, t_h, t_obj, t_class...)`.
//!
//! Besides plain forward passes the detector supports incremental passes:
//! when only a small rectangle of the input changes (a pasted patch), the
//! clean trace is reused and only the affected activations are recomputed.

mod gradcheck;
mod io;
mod net;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{nms, BBox};
use crate::imaging::{Image, PixelRect};
use crate::losses::{LossHyper, LossSpec};

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use io::{decode_weights, encode_weights, load_weights, save_weights, weights_digest};
pub use net::{DetectorWeights, Trace};
pub use train::{average_precision, train, TrainConfig, TrainReport, TrainSample};

pub const LEAKY_SLOPE: f64 = 0.1;
pub(crate) const CONV1_KERNEL: usize = 8;
pub(crate) const CONV1_STRIDE: usize = 4;
pub(crate) const CONV1_PAD: usize = 2;
pub(crate) const CONV2_KERNEL: usize = 8;
pub(crate) const CONV2_STRIDE: usize = 2;
pub(crate) const CONV2_PAD: usize = 3;
/// Exponent clamp of the size decode.
pub const SIZE_CLAMP: f64 = 4.0;

/// Raw head values per anchor before class logits.
pub const BOX_FIELDS: usize = 5;
pub const T_X: usize = 0;
pub const T_Y: usize = 1;
pub const T_W: usize = 2;
pub const T_H: usize = 3;
pub const T_OBJ: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Image-to-feature-map ratio; fixed to 8 by the architecture.
    pub stride: usize,
    /// `(width, height)` in pixels. Anchor-free mode uses exactly one entry
    /// as the base size.
    pub anchors: Vec<(f64, f64)>,
    pub anchor_free: bool,
    pub num_classes: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub nms_iou: f64,
    pub conf_threshold: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_height: 128,
            input_width: 128,
            stride: 8,
            anchors: vec![(16.0, 16.0), (24.0, 12.0), (12.0, 24.0)],
            anchor_free: false,
            num_classes: 2,
            conv1_channels: 16,
            conv2_channels: 32,
            nms_iou: 0.5,
            conf_threshold: 0.25,
        }
    }
}

impl DetectorConfig {
    pub fn anchor_free(base: (f64, f64)) -> Self {
        Self { anchors: vec![base], anchor_free: true, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let stride = CONV1_STRIDE * CONV2_STRIDE;
        if self.stride != stride {
            return Err(Error::InvalidParameter(format!("stride must be {stride}, got {}", self.stride)));
        }
        if self.input_height == 0
            || self.input_width == 0
            || !self.input_height.is_multiple_of(stride)
            || !self.input_width.is_multiple_of(stride)
        {
            return Err(Error::InvalidParameter(format!(
                "input {}x{} not a positive multiple of the stride",
                self.input_height, self.input_width
            )));
        }
        if self.anchors.is_empty() {
            return Err(Error::InvalidParameter("at least one anchor is required".into()));
        }
        if self.anchor_free && self.anchors.len() != 1 {
            return Err(Error::InvalidParameter("anchor-free mode takes exactly one base size".into()));
        }
        if self.anchors.iter().any(|&(w, h)| !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0)) {
            return Err(Error::InvalidParameter("anchor sizes must be positive".into()));
        }
        if self.num_classes == 0 || self.conv1_channels == 0 || self.conv2_channels == 0 {
            return Err(Error::InvalidParameter("class and channel counts must be >= 1".into()));
        }
        if !(self.conf_threshold > 0.0 && self.conf_threshold < 1.0) {
            return Err(Error::InvalidParameter("conf_threshold must lie in (0,1)".into()));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::InvalidParameter("nms_iou must lie in [0,1]".into()));
        }
        Ok(())
    }

    pub fn grid_height(&self) -> usize {
        self.input_height / self.stride
    }

    pub fn grid_width(&self) -> usize {
        self.input_width / self.stride
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    /// Raw values per anchor: box fields plus class logits.
    pub fn fields(&self) -> usize {
        BOX_FIELDS + self.num_classes
    }

    pub fn head_channels(&self) -> usize {
        self.num_anchors() * self.fields()
    }

    pub fn num_proposals(&self) -> usize {
        self.grid_height() * self.grid_width() * self.num_anchors()
    }

    /// `size_x / size_f`.
    pub fn scale(&self) -> f64 {
        self.input_width as f64 / self.grid_width() as f64
    }

    pub fn proposal_index(&self, gx: usize, gy: usize, anchor: usize) -> usize {
        (gy * self.grid_width() + gx) * self.num_anchors() + anchor
    }

    /// `(gx, gy, anchor)` of a proposal index.
    pub fn proposal_cell(&self, index: usize) -> (usize, usize, usize) {
        let a = index % self.num_anchors();
        let cell = index / self.num_anchors();
        (cell % self.grid_width(), cell / self.grid_width(), a)
    }

    /// Pixel rectangle of a feature cell.
    pub fn cell_rect(&self, gx: usize, gy: usize) -> BBox {
        let s = self.stride as f64;
        BBox::from_corners(gx as f64 * s, gy as f64 * s, (gx + 1) as f64 * s, (gy + 1) as f64 * s)
    }

    /// Input pixels that can influence the outputs of cell `(gx, gy)`.
    pub fn receptive_field(&self, gx: usize, gy: usize) -> PixelRect {
        let span = |g: usize| {
            let c2_lo = (CONV2_STRIDE * g) as i64 - CONV2_PAD as i64;
            let c2_hi = c2_lo + CONV2_KERNEL as i64 - 1;
            let lo = CONV1_STRIDE as i64 * c2_lo - CONV1_PAD as i64;
            let hi = CONV1_STRIDE as i64 * c2_hi - CONV1_PAD as i64 + CONV1_KERNEL as i64;
            (lo, hi)
        };
        let (x0, x1) = span(gx);
        let (y0, y1) = span(gy);
        PixelRect::new(x0, y0, x1, y1).intersect(&PixelRect::full(self.input_height, self.input_width))
    }
}

/// One pre-NMS candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
    pub class_scores: Vec<f64>,
    /// `objectness * max(class_scores)`.
    pub confidence: f64,
    /// Argmax class (lowest index on ties).
    pub class_id: usize,
    /// `(gx, gy)` in cells.
    pub cell: (usize, usize),
    pub anchor: usize,
    pub raw: Vec<f64>,
}

/// All proposals of a pass plus the indices surviving NMS.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionOutput {
    pub proposals: Vec<Proposal>,
    pub kept: Vec<usize>,
    kept_mask: Vec<bool>,
}

impl DetectionOutput {
    pub fn new(proposals: Vec<Proposal>, kept: Vec<usize>) -> Self {
        let mut kept_mask = vec![false; proposals.len()];
        for &k in &kept {
            kept_mask[k] = true;
        }
        Self { proposals, kept, kept_mask }
    }

    pub fn is_kept(&self, index: usize) -> bool {
        self.kept_mask.get(index).copied().unwrap_or(false)
    }

    pub fn proposal(&self, index: usize) -> Result<&Proposal> {
        self.proposals.get(index).ok_or(Error::MissingProposal { index, len: self.proposals.len() })
    }

    /// Post-NMS detections as `(box, confidence, class)`.
    pub fn detections(&self) -> Vec<(BBox, f64, usize)> {
        self.kept.iter().map(|&i| {
            let p = &self.proposals[i];
            (p.bbox, p.confidence, p.class_id)
        }).collect()
    }

    /// Post-NMS detections of one class.
    pub fn detections_of(&self, class: usize) -> Vec<(BBox, f64)> {
        self.kept
            .iter()
            .map(|&i| &self.proposals[i])
            .filter(|p| p.class_id == class)
            .map(|p| (p.bbox, p.confidence))
            .collect()
    }
}

pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// A decoded proposal together with the partial derivatives needed to push
/// gradients back onto raw head values. The confidence uses a fixed class.
#[derive(Debug, Clone, Copy)]
pub struct DecodedDiff {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub conf: f64,
    pub dcx_dtx: f64,
    pub dcy_dty: f64,
    pub dw_dtw: f64,
    pub dh_dth: f64,
    pub dconf_dobj: f64,
    pub dconf_dcls: f64,
    pub class: usize,
}

impl DecodedDiff {
    pub fn bbox(&self) -> BBox {
        BBox::from_center(self.cx, self.cy, self.w, self.h)
    }
}

/// Decodes one anchor's raw values at cell `(gx, gy)`. `class` selects the
/// class score multiplied into the confidence.
pub fn decode_diff(cfg: &DetectorConfig, raw: &[f64], gx: usize, gy: usize, anchor: usize, class: usize) -> DecodedDiff {
    let s = cfg.stride as f64;
    let (sx, sy) = (sigmoid(raw[T_X]), sigmoid(raw[T_Y]));
    let (cx, cy, dcx, dcy) = if cfg.anchor_free {
        (
            (2.0 * sx - 0.5 + gx as f64) * s,
            (2.0 * sy - 0.5 + gy as f64) * s,
            2.0 * s * sx * (1.0 - sx),
            2.0 * s * sy * (1.0 - sy),
        )
    } else {
        ((sx + gx as f64) * s, (sy + gy as f64) * s, s * sx * (1.0 - sx), s * sy * (1.0 - sy))
    };
    let (aw, ah) = cfg.anchors[anchor];
    let size = |t: f64, base: f64| {
        let v = base * t.clamp(-SIZE_CLAMP, SIZE_CLAMP).exp();
        (v, if t.abs() < SIZE_CLAMP { v } else { 0.0 })
    };
    let (w, dw) = size(raw[T_W], aw);
    let (h, dh) = size(raw[T_H], ah);
    let obj = sigmoid(raw[T_OBJ]);
    let cls = sigmoid(raw[BOX_FIELDS + class]);
    let conf = obj * cls;
    DecodedDiff {
        cx,
        cy,
        w,
        h,
        conf,
        dcx_dtx: dcx,
        dcy_dty: dcy,
        dw_dtw: dw,
        dh_dth: dh,
        dconf_dobj: conf * (1.0 - obj),
        dconf_dcls: conf * (1.0 - cls),
        class,
    }
}

/// Decodes every anchor of a trace and runs NMS.
pub fn decode(cfg: &DetectorConfig, trace: &Trace) -> DetectionOutput {
    let (gh, gw) = (cfg.grid_height(), cfg.grid_width());
    let mut proposals = Vec::with_capacity(cfg.num_proposals());
    let mut raw = vec![0.0; cfg.fields()];
    for gy in 0..gh {
        for gx in 0..gw {
            for a in 0..cfg.num_anchors() {
                trace.raw_into(cfg, gx, gy, a, &mut raw);
                let class_scores: Vec<f64> = raw[BOX_FIELDS..].iter().map(|&t| sigmoid(t)).collect();
                let mut class_id = 0;
                for (i, &c) in class_scores.iter().enumerate() {
                    if c > class_scores[class_id] {
                        class_id = i;
                    }
                }
                let d = decode_diff(cfg, &raw, gx, gy, a, class_id);
                proposals.push(Proposal {
                    bbox: d.bbox(),
                    objectness: sigmoid(raw[T_OBJ]),
                    class_scores,
                    confidence: d.conf,
                    class_id,
                    cell: (gx, gy),
                    anchor: a,
                    raw: raw.clone(),
                });
            }
        }
    }
    let candidates: Vec<(BBox, f64, usize)> =
        proposals.iter().map(|p| (p.bbox, p.confidence, p.class_id)).collect();
    let kept = nms(&candidates, cfg.nms_iou, cfg.conf_threshold);
    DetectionOutput::new(proposals, kept)
}

/// Trained network plus its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub config: DetectorConfig,
    pub weights: DetectorWeights,
}

impl Detector {
    pub fn new(config: DetectorConfig, weights: DetectorWeights) -> Result<Self> {
        config.validate()?;
        weights.validate(&config)?;
        Ok(Self { config, weights })
    }

    fn check_input(&self, x: &Image) -> Result<()> {
        if x.height() != self.config.input_height || x.width() != self.config.input_width {
            return Err(Error::ShapeMismatch(format!(
                "detector expects {}x{}, got {}x{}",
                self.config.input_height,
                self.config.input_width,
                x.height(),
                x.width()
            )));
        }
        Ok(())
    }

    pub fn trace(&self, x: &Image) -> Result<Trace> {
        self.check_input(x)?;
        Ok(net::full_trace(&self.config, &self.weights, x))
    }

    /// Trace of `x` assuming it differs from the input of `base` only inside
    /// `changed`.
    pub fn trace_patched(&self, base: &Trace, x: &Image, changed: PixelRect) -> Result<Trace> {
        self.check_input(x)?;
        Ok(net::patched_trace(&self.config, &self.weights, base, x, changed))
    }

    pub fn forward(&self, x: &Image) -> Result<DetectionOutput> {
        Ok(decode(&self.config, &self.trace(x)?))
    }

    pub fn decode(&self, trace: &Trace) -> DetectionOutput {
        decode(&self.config, trace)
    }

    /// Gradient of a scalar of the head outputs with respect to the input,
    /// restricted to `region` (the full image when `None`).
    pub fn backward_input(&self, trace: &Trace, head_grad: &[f64], region: Option<PixelRect>) -> Vec<f64> {
        let full = PixelRect::full(self.config.input_height, self.config.input_width);
        net::backward_input(&self.config, &self.weights, trace, head_grad, region.unwrap_or(full))
    }

    /// Loss value and its exact input gradient, with all discrete choices
    /// frozen at the current pass.
    pub fn input_gradient(&self, x: &Image, loss: &LossSpec, hyper: &LossHyper) -> Result<(f64, GradientImage)> {
        let (value, data) = self.input_gradient_raw(x, loss, hyper)?;
        Ok((value, GradientImage { height: x.height(), width: x.width(), data }))
    }

    pub(crate) fn input_gradient_raw(&self, x: &Image, loss: &LossSpec, hyper: &LossHyper) -> Result<(f64, Vec<f64>)> {
        let trace = self.trace(x)?;
        let det = self.decode(&trace);
        let frozen = loss.freeze(&det, hyper)?;
        let (value, head_grad) = frozen.evaluate(&self.config, &trace);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss value {value}")));
        }
        Ok((value, self.backward_input(&trace, &head_grad, None)))
    }
}

/// Same layout as [`Image`], unbounded values.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GradientImage {
    /// Value at channel `c`, row `y`, column `x`.
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}
