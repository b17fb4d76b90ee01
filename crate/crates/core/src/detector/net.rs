//! Convolution layers, forward traces and reverse mode.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    DetectorConfig, CONV1_KERNEL, CONV1_PAD, CONV1_STRIDE, CONV2_KERNEL, CONV2_PAD, CONV2_STRIDE, LEAKY_SLOPE,
    T_OBJ,
};
use crate::error::{Error, Result};
use crate::imaging::{Image, PixelRect, CHANNELS};

/// Parameters, stored as f64 values that are exactly representable in f32
/// so the weights file round-trips bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorWeights {
    /// `[c1][3][k1][k1]`
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    /// `[c2][c1][k2][k2]`
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    /// `[head_channels][c2]`
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

pub(crate) fn round_f32(v: f64) -> f64 {
    f64::from(v as f32)
}

impl DetectorWeights {
    pub(crate) fn shapes(cfg: &DetectorConfig) -> [usize; 6] {
        let (c1, c2, k) = (cfg.conv1_channels, cfg.conv2_channels, cfg.head_channels());
        [
            c1 * CHANNELS * CONV1_KERNEL * CONV1_KERNEL,
            c1,
            c2 * c1 * CONV2_KERNEL * CONV2_KERNEL,
            c2,
            k * c2,
            k,
        ]
    }

    pub fn zeros(cfg: &DetectorConfig) -> Self {
        let s = Self::shapes(cfg);
        Self {
            conv1_w: vec![0.0; s[0]],
            conv1_b: vec![0.0; s[1]],
            conv2_w: vec![0.0; s[2]],
            conv2_b: vec![0.0; s[3]],
            head_w: vec![0.0; s[4]],
            head_b: vec![0.0; s[5]],
        }
    }

    /// He-normal convolutions, small head, objectness bias set to a low
    /// prior so untrained detectors fire rarely.
    pub fn init(cfg: &DetectorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Self::zeros(cfg);
        let mut fill = |v: &mut Vec<f64>, std: f64| {
            let n = Normal::new(0.0, std).expect("positive std");
            v.iter_mut().for_each(|x| *x = round_f32(n.sample(&mut rng)));
        };
        fill(&mut w.conv1_w, (2.0 / (CHANNELS * CONV1_KERNEL * CONV1_KERNEL) as f64).sqrt());
        fill(&mut w.conv2_w, (2.0 / (cfg.conv1_channels * CONV2_KERNEL * CONV2_KERNEL) as f64).sqrt());
        fill(&mut w.head_w, 0.1 / (cfg.conv2_channels as f64).sqrt());
        for a in 0..cfg.num_anchors() {
            w.head_b[a * cfg.fields() + T_OBJ] = round_f32(-4.0);
        }
        w
    }

    pub fn tensors(&self) -> [&Vec<f64>; 6] {
        [&self.conv1_w, &self.conv1_b, &self.conv2_w, &self.conv2_b, &self.head_w, &self.head_b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    pub fn validate(&self, cfg: &DetectorConfig) -> Result<()> {
        for (i, (t, n)) in self.tensors().iter().zip(Self::shapes(cfg)).enumerate() {
            if t.len() != n {
                return Err(Error::ShapeMismatch(format!("tensor {i} has {} values, expected {n}", t.len())));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("tensor {i} holds non-finite weights")));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub(crate) z1: Vec<f64>,
    pub(crate) a1: Vec<f64>,
    pub(crate) z2: Vec<f64>,
    pub(crate) a2: Vec<f64>,
    /// `[head_channels][gh][gw]`
    pub(crate) head: Vec<f64>,
}

#[derive(Clone, Copy)]
struct Dims {
    h: usize,
    w: usize,
    h1: usize,
    w1: usize,
    h2: usize,
    w2: usize,
    c1: usize,
    c2: usize,
    k: usize,
}

impl Dims {
    fn of(cfg: &DetectorConfig) -> Self {
        Self {
            h: cfg.input_height,
            w: cfg.input_width,
            h1: cfg.input_height / CONV1_STRIDE,
            w1: cfg.input_width / CONV1_STRIDE,
            h2: cfg.grid_height(),
            w2: cfg.grid_width(),
            c1: cfg.conv1_channels,
            c2: cfg.conv2_channels,
            k: cfg.head_channels(),
        }
    }
}

#[inline]
fn leaky(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        LEAKY_SLOPE * z
    }
}

#[inline]
fn leaky_grad(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Output index range `[lo, hi)` of a strided convolution whose inputs in
/// `[in_lo, in_hi)` changed.
fn affected_outputs(in_lo: i64, in_hi: i64, k: usize, s: usize, p: usize, n_out: usize) -> (usize, usize) {
    let (k, s, p) = (k as i64, s as i64, p as i64);
    let lo = (in_lo - k + 1 + p).max(0);
    let lo = (lo + s - 1) / s;
    let hi = ((in_hi - 1 + p).div_euclid(s) + 1).min(n_out as i64);
    (lo.max(0) as usize, hi.max(lo).max(0) as usize)
}

impl Trace {
    /// Raw head values of one anchor.
    pub fn raw_into(&self, cfg: &DetectorConfig, gx: usize, gy: usize, anchor: usize, out: &mut [f64]) {
        let plane = cfg.grid_height() * cfg.grid_width();
        let cell = gy * cfg.grid_width() + gx;
        let base = anchor * cfg.fields();
        for (j, o) in out.iter_mut().enumerate().take(cfg.fields()) {
            *o = self.head[(base + j) * plane + cell];
        }
    }

    pub fn raw(&self, cfg: &DetectorConfig, proposal: usize) -> Vec<f64> {
        let (gx, gy, a) = cfg.proposal_cell(proposal);
        let mut out = vec![0.0; cfg.fields()];
        self.raw_into(cfg, gx, gy, a, &mut out);
        out
    }

    /// Flat position of a raw value in the head tensor.
    pub fn head_offset(cfg: &DetectorConfig, proposal: usize, field: usize) -> usize {
        let (gx, gy, a) = cfg.proposal_cell(proposal);
        let plane = cfg.grid_height() * cfg.grid_width();
        (a * cfg.fields() + field) * plane + gy * cfg.grid_width() + gx
    }

    pub fn head_len(cfg: &DetectorConfig) -> usize {
        cfg.head_channels() * cfg.grid_height() * cfg.grid_width()
    }

    /// True when every leaky-ReLU unit has the same side of zero in both
    /// traces.
    pub fn same_activation_pattern(&self, other: &Trace) -> bool {
        let same = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (*x > 0.0) == (*y > 0.0));
        same(&self.z1, &other.z1) && same(&self.z2, &other.z2)
    }
}

fn conv1_point(w: &DetectorWeights, d: Dims, x: &[f64], o: usize, oy: usize, ox: usize) -> f64 {
    let k = CONV1_KERNEL;
    let iy0 = (oy * CONV1_STRIDE) as i64 - CONV1_PAD as i64;
    let ix0 = (ox * CONV1_STRIDE) as i64 - CONV1_PAD as i64;
    let kx_lo = (-ix0).max(0) as usize;
    let kx_hi = ((d.w as i64 - ix0).min(k as i64)) as usize;
    let mut s = w.conv1_b[o];
    for c in 0..CHANNELS {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..k {
            let iy = iy0 + ky as i64;
            if iy < 0 || iy >= d.h as i64 {
                continue;
            }
            let row = &plane[iy as usize * d.w..];
            let wrow = &w.conv1_w[((o * CHANNELS + c) * k + ky) * k..][..k];
            for kx in kx_lo..kx_hi {
                s += wrow[kx] * row[(ix0 + kx as i64) as usize];
            }
        }
    }
    s
}

fn conv2_point(w: &DetectorWeights, d: Dims, a1: &[f64], o: usize, oy: usize, ox: usize) -> f64 {
    let k = CONV2_KERNEL;
    let iy0 = (oy * CONV2_STRIDE) as i64 - CONV2_PAD as i64;
    let ix0 = (ox * CONV2_STRIDE) as i64 - CONV2_PAD as i64;
    let kx_lo = (-ix0).max(0) as usize;
    let kx_hi = ((d.w1 as i64 - ix0).min(k as i64)) as usize;
    let mut s = w.conv2_b[o];
    for c in 0..d.c1 {
        let plane = &a1[c * d.h1 * d.w1..(c + 1) * d.h1 * d.w1];
        for ky in 0..k {
            let iy = iy0 + ky as i64;
            if iy < 0 || iy >= d.h1 as i64 {
                continue;
            }
            let row = &plane[iy as usize * d.w1..];
            let wrow = &w.conv2_w[((o * d.c1 + c) * k + ky) * k..][..k];
            for kx in kx_lo..kx_hi {
                s += wrow[kx] * row[(ix0 + kx as i64) as usize];
            }
        }
    }
    s
}

fn conv1_region(w: &DetectorWeights, d: Dims, x: &[f64], t: &mut Trace, ys: (usize, usize), xs: (usize, usize)) {
    for o in 0..d.c1 {
        for oy in ys.0..ys.1 {
            for ox in xs.0..xs.1 {
                let i = (o * d.h1 + oy) * d.w1 + ox;
                let z = conv1_point(w, d, x, o, oy, ox);
                t.z1[i] = z;
                t.a1[i] = leaky(z);
            }
        }
    }
}

fn conv2_and_head_region(w: &DetectorWeights, d: Dims, t: &mut Trace, ys: (usize, usize), xs: (usize, usize)) {
    for o in 0..d.c2 {
        for oy in ys.0..ys.1 {
            for ox in xs.0..xs.1 {
                let i = (o * d.h2 + oy) * d.w2 + ox;
                let z = conv2_point(w, d, &t.a1, o, oy, ox);
                t.z2[i] = z;
                t.a2[i] = leaky(z);
            }
        }
    }
    let plane = d.h2 * d.w2;
    for kk in 0..d.k {
        let wrow = &w.head_w[kk * d.c2..(kk + 1) * d.c2];
        for oy in ys.0..ys.1 {
            for ox in xs.0..xs.1 {
                let cell = oy * d.w2 + ox;
                let mut s = w.head_b[kk];
                for (c, wc) in wrow.iter().enumerate() {
                    s += wc * t.a2[c * plane + cell];
                }
                t.head[kk * plane + cell] = s;
            }
        }
    }
}

pub(crate) fn full_trace(cfg: &DetectorConfig, w: &DetectorWeights, x: &Image) -> Trace {
    let d = Dims::of(cfg);
    let mut t = Trace {
        z1: vec![0.0; d.c1 * d.h1 * d.w1],
        a1: vec![0.0; d.c1 * d.h1 * d.w1],
        z2: vec![0.0; d.c2 * d.h2 * d.w2],
        a2: vec![0.0; d.c2 * d.h2 * d.w2],
        head: vec![0.0; d.k * d.h2 * d.w2],
    };
    conv1_region(w, d, x.data(), &mut t, (0, d.h1), (0, d.w1));
    conv2_and_head_region(w, d, &mut t, (0, d.h2), (0, d.w2));
    t
}

pub(crate) fn patched_trace(cfg: &DetectorConfig, w: &DetectorWeights, base: &Trace, x: &Image, changed: PixelRect) -> Trace {
    let d = Dims::of(cfg);
    let changed = changed.intersect(&PixelRect::full(d.h, d.w));
    let mut t = base.clone();
    if changed.is_empty() {
        return t;
    }
    let ys1 = affected_outputs(changed.y0, changed.y1, CONV1_KERNEL, CONV1_STRIDE, CONV1_PAD, d.h1);
    let xs1 = affected_outputs(changed.x0, changed.x1, CONV1_KERNEL, CONV1_STRIDE, CONV1_PAD, d.w1);
    conv1_region(w, d, x.data(), &mut t, ys1, xs1);
    let ys2 = affected_outputs(ys1.0 as i64, ys1.1 as i64, CONV2_KERNEL, CONV2_STRIDE, CONV2_PAD, d.h2);
    let xs2 = affected_outputs(xs1.0 as i64, xs1.1 as i64, CONV2_KERNEL, CONV2_STRIDE, CONV2_PAD, d.w2);
    conv2_and_head_region(w, d, &mut t, ys2, xs2);
    t
}

/// Bounding cell range `((y_lo, y_hi), (x_lo, x_hi))` of non-zero head
/// gradients, or `None` when all are zero.
fn head_support(d: Dims, head_grad: &[f64]) -> Option<((usize, usize), (usize, usize))> {
    let plane = d.h2 * d.w2;
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for (i, g) in head_grad.iter().enumerate() {
        if *g != 0.0 {
            let cell = i % plane;
            let (y, x) = (cell / d.w2, cell % d.w2);
            y0 = y0.min(y);
            y1 = y1.max(y + 1);
            x0 = x0.min(x);
            x1 = x1.max(x + 1);
        }
    }
    (y0 != usize::MAX).then_some(((y0, y1), (x0, x1)))
}

/// Input range `[lo, hi)` read by outputs `[o_lo, o_hi)`, clipped to `n`.
fn input_span(o_lo: usize, o_hi: usize, k: usize, s: usize, p: usize, n: usize) -> (usize, usize) {
    let lo = (o_lo * s) as i64 - p as i64;
    let hi = ((o_hi - 1) * s) as i64 - p as i64 + k as i64;
    (lo.max(0) as usize, (hi.max(0) as usize).min(n))
}

/// Gradients of the head's pre-activations flowing back to `dz2` and
/// `dz1`, restricted to the region that can be non-zero.
struct HiddenGrads {
    dz1: Vec<f64>,
    dz2: Vec<f64>,
    cells: ((usize, usize), (usize, usize)),
    c1_span: ((usize, usize), (usize, usize)),
}

fn hidden_grads(d: Dims, w: &DetectorWeights, t: &Trace, head_grad: &[f64]) -> Option<HiddenGrads> {
    let (ys, xs) = head_support(d, head_grad)?;
    let plane2 = d.h2 * d.w2;
    let mut dz2 = vec![0.0; d.c2 * plane2];
    for kk in 0..d.k {
        let wrow = &w.head_w[kk * d.c2..(kk + 1) * d.c2];
        for y in ys.0..ys.1 {
            for x in xs.0..xs.1 {
                let cell = y * d.w2 + x;
                let g = head_grad[kk * plane2 + cell];
                if g == 0.0 {
                    continue;
                }
                for (c, wc) in wrow.iter().enumerate() {
                    dz2[c * plane2 + cell] += wc * g;
                }
            }
        }
    }
    for c in 0..d.c2 {
        for y in ys.0..ys.1 {
            for x in xs.0..xs.1 {
                let i = c * plane2 + y * d.w2 + x;
                dz2[i] *= leaky_grad(t.z2[i]);
            }
        }
    }

    let plane1 = d.h1 * d.w1;
    let mut dz1 = vec![0.0; d.c1 * plane1];
    let k = CONV2_KERNEL;
    for o in 0..d.c2 {
        for oy in ys.0..ys.1 {
            for ox in xs.0..xs.1 {
                let g = dz2[(o * d.h2 + oy) * d.w2 + ox];
                if g == 0.0 {
                    continue;
                }
                let iy0 = (oy * CONV2_STRIDE) as i64 - CONV2_PAD as i64;
                let ix0 = (ox * CONV2_STRIDE) as i64 - CONV2_PAD as i64;
                for c in 0..d.c1 {
                    for ky in 0..k {
                        let iy = iy0 + ky as i64;
                        if iy < 0 || iy >= d.h1 as i64 {
                            continue;
                        }
                        let wrow = &w.conv2_w[((o * d.c1 + c) * k + ky) * k..][..k];
                        let row = c * plane1 + iy as usize * d.w1;
                        for (kx, wv) in wrow.iter().enumerate() {
                            let ix = ix0 + kx as i64;
                            if ix >= 0 && ix < d.w1 as i64 {
                                dz1[row + ix as usize] += wv * g;
                            }
                        }
                    }
                }
            }
        }
    }
    let c1y = input_span(ys.0, ys.1, k, CONV2_STRIDE, CONV2_PAD, d.h1);
    let c1x = input_span(xs.0, xs.1, k, CONV2_STRIDE, CONV2_PAD, d.w1);
    for c in 0..d.c1 {
        for y in c1y.0..c1y.1 {
            for x in c1x.0..c1x.1 {
                let i = c * plane1 + y * d.w1 + x;
                dz1[i] *= leaky_grad(t.z1[i]);
            }
        }
    }
    Some(HiddenGrads { dz1, dz2, cells: (ys, xs), c1_span: (c1y, c1x) })
}

pub(crate) fn backward_input(
    cfg: &DetectorConfig,
    w: &DetectorWeights,
    t: &Trace,
    head_grad: &[f64],
    region: PixelRect,
) -> Vec<f64> {
    let d = Dims::of(cfg);
    let mut dx = vec![0.0; CHANNELS * d.h * d.w];
    let region = region.intersect(&PixelRect::full(d.h, d.w));
    let Some(hg) = hidden_grads(d, w, t, head_grad) else {
        return dx;
    };
    if region.is_empty() {
        return dx;
    }
    let ((c1y0, c1y1), (c1x0, c1x1)) = hg.c1_span;
    // conv1 outputs whose window touches the region
    let ry = affected_outputs(region.y0, region.y1, CONV1_KERNEL, CONV1_STRIDE, CONV1_PAD, d.h1);
    let rx = affected_outputs(region.x0, region.x1, CONV1_KERNEL, CONV1_STRIDE, CONV1_PAD, d.w1);
    let (oy0, oy1) = (c1y0.max(ry.0), c1y1.min(ry.1));
    let (ox0, ox1) = (c1x0.max(rx.0), c1x1.min(rx.1));
    let k = CONV1_KERNEL;
    let plane = d.h * d.w;
    for o in 0..d.c1 {
        for oy in oy0..oy1 {
            for ox in ox0..ox1 {
                let g = hg.dz1[(o * d.h1 + oy) * d.w1 + ox];
                if g == 0.0 {
                    continue;
                }
                let iy0 = (oy * CONV1_STRIDE) as i64 - CONV1_PAD as i64;
                let ix0 = (ox * CONV1_STRIDE) as i64 - CONV1_PAD as i64;
                let kx_lo = (region.x0 - ix0).max(0) as usize;
                let kx_hi = (region.x1 - ix0).clamp(0, k as i64) as usize;
                for c in 0..CHANNELS {
                    for ky in 0..k {
                        let iy = iy0 + ky as i64;
                        if iy < region.y0 || iy >= region.y1 {
                            continue;
                        }
                        let wrow = &w.conv1_w[((o * CHANNELS + c) * k + ky) * k..][..k];
                        let row = c * plane + iy as usize * d.w;
                        for kx in kx_lo..kx_hi {
                            dx[row + (ix0 + kx as i64) as usize] += wrow[kx] * g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Parameter gradients for a dense head gradient.
pub(crate) fn backward_params(
    cfg: &DetectorConfig,
    w: &DetectorWeights,
    x: &Image,
    t: &Trace,
    head_grad: &[f64],
    out: &mut DetectorWeights,
) {
    let d = Dims::of(cfg);
    let Some(hg) = hidden_grads(d, w, t, head_grad) else {
        return;
    };
    let plane2 = d.h2 * d.w2;
    let ((y0, y1), (x0, x1)) = hg.cells;
    for kk in 0..d.k {
        for y in y0..y1 {
            for xx in x0..x1 {
                let cell = y * d.w2 + xx;
                let g = head_grad[kk * plane2 + cell];
                if g == 0.0 {
                    continue;
                }
                out.head_b[kk] += g;
                for c in 0..d.c2 {
                    out.head_w[kk * d.c2 + c] += g * t.a2[c * plane2 + cell];
                }
            }
        }
    }

    let k2 = CONV2_KERNEL;
    let plane1 = d.h1 * d.w1;
    for o in 0..d.c2 {
        for oy in y0..y1 {
            for ox in x0..x1 {
                let g = hg.dz2[(o * d.h2 + oy) * d.w2 + ox];
                if g == 0.0 {
                    continue;
                }
                out.conv2_b[o] += g;
                let iy0 = (oy * CONV2_STRIDE) as i64 - CONV2_PAD as i64;
                let ix0 = (ox * CONV2_STRIDE) as i64 - CONV2_PAD as i64;
                for c in 0..d.c1 {
                    for ky in 0..k2 {
                        let iy = iy0 + ky as i64;
                        if iy < 0 || iy >= d.h1 as i64 {
                            continue;
                        }
                        let base = ((o * d.c1 + c) * k2 + ky) * k2;
                        let row = c * plane1 + iy as usize * d.w1;
                        for kx in 0..k2 {
                            let ix = ix0 + kx as i64;
                            if ix >= 0 && ix < d.w1 as i64 {
                                out.conv2_w[base + kx] += g * t.a1[row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    let k1 = CONV1_KERNEL;
    let plane = d.h * d.w;
    let xd = x.data();
    let ((cy0, cy1), (cx0, cx1)) = hg.c1_span;
    for o in 0..d.c1 {
        for oy in cy0..cy1 {
            for ox in cx0..cx1 {
                let g = hg.dz1[(o * d.h1 + oy) * d.w1 + ox];
                if g == 0.0 {
                    continue;
                }
                out.conv1_b[o] += g;
                let iy0 = (oy * CONV1_STRIDE) as i64 - CONV1_PAD as i64;
                let ix0 = (ox * CONV1_STRIDE) as i64 - CONV1_PAD as i64;
                let kx_lo = (-ix0).max(0) as usize;
                let kx_hi = ((d.w as i64 - ix0).min(k1 as i64)) as usize;
                for c in 0..CHANNELS {
                    for ky in 0..k1 {
                        let iy = iy0 + ky as i64;
                        if iy < 0 || iy >= d.h as i64 {
                            continue;
                        }
                        let base = ((o * CHANNELS + c) * k1 + ky) * k1;
                        let row = c * plane + iy as usize * d.w;
                        for kx in kx_lo..kx_hi {
                            out.conv1_w[base + kx] += g * xd[row + (ix0 + kx as i64) as usize];
                        }
                    }
                }
            }
        }
    }
}
