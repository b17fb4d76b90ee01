//! Images, patch application, transformation sampling, input defenses and
//! image file formats.
//!
//! Images are 3-channel, planar (channel-major) with intensities in `[0,1]`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

const RAW_MAGIC: &[u8; 4] = b"CLIM";

/// Planar RGB image with values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// Half-open integer pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl PixelRect {
    pub const fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self::new(0, 0, width as i64, height as i64)
    }

    pub fn is_empty(&self) -> bool {
        self.x0 >= self.x1 || self.y0 >= self.y1
    }

    pub fn width(&self) -> i64 {
        (self.x1 - self.x0).max(0)
    }

    pub fn height(&self) -> i64 {
        (self.y1 - self.y0).max(0)
    }

    pub fn area(&self) -> i64 {
        self.width() * self.height()
    }

    pub fn intersect(&self, other: &PixelRect) -> PixelRect {
        PixelRect::new(
            self.x0.max(other.x0),
            self.y0.max(other.y0),
            self.x1.min(other.x1),
            self.y1.min(other.y1),
        )
    }

    pub fn union(&self, other: &PixelRect) -> PixelRect {
        if self.is_empty() {
            return *other;
        }
        if other.is_empty() {
            return *self;
        }
        PixelRect::new(
            self.x0.min(other.x0),
            self.y0.min(other.y0),
            self.x1.max(other.x1),
            self.y1.max(other.y1),
        )
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn contains_rect(&self, other: &PixelRect) -> bool {
        other.x0 >= self.x0 && other.y0 >= self.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height >= 1 && width >= 1, "image dimensions must be positive");
        Self { height, width, data: vec![value.clamp(0.0, 1.0); CHANNELS * height * width] }
    }

    /// Builds an image from planar data, rejecting out-of-range values.
    pub fn from_planar(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::ShapeMismatch("image dimensions must be >= 1".into()));
        }
        if data.len() != CHANNELS * height * width {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for {height}x{width}x3, got {}",
                CHANNELS * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut img = Self::new(height, width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    img.set(c, y, x, f(c, y, x));
                }
            }
        }
        img
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    /// Writes a value, clamped to `[0,1]`.
    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v.clamp(0.0, 1.0);
    }

    /// Adds `delta` to the value at flat index `i` without clamping.
    /// Only meant for finite-difference probes.
    pub fn perturb_unclamped(&mut self, i: usize, delta: f64) {
        self.data[i] += delta;
    }

    pub fn set_flat(&mut self, i: usize, v: f64) {
        self.data[i] = v.clamp(0.0, 1.0);
    }

    /// Rounds every value to the nearest multiple of 1/255.
    pub fn quantized8(&self) -> Image {
        let data = self.data.iter().map(|&v| (v * 255.0).round() / 255.0).collect();
        Image { height: self.height, width: self.width, data }
    }

    pub fn crop(&self, rect: PixelRect) -> Result<Image> {
        if rect.is_empty() || !PixelRect::full(self.height, self.width).contains_rect(&rect) {
            return Err(Error::ShapeMismatch(format!("crop {rect:?} outside image")));
        }
        let (h, w) = (rect.height() as usize, rect.width() as usize);
        Ok(Image::from_fn(h, w, |c, y, x| {
            self.get(c, y + rect.y0 as usize, x + rect.x0 as usize)
        }))
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Adversarial patch: a pixel block and the image position of its top-left
/// corner (`x` = column, `y` = row).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSpec {
    pub pixels: Image,
    pub x: i64,
    pub y: i64,
}

impl PatchSpec {
    pub fn new(pixels: Image, x: i64, y: i64) -> Self {
        Self { pixels, x, y }
    }

    pub fn uniform(height: usize, width: usize, value: f64, x: i64, y: i64) -> Self {
        Self::new(Image::filled(height, width, value), x, y)
    }

    /// `(Δh, Δw)`.
    pub fn size(&self) -> (usize, usize) {
        (self.pixels.height(), self.pixels.width())
    }

    pub fn rect(&self) -> PixelRect {
        let (h, w) = self.size();
        PixelRect::new(self.x, self.y, self.x + w as i64, self.y + h as i64)
    }
}

/// Result of a binary paste.
#[derive(Debug, Clone)]
pub struct Pasted {
    pub image: Image,
    /// Top-left actually used.
    pub x: i64,
    pub y: i64,
    /// True when the requested location had to be moved inside the image.
    pub clamped: bool,
}

/// Pastes `patch` onto `x`, clamping the placement so the patch lies fully
/// inside the image.
pub fn apply_patch(x: &Image, patch: &PatchSpec) -> Result<Pasted> {
    let (ph, pw) = patch.size();
    if ph > x.height() || pw > x.width() {
        return Err(Error::ShapeMismatch(format!(
            "patch {ph}x{pw} larger than image {}x{}",
            x.height(),
            x.width()
        )));
    }
    let px = patch.x.clamp(0, (x.width() - pw) as i64);
    let py = patch.y.clamp(0, (x.height() - ph) as i64);
    let mut out = x.clone();
    for c in 0..CHANNELS {
        for i in 0..ph {
            for j in 0..pw {
                out.set(c, py as usize + i, px as usize + j, patch.pixels.get(c, i, j));
            }
        }
    }
    Ok(Pasted { image: out, x: px, y: py, clamped: px != patch.x || py != patch.y })
}

/// Single-channel mask in `[0,1]`, broadcast over image channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Mask {
    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        Self { height, width, data: vec![v; height * width] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Grayscale image view (all three channels equal), values clamped.
    pub fn to_image(&self) -> Image {
        Image::from_fn(self.height, self.width, |_, y, x| self.get(y, x))
    }
}

/// `x ⊙ (1 − M) + p ⊙ M`.
pub fn apply_soft_mask(x: &Image, p: &Image, mask: &Mask) -> Result<Image> {
    if x.height() != p.height()
        || x.width() != p.width()
        || mask.height != x.height()
        || mask.width != x.width()
    {
        return Err(Error::ShapeMismatch("image, perturbation and mask must share h x w".into()));
    }
    let mut out = x.clone();
    for c in 0..CHANNELS {
        for y in 0..x.height() {
            for xx in 0..x.width() {
                let m = mask.get(y, xx);
                out.set(c, y, xx, x.get(c, y, xx) * (1.0 - m) + p.get(c, y, xx) * m);
            }
        }
    }
    Ok(out)
}

/// Ranges of the random physical transformations applied to the patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EotParams {
    /// Maximum translation in pixels (each axis, ±).
    pub translate_px: f64,
    /// Maximum rotation in degrees (±).
    pub rotate_deg: f64,
    /// Maximum additive brightness offset (±).
    pub brightness: f64,
    /// Maximum deviation of the multiplicative contrast from 1 (±).
    pub contrast: f64,
    /// Standard deviation of additive pixel noise.
    pub noise_std: f64,
    /// Draws per iteration.
    pub samples: usize,
    pub seed: u64,
}

impl Default for EotParams {
    fn default() -> Self {
        Self {
            translate_px: 4.0,
            rotate_deg: 5.0,
            brightness: 0.1,
            contrast: 0.1,
            noise_std: 0.02,
            samples: 4,
            seed: 0,
        }
    }
}

impl EotParams {
    pub fn identity(samples: usize) -> Self {
        Self {
            translate_px: 0.0,
            rotate_deg: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            noise_std: 0.0,
            samples,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [self.translate_px, self.rotate_deg, self.brightness, self.contrast, self.noise_std];
        if ranges.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::InvalidParameter("transformation ranges must be finite and >= 0".into()));
        }
        if self.contrast >= 1.0 {
            return Err(Error::InvalidParameter("contrast deviation must be < 1".into()));
        }
        if self.samples == 0 {
            return Err(Error::InvalidParameter("at least one transformation sample is required".into()));
        }
        Ok(())
    }
}

/// One concrete transformation draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EotSample {
    pub dx: f64,
    pub dy: f64,
    pub angle_deg: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub noise_std: f64,
    pub noise_seed: u64,
}

impl EotSample {
    pub const IDENTITY: EotSample = EotSample {
        dx: 0.0,
        dy: 0.0,
        angle_deg: 0.0,
        brightness: 0.0,
        contrast: 1.0,
        noise_std: 0.0,
        noise_seed: 0,
    };
}

fn uniform_pm(rng: &mut ChaCha8Rng, r: f64) -> f64 {
    if r == 0.0 {
        0.0
    } else {
        rng.random_range(-r..=r)
    }
}

/// Draws `params.samples` transformations. The result depends only on
/// `(params, iteration)`.
pub fn sample_eot(params: &EotParams, iteration: u64) -> Result<Vec<EotSample>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(iteration);
    Ok((0..params.samples)
        .map(|_| EotSample {
            dx: uniform_pm(&mut rng, params.translate_px),
            dy: uniform_pm(&mut rng, params.translate_px),
            angle_deg: uniform_pm(&mut rng, params.rotate_deg),
            brightness: uniform_pm(&mut rng, params.brightness),
            contrast: 1.0 + uniform_pm(&mut rng, params.contrast),
            noise_std: params.noise_std,
            noise_seed: rng.random(),
        })
        .collect())
}

/// Maps output pixels of a transformed paste back to the patch pixels that
/// produced them.
#[derive(Debug, Clone, Default)]
pub struct IndexMap {
    /// `(flat image index, flat patch index, d out / d patch)`.
    pub entries: Vec<(usize, usize, f64)>,
    /// Bounding rectangle of every written image pixel.
    pub bounds: Option<PixelRect>,
}

impl IndexMap {
    /// Scatter-adds an image-space gradient onto the patch.
    pub fn route(&self, image_grad: &[f64], patch_len: usize) -> Vec<f64> {
        let mut g = vec![0.0; patch_len];
        self.route_into(image_grad, &mut g, 1.0);
        g
    }

    pub fn route_into(&self, image_grad: &[f64], patch_grad: &mut [f64], weight: f64) {
        for &(oi, pi, s) in &self.entries {
            patch_grad[pi] += weight * s * image_grad[oi];
        }
    }
}

/// Color-adjusts, rotates (nearest neighbor, about the patch center),
/// translates and pastes `patch`, then adds noise to the pasted pixels.
/// Pixels landing outside the image are dropped.
pub fn apply_eot(x: &Image, patch: &PatchSpec, t: &EotSample) -> (Image, IndexMap) {
    let (ph, pw) = patch.size();
    let theta = t.angle_deg.to_radians();
    let (sin, cos) = if t.angle_deg == 0.0 { (0.0, 1.0) } else { theta.sin_cos() };
    let ow = ((pw as f64) * cos.abs() + (ph as f64) * sin.abs() - 1e-9).ceil().max(1.0) as usize;
    let oh = ((ph as f64) * cos.abs() + (pw as f64) * sin.abs() - 1e-9).ceil().max(1.0) as usize;

    let cx = patch.x as f64 + pw as f64 / 2.0 + t.dx.round();
    let cy = patch.y as f64 + ph as f64 / 2.0 + t.dy.round();
    let ox0 = (cx - ow as f64 / 2.0).round() as i64;
    let oy0 = (cy - oh as f64 / 2.0).round() as i64;

    let noise = (t.noise_std > 0.0).then(|| Normal::new(0.0, t.noise_std).expect("finite std"));
    let mut rng = ChaCha8Rng::seed_from_u64(t.noise_seed);

    let mut out = x.clone();
    let mut map = IndexMap::default();
    let img_rect = PixelRect::full(x.height(), x.width());
    for r in 0..oh {
        for c in 0..ow {
            let rx = c as f64 + 0.5 - ow as f64 / 2.0;
            let ry = r as f64 + 0.5 - oh as f64 / 2.0;
            let sx = cos * rx + sin * ry + pw as f64 / 2.0;
            let sy = -sin * rx + cos * ry + ph as f64 / 2.0;
            let (j, i) = (sx.floor(), sy.floor());
            let inside_patch = j >= 0.0 && i >= 0.0 && (j as usize) < pw && (i as usize) < ph;
            let (gx, gy) = (ox0 + c as i64, oy0 + r as i64);
            let inside_image = img_rect.contains(gx, gy);
            for ch in 0..CHANNELS {
                // Draw unconditionally so the noise field does not depend on clipping.
                let n = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
                if !(inside_patch && inside_image) {
                    continue;
                }
                let p = patch.pixels.get(ch, i as usize, j as usize);
                let v0 = t.contrast * p + t.brightness;
                let v1 = v0.clamp(0.0, 1.0);
                let v2 = v1 + n;
                let scale = if (0.0..=1.0).contains(&v0) && (0.0..=1.0).contains(&v2) {
                    t.contrast
                } else {
                    0.0
                };
                out.set(ch, gy as usize, gx as usize, v2);
                let oi = out.index(ch, gy as usize, gx as usize);
                let pi = patch.pixels.index(ch, i as usize, j as usize);
                map.entries.push((oi, pi, scale));
                let px = PixelRect::new(gx, gy, gx + 1, gy + 1);
                map.bounds = Some(map.bounds.map_or(px, |b| b.union(&px)));
            }
        }
    }
    (out, map)
}

/// Input-transformation defenses applied to a whole frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseKind {
    Identity,
    BitDepth { bits: u32 },
    GaussianNoise { std: f64, seed: u64 },
    MedianBlur { kernel: usize },
}

impl DefenseKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DefenseKind::Identity => Ok(()),
            DefenseKind::BitDepth { bits } if (1..=16).contains(&bits) => Ok(()),
            DefenseKind::BitDepth { bits } => Err(Error::InvalidParameter(format!("bit depth {bits} not in 1..=16"))),
            DefenseKind::GaussianNoise { std, .. } if std.is_finite() && std >= 0.0 => Ok(()),
            DefenseKind::GaussianNoise { std, .. } => Err(Error::InvalidParameter(format!("noise std {std} must be >= 0"))),
            DefenseKind::MedianBlur { kernel } if kernel >= 3 && kernel % 2 == 1 => Ok(()),
            DefenseKind::MedianBlur { kernel } => {
                Err(Error::InvalidParameter(format!("median kernel {kernel} must be odd and >= 3")))
            }
        }
    }

    pub fn label(&self) -> String {
        match *self {
            DefenseKind::Identity => "none".into(),
            DefenseKind::BitDepth { bits } => format!("bitdepth:{bits}"),
            DefenseKind::GaussianNoise { std, .. } => format!("gauss:{std}"),
            DefenseKind::MedianBlur { kernel } => format!("median:{kernel}"),
        }
    }
}

pub fn defense_transform(x: &Image, kind: &DefenseKind) -> Result<Image> {
    kind.validate()?;
    Ok(match *kind {
        DefenseKind::Identity => x.clone(),
        DefenseKind::BitDepth { bits } => {
            let levels = f64::from((1u32 << bits) - 1);
            let data = x.data.iter().map(|&v| (v * levels).round() / levels).collect();
            Image { height: x.height, width: x.width, data }
        }
        DefenseKind::GaussianNoise { std, seed } => {
            if std == 0.0 {
                return Ok(x.clone());
            }
            let normal = Normal::new(0.0, std).expect("validated std");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = x.data.iter().map(|&v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0)).collect();
            Image { height: x.height, width: x.width, data }
        }
        DefenseKind::MedianBlur { kernel } => median_blur(x, kernel),
    })
}

fn median_blur(x: &Image, k: usize) -> Image {
    let r = (k / 2) as i64;
    let (h, w) = (x.height as i64, x.width as i64);
    let mut out = x.clone();
    let mut buf = Vec::with_capacity(k * k);
    for c in 0..CHANNELS {
        for y in 0..h {
            for xx in 0..w {
                buf.clear();
                for dy in -r..=r {
                    let yy = (y + dy).clamp(0, h - 1) as usize;
                    for dx in -r..=r {
                        let xs = (xx + dx).clamp(0, w - 1) as usize;
                        buf.push(x.get(c, yy, xs));
                    }
                }
                let mid = buf.len() / 2;
                let (_, m, _) = buf.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
                let m = *m;
                out.set(c, y as usize, xx as usize, m);
            }
        }
    }
    out
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a binary PPM (P6, maxval 255).
pub fn encode_ppm(x: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", x.width, x.height).into_bytes();
    out.reserve(x.height * x.width * CHANNELS);
    for y in 0..x.height {
        for xx in 0..x.width {
            for c in 0..CHANNELS {
                out.push(to_u8(x.get(c, y, xx)));
            }
        }
    }
    out
}

/// Encodes a binary PGM (P5) of a mask, used for diagnostics dumps.
pub fn encode_pgm(m: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", m.width, m.height).into_bytes();
    out.extend(m.data.iter().map(|&v| to_u8(v)));
    out
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_ws_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_ws_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("expected a decimal number in PPM header".into()))
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::Format("not a binary PPM (missing P6 magic)".into()));
    }
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r.number()?;
    let height = r.number()?;
    let maxval = r.number()?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format("PPM with zero dimension".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    if r.pos >= bytes.len() || !bytes[r.pos].is_ascii_whitespace() {
        return Err(Error::Format("missing whitespace after PPM header".into()));
    }
    let raster = &bytes[r.pos + 1..];
    let need = width * height * CHANNELS;
    if raster.len() != need {
        return Err(Error::Format(format!("PPM raster has {} bytes, expected {need}", raster.len())));
    }
    let mut img = Image::new(height, width);
    for y in 0..height {
        for x in 0..width {
            for c in 0..CHANNELS {
                img.set(c, y, x, f64::from(raster[(y * width + x) * CHANNELS + c]) / 255.0);
            }
        }
    }
    Ok(img)
}

/// Encodes the raw planar float32 format: `CLIM`, u32 h, u32 w, u32
/// channels (little endian), then planar f32 values.
pub fn encode_raw(x: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * x.len());
    out.extend_from_slice(RAW_MAGIC);
    for v in [x.height as u32, x.width as u32, CHANNELS as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in &x.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_raw(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 16 || &bytes[..4] != RAW_MAGIC {
        return Err(Error::Format("missing CLIM magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (h, w, ch) = (word(4), word(8), word(12));
    if ch != CHANNELS {
        return Err(Error::Format(format!("raw image has {ch} channels, expected {CHANNELS}")));
    }
    let need = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(ch * 4))
        .ok_or_else(|| Error::Format("raw image dimensions overflow".into()))?;
    if bytes.len() - 16 != need {
        return Err(Error::Format(format!("raw payload has {} bytes, expected {need}", bytes.len() - 16)));
    }
    let data: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("raw image contains non-finite values".into()));
    }
    Image::from_planar(h, w, data).map_err(|e| Error::Format(e.to_string()))
}

/// Reads a PPM or raw planar image, dispatching on the file magic.
pub fn read_image(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.starts_with(RAW_MAGIC) {
        decode_raw(&bytes)
    } else {
        decode_ppm(&bytes)
    }
}

/// Writes a binary PPM.
pub fn write_image(path: &Path, x: &Image) -> Result<()> {
    fs::File::create(path)?.write_all(&encode_ppm(x))?;
    Ok(())
}
