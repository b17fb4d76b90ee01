//! Synthetic driving-like scenes: a textured vehicle moving over a smooth
//! background with a few distractor objects.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::TrainSample;
use crate::error::{Error, Result};
use crate::geometry::{BBox, Vec2};
use crate::imaging::{read_image, write_image, Image, PixelRect, CHANNELS};
use crate::targeting::{AttackDirection, Goal};

/// Class id of the attacked vehicle.
pub const VEHICLE: usize = 0;
/// Class id of distractor objects.
pub const DISTRACTOR: usize = 1;

/// Horizontal room kept free on both sides of the target for a fabricated
/// box, as a fraction of the target width.
const SIDE_MARGIN: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub t_start: usize,
    pub t_end: usize,
    /// Integer target width range (inclusive).
    pub target_width: (u32, u32),
    pub target_height: (u32, u32),
    /// Horizontal speed range in pixels per frame (random sign).
    pub speed: (f64, f64),
    /// Maximum vertical speed in pixels per frame.
    pub vertical_speed: f64,
    pub distractors: usize,
    pub distractor_size: (u32, u32),
    /// Upper bound on patch area over target area.
    pub patch_area_ratio: f64,
    /// Length of the attack step as a fraction of the target width.
    pub step_fraction: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            frames: 17,
            t_start: 8,
            t_end: 15,
            target_width: (26, 32),
            target_height: (18, 24),
            speed: (0.3, 1.0),
            vertical_speed: 0.3,
            distractors: 2,
            distractor_size: (10, 16),
            patch_area_ratio: 0.12,
            step_fraction: 0.125,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.patch_area_ratio > 0.0 && self.patch_area_ratio < 1.0) {
            return Err(Error::InvalidParameter(format!("patch area ratio {} not in (0,1)", self.patch_area_ratio)));
        }
        if !(self.t_start <= self.t_end && self.t_end < self.frames) {
            return Err(Error::InvalidParameter(format!(
                "attack window [{}, {}] must lie inside {} frames",
                self.t_start, self.t_end, self.frames
            )));
        }
        let (w_lo, w_hi) = self.target_width;
        let (h_lo, h_hi) = self.target_height;
        if w_lo < 4 || h_lo < 4 || w_lo > w_hi || h_lo > h_hi {
            return Err(Error::InvalidParameter("target size ranges must be ordered and >= 4".into()));
        }
        let need = (f64::from(w_hi) * (1.0 + 2.0 * SIDE_MARGIN)).ceil() as usize + 4;
        if need > self.width || (h_hi as usize) * 3 > self.height {
            return Err(Error::InvalidParameter("frame too small for the target size range".into()));
        }
        if !(self.speed.0 >= 0.0 && self.speed.0 <= self.speed.1) || !(self.vertical_speed >= 0.0) {
            return Err(Error::InvalidParameter("speed ranges must be ordered and >= 0".into()));
        }
        if !(self.step_fraction > 0.0 && self.step_fraction < 1.0) {
            return Err(Error::InvalidParameter("step fraction must lie in (0,1)".into()));
        }
        Ok(())
    }
}

/// Appearance and trajectory of one object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrack {
    pub class: usize,
    pub width: u32,
    pub height: u32,
    /// Center at frame 0.
    pub start: (f64, f64),
    pub velocity: (f64, f64),
    pub color: [f64; 3],
    pub accent: [f64; 3],
    pub texture_seed: u64,
}

impl ObjectTrack {
    /// Integer-aligned box at frame `t`.
    pub fn bbox(&self, t: usize) -> BBox {
        let cx = self.start.0 + self.velocity.0 * t as f64;
        let cy = self.start.1 + self.velocity.1 * t as f64;
        let x1 = (cx - f64::from(self.width) / 2.0).round();
        let y1 = (cy - f64::from(self.height) / 2.0).round();
        BBox::from_corners(x1, y1, x1 + f64::from(self.width), y1 + f64::from(self.height))
    }
}

fn hash_noise(seed: u64, a: u64, b: u64) -> f64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Static smooth background: bilinear interpolation of a coarse random
/// grid plus faint pixel noise.
fn background(h: usize, w: usize, seed: u64) -> Image {
    const GRID: usize = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f64; 3] = [rng.random_range(0.3..0.5), rng.random_range(0.3..0.5), rng.random_range(0.3..0.5)];
    let ctrl: Vec<f64> = (0..CHANNELS * GRID * GRID).map(|_| rng.random_range(-0.12..0.12)).collect();
    Image::from_fn(h, w, |c, y, x| {
        let gy = y as f64 / (h - 1) as f64 * (GRID - 1) as f64;
        let gx = x as f64 / (w - 1) as f64 * (GRID - 1) as f64;
        let (y0, x0) = ((gy.floor() as usize).min(GRID - 2), (gx.floor() as usize).min(GRID - 2));
        let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
        let at = |yy: usize, xx: usize| ctrl[(c * GRID + yy) * GRID + xx];
        let v = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
            + at(y0, x0 + 1) * (1.0 - fy) * fx
            + at(y0 + 1, x0) * fy * (1.0 - fx)
            + at(y0 + 1, x0 + 1) * fy * fx;
        base[c] + v + 0.04 * (hash_noise(seed, (c * h + y) as u64, x as u64) - 0.5)
    })
}

fn paint(img: &mut Image, obj: &ObjectTrack, b: &BBox) {
    let (x0, y0) = (b.x1 as i64, b.y1 as i64);
    let (w, h) = (obj.width as i64, obj.height as i64);
    for ly in 0..h {
        for lx in 0..w {
            let (y, x) = (y0 + ly, x0 + lx);
            if y < 0 || x < 0 || y >= img.height() as i64 || x >= img.width() as i64 {
                continue;
            }
            let tex = 0.08 * (hash_noise(obj.texture_seed, ly as u64, lx as u64) - 0.5);
            let rgb = if obj.class == VEHICLE {
                let body = [obj.color[0] + tex, obj.color[1] + tex, obj.color[2] + tex];
                let outline = ly == 0 || lx == 0 || ly == h - 1 || lx == w - 1;
                let window = ly >= 2 && ly < 2 + h * 3 / 10 && lx >= 3 && lx < w - 3;
                let bumper = ly >= h - 4 && ly < h - 1 && lx >= 1 && lx < w - 1;
                let light = ly >= h - 8 && ly < h - 4 && (lx >= 2 && lx < 6 || lx >= w - 6 && lx < w - 2);
                let plate = ly >= h - 8 && ly < h - 5 && (lx - w / 2).abs() <= 3;
                if outline {
                    body.map(|v| 0.6 * v)
                } else if window {
                    body.map(|v| 0.7 * v + 0.2)
                } else if bumper {
                    [0.07, 0.07, 0.09]
                } else if light {
                    obj.accent
                } else if plate {
                    [0.88, 0.88, 0.82]
                } else {
                    body
                }
            } else {
                let check = ((ly / 3) + (lx / 3)) % 2 == 0;
                if check {
                    [obj.color[0] + tex, obj.color[1] + tex, obj.color[2] + tex]
                } else {
                    obj.accent
                }
            };
            for (c, v) in rgb.iter().enumerate() {
                img.set(c, y as usize, x as usize, *v);
            }
        }
    }
}

/// Everything needed to render and attack one sequence.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub frames: Vec<Image>,
    pub targets: Vec<BBox>,
    pub distractors: Vec<Vec<BBox>>,
    /// Allowed patch area per frame: the lower half of the target box.
    pub regions: Vec<PixelRect>,
    pub t_start: usize,
    pub t_end: usize,
    pub goal: Goal,
    pub direction: Vec2,
    /// `(Δh, Δw)` satisfying the area bound.
    pub patch_size: (usize, usize),
    pub seed: u64,
}

impl Scenario {
    pub fn attack_direction(&self) -> AttackDirection {
        AttackDirection { v: self.direction, goal: self.goal }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Labelled frame for training or AP evaluation.
    pub fn sample(&self, t: usize) -> TrainSample {
        let mut boxes = vec![(self.targets[t], VEHICLE)];
        boxes.extend(self.distractors[t].iter().map(|b| (*b, DISTRACTOR)));
        TrainSample { image: self.frames[t].clone(), boxes }
    }
}

/// Lower half of an integer-aligned box.
pub fn lower_half(b: &BBox) -> PixelRect {
    let (_, cy) = b.center();
    PixelRect::new(b.x1.round() as i64, cy.round() as i64, b.x2.round() as i64, b.y2.round() as i64)
}

/// Largest patch of half the target width whose area stays within the
/// bound.
pub fn patch_size_for(b: &BBox, ratio: f64) -> (usize, usize) {
    let dw = (b.width() / 2.0).round().max(1.0) as usize;
    let region_h = lower_half(b).height().max(1) as usize;
    let dh = ((ratio * b.area() / dw as f64).floor() as usize).clamp(1, region_h);
    (dh, dw)
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let mut c = [0.0; 3];
    let strong = rng.random_range(0..3);
    for (i, v) in c.iter_mut().enumerate() {
        *v = if i == strong { rng.random_range(0.65..0.85) } else { rng.random_range(0.1..0.35) };
    }
    c
}

fn sample_target(spec: &SceneSpec, goal: Goal, rng: &mut ChaCha8Rng) -> (ObjectTrack, Vec2) {
    let w = rng.random_range(spec.target_width.0..=spec.target_width.1);
    let h = rng.random_range(spec.target_height.0..=spec.target_height.1);
    let wf = f64::from(w);
    let room = (SIDE_MARGIN * wf).ceil() + 1.0;
    let (lo, hi) = (room + wf / 2.0, spec.width as f64 - room - wf / 2.0);
    let (ylo, yhi) = (spec.height as f64 * 0.35, spec.height as f64 * 0.65);
    let last = (spec.frames - 1) as f64;
    loop {
        let speed = rng.random_range(spec.speed.0..=spec.speed.1) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        let vy = if spec.vertical_speed > 0.0 { rng.random_range(-spec.vertical_speed..=spec.vertical_speed) } else { 0.0 };
        let cx0 = rng.random_range(lo..=hi);
        let cy0 = rng.random_range(ylo..=yhi);
        let (cx1, cy1) = (cx0 + speed * last, cy0 + vy * last);
        let inside = |x: f64, y: f64| x >= lo && x <= hi && y >= ylo && y <= yhi;
        // keep the attack window off the image center so the goal fixes a side
        let mid = cx0 + speed * spec.t_start as f64;
        if !inside(cx1, cy1) || (mid - spec.width as f64 / 2.0).abs() < 4.0 {
            continue;
        }
        let obj = ObjectTrack {
            class: VEHICLE,
            width: w,
            height: h,
            start: (cx0, cy0),
            velocity: (speed, vy),
            color: random_color(rng),
            accent: [0.9, 0.12, 0.1],
            texture_seed: rng.random(),
        };
        let toward_center = if mid < spec.width as f64 / 2.0 { 1.0 } else { -1.0 };
        let sign = match goal {
            Goal::MoveIn => toward_center,
            Goal::MoveOut => -toward_center,
        };
        return (obj, Vec2::new(sign * spec.step_fraction * wf, 0.0));
    }
}

fn sample_distractor(spec: &SceneSpec, band: (f64, f64), rng: &mut ChaCha8Rng) -> ObjectTrack {
    let s = rng.random_range(spec.distractor_size.0..=spec.distractor_size.1);
    let t = rng.random_range(spec.distractor_size.0..=spec.distractor_size.1);
    let half = f64::from(s.max(t)) / 2.0 + 1.0;
    let last = (spec.frames - 1) as f64;
    loop {
        let cx0 = rng.random_range(half..spec.width as f64 - half);
        let cy0 = rng.random_range(band.0 + half..band.1 - half);
        let vx = rng.random_range(-1.0..1.0);
        let cx1 = cx0 + vx * last;
        if cx1 < half || cx1 > spec.width as f64 - half {
            continue;
        }
        return ObjectTrack {
            class: DISTRACTOR,
            width: s,
            height: t,
            start: (cx0, cy0),
            velocity: (vx, 0.0),
            color: random_color(rng),
            accent: [0.85, 0.85, 0.3],
            texture_seed: rng.random(),
        };
    }
}

/// Everything random about a scene, drawn up front.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub target: ObjectTrack,
    pub distractors: Vec<ObjectTrack>,
    pub direction: Vec2,
    pub background_seed: u64,
}

pub fn layout(spec: &SceneSpec, goal: Goal, seed: u64) -> Result<SceneLayout> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (target, direction) = sample_target(spec, goal, &mut rng);
    let h = spec.height as f64;
    // bands above and below the target's vertical range
    let top = (0.0, h * 0.35 - f64::from(spec.target_height.1) / 2.0 - 2.0);
    let bottom = (h * 0.65 + f64::from(spec.target_height.1) / 2.0 + 2.0, h);
    let distractors = (0..spec.distractors)
        .map(|i| sample_distractor(spec, if i % 2 == 0 { top } else { bottom }, &mut rng))
        .collect();
    Ok(SceneLayout { target, distractors, direction, background_seed: rng.random() })
}

/// Renders frame `t` of a layout, quantized to 8 bits.
pub fn render(spec: &SceneSpec, lay: &SceneLayout, t: usize) -> Image {
    let mut img = background(spec.height, spec.width, lay.background_seed);
    for d in &lay.distractors {
        paint(&mut img, d, &d.bbox(t));
    }
    paint(&mut img, &lay.target, &lay.target.bbox(t));
    img.quantized8()
}

/// Deterministic scenario from `(spec, goal, seed)`.
pub fn gen_scene(spec: &SceneSpec, goal: Goal, seed: u64) -> Result<Scenario> {
    let lay = layout(spec, goal, seed)?;
    let frames: Vec<Image> = (0..spec.frames).map(|t| render(spec, &lay, t)).collect();
    let targets: Vec<BBox> = (0..spec.frames).map(|t| lay.target.bbox(t)).collect();
    for b in &targets {
        if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > spec.width as f64 || b.y2 > spec.height as f64 {
            return Err(Error::InvalidBox(format!("target {b:?} leaves the frame")));
        }
    }
    let distractors = (0..spec.frames)
        .map(|t| lay.distractors.iter().map(|d| d.bbox(t)).collect())
        .collect();
    let regions = targets.iter().map(lower_half).collect();
    let patch_size = patch_size_for(&targets[0], spec.patch_area_ratio);
    Ok(Scenario {
        frames,
        targets,
        distractors,
        regions,
        t_start: spec.t_start,
        t_end: spec.t_end,
        goal,
        direction: lay.direction,
        patch_size,
        seed,
    })
}

/// The evaluation benchmark: `per_goal` move-in scenarios followed by
/// `per_goal` move-out scenarios.
pub fn benchmark(spec: &SceneSpec, per_goal: usize, seed: u64) -> Result<Vec<Scenario>> {
    let mut out = Vec::with_capacity(2 * per_goal);
    for (g, goal) in [Goal::MoveIn, Goal::MoveOut].into_iter().enumerate() {
        for i in 0..per_goal {
            out.push(gen_scene(spec, goal, seed.wrapping_add(1000 * g as u64 + i as u64))?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub scenes: usize,
    /// Frames drawn per scene (inclusive range).
    pub frames_per_scene: (usize, usize),
    /// Probability that a frame gets a random occluder on the target's
    /// lower half.
    pub occluder_prob: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self { scenes: 100, frames_per_scene: (3, 4), occluder_prob: 0.5, seed: 0x00c0_ffee }
    }
}

/// Pastes a random block over the target's lower half.
fn occlude(img: &mut Image, target: &BBox, rng: &mut ChaCha8Rng) {
    let region = lower_half(target);
    let (rw, rh) = (region.width().max(1), region.height().max(1));
    let w = rng.random_range(3..=(rw * 2 / 3).max(3));
    let h = rng.random_range(2..=rh.max(2));
    let x0 = region.x0 + rng.random_range(0..=(rw - w).max(0));
    let y0 = region.y0 + rng.random_range(0..=(rh - h).max(0));
    let flat = rng.random::<bool>();
    let gray = rng.random_range(0.2..0.8);
    for y in y0..(y0 + h).min(img.height() as i64) {
        for x in x0..(x0 + w).min(img.width() as i64) {
            for c in 0..CHANNELS {
                let v = if flat { gray } else { rng.random() };
                img.set(c, y as usize, x as usize, v);
            }
        }
    }
}

/// Labelled training frames from independent scenes of both goals.
pub fn training_corpus(spec: &SceneSpec, cs: &CorpusSpec) -> Result<Vec<TrainSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cs.seed);
    let mut out = Vec::new();
    for i in 0..cs.scenes {
        let goal = if i % 2 == 0 { Goal::MoveIn } else { Goal::MoveOut };
        let lay = layout(spec, goal, cs.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (0xc0de_0000 + i as u64))?;
        let n = rng.random_range(cs.frames_per_scene.0..=cs.frames_per_scene.1);
        for _ in 0..n {
            let t = rng.random_range(0..spec.frames);
            let mut image = render(spec, &lay, t);
            let target = lay.target.bbox(t);
            if rng.random::<f64>() < cs.occluder_prob {
                occlude(&mut image, &target, &mut rng);
                image = image.quantized8();
            }
            let mut boxes = vec![(target, VEHICLE)];
            boxes.extend(lay.distractors.iter().map(|d| (d.bbox(t), DISTRACTOR)));
            out.push(TrainSample { image, boxes });
        }
    }
    Ok(out)
}

/// On-disk scenario: frames as PPM files beside the JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub frames: Vec<String>,
    pub targets: Vec<BBox>,
    pub distractors: Vec<Vec<BBox>>,
    pub regions: Vec<PixelRect>,
    pub t_start: usize,
    pub t_end: usize,
    pub goal: Goal,
    pub direction: Vec2,
    pub patch_size: (usize, usize),
    pub seed: u64,
}

/// Writes `dir/<stem>.json` and `dir/<stem>_fNN.ppm`.
pub fn save_scenario(dir: &Path, stem: &str, sc: &Scenario) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut names = Vec::with_capacity(sc.frames.len());
    for (t, f) in sc.frames.iter().enumerate() {
        let name = format!("{stem}_f{t:02}.ppm");
        write_image(&dir.join(&name), f)?;
        names.push(name);
    }
    let file = ScenarioFile {
        frames: names,
        targets: sc.targets.clone(),
        distractors: sc.distractors.clone(),
        regions: sc.regions.clone(),
        t_start: sc.t_start,
        t_end: sc.t_end,
        goal: sc.goal,
        direction: sc.direction,
        patch_size: sc.patch_size,
        seed: sc.seed,
    };
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&file)?)?;
    Ok(())
}

/// Loads a scenario JSON; frame paths are relative to its directory.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let file: ScenarioFile = serde_json::from_slice(&fs::read(path)?)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let frames = file.frames.iter().map(|f| read_image(&dir.join(f))).collect::<Result<Vec<_>>>()?;
    let n = frames.len();
    if file.targets.len() != n || file.distractors.len() != n || file.regions.len() != n {
        return Err(Error::Format("scenario arrays disagree on the frame count".into()));
    }
    if !(file.t_start <= file.t_end && file.t_end < n) {
        return Err(Error::Format("attack window outside the sequence".into()));
    }
    Ok(Scenario {
        frames,
        targets: file.targets,
        distractors: file.distractors,
        regions: file.regions,
        t_start: file.t_start,
        t_end: file.t_end,
        goal: file.goal,
        direction: file.direction,
        patch_size: file.patch_size,
        seed: file.seed,
    })
}
