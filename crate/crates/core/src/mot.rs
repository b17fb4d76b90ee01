//! Tracking by detection: constant-velocity Kalman trackers, IOU-gated
//! Hungarian association and the confirm/retain lifecycle.

use std::io::Write;

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

type Vec8 = SVector<f64, 8>;
type Mat8 = SMatrix<f64, 8, 8>;
type Mat4 = SMatrix<f64, 4, 4>;
type Mat48 = SMatrix<f64, 4, 8>;

const INITIAL_POS_VAR: f64 = 10.0;
const INITIAL_VEL_VAR: f64 = 1e4;
const PROCESS_POS_VAR: f64 = 1.0;
const PROCESS_VEL_VAR: f64 = 0.01;
/// Cost of an inadmissible pair in the assignment matrix.
const BLOCKED: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotConfig {
    /// Association gate: pairs with IOU at or below it never match.
    pub t_iou: f64,
    /// Consecutive hits needed to confirm a tracker.
    pub confirm_hits: u32,
    /// Misses tolerated before deletion.
    pub max_misses: u32,
    /// Measurement-noise scale.
    pub cov: f64,
}

impl Default for MotConfig {
    fn default() -> Self {
        Self { t_iou: 0.3, confirm_hits: 3, max_misses: 2, cov: 1.0 }
    }
}

impl MotConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_iou > 0.0 && self.t_iou < 1.0) {
            return Err(Error::InvalidParameter(format!("t_iou {} not in (0,1)", self.t_iou)));
        }
        if self.confirm_hits == 0 {
            return Err(Error::InvalidParameter("confirm_hits must be >= 1".into()));
        }
        if !(self.cov.is_finite() && self.cov > 0.0) {
            return Err(Error::InvalidParameter(format!("cov {} must be > 0", self.cov)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrackStatus {
    Tentative,
    Confirmed,
    Deleted,
}

impl TrackStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrackStatus::Tentative => "tentative",
            TrackStatus::Confirmed => "confirmed",
            TrackStatus::Deleted => "deleted",
        }
    }
}

/// Kalman state `(cx, cy, w, h, v_cx, v_cy, v_w, v_h)` with lifecycle
/// counters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    pub id: u64,
    pub mean: Vec8,
    pub covariance: Mat8,
    pub hits: u32,
    pub time_since_update: u32,
    pub status: TrackStatus,
}

fn transition() -> Mat8 {
    let mut f = Mat8::identity();
    for i in 0..4 {
        f[(i, i + 4)] = 1.0;
    }
    f
}

fn observation() -> Mat48 {
    let mut h = Mat48::zeros();
    for i in 0..4 {
        h[(i, i)] = 1.0;
    }
    h
}

fn process_noise() -> Mat8 {
    let mut q = Mat8::zeros();
    for i in 0..4 {
        q[(i, i)] = PROCESS_POS_VAR;
        q[(i + 4, i + 4)] = PROCESS_VEL_VAR;
    }
    q
}

fn measurement(b: &BBox) -> SVector<f64, 4> {
    let (cx, cy) = b.center();
    SVector::<f64, 4>::new(cx, cy, b.width(), b.height())
}

impl TrackerState {
    /// New tentative tracker at `b` with zero velocity; the spawning
    /// detection counts as its first hit.
    pub fn new(id: u64, b: &BBox) -> Self {
        let z = measurement(b);
        let mut mean = Vec8::zeros();
        mean.fixed_rows_mut::<4>(0).copy_from(&z);
        let mut covariance = Mat8::zeros();
        for i in 0..4 {
            covariance[(i, i)] = INITIAL_POS_VAR;
            covariance[(i + 4, i + 4)] = INITIAL_VEL_VAR;
        }
        Self { id, mean, covariance, hits: 1, time_since_update: 0, status: TrackStatus::Tentative }
    }

    pub fn bbox(&self) -> BBox {
        BBox::from_center(self.mean[0], self.mean[1], self.mean[2], self.mean[3])
    }

    pub fn velocity(&self) -> (f64, f64) {
        (self.mean[4], self.mean[5])
    }

    /// Box the next time update would produce, without mutating.
    pub fn predicted_bbox(&self) -> BBox {
        let m = transition() * self.mean;
        BBox::from_center(m[0], m[1], m[2], m[3])
    }

    /// Constant-velocity time update.
    pub fn predict(&mut self) -> BBox {
        let f = transition();
        self.mean = f * self.mean;
        self.covariance = f * self.covariance * f.transpose() + process_noise();
        self.bbox()
    }

    /// Measurement update (Joseph form) with noise `cov * I`.
    pub fn update(&mut self, b: &BBox, cov: f64) {
        let h = observation();
        let r = Mat4::identity() * cov;
        let s = h * self.covariance * h.transpose() + r;
        let s_inv = s.try_inverse().expect("innovation covariance is positive definite");
        let k = self.covariance * h.transpose() * s_inv;
        self.mean += k * (measurement(b) - h * self.mean);
        let ikh = Mat8::identity() - k * h;
        let p = ikh * self.covariance * ikh.transpose() + k * r * k.transpose();
        self.covariance = (p + p.transpose()) * 0.5;
    }
}

/// Minimum-cost assignment of rows to columns (Kuhn–Munkres with
/// potentials). Returns the column of each row, `None` for rows left over
/// when there are more rows than columns.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let n_rows = cost.len();
    let n_cols = cost.first().map_or(0, |r| r.len());
    if n_rows == 0 || n_cols == 0 {
        return vec![None; n_rows];
    }
    let transposed = n_rows > n_cols;
    let (n, m) = if transposed { (n_cols, n_rows) } else { (n_rows, n_cols) };
    let a = |i: usize, j: usize| if transposed { cost[j][i] } else { cost[i][j] };

    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; n_rows];
    for j in 1..=m {
        if p[j] != 0 {
            let (r, c) = if transposed { (j - 1, p[j] - 1) } else { (p[j] - 1, j - 1) };
            out[r] = Some(c);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Association {
    /// `(tracker index, detection index)`, sorted by tracker index.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_trackers: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

/// Optimal IOU assignment; pairs with IOU `<= t_iou` are inadmissible.
pub fn associate(predicted: &[BBox], detections: &[BBox], t_iou: f64) -> Association {
    let cost: Vec<Vec<f64>> = predicted
        .iter()
        .map(|p| {
            detections
                .iter()
                .map(|d| {
                    let v = iou(p, d);
                    if v > t_iou {
                        1.0 - v
                    } else {
                        BLOCKED
                    }
                })
                .collect()
        })
        .collect();
    let assignment = hungarian(&cost);
    let mut out = Association::default();
    let mut det_used = vec![false; detections.len()];
    for (t, a) in assignment.into_iter().enumerate() {
        match a {
            Some(d) if cost[t][d] < BLOCKED => {
                out.matches.push((t, d));
                det_used[d] = true;
            }
            _ => out.unmatched_trackers.push(t),
        }
    }
    out.unmatched_detections = (0..detections.len()).filter(|&d| !det_used[d]).collect();
    out
}

/// What happened in one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MotFrameResult {
    pub frame: usize,
    /// `(track id, predicted box)` of every live tracker before association.
    pub predicted: Vec<(u64, BBox)>,
    /// `(track id, detection index)`.
    pub matches: Vec<(u64, usize)>,
    pub new_ids: Vec<u64>,
    pub deleted_ids: Vec<u64>,
    pub log: Vec<TrackLogRow>,
}

impl MotFrameResult {
    pub fn matched_track(&self, detection: usize) -> Option<u64> {
        self.matches.iter().find(|(_, d)| *d == detection).map(|(id, _)| *id)
    }
}

/// One CSV row of the track log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackLogRow {
    pub frame: usize,
    pub track_id: u64,
    pub status: TrackStatus,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub v_cx: f64,
    pub v_cy: f64,
    /// Matched or spawning detection index, −1 when unmatched.
    pub detection: i64,
}

/// The tracker set of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Mot {
    pub config: MotConfig,
    pub trackers: Vec<TrackerState>,
    next_id: u64,
    frame: usize,
}

impl Mot {
    pub fn new(config: MotConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, trackers: Vec::new(), next_id: 1, frame: 0 })
    }

    pub fn frame(&self) -> usize {
        self.frame
    }

    pub fn live(&self) -> impl Iterator<Item = &TrackerState> {
        self.trackers.iter().filter(|t| t.status != TrackStatus::Deleted)
    }

    pub fn tracker(&self, id: u64) -> Option<&TrackerState> {
        self.trackers.iter().find(|t| t.id == id)
    }

    /// Advances one frame with post-NMS detections `(box, confidence)`.
    pub fn step(&mut self, detections: &[(BBox, f64)]) -> MotFrameResult {
        let frame = self.frame;
        self.frame += 1;
        self.trackers.retain(|t| t.status != TrackStatus::Deleted);

        let mut result = MotFrameResult { frame, ..MotFrameResult::default() };
        let predicted: Vec<BBox> = self.trackers.iter_mut().map(TrackerState::predict).collect();
        result.predicted = self.trackers.iter().map(|t| t.id).zip(predicted.iter().copied()).collect();
        let boxes: Vec<BBox> = detections.iter().map(|d| d.0).collect();
        let assoc = associate(&predicted, &boxes, self.config.t_iou);

        let mut matched_det = vec![-1i64; self.trackers.len()];
        for &(t, d) in &assoc.matches {
            let tr = &mut self.trackers[t];
            tr.update(&boxes[d], self.config.cov);
            tr.hits += 1;
            tr.time_since_update = 0;
            if tr.status == TrackStatus::Tentative && tr.hits >= self.config.confirm_hits {
                tr.status = TrackStatus::Confirmed;
            }
            matched_det[t] = d as i64;
            result.matches.push((tr.id, d));
        }
        for &t in &assoc.unmatched_trackers {
            let tr = &mut self.trackers[t];
            tr.hits = 0;
            tr.time_since_update += 1;
            if tr.time_since_update > self.config.max_misses {
                tr.status = TrackStatus::Deleted;
                result.deleted_ids.push(tr.id);
            }
        }
        for &d in &assoc.unmatched_detections {
            let mut tr = TrackerState::new(self.next_id, &boxes[d]);
            if tr.hits >= self.config.confirm_hits {
                tr.status = TrackStatus::Confirmed;
            }
            result.new_ids.push(tr.id);
            self.next_id += 1;
            self.trackers.push(tr);
            matched_det.push(d as i64);
        }
        result.log = self
            .trackers
            .iter()
            .zip(&matched_det)
            .map(|(t, &d)| TrackLogRow {
                frame,
                track_id: t.id,
                status: t.status,
                cx: t.mean[0],
                cy: t.mean[1],
                w: t.mean[2],
                h: t.mean[3],
                v_cx: t.mean[4],
                v_cy: t.mean[5],
                detection: d,
            })
            .collect();
        result
    }
}

/// Writes track-log rows as CSV with a header.
pub fn write_track_log<W: Write>(out: W, rows: &[TrackLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["frame", "track_id", "status", "cx", "cy", "w", "h", "v_cx", "v_cy", "detection"])?;
    for r in rows {
        w.write_record([
            r.frame.to_string(),
            r.track_id.to_string(),
            r.status.as_str().to_string(),
            format!("{:.6}", r.cx),
            format!("{:.6}", r.cy),
            format!("{:.6}", r.w),
            format!("{:.6}", r.h),
            format!("{:.6}", r.v_cx),
            format!("{:.6}", r.v_cy),
            r.detection.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a CSV written by [`write_track_log`].
pub fn read_track_log(data: &[u8]) -> Result<Vec<TrackLogRow>> {
    let mut r = csv::Reader::from_reader(data);
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).ok_or_else(|| Error::Format(format!("track log row missing column {i}")));
        let num = |i: usize| -> Result<f64> {
            field(i)?.parse().map_err(|_| Error::Format(format!("bad number in column {i}")))
        };
        let status = match field(2)? {
            "tentative" => TrackStatus::Tentative,
            "confirmed" => TrackStatus::Confirmed,
            "deleted" => TrackStatus::Deleted,
            s => return Err(Error::Format(format!("unknown status {s}"))),
        };
        rows.push(TrackLogRow {
            frame: field(0)?.parse().map_err(|_| Error::Format("bad frame".into()))?,
            track_id: field(1)?.parse().map_err(|_| Error::Format("bad track id".into()))?,
            status,
            cx: num(3)?,
            cy: num(4)?,
            w: num(5)?,
            h: num(6)?,
            v_cx: num(7)?,
            v_cy: num(8)?,
            detection: field(9)?.parse().map_err(|_| Error::Format("bad detection index".into()))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn predict_examples() {
        let mut t = TrackerState::new(1, &BBox::from_center(50.0, 50.0, 10.0, 10.0));
        t.mean[4] = 5.0;
        let trace0 = t.covariance.trace();
        let p = t.predict();
        assert_eq!(p.center(), (55.0, 50.0));
        assert!(t.covariance.trace() > trace0);
        let mut s = TrackerState::new(2, &b(0.0, 0.0, 10.0, 20.0));
        assert_eq!(s.predict(), b(0.0, 0.0, 10.0, 20.0));
    }

    #[test]
    fn association_examples() {
        // IOU 0.6 requires overlap: two 10-wide boxes offset by 2.5 give 7.5/12.5 = 0.6
        let a = b(0.0, 0.0, 10.0, 10.0);
        let c = b(2.5, 0.0, 12.5, 10.0);
        assert!((iou(&a, &c) - 0.6).abs() < 1e-12);
        assert_eq!(associate(&[a], &[c], 0.3).matches, vec![(0, 0)]);
        let far = b(7.0, 0.0, 17.0, 10.0);
        assert!(iou(&a, &far) < 0.3);
        let r = associate(&[a], &[far], 0.3);
        assert!(r.matches.is_empty());
        assert_eq!((r.unmatched_trackers, r.unmatched_detections), (vec![0], vec![0]));
        assert!(associate(&[], &[a], 0.3).matches.is_empty());
    }

    #[test]
    fn hungarian_prefers_diagonal() {
        let cost = vec![vec![0.1, 0.6], vec![0.6, 0.1]];
        assert_eq!(hungarian(&cost), vec![Some(0), Some(1)]);
        let rect = vec![vec![0.5], vec![0.2], vec![0.9]];
        assert_eq!(hungarian(&rect), vec![None, Some(0), None]);
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    /// Exhaustive best admissible assignment: maximize the number of
    /// admissible pairs, then minimize Σ(1 − IOU).
    fn exhaustive(m: &[Vec<f64>], gate: f64) -> (usize, f64) {
        let n = m.len();
        let mut best = (0usize, 0.0f64);
        for perm in permutations(n) {
            let (mut cnt, mut cost) = (0, 0.0);
            for (i, &j) in perm.iter().enumerate() {
                if m[i][j] > gate {
                    cnt += 1;
                    cost += 1.0 - m[i][j];
                }
            }
            if cnt > best.0 || (cnt == best.0 && cost < best.1) {
                best = (cnt, cost);
            }
        }
        best
    }

    #[test]
    fn association_matches_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for n in [2usize, 3] {
            for _ in 0..500 {
                let trk: Vec<BBox> = (0..n).map(|_| {
                    let (x, y) = (rng.random_range(0.0..30.0), rng.random_range(0.0..30.0));
                    b(x, y, x + 12.0, y + 10.0)
                }).collect();
                let det: Vec<BBox> = (0..n).map(|_| {
                    let (x, y) = (rng.random_range(0.0..30.0), rng.random_range(0.0..30.0));
                    b(x, y, x + 12.0, y + 10.0)
                }).collect();
                let m: Vec<Vec<f64>> = trk.iter().map(|t| det.iter().map(|d| iou(t, d)).collect()).collect();
                let got = associate(&trk, &det, 0.3);
                let cost: f64 = got.matches.iter().map(|&(t, d)| 1.0 - m[t][d]).sum();
                let (cnt, best) = exhaustive(&m, 0.3);
                assert_eq!(got.matches.len(), cnt);
                assert!((cost - best).abs() < 1e-9, "{m:?}");
            }
        }
        let diag = [b(0.0, 0.0, 10.0, 10.0), b(50.0, 0.0, 60.0, 10.0)];
        let dets = [b(0.5, 0.0, 10.5, 10.0), b(49.0, 0.0, 59.0, 10.0)];
        assert_eq!(associate(&diag, &dets, 0.3).matches, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn confirmation_and_deletion() {
        let cfg = MotConfig::default();
        let mut mot = Mot::new(cfg).unwrap();
        let d = [(b(10.0, 10.0, 30.0, 25.0), 0.9)];
        let r1 = mot.step(&d);
        assert_eq!(r1.new_ids, vec![1]);
        assert_eq!(mot.tracker(1).unwrap().status, TrackStatus::Tentative);
        mot.step(&d);
        assert_eq!(mot.tracker(1).unwrap().status, TrackStatus::Tentative);
        mot.step(&d);
        assert_eq!(mot.tracker(1).unwrap().status, TrackStatus::Confirmed);
        for _ in 0..cfg.max_misses {
            let r = mot.step(&[]);
            assert!(r.deleted_ids.is_empty());
        }
        let r = mot.step(&[]);
        assert_eq!(r.deleted_ids, vec![1]);
        let r = mot.step(&d);
        assert_eq!(r.new_ids, vec![2]);
    }

    #[test]
    fn velocity_converges_on_constant_motion() {
        let mut mot = Mot::new(MotConfig::default()).unwrap();
        for k in 0..10 {
            let x = 10.0 + 10.0 * k as f64;
            mot.step(&[(b(x, 40.0, x + 30.0, 60.0), 0.9)]);
        }
        let t = mot.tracker(1).expect("single track");
        assert!((8.0..=12.0).contains(&t.velocity().0), "{:?}", t.velocity());
    }

    #[test]
    fn larger_measurement_noise_moves_less() {
        let start = BBox::from_center(50.0, 50.0, 20.0, 20.0);
        let meas = BBox::from_center(60.0, 50.0, 20.0, 20.0);
        let moved = |cov: f64| {
            let mut t = TrackerState::new(1, &start);
            t.predict();
            t.update(&meas, cov);
            t.mean[0] - 50.0
        };
        assert!(moved(0.1) > moved(1.0));
        assert!(moved(1.0) > moved(10.0));
        assert!(moved(10.0) > 0.0);
    }

    #[test]
    fn step_is_deterministic_and_log_round_trips() {
        let dets = [(b(10.0, 10.0, 30.0, 25.0), 0.9), (b(70.0, 10.0, 90.0, 30.0), 0.8)];
        let mut a = Mot::new(MotConfig::default()).unwrap();
        let mut c = a.clone();
        let mut rows = Vec::new();
        for _ in 0..4 {
            let ra = a.step(&dets);
            assert_eq!(ra, c.step(&dets));
            rows.extend(ra.log);
        }
        let mut buf = Vec::new();
        write_track_log(&mut buf, &rows).unwrap();
        let back = read_track_log(&buf).unwrap();
        assert_eq!(back.len(), rows.len());
        for (x, y) in back.iter().zip(&rows) {
            assert_eq!((x.frame, x.track_id, x.status, x.detection), (y.frame, y.track_id, y.status, y.detection));
            assert!((x.cx - y.cx).abs() < 1e-6);
        }
    }

    #[test]
    fn covariance_stays_symmetric_psd() {
        let mut t = TrackerState::new(1, &b(0.0, 0.0, 20.0, 10.0));
        for k in 0..30 {
            t.predict();
            t.update(&b(k as f64, 0.0, 20.0 + k as f64, 10.0), 1.0);
        }
        let p = t.covariance;
        assert!((p - p.transpose()).amax() < 1e-9);
        assert!(p.symmetric_eigenvalues().iter().all(|e| *e >= -1e-9));
    }

    /// Reference lifecycle automaton driven by a match/miss sequence.
    fn model(seq: &[bool], cfg: &MotConfig) -> Vec<TrackStatus> {
        let (mut hits, mut misses, mut status) = (1u32, 0u32, TrackStatus::Tentative);
        let mut out = vec![if hits >= cfg.confirm_hits { TrackStatus::Confirmed } else { status }];
        if out[0] == TrackStatus::Confirmed {
            status = TrackStatus::Confirmed;
        }
        for &hit in seq {
            if status == TrackStatus::Deleted {
                break;
            }
            if hit {
                hits += 1;
                misses = 0;
                if status == TrackStatus::Tentative && hits >= cfg.confirm_hits {
                    status = TrackStatus::Confirmed;
                }
            } else {
                hits = 0;
                misses += 1;
                if misses > cfg.max_misses {
                    status = TrackStatus::Deleted;
                }
            }
            out.push(status);
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]
        #[test]
        fn lifecycle_follows_the_automaton(
            seq in prop::collection::vec(any::<bool>(), 1..30),
            h in 1u32..5,
            r in 0u32..4,
        ) {
            let cfg = MotConfig { confirm_hits: h, max_misses: r, ..MotConfig::default() };
            let mut mot = Mot::new(cfg).unwrap();
            let d = [(b(10.0, 10.0, 30.0, 25.0), 0.9)];
            let mut got = vec![{ mot.step(&d); mot.tracker(1).unwrap().status }];
            for &hit in &seq {
                let before = mot.tracker(1).map(|t| t.status);
                if before.is_none() {
                    break;
                }
                let res = mot.step(if hit { &d[..] } else { &[] });
                let s = res.log.iter().find(|row| row.track_id == 1).map(|row| row.status).unwrap();
                got.push(s);
                if s == TrackStatus::Deleted {
                    break;
                }
            }
            let want = model(&seq, &cfg);
            prop_assert_eq!(&got[..], &want[..got.len()]);
            for w in got.windows(2) {
                let ok = matches!(
                    (w[0], w[1]),
                    (TrackStatus::Tentative, _) | (TrackStatus::Confirmed, TrackStatus::Confirmed) | (TrackStatus::Confirmed, TrackStatus::Deleted)
                );
                prop_assert!(ok);
            }
        }
    }
}
