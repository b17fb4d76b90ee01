//! Acceptance run over the whole pipeline. Prints one PASS/FAIL line per
//! criterion and exits non-zero if any criterion fails.
//!
//! The trained detector is cached under the cargo target tmpdir, keyed by
//! the hash of every setting that influences training.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trackhijack::attackopt::Optimizer;
use trackhijack::detector::{load_weights, save_weights, train, Detector, GradCheckOptions};
use trackhijack::geometry::{iou, BBox, Vec2};
use trackhijack::harness::{
    benchmark, config_hash, defense_eval, evaluate, evaluate_plans, generate_plan, gradient_suite, max_capability_on,
    clean_detections, par_map, run_benign, training_corpus, AttackPlan, Generated, LocationStrategy, PlanConfig,
    RunOptions, Scenario, VEHICLE,
};
use trackhijack::imaging::{DefenseKind, Mask};
use trackhijack::losses::LossHyper;
use trackhijack::mot::{associate, Mot, MotConfig, TrackStatus};
use trackhijack::stage1::{location_stability, window_scores, Stage1Config, StabilityFrame};
use trackhijack::targeting::{default_step_cap, find_target_bbox, TargetMode};
use trackhijack_cli::{run_cli, RunConfig};

const SEEDS: [u64; 3] = [1, 2, 3];
const ETAS: [f64; 3] = [0.1, 1.0, 10.0];

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

type Check = Result<Verdict, String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Default configuration with `seed` pushed into every component, as the
/// CLI does.
fn seeded(seed: u64) -> RunConfig {
    let mut cfg = RunConfig { seed, jobs: jobs(), ..RunConfig::default() };
    cfg.propagate_seed();
    cfg
}

fn cache_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

/// Trains the default detector (seed 0) or loads it from the cache.
fn trained_detector() -> Result<(Detector, f64, bool), String> {
    let cfg = seeded(0);
    let key = config_hash(&(&cfg.scene, &cfg.corpus, &cfg.detector, &cfg.train)).map_err(err)?;
    let path = cache_dir().join(format!("weights-{}.bin", &key[..16]));
    let corpus = training_corpus(&cfg.scene, &cfg.corpus).map_err(err)?;
    let (det, cached) = if path.exists() {
        let (dc, w) = load_weights(&path).map_err(err)?;
        (Detector::new(dc, w).map_err(err)?, true)
    } else {
        let report = train(&corpus, &cfg.detector, &cfg.train).map_err(err)?;
        fs::create_dir_all(cache_dir()).map_err(err)?;
        save_weights(&path, &cfg.detector, &report.weights).map_err(err)?;
        (Detector::new(cfg.detector.clone(), report.weights).map_err(err)?, false)
    };
    let ap = det.average_precision(&corpus, VEHICLE, 0.5).map_err(err)?;
    Ok((det, ap, cached))
}

// 1 ---------------------------------------------------------------------

fn gradient_fidelity(det: &Detector, bench: &[Scenario]) -> Check {
    let start = Instant::now();
    let opts = GradCheckOptions { n_pixels: 64, eps: 1e-3, tol: 1e-3, seed: 1, ..GradCheckOptions::default() };
    let mut worst: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut pass = true;
    // one frame per goal
    for sc in [&bench[0], &bench[bench.len() - 1]] {
        for row in gradient_suite(det, sc, sc.t_start, &LossHyper::default(), &opts).map_err(err)? {
            pass &= row.report.pass && row.report.checked >= 64;
            let e = worst.entry(row.loss.clone()).or_insert((0.0, usize::MAX));
            e.0 = e.0.max(row.report.max_rel_err);
            e.1 = e.1.min(row.report.checked);
        }
    }
    let elapsed = start.elapsed();
    pass &= elapsed <= Duration::from_secs(120);
    let rows: Vec<String> = worst.iter().map(|(k, (e, n))| format!("{k} {e:.1e} (n={n})")).collect();
    Ok(Verdict::new(pass, format!("max rel err {}; {:.1}s", rows.join(", "), elapsed.as_secs_f64())))
}

// 2 ---------------------------------------------------------------------

fn target_search_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa1);
    let (mut mismatches, mut bad_cert) = (0, 0);
    for _ in 0..1000 {
        let (x, y) = (rng.random_range(0.0..110.0), rng.random_range(0.0..110.0));
        let (w, h) = (rng.random_range(4.0..70.0), rng.random_range(4.0..70.0));
        let bo = BBox::new(x, y, x + w, y + h).map_err(err)?;
        let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let mag = rng.random_range(0.25..10.0);
        let v = Vec2::new(mag * theta.cos(), mag * theta.sin());
        let t = rng.random_range(0.05..0.95);
        let cap = default_step_cap(128, 128, v);
        let got = find_target_bbox(&bo, v, t, TargetMode::LastAboveThreshold, cap).map_err(err)?;
        // largest k whose shifted copy still overlaps above the threshold
        let mut best = 0;
        for k in 0..=cap {
            let s = BBox::new(bo.x1 + k as f64 * v.dx, bo.y1 + k as f64 * v.dy, bo.x2 + k as f64 * v.dx, bo.y2 + k as f64 * v.dy)
                .map_err(err)?;
            if iou(&s, &bo) > t {
                best = k;
            }
        }
        let expect = bo.shifted(v, best as u32);
        mismatches += usize::from(got != expect);
        bad_cert += usize::from(!(iou(&got, &bo) > t && iou(&got.translated(v.dx, v.dy), &bo) <= t));
    }
    Ok(Verdict::new(mismatches == 0 && bad_cert == 0, format!("1000 instances: {mismatches} mismatches, {bad_cert} certificate failures")))
}

// 3 ---------------------------------------------------------------------

fn window_score_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (h, w) = (rng.random_range(2..48), rng.random_range(2..48));
        let (dh, dw) = (rng.random_range(1..=h), rng.random_range(1..=w));
        let mut m = Mask::filled(h, w, 0.0);
        for v in m.data.iter_mut() {
            *v = rng.random();
        }
        let fast = window_scores(&m, dh, dw).map_err(err)?;
        if (fast.rows, fast.cols) != (h - dh + 1, w - dw + 1) {
            return Ok(Verdict::new(false, format!("score map {}x{} for {h}x{w} and {dh}x{dw}", fast.rows, fast.cols)));
        }
        let wgt = 1.0 / (dh * dw) as f64;
        for i in 0..fast.rows {
            for j in 0..fast.cols {
                let mut s = 0.0;
                for a in 0..dh {
                    for b in 0..dw {
                        s += wgt * m.get(i + a, j + b);
                    }
                }
                worst = worst.max((s - fast.get(i, j)).abs());
            }
        }
    }
    Ok(Verdict::new(worst <= 1e-12, format!("100 masks, max |diff| {worst:.2e}")))
}

// 4 ---------------------------------------------------------------------

/// Expected lifecycle of a single, static object seen or missed per frame.
fn lifecycle_mismatch(seq: &[bool], h: u32, r: u32) -> Result<Option<String>, String> {
    let cfg = MotConfig { confirm_hits: h, max_misses: r, ..MotConfig::default() };
    let mut mot = Mot::new(cfg).map_err(err)?;
    let b = BBox::new(40.0, 40.0, 70.0, 62.0).map_err(err)?;
    // (id, consecutive hits, consecutive misses, confirmed)
    let mut model: Option<(u64, u32, u32, bool)> = None;
    let mut next_id = 1;
    for (t, &seen) in seq.iter().enumerate() {
        let dets: Vec<(BBox, f64)> = if seen { vec![(b, 0.9)] } else { vec![] };
        let res = mot.step(&dets);
        let expected_status;
        match (seen, model.as_mut()) {
            (true, None) => {
                model = Some((next_id, 1, 0, h <= 1));
                next_id += 1;
            }
            (true, Some(m)) => {
                m.1 += 1;
                m.2 = 0;
                m.3 |= m.1 >= h;
            }
            (false, Some(m)) => {
                m.1 = 0;
                m.2 += 1;
            }
            (false, None) => {}
        }
        let deleted_now = matches!(model, Some((_, _, miss, _)) if miss > r);
        match model {
            None => {
                if !res.log.is_empty() {
                    return Ok(Some(format!("frame {t}: expected no tracker, log {:?}", res.log)));
                }
                continue;
            }
            Some((id, _, _, confirmed)) => {
                expected_status = if deleted_now {
                    TrackStatus::Deleted
                } else if confirmed {
                    TrackStatus::Confirmed
                } else {
                    TrackStatus::Tentative
                };
                let rows: Vec<_> = res.log.iter().filter(|row| row.track_id == id).collect();
                if rows.len() != 1 || rows[0].status != expected_status || res.log.len() != 1 {
                    return Ok(Some(format!("frame {t} (H={h}, R={r}): expected {expected_status:?} for id {id}, log {:?}", res.log)));
                }
            }
        }
        if deleted_now {
            model = None;
        }
    }
    Ok(None)
}

/// Minimum total cost over every injective assignment of an `n × n`
/// instance, with the matcher's own admissibility rule.
fn exhaustive_assignment(pred: &[BBox], dets: &[BBox], t: f64) -> (usize, f64) {
    fn perms(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in perms(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }
    let mut best = (0usize, f64::INFINITY);
    for p in perms(pred.len()) {
        let (mut count, mut cost) = (0, 0.0);
        for (i, &j) in p.iter().enumerate() {
            let v = iou(&pred[i], &dets[j]);
            if v > t {
                count += 1;
                cost += 1.0 - v;
            }
        }
        if count > best.0 || (count == best.0 && cost < best.1) {
            best = (count, cost);
        }
    }
    best
}

fn mot_lifecycle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa4);
    for _ in 0..10_000 {
        let h = rng.random_range(1..=5);
        let r = rng.random_range(0..=4);
        let p_seen = rng.random_range(0.2..0.95);
        let len = rng.random_range(1..=30);
        let seq: Vec<bool> = (0..len).map(|_| rng.random_bool(p_seen)).collect();
        if let Some(m) = lifecycle_mismatch(&seq, h, r)? {
            return Ok(Verdict::new(false, m));
        }
    }
    let mut bad = 0;
    let mut instances = 0;
    for n in [2usize, 3] {
        for _ in 0..1000 {
            let mk = |rng: &mut ChaCha8Rng| {
                let (x, y) = (rng.random_range(0.0..40.0), rng.random_range(0.0..40.0));
                let (w, hh) = (rng.random_range(8.0..30.0), rng.random_range(8.0..30.0));
                BBox::new(x, y, x + w, y + hh).unwrap()
            };
            let pred: Vec<BBox> = (0..n).map(|_| mk(&mut rng)).collect();
            let dets: Vec<BBox> = (0..n).map(|_| mk(&mut rng)).collect();
            let t = rng.random_range(0.05..0.5);
            let a = associate(&pred, &dets, t);
            let cost: f64 = a.matches.iter().map(|&(i, j)| 1.0 - iou(&pred[i], &dets[j])).sum();
            let admissible = a.matches.iter().all(|&(i, j)| iou(&pred[i], &dets[j]) > t);
            let (count, best) = exhaustive_assignment(&pred, &dets, t);
            instances += 1;
            if !admissible || a.matches.len() != count || (cost - best).abs() > 1e-9 {
                bad += 1;
            }
        }
    }
    Ok(Verdict::new(bad == 0, format!("10000 lifecycle sequences agree; association {bad}/{instances} mismatches on 2x2 and 3x3")))
}

// 5 ---------------------------------------------------------------------

fn max_capability_ceiling(det: &Detector, bench: &[Scenario]) -> Check {
    let start = Instant::now();
    let clean = par_map(bench, jobs(), |sc| clean_detections(sc, det, &DefenseKind::Identity)).map_err(err)?;
    let mut parts = Vec::new();
    let mut pass = true;
    for cov in [0.1, 1.0, 10.0] {
        let mot = MotConfig { cov, ..MotConfig::default() };
        let mut ok = 0;
        let mut worst_k = 0;
        for (sc, c) in bench.iter().zip(&clean) {
            let mut found = None;
            for k in 1..=4 {
                if max_capability_on(sc, c, &sc.attack_direction(), &mot, k, &RunOptions::default()).map_err(err)?.success {
                    found = Some(k);
                    break;
                }
            }
            if let Some(k) = found {
                ok += 1;
                worst_k = worst_k.max(k);
            }
        }
        pass &= ok == bench.len();
        parts.push(format!("cov {cov}: {ok}/{} (k<={worst_k})", bench.len()));
    }
    let elapsed = start.elapsed();
    pass &= elapsed <= Duration::from_secs(60);
    Ok(Verdict::new(pass, format!("{}; {:.1}s", parts.join(", "), elapsed.as_secs_f64())))
}

// 6 ---------------------------------------------------------------------

fn detector_utility(det: &Detector, train_ap: f64, bench: &[Scenario]) -> Check {
    let bench_ap = trackhijack::harness::benchmark_ap(bench, det, &DefenseKind::Identity, jobs()).map_err(err)?;
    let mot = MotConfig::default();
    let mut stable = 0;
    let mut successes = 0;
    for sc in bench {
        let o = run_benign(sc, det, &mot, &RunOptions::default()).map_err(err)?;
        successes += usize::from(o.success);
        let mut ids = Vec::new();
        let mut confirmed_from_h = true;
        for t in 0..sc.len() {
            let row = o.target_detections[t]
                .and_then(|d| o.log.iter().find(|r| r.frame == t && r.detection == d as i64));
            match row {
                Some(r) => {
                    ids.push(r.track_id);
                    if t >= mot.confirm_hits as usize && r.status != TrackStatus::Confirmed {
                        confirmed_from_h = false;
                    }
                }
                None => confirmed_from_h = false,
            }
        }
        let single = ids.len() == sc.len() && ids.iter().all(|&i| i == ids[0]);
        stable += usize::from(single && confirmed_from_h && !o.success);
    }
    let pass = train_ap >= 0.8 && bench_ap >= 0.8 && successes == 0 && stable == bench.len();
    Ok(Verdict::new(
        pass,
        format!(
            "AP@0.5 corpus {train_ap:.3}, benchmark {bench_ap:.3}; benign success {successes}/{n}; stable single id {stable}/{n}",
            n = bench.len()
        ),
    ))
}

// 7, 8, 9 -----------------------------------------------------------------

struct SeedRun {
    seed: u64,
    bench: Vec<Scenario>,
    generated: Vec<Generated>,
    success: Vec<bool>,
    frames: Vec<Option<usize>>,
    elapsed: Duration,
}

impl SeedRun {
    fn asr(&self) -> f64 {
        self.success.iter().filter(|s| **s).count() as f64 / self.success.len() as f64
    }
}

fn attack_runs(det: &Detector, optimizer: Optimizer) -> Result<Vec<SeedRun>, String> {
    SEEDS
        .iter()
        .map(|&seed| {
            let mut cfg = seeded(seed);
            cfg.attack.optimizer = optimizer;
            let bench = benchmark(&cfg.scene, cfg.benchmark.per_goal, seed).map_err(err)?;
            let start = Instant::now();
            let (_, per, generated) =
                evaluate("run", &bench, det, &cfg.plan_config(), &[cfg.mot], &cfg.run, cfg.jobs).map_err(err)?;
            Ok(SeedRun {
                seed,
                bench,
                generated,
                success: per.iter().map(|r| r.success).collect(),
                frames: per.iter().map(|r| r.frames_to_success).collect(),
                elapsed: start.elapsed(),
            })
        })
        .collect()
}

fn end_to_end(runs: &[SeedRun]) -> Check {
    let asrs: Vec<f64> = runs.iter().map(SeedRun::asr).collect();
    let mean = asrs.iter().sum::<f64>() / asrs.len() as f64;
    let spread = asrs.iter().map(|a| (a - mean).abs()).fold(0.0, f64::max);
    let frames: Vec<usize> = runs.iter().flat_map(|r| r.frames.iter().flatten().copied()).collect();
    let mean_frames = (!frames.is_empty()).then(|| frames.iter().sum::<usize>() as f64 / frames.len() as f64);
    let area_ok = runs.iter().all(|r| {
        r.bench.iter().all(|sc| {
            let (dh, dw) = sc.patch_size;
            sc.targets.iter().all(|b| (dh * dw) as f64 <= 0.12 * b.width() * b.height())
        })
    });
    let slowest = runs.iter().map(|r| r.elapsed).max().unwrap_or_default();
    let pass = mean >= 0.70
        && spread <= 0.10
        && mean_frames.is_some_and(|f| f <= 6.0)
        && area_ok
        && slowest <= Duration::from_secs(30 * 60);
    let per: Vec<String> = runs.iter().zip(&asrs).map(|(r, a)| format!("seed {} {}", r.seed, pct(*a))).collect();
    Ok(Verdict::new(
        pass,
        format!(
            "ASR {} (mean {}, spread {:.1} pts); mean frames {}; patch <= 12%: {area_ok}; slowest seed {:.0}s",
            per.join(", "),
            pct(mean),
            100.0 * spread,
            mean_frames.map_or("n/a".into(), |f| format!("{f:.2}")),
            slowest.as_secs_f64()
        ),
    ))
}

fn optimizer_gap(det: &Detector, cond: &[SeedRun]) -> Check {
    let cond_mean = cond.iter().map(SeedRun::asr).sum::<f64>() / cond.len() as f64;
    let mut best_slrm: f64 = 0.0;
    let mut parts = Vec::new();
    let (mut stagnant, mut small_eta_runs) = (0, 0);
    for eta in ETAS {
        let runs = attack_runs(det, Optimizer::Slrm { eta })?;
        let mean = runs.iter().map(SeedRun::asr).sum::<f64>() / runs.len() as f64;
        best_slrm = best_slrm.max(mean);
        parts.push(format!("SLRM({eta}) {}", pct(mean)));
        if eta <= 1.0 {
            for g in runs.iter().flat_map(|r| &r.generated) {
                let first = g.result.log.first().map(|r| r.losses.fabricate).unwrap_or(0.0);
                let last = g.result.log.last().map(|r| r.losses.fabricate).unwrap_or(0.0);
                small_eta_runs += 1;
                stagnant += usize::from(last >= 0.9 * first);
            }
        }
    }
    let all: Vec<&Generated> = cond.iter().flat_map(|r| &r.generated).collect();
    let terminal = all.iter().filter(|g| g.result.terminal).count();
    let term_rate = terminal as f64 / all.len() as f64;
    let stagnant_rate = stagnant as f64 / small_eta_runs.max(1) as f64;
    let gap = cond_mean - best_slrm;
    let pass = gap >= 0.20 && stagnant_rate >= 0.70 && term_rate >= 0.80;
    Ok(Verdict::new(
        pass,
        format!(
            "conditional {} vs {} (gap {:.1} pts); eta<=1 final L_f >= 0.9 initial on {}; conditional terminal on {}",
            pct(cond_mean),
            parts.join(", "),
            100.0 * gap,
            pct(stagnant_rate),
            pct(term_rate)
        ),
    ))
}

/// First five scenarios of each goal.
fn paired_indices(n: usize) -> Vec<usize> {
    let half = n / 2;
    (0..5).chain(half..half + 5).collect()
}

fn stage1_benefit(det: &Detector, run: &SeedRun) -> Check {
    let idx = paired_indices(run.bench.len());
    let cfg = seeded(run.seed);
    let plan_cfg = PlanConfig { location: LocationStrategy::Random, ..cfg.plan_config() };
    let random = par_map(&idx, cfg.jobs, |&i| generate_plan(&run.bench[i], det, &plan_cfg)).map_err(err)?;
    let scenarios: Vec<Scenario> = idx.iter().map(|&i| run.bench[i].clone()).collect();
    let plans: Vec<AttackPlan> = random.iter().map(|g| g.plan.clone()).collect();
    let (rows, _) = evaluate_plans("random", &scenarios, &plans, &[], det, &[cfg.mot], &cfg.run, cfg.jobs).map_err(err)?;
    let pre = idx.iter().filter(|&&i| run.success[i]).count() as f64 / idx.len() as f64;
    let budgets_match = run.generated.iter().all(|g| g.result.iterations + cfg.stage1.iterations == cfg.plan.budget)
        && random.iter().all(|g| g.result.iterations == cfg.plan.budget);
    let gap = pre - rows[0].asr;
    Ok(Verdict::new(
        gap >= 0.20 && budgets_match,
        format!(
            "10 paired scenarios (seed {}): preselected {} vs random {} (gap {:.1} pts); budgets matched: {budgets_match}",
            run.seed,
            pct(pre),
            pct(rows[0].asr),
            100.0 * gap
        ),
    ))
}

// 10 --------------------------------------------------------------------

fn stage1_stability(det: &Detector, bench: &[Scenario]) -> Check {
    let half = bench.len() / 2;
    let picks = [0, half, 1, half + 1, 2];
    let cfg = seeded(1);
    let mut within = 0;
    let mut total = 0;
    for &i in &picks {
        let sc = &bench[i];
        let t0 = sc.t_start;
        let frames: Vec<StabilityFrame> = (t0..t0 + 5)
            .map(|t| StabilityFrame { image: sc.frames[t].clone(), b_o: sc.targets[t], region: sc.regions[t] })
            .collect();
        let s1 = Stage1Config { window: sc.patch_size, ..cfg.stage1.clone() };
        let d = location_stability(det, &frames, &sc.attack_direction(), &s1).map_err(err)?;
        let limit = sc.patch_size.0.max(sc.patch_size.1) as f64 / 2.0;
        within += d.iter().filter(|&&x| x <= limit).count();
        total += d.len();
    }
    let rate = within as f64 / total as f64;
    Ok(Verdict::new(rate >= 0.80, format!("{within}/{total} displacements within max(dh,dw)/2 ({})", pct(rate))))
}

// 11 --------------------------------------------------------------------

fn defense_harness(det: &Detector, run: &SeedRun) -> Check {
    let plans: Vec<AttackPlan> = run.generated.iter().map(|g| g.plan.clone()).collect();
    let kinds = [DefenseKind::Identity, DefenseKind::MedianBlur { kernel: 9 }, DefenseKind::BitDepth { bits: 8 }];
    let rows = defense_eval(&run.bench, &plans, det, &MotConfig::default(), &kinds, 1, jobs()).map_err(err)?;
    let (none, median, bits) = (&rows[0], &rows[1], &rows[2]);
    let median_ok = median.asr < none.asr && median.ap < none.ap;
    let bits_ok = (bits.asr - none.asr).abs() <= 0.01 && (bits.ap - none.ap).abs() <= 0.01;
    Ok(Verdict::new(
        median_ok && bits_ok,
        format!(
            "none ASR {} AP {:.3}; median9 ASR {} AP {:.3}; bitdepth8 ASR {} AP {:.3}",
            pct(none.asr),
            none.ap,
            pct(median.asr),
            median.ap,
            pct(bits.asr),
            bits.ap
        ),
    ))
}

// 12 --------------------------------------------------------------------

fn tree(root: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(err)? {
            let p = entry.map_err(err)?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).map_err(err)?.display().to_string();
                out.insert(rel, fs::read(&p).map_err(err)?);
            }
        }
    }
    Ok(out)
}

fn cli(args: &[String]) -> Result<(), String> {
    let code = run_cli(std::iter::once("trackhijack".to_string()).chain(args.iter().cloned()));
    if code == 0 {
        Ok(())
    } else {
        Err(format!("exit {code}: {}", args.join(" ")))
    }
}

fn cli_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(err)?;
    let root = tmp.path();
    let mut cfg = RunConfig::default();
    cfg.corpus.scenes = 4;
    cfg.train.epochs = 1;
    cfg.benchmark.per_goal = 1;
    cfg.plan.budget = 40;
    cfg.max_frames = 2;
    cfg.stability_frames = 3;
    cfg.defenses = vec![DefenseKind::Identity, DefenseKind::MedianBlur { kernel: 3 }];
    let config = root.join("config.json");
    fs::write(&config, serde_json::to_vec_pretty(&cfg).map_err(err)?).map_err(err)?;
    let c = config.display().to_string();
    let first = root.join("r1");
    let p = |dir: &Path, name: &str| dir.join(name).display().to_string();
    let weights = p(&first, "detector-train/weights.bin");
    let scenes = p(&first, "scene-gen/bench.json");
    let patches = p(&first, "attack-gen/patches");
    let commands: Vec<(&str, Vec<String>)> = vec![
        ("detector-train", vec![]),
        ("scene-gen", vec![]),
        ("detector-check", vec!["--weights".into(), weights.clone()]),
        ("stage1", vec!["--weights".into(), weights.clone(), "--scenario".into(), scenes.clone()]),
        ("attack-gen", vec!["--weights".into(), weights.clone(), "--scenario".into(), scenes.clone(), "--iters".into(), "40".into()]),
        ("attack-eval", vec!["--weights".into(), weights.clone(), "--scenario".into(), scenes.clone(), "--patches".into(), patches.clone()]),
        ("baseline-slrm", vec!["--weights".into(), weights.clone(), "--scenario".into(), scenes.clone(), "--iters".into(), "40".into(), "--eta".into(), "1".into()]),
        ("baseline-maxcap", vec!["--weights".into(), weights.clone(), "--scenario".into(), scenes.clone()]),
        ("baseline-randloc", vec!["--weights".into(), weights.clone(), "--scenario".into(), scenes.clone(), "--iters".into(), "40".into()]),
        (
            "defense-eval",
            vec!["--weights".into(), weights.clone(), "--scenario".into(), scenes.clone(), "--patches".into(), patches.clone()],
        ),
        ("report", vec![p(&first, "attack-eval"), p(&first, "baseline-maxcap")]),
    ];
    let mut differing = Vec::new();
    let mut files = 0;
    for (name, extra) in &commands {
        let mut outs = Vec::new();
        for run in ["r1", "r2"] {
            let out = root.join(run).join(name);
            let mut args = vec![name.to_string(), "--config".into(), c.clone(), "--seed".into(), "7".into(), "--out".into(), out.display().to_string()];
            args.extend(extra.iter().cloned());
            cli(&args)?;
            outs.push(tree(&out)?);
        }
        files += outs[0].len();
        if outs[0] != outs[1] || outs[0].is_empty() {
            differing.push(name.to_string());
        }
    }
    Ok(Verdict::new(
        differing.is_empty(),
        format!("{} commands, {files} files compared; differing: {}", commands.len(), if differing.is_empty() { "none".into() } else { differing.join(", ") }),
    ))
}

// -----------------------------------------------------------------------

fn report(id: usize, name: &str, check: Check, failures: &mut usize, started: Instant) {
    let (pass, detail) = match check {
        Ok(v) => (v.pass, v.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    if !pass {
        *failures += 1;
    }
    println!("{} {id:>2} {name}: {detail} [{:.0}s]", if pass { "PASS" } else { "FAIL" }, started.elapsed().as_secs_f64());
}

fn main() {
    let mut failures = 0;
    let t = Instant::now();
    report(2, "target box search vs brute force", target_search_oracle(), &mut failures, t);
    let t = Instant::now();
    report(3, "window scores vs double sum", window_score_oracle(), &mut failures, t);
    let t = Instant::now();
    report(4, "MOT lifecycle and association", mot_lifecycle(), &mut failures, t);

    let t = Instant::now();
    let trained = trained_detector();
    let (det, train_ap) = match trained {
        Ok((det, ap, cached)) => {
            println!("detector {} [{:.0}s]", if cached { "loaded from cache" } else { "trained" }, t.elapsed().as_secs_f64());
            (det, ap)
        }
        Err(e) => {
            for (id, name) in [
                (1, "gradient fidelity"),
                (5, "max-capability ceiling"),
                (6, "detector utility"),
                (7, "end-to-end attack"),
                (8, "optimizer comparison"),
                (9, "stage I benefit"),
                (10, "stage I stability"),
                (11, "defense harness"),
            ] {
                report(id, name, Err(format!("detector unavailable: {e}")), &mut failures, t);
            }
            let t = Instant::now();
            report(12, "CLI determinism", cli_determinism(), &mut failures, t);
            std::process::exit(1);
        }
    };
    let bench = match benchmark(&seeded(1).scene, 10, 1) {
        Ok(b) => b,
        Err(e) => {
            println!("FAIL benchmark generation: {e}");
            std::process::exit(1);
        }
    };

    let t = Instant::now();
    report(1, "gradient fidelity", gradient_fidelity(&det, &bench), &mut failures, t);
    let t = Instant::now();
    report(5, "max-capability ceiling", max_capability_ceiling(&det, &bench), &mut failures, t);
    let t = Instant::now();
    report(6, "detector utility", detector_utility(&det, train_ap, &bench), &mut failures, t);

    let t = Instant::now();
    let cond = attack_runs(&det, Optimizer::Conditional);
    match &cond {
        Ok(runs) => report(7, "end-to-end attack", end_to_end(runs), &mut failures, t),
        Err(e) => report(7, "end-to-end attack", Err(e.clone()), &mut failures, t),
    }
    let t = Instant::now();
    let first = cond.as_ref().ok().and_then(|r| r.first());
    match &cond {
        Ok(runs) => report(8, "optimizer comparison", optimizer_gap(&det, runs), &mut failures, t),
        Err(e) => report(8, "optimizer comparison", Err(e.clone()), &mut failures, t),
    }
    let t = Instant::now();
    report(9, "stage I benefit", first.ok_or("no conditional run".to_string()).and_then(|r| stage1_benefit(&det, r)), &mut failures, t);
    let t = Instant::now();
    report(10, "stage I stability", stage1_stability(&det, &bench), &mut failures, t);
    let t = Instant::now();
    report(11, "defense harness", first.ok_or("no conditional run".to_string()).and_then(|r| defense_harness(&det, r)), &mut failures, t);
    let t = Instant::now();
    report(12, "CLI determinism", cli_determinism(), &mut failures, t);

    println!("{} of 12 criteria failed", failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
