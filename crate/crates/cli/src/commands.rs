//! One function per subcommand.

use std::fs;
use std::path::Path;

use serde::Serialize;
use trackhijack::attackopt::{write_loss_log, PatchSidecar};
use trackhijack::detector::{save_weights, train, Detector, GradCheckOptions};
use trackhijack::harness::{
    benchmark, benchmark_ap, config_hash, defense_eval, gen_scene, generate_plan, gradient_suite,
    max_capability_on, clean_detections, par_map, run_attack, run_benign, save_scenario, summarize, training_corpus,
    write_defense_rows, write_eval_rows, write_scenario_rows, write_summary, AttackPlan, EvalRow, GradientRow,
    LocationStrategy, Outcome, Scenario, ScenarioRow, Summary, VEHICLE,
};
use trackhijack::imaging::{encode_pgm, DefenseKind};
use trackhijack::mot::write_track_log;
use trackhijack::stage1::{location_stability, preselect_location, StabilityFrame};
use trackhijack::targeting::Goal;

use crate::artifacts::{load_detector, load_patch, load_set, save_patch, PatchFile, RunManifest, ScenarioSet};
use crate::config::RunConfig;
use crate::{AttackArgs, CliError, Command, Common, DefenseArg, DefenseArgs, DirectionArg, GoalArg, MotArgs, OptimizerArg};

type CliResult<T = ()> = Result<T, CliError>;

pub fn execute(cmd: Command) -> CliResult {
    match cmd {
        Command::DetectorTrain { common } => detector_train(&common),
        Command::DetectorCheck { common, weights } => detector_check(&common, &weights),
        Command::SceneGen { common, goal } => scene_gen(&common, goal),
        Command::Stage1 { common, weights, scenario, direction, jobs } => {
            stage1(&common, &weights, &scenario, direction, jobs)
        }
        Command::AttackGen { common, weights, scenario, attack, jobs } => {
            attack_gen(&common, &weights, &scenario, &attack, jobs)
        }
        Command::AttackEval { common, weights, scenario, patches, mot, defense, jobs } => {
            attack_eval(&common, &weights, &scenario, patches.as_deref(), &mot, &defense, jobs)
        }
        Command::BaselineSlrm { common, weights, scenario, iters, eta, mot, jobs } => {
            baseline_slrm(&common, &weights, &scenario, iters, eta, &mot, jobs)
        }
        Command::BaselineMaxcap { common, weights, scenario, mot, frames } => {
            baseline_maxcap(&common, &weights, &scenario, &mot, frames)
        }
        Command::BaselineRandloc { common, weights, scenario, iters, mot, jobs } => {
            baseline_randloc(&common, &weights, &scenario, iters, &mot, jobs)
        }
        Command::DefenseEval { common, weights, scenario, patches, mot, defense, jobs } => {
            defense_cmd(&common, &weights, &scenario, &patches, &mot, &defense, jobs)
        }
        Command::Report { common, inputs } => report(&common, &inputs),
    }
}

/// Loads the config, applies the shared flags and prepares `--out`.
fn setup(common: &Common, jobs: Option<usize>) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(j) = jobs {
        if j == 0 {
            return Err(CliError::Validation("--jobs must be >= 1".into()));
        }
        cfg.jobs = j;
    }
    cfg.propagate_seed();
    Ok(cfg)
}

fn finish_setup(cfg: &RunConfig, common: &Common) -> CliResult {
    cfg.validate()?;
    fs::create_dir_all(&common.out)?;
    Ok(())
}

fn apply_mot(cfg: &mut RunConfig, m: &MotArgs) {
    if let Some(v) = m.mot_cov {
        cfg.mot.cov = v;
    }
    if let Some(v) = m.mot_h {
        cfg.mot.confirm_hits = v;
    }
    if let Some(v) = m.mot_r {
        cfg.mot.max_misses = v;
    }
    if let Some(v) = m.t_iou {
        cfg.mot.t_iou = v;
        cfg.attack.t_iou = v;
        cfg.stage1.t_iou = v;
    }
}

fn apply_attack(cfg: &mut RunConfig, a: &AttackArgs) -> CliResult {
    if let Some(n) = a.iters {
        cfg.plan.budget = n;
    }
    match (a.optimizer, a.eta) {
        (Some(OptimizerArg::Conditional), Some(_)) => {
            return Err(CliError::Validation("--eta only applies to --optimizer slrm".into()));
        }
        (Some(OptimizerArg::Conditional), None) => cfg.attack.optimizer = trackhijack::attackopt::Optimizer::Conditional,
        (Some(OptimizerArg::Slrm), eta) => {
            cfg.attack.optimizer = trackhijack::attackopt::Optimizer::Slrm { eta: eta.unwrap_or(1.0) };
        }
        (None, Some(eta)) => match cfg.attack.optimizer {
            trackhijack::attackopt::Optimizer::Slrm { .. } => {
                cfg.attack.optimizer = trackhijack::attackopt::Optimizer::Slrm { eta };
            }
            _ => return Err(CliError::Validation("--eta only applies to --optimizer slrm".into())),
        },
        (None, None) => {}
    }
    Ok(())
}

fn defense_from(args: &DefenseArgs, seed: u64) -> CliResult<Option<DefenseKind>> {
    let Some(kind) = args.defense else {
        if args.strength.is_some() {
            return Err(CliError::Validation("--strength needs --defense".into()));
        }
        return Ok(None);
    };
    let need = |name: &str| {
        args.strength.ok_or_else(|| CliError::Validation(format!("--defense {name} needs --strength")))
    };
    let whole = |v: f64, name: &str| -> CliResult<u64> {
        if v.fract() != 0.0 || v < 0.0 {
            return Err(CliError::Validation(format!("{name} strength must be a non-negative integer, got {v}")));
        }
        Ok(v as u64)
    };
    let d = match kind {
        DefenseArg::None => DefenseKind::Identity,
        DefenseArg::Bitdepth => DefenseKind::BitDepth { bits: whole(need("bitdepth")?, "bitdepth")? as u32 },
        DefenseArg::Gauss => DefenseKind::GaussianNoise { std: need("gauss")?, seed },
        DefenseArg::Median => DefenseKind::MedianBlur { kernel: whole(need("median")?, "median")? as usize },
    };
    d.validate()?;
    Ok(Some(d))
}

fn check_direction(set: &[(String, Scenario)], dir: Option<DirectionArg>) -> CliResult {
    let Some(dir) = dir else { return Ok(()) };
    for (stem, sc) in set {
        let l2r = sc.direction.dx > 0.0;
        if l2r != (dir == DirectionArg::L2r) {
            return Err(trackhijack::Error::DirectionMismatch(format!(
                "scenario {stem} moves {} but --direction {} was given",
                if l2r { "l2r" } else { "r2l" },
                if dir == DirectionArg::L2r { "l2r" } else { "r2l" }
            ))
            .into());
        }
    }
    Ok(())
}

fn write_file(out: &Path, name: &str, bytes: &[u8], manifest: &mut RunManifest) -> CliResult {
    if let Some(parent) = out.join(name).parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(out.join(name), bytes)?;
    manifest.output(name);
    Ok(())
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> trackhijack::Result<()>) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn json<T: Serialize>(v: &T) -> CliResult<Vec<u8>> {
    Ok(serde_json::to_vec_pretty(v)?)
}

fn detector_train(common: &Common) -> CliResult {
    let cfg = setup(common, None)?;
    finish_setup(&cfg, common)?;
    let mut manifest = RunManifest::new("detector-train", &cfg)?;
    let corpus = training_corpus(&cfg.scene, &cfg.corpus)?;
    let report = train(&corpus, &cfg.detector, &cfg.train)?;
    save_weights(&common.out.join("weights.bin"), &cfg.detector, &report.weights)?;
    manifest.output("weights.bin");
    let mut log = String::from("epoch,loss\n");
    for (i, l) in report.epoch_losses.iter().enumerate() {
        log.push_str(&format!("{i},{l:.9e}\n"));
    }
    write_file(&common.out, "train_log.csv", log.as_bytes(), &mut manifest)?;
    let det = Detector::new(cfg.detector.clone(), report.weights)?;
    let ap = det.average_precision(&corpus, VEHICLE, 0.5)?;
    #[derive(Serialize)]
    struct TrainSummary {
        frames: usize,
        ap50_train: f64,
        weights_hash: String,
    }
    let digest = trackhijack::detector::weights_digest(&det.config, &det.weights);
    let summary = TrainSummary { frames: corpus.len(), ap50_train: ap, weights_hash: digest };
    write_file(&common.out, "train.json", &json(&summary)?, &mut manifest)?;
    manifest.write(&common.out)
}

fn bench_from(cfg: &RunConfig, goal: Option<Goal>) -> CliResult<Vec<Scenario>> {
    Ok(match goal {
        None => benchmark(&cfg.scene, cfg.benchmark.per_goal, cfg.seed)?,
        Some(g) => {
            let offset = if g == Goal::MoveIn { 0 } else { 1000 };
            (0..cfg.benchmark.per_goal)
                .map(|i| gen_scene(&cfg.scene, g, cfg.seed.wrapping_add(offset + i as u64)))
                .collect::<trackhijack::Result<_>>()?
        }
    })
}

fn detector_check(common: &Common, weights: &Path) -> CliResult {
    let cfg = setup(common, None)?;
    finish_setup(&cfg, common)?;
    let mut manifest = RunManifest::new("detector-check", &cfg)?;
    manifest.input("weights", weights);
    let (det, digest) = load_detector(weights)?;
    let bench = bench_from(&cfg, None)?;
    let ap = benchmark_ap(&bench, &det, &DefenseKind::Identity, cfg.jobs)?;
    let opts = GradCheckOptions { seed: cfg.seed, ..GradCheckOptions::default() };
    let sc = &bench[0];
    let grads: Vec<GradientRow> = gradient_suite(&det, sc, sc.t_start, &cfg.attack.hyper, &opts)?;
    #[derive(Serialize)]
    struct Check {
        weights_hash: String,
        ap50_benchmark: f64,
        gradients: Vec<GradientRow>,
    }
    write_file(&common.out, "check.json", &json(&Check { weights_hash: digest, ap50_benchmark: ap, gradients: grads })?, &mut manifest)?;
    manifest.write(&common.out)
}

fn scene_gen(common: &Common, goal: Option<GoalArg>) -> CliResult {
    let cfg = setup(common, None)?;
    finish_setup(&cfg, common)?;
    let mut manifest = RunManifest::new("scene-gen", &cfg)?;
    let goal = goal.map(|g| if g == GoalArg::MoveIn { Goal::MoveIn } else { Goal::MoveOut });
    let bench = bench_from(&cfg, goal)?;
    let mut names = Vec::with_capacity(bench.len());
    for (i, sc) in bench.iter().enumerate() {
        let stem = format!("s{i:02}_{}", sc.goal.as_str());
        save_scenario(&common.out.join("scenes"), &stem, sc)?;
        manifest.output(format!("scenes/{stem}.json"));
        names.push(format!("scenes/{stem}.json"));
    }
    write_file(&common.out, "bench.json", &json(&ScenarioSet { scenarios: names })?, &mut manifest)?;
    manifest.write(&common.out)
}

fn stage1(common: &Common, weights: &Path, scenario: &Path, direction: Option<DirectionArg>, jobs: Option<usize>) -> CliResult {
    let cfg = setup(common, jobs)?;
    finish_setup(&cfg, common)?;
    let mut manifest = RunManifest::new("stage1", &cfg)?;
    manifest.input("weights", weights);
    manifest.input("scenario", scenario);
    let (det, _) = load_detector(weights)?;
    let set = load_set(scenario)?;
    check_direction(&set, direction)?;
    #[derive(Serialize)]
    struct Selected {
        scenario: String,
        frame: usize,
        location: (i64, i64),
        offset: (i64, i64),
        loss_log: Vec<(f64, f64)>,
        displacements: Vec<f64>,
    }
    let results = par_map(&set, cfg.jobs, |(stem, sc)| {
        let t = sc.t_start;
        let s1 = trackhijack::stage1::Stage1Config { window: sc.patch_size, ..cfg.stage1.clone() };
        let r = preselect_location(&det, &sc.frames[t], &sc.targets[t], &sc.attack_direction(), sc.regions[t], &s1)?;
        let last = (t + cfg.stability_frames).min(sc.len());
        let displacements = if last - t >= 2 {
            let frames: Vec<StabilityFrame> = (t..last)
                .map(|k| StabilityFrame { image: sc.frames[k].clone(), b_o: sc.targets[k], region: sc.regions[k] })
                .collect();
            location_stability(&det, &frames, &sc.attack_direction(), &s1)?
        } else {
            Vec::new()
        };
        let b = sc.targets[t];
        let offset = (r.location.0 - b.x1.round() as i64, r.location.1 - b.y1.round() as i64);
        let mask = encode_pgm(&r.mask);
        Ok((
            Selected { scenario: stem.clone(), frame: t, location: r.location, offset, loss_log: r.loss_log, displacements },
            mask,
        ))
    })?;
    let mut stability = String::from("scenario,step,displacement,threshold\n");
    for ((sel, mask), (_, sc)) in results.iter().zip(&set) {
        write_file(&common.out, &format!("masks/{}.pgm", sel.scenario), mask, &mut manifest)?;
        let threshold = sc.patch_size.0.max(sc.patch_size.1) as f64 / 2.0;
        for (k, d) in sel.displacements.iter().enumerate() {
            stability.push_str(&format!("{},{k},{d:.6},{threshold:.6}\n", sel.scenario));
        }
    }
    let selected: Vec<&Selected> = results.iter().map(|r| &r.0).collect();
    write_file(&common.out, "stage1.json", &json(&selected)?, &mut manifest)?;
    write_file(&common.out, "stability.csv", stability.as_bytes(), &mut manifest)?;
    manifest.write(&common.out)
}

/// Generates and saves a patch per scenario; returns the plans.
fn generate_and_save(
    cfg: &RunConfig,
    det: &Detector,
    digest: &str,
    set: &[(String, Scenario)],
    out: &Path,
    manifest: &mut RunManifest,
) -> CliResult<Vec<(AttackPlan, bool)>> {
    let plan_cfg = cfg.plan_config();
    let chash = config_hash(cfg)?;
    let generated = par_map(set, cfg.jobs, |(_, sc)| generate_plan(sc, det, &plan_cfg))?;
    let mut plans = Vec::with_capacity(set.len());
    for ((stem, sc), g) in set.iter().zip(generated) {
        let file = PatchFile {
            sidecar: PatchSidecar {
                offset: g.plan.patches[0].offset,
                size: sc.patch_size,
                seed: cfg.seed,
                optimizer: cfg.attack.optimizer.label(),
                config_hash: chash.clone(),
                weights_hash: digest.to_string(),
                terminal: g.result.terminal,
                iterations: g.result.iterations,
            },
            goal: sc.goal,
            direction: sc.direction,
            scenario_seed: sc.seed,
        };
        save_patch(&out.join("patches"), stem, &g.plan, &file)?;
        manifest.output(format!("patches/{stem}.ppm"));
        manifest.output(format!("patches/{stem}.json"));
        let log = csv_bytes(|b| write_loss_log(b, &g.result.log))?;
        write_file(out, &format!("logs/{stem}_loss.csv"), &log, manifest)?;
        plans.push((g.plan, g.result.terminal));
    }
    Ok(plans)
}

fn attack_gen(common: &Common, weights: &Path, scenario: &Path, attack: &AttackArgs, jobs: Option<usize>) -> CliResult {
    let mut cfg = setup(common, jobs)?;
    apply_attack(&mut cfg, attack)?;
    finish_setup(&cfg, common)?;
    let mut manifest = RunManifest::new("attack-gen", &cfg)?;
    manifest.input("weights", weights);
    manifest.input("scenario", scenario);
    let (det, digest) = load_detector(weights)?;
    let set = load_set(scenario)?;
    check_direction(&set, attack.direction)?;
    generate_and_save(&cfg, &det, &digest, &set, &common.out, &mut manifest)?;
    manifest.write(&common.out)
}

/// Writes the evaluation tables, per-scenario track logs and summary.
fn write_eval(
    out: &Path,
    cfg: &RunConfig,
    digest: &str,
    rows: &[EvalRow],
    per: &[ScenarioRow],
    manifest: &mut RunManifest,
) -> CliResult {
    write_file(out, "eval.csv", &csv_bytes(|b| write_eval_rows(b, rows))?, manifest)?;
    write_file(out, "scenarios.csv", &csv_bytes(|b| write_scenario_rows(b, per))?, manifest)?;
    let summary = Summary { config_hash: config_hash(cfg)?, weights_hash: digest.to_string(), rows: rows.to_vec() };
    write_summary(&out.join("summary.json"), &summary)?;
    manifest.output("summary.json");
    Ok(())
}

fn write_tracks(out: &Path, stems: &[&String], outcomes: &[Outcome], manifest: &mut RunManifest) -> CliResult {
    for (stem, o) in stems.iter().zip(outcomes) {
        let bytes = csv_bytes(|b| write_track_log(b, &o.log))?;
        write_file(out, &format!("tracks/{stem}.csv"), &bytes, manifest)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate_set(
    label: &str,
    cfg: &RunConfig,
    det: &Detector,
    set: &[(String, Scenario)],
    plans: Option<&[AttackPlan]>,
    terminal: &[Option<bool>],
    out: &Path,
    digest: &str,
    manifest: &mut RunManifest,
) -> CliResult {
    let idx: Vec<usize> = (0..set.len()).collect();
    let outcomes = par_map(&idx, cfg.jobs, |&i| match plans {
        Some(p) => run_attack(&set[i].1, &p[i], det, &cfg.mot, &cfg.run),
        None => run_benign(&set[i].1, det, &cfg.mot, &cfg.run),
    })?;
    let per: Vec<ScenarioRow> = outcomes
        .iter()
        .enumerate()
        .map(|(i, o)| ScenarioRow {
            label: label.to_string(),
            scenario: i,
            seed: set[i].1.seed,
            goal: set[i].1.goal.as_str().to_string(),
            mot_cov: cfg.mot.cov,
            success: o.success,
            frames_to_success: o.frames_to_success,
            terminal: terminal.get(i).copied().flatten(),
        })
        .collect();
    let rows = vec![summarize(label, &cfg.mot, &per)?];
    let stems: Vec<&String> = set.iter().map(|(s, _)| s).collect();
    write_tracks(out, &stems, &outcomes, manifest)?;
    write_eval(out, cfg, digest, &rows, &per, manifest)
}

fn load_plans(dir: &Path, set: &[(String, Scenario)], digest: &str) -> CliResult<Vec<AttackPlan>> {
    set.iter().map(|(stem, sc)| load_patch(dir, stem, sc, digest)).collect()
}

fn attack_eval(
    common: &Common,
    weights: &Path,
    scenario: &Path,
    patches: Option<&Path>,
    mot: &MotArgs,
    defense: &DefenseArgs,
    jobs: Option<usize>,
) -> CliResult {
    let mut cfg = setup(common, jobs)?;
    apply_mot(&mut cfg, mot);
    if let Some(d) = defense_from(defense, cfg.seed)? {
        cfg.run.defense = d;
    }
    finish_setup(&cfg, common)?;
    let mut manifest = RunManifest::new("attack-eval", &cfg)?;
    manifest.input("weights", weights);
    manifest.input("scenario", scenario);
    let (det, digest) = load_detector(weights)?;
    let set = load_set(scenario)?;
    let plans = match patches {
        Some(dir) => {
            manifest.input("patches", dir);
            Some(load_plans(dir, &set, &digest)?)
        }
        None => None,
    };
    let label = if plans.is_some() { "attack" } else { "benign" };
    evaluate_set(label, &cfg, &det, &set, plans.as_deref(), &[], &common.out, &digest, &mut manifest)?;
    manifest.write(&common.out)
}

fn generate_then_evaluate(label: &str, cfg: &RunConfig, common: &Common, weights: &Path, scenario: &Path, command: &str) -> CliResult {
    let mut manifest = RunManifest::new(command, cfg)?;
    manifest.input("weights", weights);
    manifest.input("scenario", scenario);
    let (det, digest) = load_detector(weights)?;
    let set = load_set(scenario)?;
    let made = generate_and_save(cfg, &det, &digest, &set, &common.out, &mut manifest)?;
    let plans: Vec<AttackPlan> = made.iter().map(|m| m.0.clone()).collect();
    let terminal: Vec<Option<bool>> = made.iter().map(|m| Some(m.1)).collect();
    evaluate_set(label, cfg, &det, &set, Some(&plans), &terminal, &common.out, &digest, &mut manifest)?;
    manifest.write(&common.out)
}

fn baseline_slrm(
    common: &Common,
    weights: &Path,
    scenario: &Path,
    iters: Option<usize>,
    eta: Option<f64>,
    mot: &MotArgs,
    jobs: Option<usize>,
) -> CliResult {
    let mut cfg = setup(common, jobs)?;
    apply_mot(&mut cfg, mot);
    if let Some(n) = iters {
        cfg.plan.budget = n;
    }
    let eta = match eta {
        Some(e) => e,
        None => match cfg.attack.optimizer {
            trackhijack::attackopt::Optimizer::Slrm { eta } => eta,
            _ => cfg.slrm_etas.first().copied().unwrap_or(1.0),
        },
    };
    cfg.attack.optimizer = trackhijack::attackopt::Optimizer::Slrm { eta };
    finish_setup(&cfg, common)?;
    generate_then_evaluate(&cfg.attack.optimizer.label(), &cfg, common, weights, scenario, "baseline-slrm")
}

fn baseline_randloc(
    common: &Common,
    weights: &Path,
    scenario: &Path,
    iters: Option<usize>,
    mot: &MotArgs,
    jobs: Option<usize>,
) -> CliResult {
    let mut cfg = setup(common, jobs)?;
    apply_mot(&mut cfg, mot);
    if let Some(n) = iters {
        cfg.plan.budget = n;
    }
    cfg.plan.location = LocationStrategy::Random;
    finish_setup(&cfg, common)?;
    generate_then_evaluate("random-location", &cfg, common, weights, scenario, "baseline-randloc")
}

fn baseline_maxcap(common: &Common, weights: &Path, scenario: &Path, mot: &MotArgs, frames: Option<usize>) -> CliResult {
    let mut cfg = setup(common, None)?;
    apply_mot(&mut cfg, mot);
    if let Some(f) = frames {
        cfg.max_frames = f;
    }
    if cfg.max_frames == 0 {
        return Err(CliError::Validation("--frames must be >= 1".into()));
    }
    finish_setup(&cfg, common)?;
    let mut manifest = RunManifest::new("baseline-maxcap", &cfg)?;
    manifest.input("weights", weights);
    manifest.input("scenario", scenario);
    let (det, digest) = load_detector(weights)?;
    let set = load_set(scenario)?;
    let clean = par_map(&set, cfg.jobs, |(_, sc)| clean_detections(sc, &det, &cfg.run.defense))?;
    let mut rows = Vec::new();
    let mut per = Vec::new();
    for k in 1..=cfg.max_frames {
        let label = format!("maxcap-{k}");
        let these: Vec<ScenarioRow> = set
            .iter()
            .zip(&clean)
            .enumerate()
            .map(|(i, ((_, sc), c))| {
                let o = max_capability_on(sc, c, &sc.attack_direction(), &cfg.mot, k, &cfg.run)?;
                Ok(ScenarioRow {
                    label: label.clone(),
                    scenario: i,
                    seed: sc.seed,
                    goal: sc.goal.as_str().to_string(),
                    mot_cov: cfg.mot.cov,
                    success: o.success,
                    frames_to_success: o.success.then_some(k),
                    terminal: None,
                })
            })
            .collect::<trackhijack::Result<_>>()?;
        rows.push(summarize(&label, &cfg.mot, &these)?);
        per.extend(these);
    }
    write_eval(&common.out, &cfg, &digest, &rows, &per, &mut manifest)?;
    manifest.write(&common.out)
}

fn defense_cmd(
    common: &Common,
    weights: &Path,
    scenario: &Path,
    patches: &Path,
    mot: &MotArgs,
    defense: &DefenseArgs,
    jobs: Option<usize>,
) -> CliResult {
    let mut cfg = setup(common, jobs)?;
    apply_mot(&mut cfg, mot);
    if let Some(d) = defense_from(defense, cfg.seed)? {
        cfg.defenses = vec![d];
    }
    finish_setup(&cfg, common)?;
    let mut manifest = RunManifest::new("defense-eval", &cfg)?;
    manifest.input("weights", weights);
    manifest.input("scenario", scenario);
    manifest.input("patches", patches);
    let (det, digest) = load_detector(weights)?;
    let set = load_set(scenario)?;
    let plans = load_plans(patches, &set, &digest)?;
    let bench: Vec<Scenario> = set.into_iter().map(|(_, s)| s).collect();
    let rows = defense_eval(&bench, &plans, &det, &cfg.mot, &cfg.defenses, cfg.run.horizon, cfg.jobs)?;
    write_file(&common.out, "defense.csv", &csv_bytes(|b| write_defense_rows(b, &rows))?, &mut manifest)?;
    manifest.write(&common.out)
}

fn report(common: &Common, inputs: &[std::path::PathBuf]) -> CliResult {
    let cfg = setup(common, None)?;
    finish_setup(&cfg, common)?;
    let mut manifest = RunManifest::new("report", &cfg)?;
    let mut table = csv::Writer::from_writer(Vec::new());
    table.write_record(["source", "label", "mot_cov", "t_iou", "scenarios", "successes", "asr", "mean_frames"])?;
    #[derive(Serialize)]
    struct Entry {
        source: String,
        summary: Summary,
    }
    let mut entries = Vec::new();
    for (i, dir) in inputs.iter().enumerate() {
        manifest.input(&format!("input{i}"), dir);
        let path = dir.join("summary.json");
        let bytes = fs::read(&path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let summary: Summary = serde_json::from_slice(&bytes)?;
        for r in &summary.rows {
            table.write_record([
                dir.display().to_string(),
                r.label.clone(),
                r.mot_cov.to_string(),
                r.t_iou.to_string(),
                r.scenarios.to_string(),
                r.successes.to_string(),
                format!("{:.6}", r.asr),
                r.mean_frames.map(|f| format!("{f:.6}")).unwrap_or_default(),
            ])?;
        }
        entries.push(Entry { source: dir.display().to_string(), summary });
    }
    table.flush()?;
    let bytes = table.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&common.out, "report.csv", &bytes, &mut manifest)?;
    write_file(&common.out, "report.json", &json(&entries)?, &mut manifest)?;
    manifest.write(&common.out)
}
