//! Scene synthesis, end-to-end attack runs over detector and tracker, and
//! benchmark evaluation.

pub mod checks;
pub mod eval;
pub mod run;
pub mod scene;

pub use scene::{
    benchmark, gen_scene, load_scenario, lower_half, patch_size_for, save_scenario, training_corpus, CorpusSpec,
    Scenario, SceneSpec, DISTRACTOR, VEHICLE,
};
pub use run::{
    check_frames, choose_offset, clean_detections, detect, generate_plan, max_capability, max_capability_on,
    patched_frame, run_attack, run_benign, success_from_log, target_detection, AttackPlan, Generated,
    LocationStrategy, Outcome, PlacedPatch, PlanConfig, RunOptions, TARGET_MATCH_IOU,
};
pub use eval::{
    aggregate, benchmark_ap, config_hash, defense_eval, defense_strength, evaluate, evaluate_plans, generate_all,
    par_map, summarize, write_defense_rows, write_eval_rows, write_scenario_rows, write_summary, DefenseRow, EvalRow,
    ScenarioRow, Summary,
};
pub use checks::{gradient_suite, tv_grad_check, GradientRow};
