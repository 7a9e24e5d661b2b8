//! Experiment orchestration: baselines, evaluation, ablations, failure
//! modes and audit replay.

pub mod eval;
pub mod experiment;
pub mod failures;
pub mod scripted;

pub use eval::{evaluate, evaluate_on, fmt_mean_sem, mean_sem, EvalRun, FamilyFilter, Method, MethodKind, MetricsRow};
pub use experiment::{
    ablation_table, eval_methods, failure_comparison, replay_audit, run_ablation, run_eval, run_failures, run_train,
    AblationTable, ExperimentConfig, ABLATION_VARIANTS,
};
pub use failures::{detect_failure_modes, FailureModeCounts, FailureThresholds};
pub use scripted::{ScriptedTeam, SingleAgent};
