//! Group-relative policy optimization over the workflow environment.
//!
//! Each iteration collects a mixed batch of episodes from a frozen snapshot
//! of the policy, scores and normalizes their rewards, estimates a baseline
//! per turn, and takes clipped-surrogate gradient steps.

mod baseline;
mod config;
mod rollout;
mod surrogate;
mod train;

pub use baseline::{
    batch_baselines, compute_advantages, counterfactual_baseline, episode_returns, replay_outcome, AdvantageEstimate, ReturnFn,
};
pub use config::{BaselineMode, GrpoConfig, Replacement, RewardMode, TaskMix, TrainConfig};
pub use rollout::{
    batch_layout, collect_rollouts, outcome_of, run_episode, sample_task, Actor, Choice, EpisodeMeta, Outcome, PolicyActor,
    Rollout, Snapshot, Trajectory, Transition,
};
pub use surrogate::{apply_update, surrogate_loss_and_grad, SurrogateOutput, UpdateReport};
pub use train::{initial_params, score_batch, team_score, train_loop, CurveRow, ScoredBatch, TrainOutcome, CURVE_HEADER};
