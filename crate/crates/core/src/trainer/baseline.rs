use serde::{Deserialize, Serialize};

use super::config::{BaselineMode, GrpoConfig, Replacement, RewardMode};
use super::rollout::{outcome_of, play_turn, Outcome, PolicyActor, Rollout, Trajectory};
use crate::env::{ActionKind, Env, Role};
use crate::error::{Error, Result};
use crate::policy::{action_distribution, critic_value, sample_action, CriticParams, Weights};
use crate::reward::{combine_reward, FamilyNorm, PenaltyCoefficients, RewardWeights};
use crate::rng::{self, label};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvantageEstimate {
    pub advantage: f64,
    pub baseline_value: f64,
    pub mode_used: BaselineMode,
}

/// The scalar each role is trained on, as a function of an episode outcome.
#[derive(Debug, Clone)]
pub struct ReturnFn {
    pub mode: RewardMode,
    pub norm: FamilyNorm,
    pub weights: RewardWeights,
}

impl ReturnFn {
    /// `weights` as scheduled; with the coordination term disabled its weight
    /// is zeroed and the others are left as they are.
    pub fn new(mode: RewardMode, norm: FamilyNorm, mut weights: RewardWeights, coordination_term: bool) -> Self {
        if !coordination_term {
            weights.w_coordination = 0.0;
        }
        Self { mode, norm, weights }
    }

    pub fn combined(&self, o: &Outcome) -> f64 {
        combine_reward(&self.norm.apply(o.family, &o.raw), &self.weights)
    }

    pub fn value(&self, o: &Outcome, role: Role) -> f64 {
        match self.mode {
            RewardMode::Joint => self.combined(o),
            RewardMode::LocalOnly => o.local[role.index()],
        }
    }
}

/// Per-transition return of an episode whose final outcome is `o`.
pub fn episode_returns(traj: &Trajectory, o: &Outcome, ret: &ReturnFn) -> Vec<f64> {
    traj.transitions.iter().map(|t| ret.value(o, t.role)).collect()
}

/// Replays from snapshot `t` with the legal action at `forced` in place of
/// the one taken, then lets the policy finish the episode. Every role's
/// environment and policy streams continue from where they stood.
pub fn replay_outcome(
    env: &Env,
    rollout: &Rollout,
    t: usize,
    forced: usize,
    weights: &Weights,
    coeffs: &PenaltyCoefficients,
) -> Result<Outcome> {
    let snap = &rollout.snapshots[t];
    let mut state = snap.state.clone();
    let mut streams = snap.policy_streams.clone();
    let actor = PolicyActor { weights, greedy: false };
    play_turn(env, &mut state, &mut streams, &actor, Some(forced))?;
    while !state.is_terminal() {
        play_turn(env, &mut state, &mut streams, &actor, None)?;
    }
    Ok(outcome_of(env, &state, coeffs))
}

/// Leave-one-out baseline for transition `t`: the expected return when the
/// acting role's move is redrawn from the snapshot policy and the rest of
/// the episode is re-simulated. Exhaustive mode weights every legal action
/// by its probability; otherwise K draws from a forked stream are averaged.
pub fn counterfactual_baseline(
    env: &Env,
    rollout: &Rollout,
    t: usize,
    weights: &Weights,
    cfg: &GrpoConfig,
    ret: &ReturnFn,
    coeffs: &PenaltyCoefficients,
) -> Result<f64> {
    let tr = &rollout.trajectory.transitions[t];
    let snap = rollout
        .snapshots
        .get(t)
        .ok_or_else(|| Error::Config("rollout was collected without replay snapshots".into()))?;
    let legal = env.legal_actions(&snap.state, tr.role)?;
    let mut cache: Vec<Option<f64>> = vec![None; legal.len()];
    let mut value_of = |a: usize| -> Result<f64> {
        if let Some(v) = cache[a] {
            return Ok(v);
        }
        let v = ret.value(&replay_outcome(env, rollout, t, a, weights, coeffs)?, tr.role);
        cache[a] = Some(v);
        Ok(v)
    };

    if cfg.replacement == Replacement::Noop {
        let noop = legal
            .iter()
            .position(|a| a.kind() == ActionKind::HandoffPeer)
            .expect("passing the floor is always legal");
        return value_of(noop);
    }
    let dist = action_distribution(weights, tr.role, &tr.features, &legal)?;
    if cfg.exhaustive {
        let mut total = 0.0;
        for (a, &p) in dist.probs.iter().enumerate() {
            if p > 0.0 {
                total += p * value_of(a)?;
            }
        }
        return Ok(total);
    }
    if cfg.counterfactual_k == 0 {
        return Err(Error::field("counterfactual_k", "must be positive for the leave-one-out baseline"));
    }
    let mut fork = rng::derived_stream(rollout.trajectory.meta.seed, &[label::COUNTERFACTUAL, t as u64]);
    let mut total = 0.0;
    for _ in 0..cfg.counterfactual_k {
        let (a, _) = sample_action(&dist, &mut fork);
        total += value_of(a)?;
    }
    Ok(total / cfg.counterfactual_k as f64)
}

/// Baseline for every transition of every rollout under the configured mode.
pub fn batch_baselines(
    env: &Env,
    rollouts: &[Rollout],
    returns: &[Vec<f64>],
    weights: &Weights,
    critic: &CriticParams,
    cfg: &GrpoConfig,
    ret: &ReturnFn,
    coeffs: &PenaltyCoefficients,
    exec: crate::par::Exec,
) -> Result<Vec<Vec<f64>>> {
    match cfg.baseline_mode {
        BaselineMode::Constant => {
            let all: Vec<f64> = returns.iter().flatten().copied().collect();
            let mean = if all.is_empty() {
                0.0
            } else {
                all.iter().sum::<f64>() / all.len() as f64
            };
            Ok(returns.iter().map(|r| vec![mean; r.len()]).collect())
        }
        BaselineMode::Critic => rollouts
            .iter()
            .map(|r| {
                r.trajectory
                    .transitions
                    .iter()
                    .map(|t| critic_value(critic, &t.global_features))
                    .collect()
            })
            .collect(),
        BaselineMode::LeaveOneOut => {
            let jobs: Vec<(usize, usize)> = rollouts
                .iter()
                .enumerate()
                .flat_map(|(i, r)| (0..r.trajectory.transitions.len()).map(move |t| (i, t)))
                .collect();
            let values = crate::par::map(exec, &jobs, |&(i, t)| {
                counterfactual_baseline(env, &rollouts[i], t, weights, cfg, ret, coeffs)
            });
            let mut out: Vec<Vec<f64>> = rollouts.iter().map(|_| Vec::new()).collect();
            for (&(i, _), v) in jobs.iter().zip(values) {
                out[i].push(v?);
            }
            Ok(out)
        }
    }
}

/// `return - baseline` per transition, standardized over the whole batch.
pub fn compute_advantages(
    returns: &[Vec<f64>],
    baselines: &[Vec<f64>],
    mode: BaselineMode,
) -> Result<Vec<Vec<AdvantageEstimate>>> {
    if baselines.len() != returns.len() {
        return Err(Error::MissingBaseline(baselines.len().min(returns.len())));
    }
    let mut flat_index = 0;
    let mut raw = Vec::with_capacity(returns.len());
    for (r, b) in returns.iter().zip(baselines) {
        if b.len() != r.len() {
            return Err(Error::MissingBaseline(flat_index + b.len().min(r.len())));
        }
        flat_index += r.len();
        raw.push(r.iter().zip(b).map(|(x, y)| (x - y, *y)).collect::<Vec<_>>());
    }
    let all: Vec<f64> = raw.iter().flatten().map(|(a, _)| *a).collect();
    let n = all.len().max(1) as f64;
    let mean = all.iter().sum::<f64>() / n;
    let std = (all.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(raw
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|(a, b)| AdvantageEstimate {
                    advantage: if std > 1e-12 { (a - mean) / std } else { 0.0 },
                    baseline_value: b,
                    mode_used: mode,
                })
                .collect()
        })
        .collect())
}
