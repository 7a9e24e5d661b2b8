use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::env::{
    ActionKind, ActionPrimitive, Difficulty, Env, EpisodeState, LengthClass, Role, StepLog, TaskFamily, TaskSpec,
};
use crate::error::Result;
use crate::par;
use crate::policy::{featurize_global, featurize_local, sample_action, PolicyParams, Weights};
use crate::reward::{PenaltyCoefficients, RawRewardComponents, RewardBreakdown};
use crate::rng::{self, label, Stream};
use crate::trace::EpisodeRecord;

/// One decision as seen by the trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub turn: u32,
    pub role: Role,
    pub features: Vec<f64>,
    /// Head columns of the legal set, in support order.
    pub legal: Vec<ActionKind>,
    /// Index of the taken action within `legal`.
    pub action: usize,
    pub log_prob_old: f64,
    pub global_features: Vec<f64>,
}

impl Transition {
    pub fn legal_set_size(&self) -> usize {
        self.legal.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub seed: u64,
    pub family: TaskFamily,
    pub length_class: LengthClass,
    pub order: Vec<Role>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub record: EpisodeRecord,
    pub breakdown: Option<RewardBreakdown>,
    pub meta: EpisodeMeta,
}

/// Pre-turn state plus the policy streams, enough to replay from that turn.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub state: EpisodeState,
    pub policy_streams: Vec<Stream>,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub trajectory: Trajectory,
    /// One per transition; empty unless requested.
    pub snapshots: Vec<Snapshot>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Choice {
    pub index: usize,
    pub log_prob: f64,
    pub features: Vec<f64>,
}

/// Something that picks an action for the role holding the floor.
pub trait Actor: Sync {
    fn act(
        &self,
        env: &Env,
        state: &EpisodeState,
        role: Role,
        legal: &[ActionPrimitive],
        rng: &mut Stream,
    ) -> Result<Choice>;
}

/// Samples from a linear-softmax policy. Greedy mode takes the mode of the
/// distribution but still consumes the draw, so streams stay aligned.
pub struct PolicyActor<'a> {
    pub weights: &'a Weights,
    pub greedy: bool,
}

impl Actor for PolicyActor<'_> {
    fn act(
        &self,
        env: &Env,
        state: &EpisodeState,
        role: Role,
        legal: &[ActionPrimitive],
        rng: &mut Stream,
    ) -> Result<Choice> {
        let x = featurize_local(&env.observe(state, role)?);
        let dist = crate::policy::action_distribution(self.weights, role, &x, legal)?;
        let (mut index, mut log_prob) = sample_action(&dist, rng);
        if self.greedy {
            index = dist.argmax();
            log_prob = dist.log_prob(index);
        }
        Ok(Choice {
            index,
            log_prob,
            features: x,
        })
    }
}

pub(crate) fn policy_streams(seed: u64, order: &[Role]) -> Vec<Stream> {
    order
        .iter()
        .map(|r| rng::derived_stream(seed, &[label::POLICY_ROLE, r.index() as u64]))
        .collect()
}

/// Plays one turn. With `forced` the actor is bypassed but the acting role's
/// policy stream still advances by one draw.
pub(crate) fn play_turn(
    env: &Env,
    state: &mut EpisodeState,
    streams: &mut [Stream],
    actor: &dyn Actor,
    forced: Option<usize>,
) -> Result<(Choice, Vec<ActionPrimitive>, StepLog)> {
    let role = state.speaker();
    let pos = state.position(role).expect("speaker is on the team");
    let legal = env.legal_actions(state, role)?;
    let choice = match forced {
        Some(index) => {
            let _: f64 = streams[pos].random();
            Choice {
                index,
                log_prob: 0.0,
                features: Vec::new(),
            }
        }
        None => actor.act(env, state, role, &legal, &mut streams[pos])?,
    };
    let (_, log) = env.apply_action(state, role, &legal[choice.index])?;
    Ok((choice, legal, log))
}

/// Raw reward inputs of a finished state, without a step log.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub family: TaskFamily,
    pub raw: RawRewardComponents,
    /// Quality credit per role, indexed by `Role::index`.
    pub local: [f64; Role::COUNT],
}

pub fn outcome_of(env: &Env, state: &EpisodeState, coeffs: &PenaltyCoefficients) -> Outcome {
    let (q, credits) = env.quality_with_credit(state);
    let (coordination, compliance) = coeffs.penalties(&state.counters);
    let mut local = [0.0; Role::COUNT];
    for c in credits {
        local[c.role.index()] += c.amount;
    }
    Outcome {
        family: state.task.family,
        raw: RawRewardComponents {
            quality: q.overall,
            speed_raw: state.ticks_elapsed as f64,
            coordination_penalty: coordination,
            compliance_penalty: compliance,
        },
        local,
    }
}

/// Runs an episode to termination.
pub fn run_episode(
    env: &Env,
    task: &TaskSpec,
    order: &[Role],
    seed: u64,
    actor: &dyn Actor,
    keep_snapshots: bool,
) -> Result<Rollout> {
    let mut state = env.new_episode(task, order, seed)?;
    let mut streams = policy_streams(seed, order);
    let mut transitions = Vec::new();
    let mut snapshots = Vec::new();
    let mut steps = Vec::new();
    while !state.is_terminal() {
        if keep_snapshots {
            snapshots.push(Snapshot {
                state: state.clone(),
                policy_streams: streams.clone(),
            });
        }
        let global = featurize_global(&state, env.quality_score(&state).overall);
        let turn = state.turn;
        let (choice, legal, log) = play_turn(env, &mut state, &mut streams, actor, None)?;
        transitions.push(Transition {
            turn,
            role: log.role,
            features: choice.features,
            legal: legal.iter().map(|a| a.kind()).collect(),
            action: choice.index,
            log_prob_old: choice.log_prob,
            global_features: global,
        });
        steps.push(log);
    }
    let record = EpisodeRecord::from_state(env, &state, steps);
    Ok(Rollout {
        trajectory: Trajectory {
            transitions,
            record,
            breakdown: None,
            meta: EpisodeMeta {
                seed,
                family: task.family,
                length_class: task.length_class(),
                order: order.to_vec(),
            },
        },
        snapshots,
    })
}

/// Task drawn for a batch slot: family, length class and difficulty come
/// from the slot index and `seed`.
pub fn sample_task(cfg: &TrainConfig, family: TaskFamily, class: LengthClass, max_turns: u32, seed: u64) -> Result<TaskSpec> {
    let mut r = rng::derived_stream(seed, &[label::TASK]);
    let (lo, hi) = match class {
        LengthClass::Short => cfg.tasks.short_slots,
        LengthClass::Long => cfg.tasks.long_slots,
    };
    let slots = r.random_range(lo..=hi);
    let difficulty = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard][r.random_range(0..3)];
    TaskSpec::generate(family, difficulty, slots, max_turns, max_turns * cfg.tasks.ticks_per_turn, seed)
}

/// Layout of a batch: the first `round(mix * n)` slots are short, the rest
/// long, and families alternate within each class.
pub fn batch_layout(n: usize, short_long_mix: f64) -> Vec<(TaskFamily, LengthClass)> {
    let n_short = (n as f64 * short_long_mix).round() as usize;
    (0..n)
        .map(|i| {
            let class = if i < n_short { LengthClass::Short } else { LengthClass::Long };
            let k = if i < n_short { i } else { i - n_short };
            let family = if k % 2 == 0 { TaskFamily::Writing } else { TaskFamily::Coding };
            (family, class)
        })
        .collect()
}

/// One training batch from a frozen policy snapshot. Every episode gets its
/// own task, seed and shuffled turn order.
pub fn collect_rollouts(
    env: &Env,
    cfg: &TrainConfig,
    params: &PolicyParams,
    iteration: u32,
    seed: u64,
    keep_snapshots: bool,
) -> Result<Vec<Rollout>> {
    let max_turns = cfg.tasks.max_turns(iteration, cfg.grpo.iterations);
    let layout = batch_layout(cfg.grpo.batch_episodes, cfg.tasks.short_long_mix);
    let actor = PolicyActor {
        weights: &params.weights,
        greedy: false,
    };
    let results = par::map_range(cfg.exec, layout.len(), |i| {
        let (family, class) = layout[i];
        let ep_seed = rng::derive_seed(seed, &[label::EPISODE, iteration as u64, i as u64]);
        let task = sample_task(cfg, family, class, max_turns, ep_seed)?;
        let mut order = Role::default_team(family);
        order.shuffle(&mut rng::derived_stream(ep_seed, &[label::ROLE_ORDER]));
        run_episode(env, &task, &order, ep_seed, &actor, keep_snapshots)
    });
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_mixes_classes_and_families() {
        let l = batch_layout(8, 0.5);
        let short = l.iter().filter(|(_, c)| *c == LengthClass::Short).count();
        let writing = l.iter().filter(|(f, _)| *f == TaskFamily::Writing).count();
        assert_eq!((short, writing), (4, 4));
    }

    #[test]
    fn rollouts_match_requested_classes() {
        let env = Env::default();
        let mut cfg = TrainConfig::default();
        cfg.grpo.batch_episodes = 8;
        let params = PolicyParams::init(&Role::ALL, 2, &mut rng::stream(1)).unwrap();
        let batch = collect_rollouts(&env, &cfg, &params, 0, 7, false).unwrap();
        let short = batch
            .iter()
            .filter(|r| r.trajectory.record.task.length_class() == LengthClass::Short)
            .count();
        assert_eq!(short, 4);
        for r in &batch {
            assert!(r.trajectory.record.terminal.is_some());
            assert!(r.trajectory.transitions.iter().all(|t| t.log_prob_old <= 0.0 && t.legal_set_size() >= 1));
        }
    }

    #[test]
    fn recorded_log_probs_survive_parameter_changes() {
        let env = Env::default();
        let mut cfg = TrainConfig::default();
        cfg.grpo.batch_episodes = 2;
        let mut params = PolicyParams::init(&Role::ALL, 2, &mut rng::stream(1)).unwrap();
        let batch = collect_rollouts(&env, &cfg, &params, 0, 7, false).unwrap();
        let before: Vec<f64> = batch[0].trajectory.transitions.iter().map(|t| t.log_prob_old).collect();
        params.weights.shared.iter_mut().for_each(|w| *w = 5.0);
        let after: Vec<f64> = batch[0].trajectory.transitions.iter().map(|t| t.log_prob_old).collect();
        assert_eq!(before, after);
    }
}
