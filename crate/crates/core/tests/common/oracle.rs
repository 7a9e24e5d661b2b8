//! Reference computations written against the environment and policy
//! primitives only, without going through the trainer's replay or update
//! code.

use rand::Rng;
use teamgrpo_core::env::{ActionPrimitive, Env, EpisodeState, Role, TaskFamily};
use teamgrpo_core::policy::{featurize_local, PolicyParams, Weights, ACTIONS};
use teamgrpo_core::reward::{FamilyNorm, PenaltyCoefficients, RawRewardComponents, RewardWeights};
use teamgrpo_core::rng::Stream;
use teamgrpo_core::trainer::Rollout;

pub fn softmax(logits: &[f64; ACTIONS], legal: &[ActionPrimitive]) -> Vec<f64> {
    let z: Vec<f64> = legal.iter().map(|a| logits[a.kind().index()]).collect();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Inverse-CDF pick with one uniform draw.
pub fn pick(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc && pi > 0.0 {
            return i;
        }
    }
    (0..p.len()).rev().find(|&i| p[i] > 0.0).unwrap()
}

pub fn raw_of(env: &Env, s: &EpisodeState, coeffs: &PenaltyCoefficients) -> RawRewardComponents {
    let c = &s.counters;
    let coordination = coeffs.redundant_turn * c.redundant_turns as f64
        + coeffs.overbudget_token * c.overbudget_tokens as f64
        + coeffs.conflict_reopen * c.conflict_reopens as f64;
    let compliance = coeffs.schema_violation * c.schema_violations as f64
        + coeffs.unsafe_tool * c.unsafe_tool_calls as f64
        + coeffs.style_drift * c.style_drift as f64;
    RawRewardComponents {
        quality: env.quality_score(s).overall,
        speed_raw: s.ticks_elapsed as f64,
        coordination_penalty: coordination,
        compliance_penalty: compliance,
    }
}

pub fn combined(norm: &FamilyNorm, w: &RewardWeights, family: TaskFamily, raw: &RawRewardComponents) -> f64 {
    let n = norm.apply(family, raw);
    w.w_quality * n[0] + w.w_speed * n[1] - w.w_coordination * n[2] - w.w_compliance * n[3]
}

/// Plays from `state` to the end: the first move is `forced` (still burning
/// one draw of the mover's stream), the rest are sampled from `weights`.
pub fn finish(env: &Env, mut state: EpisodeState, mut streams: Vec<Stream>, weights: &Weights, forced: usize) -> EpisodeState {
    let mut first = Some(forced);
    while !state.is_terminal() {
        let role = state.speaker();
        let pos = state.order.iter().position(|&r| r == role).unwrap();
        let legal = env.legal_actions(&state, role).unwrap();
        let u: f64 = streams[pos].random();
        let i = match first.take() {
            Some(f) => f,
            None => {
                let x = featurize_local(&env.observe(&state, role).unwrap());
                pick(&softmax(&weights.logits(role, &x).unwrap(), &legal), u)
            }
        };
        env.apply_action(&mut state, role, &legal[i]).unwrap();
    }
    state
}

/// Every legal replacement of the move at `t` with its policy probability
/// and the combined return of the replayed episode.
pub fn enumerate_replacements(
    env: &Env,
    rollout: &Rollout,
    t: usize,
    weights: &Weights,
    norm: &FamilyNorm,
    w: &RewardWeights,
    coeffs: &PenaltyCoefficients,
) -> Vec<(f64, f64)> {
    let snap = &rollout.snapshots[t];
    let role: Role = snap.state.speaker();
    let legal = env.legal_actions(&snap.state, role).unwrap();
    let x = featurize_local(&env.observe(&snap.state, role).unwrap());
    let p = softmax(&weights.logits(role, &x).unwrap(), &legal);
    (0..legal.len())
        .map(|a| {
            let end = finish(env, snap.state.clone(), snap.policy_streams.clone(), weights, a);
            (p[a], combined(norm, w, end.task.family, &raw_of(env, &end, coeffs)))
        })
        .collect()
}

pub fn mean_var(pv: &[(f64, f64)]) -> (f64, f64) {
    let mean: f64 = pv.iter().map(|(p, v)| p * v).sum();
    let var: f64 = pv.iter().map(|(p, v)| p * (v - mean).powi(2)).sum();
    (mean, var)
}

/// Random weights with every block populated, so logits depend on all of them.
pub fn random_weights(base: &PolicyParams, scale: f64, r: &mut impl Rng) -> Weights {
    let mut w = base.weights.clone();
    let flat: Vec<f64> = w.flat().iter().map(|_| r.random_range(-scale..scale)).collect();
    w.set_flat(&flat).unwrap();
    w
}

/// Short episodes for the baseline oracle: at most three turns and at most
/// four legal moves on every turn, played by `weights` with snapshots kept.
pub fn loo_fixtures(env: &Env, weights: &Weights, count: usize, seed: u64) -> Vec<Rollout> {
    use rand::seq::SliceRandom;
    use teamgrpo_core::env::{Difficulty, TaskSpec};
    use teamgrpo_core::rng;
    use teamgrpo_core::trainer::{run_episode, PolicyActor};

    let actor = PolicyActor { weights, greedy: false };
    let mut r = rng::stream(seed);
    let mut out = Vec::new();
    let mut s = seed;
    while out.len() < count {
        s = rng::derive_seed(s, &[1]);
        let family = if r.random_bool(0.5) { TaskFamily::Writing } else { TaskFamily::Coding };
        let drafter = if family == TaskFamily::Writing { Role::Writer } else { Role::Coder };
        let mut team = vec![Role::Planner, drafter];
        team.shuffle(&mut r);
        if r.random_bool(0.25) {
            team = vec![drafter];
        }
        let difficulty = Difficulty::ALL[r.random_range(0..3)];
        let task = TaskSpec::generate(family, difficulty, r.random_range(1..=2), r.random_range(1..=3), 30, s).unwrap();
        let rollout = run_episode(env, &task, &team, s, &actor, true).unwrap();
        let t = &rollout.trajectory.transitions;
        if t.len() <= 3 && t.iter().all(|x| x.legal.len() <= 4) {
            out.push(rollout);
        }
    }
    out
}

/// Largest relative gap between the analytic surrogate gradient and central
/// differences of the surrogate loss, over every parameter.
pub fn gradient_error(
    params: &PolicyParams,
    batch: &[teamgrpo_core::trainer::Trajectory],
    advantages: &[Vec<teamgrpo_core::trainer::AdvantageEstimate>],
    returns: &[Vec<f64>],
    cfg: &teamgrpo_core::trainer::GrpoConfig,
    h: f64,
) -> f64 {
    use teamgrpo_core::policy::CriticParams;
    use teamgrpo_core::trainer::surrogate_loss_and_grad;

    let critic = CriticParams::zeros();
    let analytic = surrogate_loss_and_grad(batch, params, &critic, advantages, returns, cfg)
        .unwrap()
        .grad
        .flat();
    let base = params.weights.flat();
    let loss_at = |flat: &[f64]| {
        let mut w = params.weights.clone();
        w.set_flat(flat).unwrap();
        let p = PolicyParams::with_reference(w, params.reference().clone()).unwrap();
        surrogate_loss_and_grad(batch, &p, &critic, advantages, returns, cfg).unwrap().loss
    };
    let mut worst = 0.0f64;
    let mut x = base.clone();
    for i in 0..base.len() {
        x[i] = base[i] + h;
        let up = loss_at(&x);
        x[i] = base[i] - h;
        let down = loss_at(&x);
        x[i] = base[i];
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

/// Random advantages and returns shaped like `batch`.
pub fn random_targets(
    batch: &[teamgrpo_core::trainer::Trajectory],
    r: &mut impl Rng,
) -> (Vec<Vec<teamgrpo_core::trainer::AdvantageEstimate>>, Vec<Vec<f64>>) {
    use teamgrpo_core::trainer::{AdvantageEstimate, BaselineMode};
    let adv = batch
        .iter()
        .map(|t| {
            t.transitions
                .iter()
                .map(|_| AdvantageEstimate {
                    advantage: r.random_range(-2.0..2.0),
                    baseline_value: 0.0,
                    mode_used: BaselineMode::LeaveOneOut,
                })
                .collect()
        })
        .collect();
    let ret = batch
        .iter()
        .map(|t| t.transitions.iter().map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    (adv, ret)
}
