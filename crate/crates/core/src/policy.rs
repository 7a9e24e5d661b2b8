//! Linear-softmax role policies with low-rank role adapters, and an affine
//! centralized critic.
//!
//! Logits for role `r` are `x · (W + U_r V_rᵀ)` where `x` is the local
//! feature vector, `W` is shared across roles and `U_r V_rᵀ` is the role's
//! adapter of rank at most [`MAX_ADAPTER_RANK`].

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{ActionKind, ActionPrimitive, EpisodeState, Observation, Role, SlotStatus, TaskFamily};
use crate::error::{Error, Result};

pub const ACTIONS: usize = ActionKind::COUNT;
pub const MAX_ADAPTER_RANK: usize = 4;
/// Slots encoded individually in the global features.
pub const GLOBAL_SLOTS: usize = 8;

pub const LOCAL_DIM: usize = 33;
pub const GLOBAL_DIM: usize = 1 + GLOBAL_SLOTS * 5 + 14;

/// Local feature layout version, bumped whenever `featurize_local` changes.
pub const FEATURE_SCHEMA: u32 = 1;

pub mod feat {
    pub const BIAS: usize = 0;
    pub const HISTOGRAM: usize = 1;
    pub const SCOPE_FROZEN: usize = 6;
    pub const TERM_FROZEN: usize = 7;
    pub const BLOCKER: usize = 8;
    pub const FAILING_OWNED: usize = 9;
    pub const TURN_FRACTION: usize = 18;
    pub const ROLE: usize = 26;
}

/// Local features from a role's observation. Fixed length [`LOCAL_DIM`].
pub fn featurize_local(obs: &Observation) -> Vec<f64> {
    let n = obs.brief.slot_count.max(1) as f64;
    let a = &obs.artifact;
    let mut x = vec![0.0; LOCAL_DIM];
    x[feat::BIAS] = 1.0;
    for (i, &c) in a.histogram.iter().enumerate() {
        x[feat::HISTOGRAM + i] = c as f64 / n;
    }
    x[feat::SCOPE_FROZEN] = obs.scope_frozen as u8 as f64;
    x[feat::TERM_FROZEN] = obs.term_frozen as u8 as f64;
    x[feat::BLOCKER] = obs.blocker_raised as u8 as f64;
    let own_failing = a.slots.iter().filter(|s| s.open_failures > 0).count();
    x[feat::FAILING_OWNED] = own_failing as f64;
    x[10] = a.unreviewed as f64 / n;
    x[11] = a.untested as f64 / n;
    x[12] = a.open_failures as f64 / n;
    let own = a.slots.len().max(1) as f64;
    x[13] = a.slots.iter().filter(|s| s.status == SlotStatus::Empty).count() as f64 / own;
    x[14] = a.slots.iter().filter(|s| s.status == SlotStatus::Drafted).count() as f64 / own;
    x[15] = obs.remaining.turns as f64 / obs.brief.max_turns.max(1) as f64;
    x[16] = obs.remaining.ticks as f64 / obs.brief.tick_budget.max(1) as f64;
    x[17] = (obs.remaining.message_tokens as f64 / 240.0).min(1.0);
    x[feat::TURN_FRACTION] = obs.turn as f64 / obs.brief.max_turns.max(1) as f64;
    x[19] = obs.clock.nudged as u8 as f64;
    x[20] = obs.clock.forced as u8 as f64;
    x[21] = (obs.clock.holds_floor && obs.clock.streak == 0) as u8 as f64;
    x[22] = obs.clock.streak as f64 / 5.0;
    x[23] = a.next_in_order_mine as u8 as f64;
    x[24] = (obs.brief.family == TaskFamily::Coding) as u8 as f64;
    let done = a.histogram[0] + a.histogram[1] == 0;
    x[25] = done as u8 as f64;
    x[feat::ROLE + obs.role.index()] = 1.0;
    x[32] = obs.own_memory.checklist.len() as f64 / n;
    x
}

/// Global features from the full state, for the critic. Fixed length
/// [`GLOBAL_DIM`].
pub fn featurize_global(state: &EpisodeState, quality_so_far: f64) -> Vec<f64> {
    let mut x = vec![0.0; GLOBAL_DIM];
    x[0] = 1.0;
    for slot in 0..GLOBAL_SLOTS {
        let status = state.slots.get(slot).map_or(SlotStatus::Empty, |s| s.status);
        x[1 + slot * 5 + status.index()] = 1.0;
    }
    let c = &state.counters;
    let base = 1 + GLOBAL_SLOTS * 5;
    // Counts are scaled by the turn cap so the critic's step size stays stable.
    let per_turn = 1.0 / state.task.max_turns.max(1) as f64;
    let tail = [
        c.redundant_turns as f64 * per_turn,
        c.overbudget_tokens as f64 / 720.0,
        c.conflict_reopens as f64 * per_turn,
        c.schema_violations as f64 * per_turn,
        c.unsafe_tool_calls as f64 * per_turn,
        c.style_drift as f64 * per_turn,
        c.interventions as f64 * per_turn,
        quality_so_far,
        state.token_count as f64 / 720.0,
        state.receipts.len() as f64 * per_turn,
        state.turn as f64 * per_turn,
        state.ticks_elapsed as f64 / state.task.tick_budget.max(1) as f64,
        (state.task.family == TaskFamily::Coding) as u8 as f64,
        state.rail.len() as f64 * per_turn,
    ];
    x[base..].copy_from_slice(&tail);
    x
}

/// Index of the receipt-count entry in the global features (receipts per
/// allowed turn).
pub const GLOBAL_RECEIPTS: usize = 1 + GLOBAL_SLOTS * 5 + 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    /// `LOCAL_DIM × rank`, row-major.
    pub u: Vec<f64>,
    /// `ACTIONS × rank`, row-major.
    pub v: Vec<f64>,
}

/// Trainable weights: shared matrix plus one adapter per role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    /// `LOCAL_DIM × ACTIONS`, row-major.
    pub shared: Vec<f64>,
    pub adapters: BTreeMap<Role, Adapter>,
    pub rank: usize,
}

impl Weights {
    pub fn zeros_like(&self) -> Self {
        Weights {
            shared: vec![0.0; self.shared.len()],
            adapters: self
                .adapters
                .iter()
                .map(|(&r, a)| {
                    (
                        r,
                        Adapter {
                            u: vec![0.0; a.u.len()],
                            v: vec![0.0; a.v.len()],
                        },
                    )
                })
                .collect(),
            rank: self.rank,
        }
    }

    pub fn len(&self) -> usize {
        self.shared.len() + self.adapters.values().map(|a| a.u.len() + a.v.len()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All values in a fixed order: shared, then each role's `u` and `v`.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = self.shared.clone();
        for a in self.adapters.values() {
            out.extend_from_slice(&a.u);
            out.extend_from_slice(&a.v);
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: values.len(),
            });
        }
        let (head, mut rest) = values.split_at(self.shared.len());
        self.shared.copy_from_slice(head);
        for a in self.adapters.values_mut() {
            let (u, r) = rest.split_at(a.u.len());
            a.u.copy_from_slice(u);
            let (v, r) = r.split_at(a.v.len());
            a.v.copy_from_slice(v);
            rest = r;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|v| v.is_finite())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Weights, scale: f64) {
        for (a, b) in self.shared.iter_mut().zip(&other.shared) {
            *a += scale * b;
        }
        for (role, a) in self.adapters.iter_mut() {
            let b = &other.adapters[role];
            for (x, y) in a.u.iter_mut().zip(&b.u) {
                *x += scale * y;
            }
            for (x, y) in a.v.iter_mut().zip(&b.v) {
                *x += scale * y;
            }
        }
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in self.flat() {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn logits(&self, role: Role, x: &[f64]) -> Result<[f64; ACTIONS]> {
        if x.len() != LOCAL_DIM {
            return Err(Error::DimensionMismatch {
                expected: LOCAL_DIM,
                got: x.len(),
            });
        }
        let mut z = [0.0; ACTIONS];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.shared[i * ACTIONS..(i + 1) * ACTIONS];
            for (zv, w) in z.iter_mut().zip(row) {
                *zv += xi * w;
            }
        }
        if let Some(a) = self.adapters.get(&role) {
            let k = self.rank;
            let mut xu = vec![0.0; k];
            for (i, &xi) in x.iter().enumerate() {
                for (j, acc) in xu.iter_mut().enumerate() {
                    *acc += xi * a.u[i * k + j];
                }
            }
            for (v, zv) in z.iter_mut().enumerate() {
                *zv += (0..k).map(|j| xu[j] * a.v[v * k + j]).sum::<f64>();
            }
        }
        Ok(z)
    }

    /// Adds the parameter gradient of `g · logits(role, x)` into `grad`.
    pub fn accumulate(&self, role: Role, x: &[f64], g: &[f64; ACTIONS], grad: &mut Weights) {
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &mut grad.shared[i * ACTIONS..(i + 1) * ACTIONS];
            for (gw, gv) in row.iter_mut().zip(g) {
                *gw += xi * gv;
            }
        }
        let (Some(a), Some(ga)) = (self.adapters.get(&role), grad.adapters.get_mut(&role)) else {
            return;
        };
        let k = self.rank;
        // dU_ij = x_i * sum_v g_v V_vj ; dV_vj = g_v * (xᵀU)_j
        let mut gv_v = vec![0.0; k];
        let mut xu = vec![0.0; k];
        for j in 0..k {
            gv_v[j] = (0..ACTIONS).map(|v| g[v] * a.v[v * k + j]).sum();
            xu[j] = x.iter().enumerate().map(|(i, xi)| xi * a.u[i * k + j]).sum();
        }
        for (i, &xi) in x.iter().enumerate() {
            for j in 0..k {
                ga.u[i * k + j] += xi * gv_v[j];
            }
        }
        for v in 0..ACTIONS {
            for j in 0..k {
                ga.v[v * k + j] += g[v] * xu[j];
            }
        }
    }
}

/// Policy parameters plus the frozen reference they are regularized toward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub weights: Weights,
    reference: Weights,
    reference_checksum: String,
}

impl PolicyParams {
    /// Shared weights at zero, `U` small and random, `V` at zero: the
    /// initial policy is uniform over every legal set.
    pub fn init(roles: &[Role], rank: usize, rng: &mut impl Rng) -> Result<Self> {
        if rank == 0 || rank > MAX_ADAPTER_RANK {
            return Err(Error::field("adapter_rank", format!("must lie in 1..={MAX_ADAPTER_RANK}")));
        }
        let mut adapters = BTreeMap::new();
        let mut sorted = roles.to_vec();
        sorted.sort();
        sorted.dedup();
        for r in sorted {
            let u = (0..LOCAL_DIM * rank).map(|_| rng.random_range(-0.1..0.1)).collect();
            adapters.insert(
                r,
                Adapter {
                    u,
                    v: vec![0.0; ACTIONS * rank],
                },
            );
        }
        let weights = Weights {
            shared: vec![0.0; LOCAL_DIM * ACTIONS],
            adapters,
            rank,
        };
        Ok(Self::from_weights(weights))
    }

    /// Wraps `weights` and freezes a copy of them as the reference.
    pub fn from_weights(weights: Weights) -> Self {
        let reference_checksum = weights.checksum();
        Self {
            reference: weights.clone(),
            weights,
            reference_checksum,
        }
    }

    /// Restores parameters with an explicit reference, as read from a
    /// checkpoint.
    pub fn with_reference(weights: Weights, reference: Weights) -> Result<Self> {
        if weights.len() != reference.len() || weights.rank != reference.rank {
            return Err(Error::Checkpoint("reference shape differs from weights".into()));
        }
        let reference_checksum = reference.checksum();
        Ok(Self {
            weights,
            reference,
            reference_checksum,
        })
    }

    pub fn reference(&self) -> &Weights {
        &self.reference
    }

    pub fn reference_checksum(&self) -> &str {
        &self.reference_checksum
    }

    /// Distribution of the current weights.
    pub fn distribution(&self, role: Role, x: &[f64], legal: &[ActionPrimitive]) -> Result<ActionDistribution> {
        action_distribution(&self.weights, role, x, legal)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticParams {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl CriticParams {
    pub fn zeros() -> Self {
        Self {
            weights: vec![0.0; GLOBAL_DIM],
            bias: 0.0,
        }
    }
}

pub fn critic_value(critic: &CriticParams, x: &[f64]) -> Result<f64> {
    if x.len() != critic.weights.len() {
        return Err(Error::DimensionMismatch {
            expected: critic.weights.len(),
            got: x.len(),
        });
    }
    Ok(critic.bias + critic.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
}

/// Softmax over the legal support. `kinds[i]` is the head column of
/// `support[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    pub support: Vec<ActionPrimitive>,
    pub probs: Vec<f64>,
}

impl ActionDistribution {
    pub fn kinds(&self) -> impl Iterator<Item = ActionKind> + '_ {
        self.support.iter().map(|a| a.kind())
    }

    pub fn log_prob(&self, index: usize) -> f64 {
        self.probs[index].ln()
    }

    pub fn entropy(&self) -> f64 {
        -self.probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Masked, numerically stable softmax of `logits` over `legal`.
pub fn softmax_over(logits: &[f64; ACTIONS], legal: &[ActionPrimitive]) -> Result<ActionDistribution> {
    if legal.is_empty() {
        return Err(Error::EmptyLegalSet);
    }
    let zs: Vec<f64> = legal.iter().map(|a| logits[a.kind().index()]).collect();
    let m = zs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = zs.iter().map(|z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ActionDistribution {
        support: legal.to_vec(),
        probs: exps.iter().map(|e| e / total).collect(),
    })
}

pub fn action_distribution(
    weights: &Weights,
    role: Role,
    x: &[f64],
    legal: &[ActionPrimitive],
) -> Result<ActionDistribution> {
    softmax_over(&weights.logits(role, x)?, legal)
}

/// Draws one index with exactly one uniform draw from `rng`.
pub fn sample_action(dist: &ActionDistribution, rng: &mut impl Rng) -> (usize, f64) {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let last = dist.probs.len() - 1;
    for (i, &p) in dist.probs.iter().enumerate() {
        acc += p;
        if u < acc && p > 0.0 {
            return (i, p.ln());
        }
    }
    // Rounding left `acc` a hair under 1; fall back to the last positive entry.
    let i = (0..=last).rev().find(|&i| dist.probs[i] > 0.0).unwrap_or(last);
    (i, dist.probs[i].ln())
}

/// KL(p ‖ q) in nats.
pub fn kl_divergence(p: &ActionDistribution, q: &ActionDistribution) -> Result<f64> {
    if p.support != q.support {
        return Err(Error::SupportMismatch);
    }
    kl_probs(&p.probs, &q.probs)
}

pub fn kl_probs(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::SupportMismatch);
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::KlUndefined);
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Difficulty, Env, HandoffTarget, TaskSpec};
    use crate::rng;

    fn two() -> Vec<ActionPrimitive> {
        vec![
            ActionPrimitive::Finalize,
            ActionPrimitive::Handoff {
                to: HandoffTarget::Peer,
            },
        ]
    }

    fn dist(p: &[f64]) -> ActionDistribution {
        ActionDistribution {
            support: two(),
            probs: p.to_vec(),
        }
    }

    fn params(seed: u64) -> PolicyParams {
        PolicyParams::init(&Role::ALL, 2, &mut rng::stream(seed)).unwrap()
    }

    #[test]
    fn kl_known_value() {
        let kl = kl_divergence(&dist(&[0.5, 0.5]), &dist(&[0.25, 0.75])).unwrap();
        let oracle = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl - oracle).abs() < 1e-15);
        assert!((kl - 0.1438).abs() < 1e-4);
        assert_eq!(kl_divergence(&dist(&[0.3, 0.7]), &dist(&[0.3, 0.7])).unwrap(), 0.0);
        assert!((kl_divergence(&dist(&[0.0, 1.0]), &dist(&[0.5, 0.5])).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(
            kl_divergence(&dist(&[0.5, 0.5]), &dist(&[1.0, 0.0])),
            Err(Error::KlUndefined)
        ));
    }

    #[test]
    fn zero_params_give_uniform() {
        let w = params(1).weights;
        let x = vec![0.3; LOCAL_DIM];
        let d = action_distribution(&w, Role::Writer, &x, &two()).unwrap();
        assert_eq!(d.probs, vec![0.5, 0.5]);
        let one = action_distribution(&w, Role::Writer, &x, &two()[..1]).unwrap();
        assert_eq!(one.probs, vec![1.0]);
        assert!(matches!(action_distribution(&w, Role::Writer, &x, &[]), Err(Error::EmptyLegalSet)));
    }

    #[test]
    fn shift_invariance() {
        let mut z = [0.0; ACTIONS];
        for (i, v) in z.iter_mut().enumerate() {
            *v = i as f64 * 0.37 - 1.0;
        }
        let legal = two();
        let a = softmax_over(&z, &legal).unwrap();
        let b = softmax_over(&z.map(|v| v + 2.0), &legal).unwrap();
        for (p, q) in a.probs.iter().zip(&b.probs) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    #[test]
    fn sampling_frequencies() {
        let d = dist(&[0.25, 0.75]);
        let mut rng = rng::stream(17);
        let n = 10_000;
        let hits = (0..n).filter(|_| sample_action(&d, &mut rng).0 == 0).count();
        assert!((hits as f64 / n as f64 - 0.25).abs() < 0.02);
        let (i, lp) = sample_action(&dist(&[1.0, 0.0]), &mut rng);
        assert_eq!((i, lp), (0, 0.0));
        let mut a = rng::stream(3);
        let mut b = rng::stream(3);
        assert_eq!(sample_action(&d, &mut a), sample_action(&d, &mut b));
    }

    #[test]
    fn critic_is_affine() {
        let mut c = CriticParams::zeros();
        c.bias = 0.5;
        let x = vec![0.0; GLOBAL_DIM];
        assert_eq!(critic_value(&c, &x).unwrap(), 0.5);
        c.weights[0] = 1.0;
        let mut f = x.clone();
        f[0] = 2.0;
        assert_eq!(critic_value(&c, &f).unwrap(), 2.5);
        assert!(matches!(critic_value(&c, &[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn logits_match_dense_product() {
        let mut p = params(5);
        let mut r = rng::stream(9);
        let flat: Vec<f64> = (0..p.weights.len()).map(|_| r.random_range(-1.0..1.0)).collect();
        p.weights.set_flat(&flat).unwrap();
        let x: Vec<f64> = (0..LOCAL_DIM).map(|_| r.random_range(-1.0..1.0)).collect();
        let z = p.weights.logits(Role::Coder, &x).unwrap();
        let a = &p.weights.adapters[&Role::Coder];
        let k = p.weights.rank;
        for v in 0..ACTIONS {
            let mut oracle = 0.0;
            for i in 0..LOCAL_DIM {
                let uv: f64 = (0..k).map(|j| a.u[i * k + j] * a.v[v * k + j]).sum();
                oracle += x[i] * (p.weights.shared[i * ACTIONS + v] + uv);
            }
            assert!((z[v] - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn reference_is_frozen() {
        let mut p = params(2);
        let sum = p.reference_checksum().to_string();
        p.weights.shared[0] = 3.0;
        assert_eq!(p.reference().checksum(), sum);
        assert_ne!(p.weights.checksum(), sum);
    }

    #[test]
    fn features_on_fresh_and_frozen_states() {
        let env = Env::default();
        let task = TaskSpec::generate(TaskFamily::Coding, Difficulty::Easy, 3, 20, 60, 4).unwrap();
        let mut s = env.new_episode(&task, &[Role::Planner, Role::Coder, Role::Tester], 4).unwrap();
        let x = featurize_local(&env.observe(&s, Role::Coder).unwrap());
        assert_eq!(x.len(), LOCAL_DIM);
        assert_eq!(x[feat::TURN_FRACTION], 0.0);
        assert_eq!(x[feat::FAILING_OWNED], 0.0);
        assert_eq!(x[feat::TERM_FROZEN], 0.0);
        assert_eq!(x, featurize_local(&env.observe(&s, Role::Coder).unwrap()));
        let g = featurize_global(&s, 0.0);
        assert!(GLOBAL_DIM > LOCAL_DIM);
        for slot in 0..GLOBAL_SLOTS {
            assert_eq!(g[1 + slot * 5 + SlotStatus::Empty.index()], 1.0);
        }

        let plan = env.legal_actions(&s, Role::Planner).unwrap()[0].clone();
        env.apply_action(&mut s, Role::Planner, &plan).unwrap();
        let x = featurize_local(&env.observe(&s, Role::Coder).unwrap());
        assert_eq!(x[feat::TERM_FROZEN], 1.0);

        s.slots[0].status = SlotStatus::Drafted;
        env.run_tool(&mut s, crate::env::Tool::Lint, 0).unwrap();
        env.run_tool(&mut s, crate::env::Tool::Lint, 0).unwrap();
        assert_eq!(featurize_global(&s, 0.0)[GLOBAL_RECEIPTS], 2.0 / 20.0);
    }
}
