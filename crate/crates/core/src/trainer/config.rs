use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::buffer::BufferConfig;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::par::Exec;
use crate::reward::{PenaltyCoefficients, RewardWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    LeaveOneOut,
    Constant,
    Critic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Joint,
    LocalOnly,
}

/// What replaces the acting role's move in a counterfactual rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Replacement {
    /// A fresh draw from the snapshot policy.
    Policy,
    /// Passing the floor, which is always legal.
    Noop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub clip_epsilon: f64,
    pub entropy_coef: f64,
    pub kl_coef: f64,
    pub counterfactual_k: u32,
    /// Enumerate every legal replacement instead of sampling K of them.
    pub exhaustive: bool,
    pub replacement: Replacement,
    pub baseline_mode: BaselineMode,
    pub learning_rate: f64,
    pub critic_lr: f64,
    pub batch_episodes: usize,
    pub iterations: u32,
    /// Gradient steps per collected batch.
    pub epochs: u32,
    pub reward_mode: RewardMode,
    pub coordination_term: bool,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            entropy_coef: 0.01,
            kl_coef: 0.02,
            counterfactual_k: 4,
            exhaustive: false,
            replacement: Replacement::Policy,
            baseline_mode: BaselineMode::LeaveOneOut,
            learning_rate: 0.5,
            critic_lr: 0.05,
            batch_episodes: 32,
            iterations: 150,
            epochs: 2,
            reward_mode: RewardMode::Joint,
            coordination_term: true,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::field("clip_epsilon", "must lie in (0, 1)"));
        }
        for (name, v) in [
            ("entropy_coef", self.entropy_coef),
            ("kl_coef", self.kl_coef),
            ("learning_rate", self.learning_rate),
            ("critic_lr", self.critic_lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::field(name, "must be a finite non-negative number"));
            }
        }
        if self.batch_episodes == 0 {
            return Err(Error::field("batch_episodes", "must be positive"));
        }
        if self.baseline_mode == BaselineMode::LeaveOneOut
            && self.counterfactual_k == 0
            && !self.exhaustive
            && self.replacement == Replacement::Policy
        {
            return Err(Error::field("counterfactual_k", "must be positive for the leave-one-out baseline"));
        }
        Ok(())
    }
}

/// How training tasks are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMix {
    /// Share of each batch drawn from the short length class.
    pub short_long_mix: f64,
    pub short_slots: (usize, usize),
    pub long_slots: (usize, usize),
    /// Turn cap at the first iteration and at the last.
    pub turns_start: u32,
    pub turns_end: u32,
    /// Tick budget as a multiple of the turn cap.
    pub ticks_per_turn: u32,
}

impl Default for TaskMix {
    fn default() -> Self {
        Self {
            short_long_mix: 0.5,
            short_slots: (2, 3),
            long_slots: (4, 6),
            turns_start: 28,
            turns_end: 48,
            ticks_per_turn: 3,
        }
    }
}

impl TaskMix {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.short_long_mix) {
            return Err(Error::field("short_long_mix", "must lie in [0, 1]"));
        }
        let ok = |(a, b): (usize, usize)| a >= 1 && a <= b && b <= crate::policy::GLOBAL_SLOTS;
        if !ok(self.short_slots) || self.short_slots.1 > 3 {
            return Err(Error::field("short_slots", "must be a range within 1..=3"));
        }
        if !ok(self.long_slots) || self.long_slots.0 < 4 {
            return Err(Error::field("long_slots", "must be a range within 4..=8"));
        }
        if self.turns_start == 0 || self.turns_end < self.turns_start {
            return Err(Error::field("turns_end", "must be at least turns_start > 0"));
        }
        if self.ticks_per_turn == 0 {
            return Err(Error::field("ticks_per_turn", "must be positive"));
        }
        Ok(())
    }

    /// Turn cap for `iteration` out of `iterations`, growing linearly.
    pub fn max_turns(&self, iteration: u32, iterations: u32) -> u32 {
        if iterations <= 1 {
            return self.turns_start;
        }
        let t = iteration as f64 / (iterations - 1) as f64;
        let span = (self.turns_end - self.turns_start) as f64;
        self.turns_start + (span * t).round() as u32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub grpo: GrpoConfig,
    pub env: EnvConfig,
    pub penalties: PenaltyCoefficients,
    pub early_weights: RewardWeights,
    pub late_weights: RewardWeights,
    pub tasks: TaskMix,
    /// Its `short_long_mix` is taken from `tasks` at run time.
    pub buffer: BufferConfig,
    pub adapter_rank: usize,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            grpo: GrpoConfig::default(),
            env: EnvConfig::default(),
            penalties: PenaltyCoefficients::default(),
            early_weights: RewardWeights::early(),
            late_weights: RewardWeights::late(),
            tasks: TaskMix::default(),
            buffer: BufferConfig::default(),
            adapter_rank: 2,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.grpo.validate()?;
        self.env.validate()?;
        self.penalties.validate()?;
        self.tasks.validate()?;
        self.buffer.validate(self.grpo.batch_episodes)?;
        if self.adapter_rank == 0 || self.adapter_rank > crate::policy::MAX_ADAPTER_RANK {
            return Err(Error::field("adapter_rank", "must lie in 1..=4"));
        }
        Ok(())
    }

    /// Short hex digest of the serialized configuration.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Applies `key = value` overrides. Keys are field names, nested ones
    /// prefixed by their section (`env.plan_bonus`, `guards.force_after`);
    /// GRPO fields may be given bare.
    /// Keys listed in `skip` belong to the caller and are left alone.
    pub fn apply_kv(&mut self, kv: &KvFile, skip: &[&str]) -> Result<()> {
        for key in kv.keys().filter(|k| !skip.contains(k)) {
            self.set(key, kv.raw(key).unwrap_or_default())?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::field(key, format!("cannot parse `{v}`")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v.trim() {
                "true" | "on" | "1" | "yes" => Ok(true),
                "false" | "off" | "0" | "no" => Ok(false),
                _ => Err(Error::field(key, format!("expected a boolean, got `{v}`"))),
            }
        }
        fn pair(key: &str, v: &str) -> Result<(usize, usize)> {
            let parts: Vec<&str> = v.split(['-', ',']).map(str::trim).collect();
            match parts.as_slice() {
                [a, b] => Ok((num(key, a)?, num(key, b)?)),
                [a] => {
                    let a = num(key, a)?;
                    Ok((a, a))
                }
                _ => Err(Error::field(key, "expected `lo-hi`")),
            }
        }
        let g = &mut self.grpo;
        let bare = key.strip_prefix("grpo.").unwrap_or(key);
        match bare {
            "clip_epsilon" => g.clip_epsilon = num(key, value)?,
            "entropy_coef" => g.entropy_coef = num(key, value)?,
            "kl_coef" => g.kl_coef = num(key, value)?,
            "counterfactual_k" => g.counterfactual_k = num(key, value)?,
            "exhaustive" => g.exhaustive = flag(key, value)?,
            "replacement" => {
                g.replacement = match value.trim() {
                    "policy" => Replacement::Policy,
                    "noop" => Replacement::Noop,
                    _ => return Err(Error::field(key, "expected `policy` or `noop`")),
                }
            }
            "baseline_mode" => {
                g.baseline_mode = match value.trim() {
                    "leave_one_out" => BaselineMode::LeaveOneOut,
                    "constant" => BaselineMode::Constant,
                    "critic" => BaselineMode::Critic,
                    _ => return Err(Error::field(key, "expected leave_one_out, constant or critic")),
                }
            }
            "learning_rate" => g.learning_rate = num(key, value)?,
            "critic_lr" => g.critic_lr = num(key, value)?,
            "batch_episodes" => g.batch_episodes = num(key, value)?,
            "iterations" => g.iterations = num(key, value)?,
            "epochs" => g.epochs = num(key, value)?,
            "reward_mode" => {
                g.reward_mode = match value.trim() {
                    "joint" => RewardMode::Joint,
                    "local_only" => RewardMode::LocalOnly,
                    _ => return Err(Error::field(key, "expected `joint` or `local_only`")),
                }
            }
            "coordination_term" => g.coordination_term = flag(key, value)?,
            "adapter_rank" => self.adapter_rank = num(key, value)?,
            "tasks.short_long_mix" | "short_long_mix" => self.tasks.short_long_mix = num(key, value)?,
            "buffer.capacity" => self.buffer.capacity = num(key, value)?,
            "buffer.strict" => self.buffer.strict = flag(key, value)?,
            "buffer.retain" => self.buffer.retain = flag(key, value)?,
            "tasks.short_slots" => self.tasks.short_slots = pair(key, value)?,
            "tasks.long_slots" => self.tasks.long_slots = pair(key, value)?,
            "tasks.turns_start" => self.tasks.turns_start = num(key, value)?,
            "tasks.turns_end" => self.tasks.turns_end = num(key, value)?,
            "tasks.ticks_per_turn" => self.tasks.ticks_per_turn = num(key, value)?,
            "reward.redundant_turn" => self.penalties.redundant_turn = num(key, value)?,
            "reward.overbudget_token" => self.penalties.overbudget_token = num(key, value)?,
            "reward.conflict_reopen" => self.penalties.conflict_reopen = num(key, value)?,
            "reward.schema_violation" => self.penalties.schema_violation = num(key, value)?,
            "reward.unsafe_tool" => self.penalties.unsafe_tool = num(key, value)?,
            "reward.style_drift" => self.penalties.style_drift = num(key, value)?,
            "guards.nudge_after" => self.env.guards.nudge_after = num(key, value)?,
            "guards.force_after" => self.env.guards.force_after = num(key, value)?,
            "guards.coach_window" => self.env.guards.coach_window = num(key, value)?,
            "guards.coach_repeats" => self.env.guards.coach_repeats = num(key, value)?,
            "guards.coach_cooldown" => self.env.guards.coach_cooldown = num(key, value)?,
            "guards.message_budget_total" => self.env.guards.message_budget_total = num(key, value)?,
            "env.plan_bonus" => self.env.plan_bonus = num(key, value)?,
            "env.impl_plan_bonus" => self.env.impl_plan_bonus = num(key, value)?,
            "env.impl_noise" => self.env.impl_noise = num(key, value)?,
            "env.partial_credit" => self.env.partial_credit = num(key, value)?,
            "env.rail_window" => self.env.rail_window = num(key, value)?,
            "env.slice_cap" => self.env.slice_cap = num(key, value)?,
            "env.style_threshold" => self.env.style_threshold = num(key, value)?,
            _ => {
                let profile = match key.rsplit_once('.') {
                    Some(("env.specialist", f)) | Some(("specialist", f)) => Some((&mut self.env.specialist, f)),
                    Some(("env.generalist", f)) | Some(("generalist", f)) => Some((&mut self.env.generalist, f)),
                    _ => None,
                };
                let Some((p, field)) = profile else {
                    return Err(Error::field(key, "unknown configuration key"));
                };
                match field {
                    "draft_success" => p.draft_success = num(key, value)?,
                    "style_fidelity" => p.style_fidelity = num(key, value)?,
                    "impl_quality" => p.impl_quality = num(key, value)?,
                    "repair_success" => p.repair_success = num(key, value)?,
                    "unsafe_rate" => p.unsafe_rate = num(key, value)?,
                    "tick_factor" => p.tick_factor = num(key, value)?,
                    _ => return Err(Error::field(key, "unknown configuration key")),
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        let g = GrpoConfig::default();
        assert_eq!((g.clip_epsilon, g.entropy_coef, g.kl_coef, g.counterfactual_k), (0.2, 0.01, 0.02, 4));
    }

    #[test]
    fn overrides_name_the_field() {
        let mut c = TrainConfig::default();
        c.set("clip_epsilon", "0.3").unwrap();
        assert_eq!(c.grpo.clip_epsilon, 0.3);
        c.set("grpo.baseline_mode", "constant").unwrap();
        assert_eq!(c.grpo.baseline_mode, BaselineMode::Constant);
        c.set("tasks.long_slots", "4-5").unwrap();
        assert_eq!(c.tasks.long_slots, (4, 5));
        match c.set("clip_epsilon", "wide") {
            Err(Error::ConfigField { field, .. }) => assert_eq!(field, "clip_epsilon"),
            other => panic!("{other:?}"),
        }
        c.grpo.clip_epsilon = 1.5;
        match c.validate() {
            Err(Error::ConfigField { field, .. }) => assert_eq!(field, "clip_epsilon"),
            other => panic!("{other:?}"),
        }
        let mut c = TrainConfig::default();
        c.set("counterfactual_k", "0").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn turn_cap_grows() {
        let m = TaskMix::default();
        assert_eq!(m.max_turns(0, 10), 28);
        assert_eq!(m.max_turns(9, 10), 48);
        assert!(m.max_turns(4, 10) > 28 && m.max_turns(4, 10) < 48);
        assert_eq!(m.max_turns(0, 0), 28);
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.grpo.kl_coef = 0.03;
        assert_ne!(a.hash(), b.hash());
    }
}
