//! Partially observable multi-role workflow environment.
//!
//! An episode is one writing or coding task worked on by a team of roles.
//! One role holds the floor at a time and acts through the closed action
//! set; the floor passes with `Handoff`. All stochastic outcomes come from
//! per-role seeded streams stored in the state, so an episode is a pure
//! function of (task, team order, seed, actions).

mod action;
mod dynamics;
mod observe;
mod quality;
mod role;
mod state;
mod task;

pub use action::{ActionKind, ActionPrimitive, FailureRef, HandoffTarget, Verb};
pub use observe::{ArtifactSlice, BriefDigest, ClockView, Observation, RemainingBudget, SlotView};
pub use quality::{implement_margins, QualityBreakdown, QualityCredit};
pub use role::Role;
pub use state::{
    AssertionOutcome, Authorship, CreditEvent, DecisionKind, DecisionPayload, DecisionRecord,
    Effect, EpisodeCounters, EpisodeState, ReasonCode, ReceiptOutcome, RoleMemory, SlotHidden,
    SlotState, SlotStatus, StepLog, SummaryRail, TerminationReason, Tool, ToolReceipt,
};
pub use task::{Difficulty, LengthClass, SlotTarget, TaskFamily, TaskSpec, TermTag, TAG_SET_SIZE};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guards::GuardConfig;

/// Wall-clock cost of each verb, in ticks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickCosts {
    pub plan: u32,
    pub draft: u32,
    pub propose_change: u32,
    pub integrate: u32,
    pub tool: u32,
    pub repair: u32,
    pub finalize: u32,
    pub handoff: u32,
    /// Charged for a turn absorbed as a schema violation.
    pub illegal: u32,
}

impl Default for TickCosts {
    fn default() -> Self {
        Self {
            plan: 1,
            draft: 2,
            propose_change: 1,
            integrate: 1,
            tool: 3,
            repair: 2,
            finalize: 1,
            handoff: 1,
            illegal: 1,
        }
    }
}

impl TickCosts {
    pub fn base(&self, kind: ActionKind) -> u32 {
        match kind {
            ActionKind::Plan => self.plan,
            ActionKind::DraftSection | ActionKind::Implement => self.draft,
            ActionKind::ProposeChange => self.propose_change,
            ActionKind::Integrate => self.integrate,
            ActionKind::Lint | ActionKind::Test => self.tool,
            ActionKind::Repair => self.repair,
            ActionKind::Finalize => self.finalize,
            ActionKind::HandoffPeer | ActionKind::HandoffHuman => self.handoff,
        }
    }
}

/// Message length of each verb, in tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenCosts {
    pub plan: u32,
    pub draft: u32,
    pub propose_change: u32,
    pub integrate: u32,
    pub tool: u32,
    pub repair: u32,
    pub finalize: u32,
    pub handoff: u32,
}

impl Default for TokenCosts {
    fn default() -> Self {
        Self {
            plan: 40,
            draft: 30,
            propose_change: 25,
            integrate: 8,
            tool: 6,
            repair: 15,
            finalize: 10,
            handoff: 4,
        }
    }
}

impl TokenCosts {
    pub fn of(&self, kind: ActionKind) -> u32 {
        match kind {
            ActionKind::Plan => self.plan,
            ActionKind::DraftSection | ActionKind::Implement => self.draft,
            ActionKind::ProposeChange => self.propose_change,
            ActionKind::Integrate => self.integrate,
            ActionKind::Lint | ActionKind::Test => self.tool,
            ActionKind::Repair => self.repair,
            ActionKind::Finalize => self.finalize,
            ActionKind::HandoffPeer | ActionKind::HandoffHuman => self.handoff,
        }
    }
}

/// Synthetic competence of a role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillProfile {
    /// Probability that a draft or implementation lands without a frozen scope.
    pub draft_success: f64,
    /// Probability that a draft copies the frozen terminology tag.
    pub style_fidelity: f64,
    /// Mean implementation quality before the plan bonus.
    pub impl_quality: f64,
    pub repair_success: f64,
    /// Probability that an implementation carries the unsafe marker.
    pub unsafe_rate: f64,
    /// Multiplier on every tick cost.
    pub tick_factor: f64,
}

impl SkillProfile {
    pub fn specialist() -> Self {
        Self {
            draft_success: 0.75,
            style_fidelity: 0.9,
            impl_quality: 0.7,
            repair_success: 0.85,
            unsafe_rate: 0.04,
            tick_factor: 1.0,
        }
    }

    pub fn generalist() -> Self {
        Self {
            draft_success: 0.55,
            style_fidelity: 0.6,
            impl_quality: 0.5,
            repair_success: 0.55,
            unsafe_rate: 0.06,
            tick_factor: 1.5,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let probs = [
            ("draft_success", self.draft_success),
            ("style_fidelity", self.style_fidelity),
            ("impl_quality", self.impl_quality),
            ("repair_success", self.repair_success),
            ("unsafe_rate", self.unsafe_rate),
        ];
        for (field, v) in probs {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::field(format!("{name}.{field}"), "must lie in [0, 1]"));
            }
        }
        if !(self.tick_factor > 0.0) {
            return Err(Error::field(format!("{name}.tick_factor"), "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub ticks: TickCosts,
    pub tokens: TokenCosts,
    pub specialist: SkillProfile,
    pub generalist: SkillProfile,
    /// Added to draft success once scope is frozen.
    pub plan_bonus: f64,
    /// Added to implementation quality once scope is frozen.
    pub impl_plan_bonus: f64,
    /// Half-width of the uniform noise on implementation quality.
    pub impl_noise: f64,
    /// Weight of a near-miss assertion: contributes (1 - margin) * this.
    pub partial_credit: f64,
    /// Number of trailing rail decisions in an observation.
    pub rail_window: usize,
    /// Maximum number of slot views in an observation.
    pub slice_cap: usize,
    /// Writing episodes ending with style below this incur a compliance mark.
    pub style_threshold: f64,
    pub guards: GuardConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            ticks: TickCosts::default(),
            tokens: TokenCosts::default(),
            specialist: SkillProfile::specialist(),
            generalist: SkillProfile::generalist(),
            plan_bonus: 0.2,
            impl_plan_bonus: 0.1,
            impl_noise: 0.15,
            partial_credit: 0.5,
            rail_window: 4,
            slice_cap: 8,
            style_threshold: 0.5,
            guards: GuardConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.specialist.validate("specialist")?;
        self.generalist.validate("generalist")?;
        self.guards.validate()?;
        if !(0.0..=1.0).contains(&self.partial_credit) {
            return Err(Error::field("partial_credit", "must lie in [0, 1]"));
        }
        if self.slice_cap == 0 {
            return Err(Error::field("slice_cap", "must be positive"));
        }
        Ok(())
    }

    pub fn profile(&self, role: Role) -> &SkillProfile {
        if role.is_generalist() {
            &self.generalist
        } else {
            &self.specialist
        }
    }

    pub fn tick_cost(&self, kind: ActionKind, role: Role) -> u32 {
        let base = self.ticks.base(kind) as f64 * self.profile(role).tick_factor;
        (base.round() as u32).max(1)
    }
}

/// The environment: a configuration plus the episode operations.
#[derive(Debug, Clone, Default)]
pub struct Env {
    pub config: EnvConfig,
}

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }
}
