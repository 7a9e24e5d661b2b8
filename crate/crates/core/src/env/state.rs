use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::action::{ActionKind, FailureRef, Verb};
use super::role::Role;
use super::task::{TaskSpec, TermTag};
use crate::guards::{
    BudgetDecision, BudgetState, ClockSignal, CoachState, HandoffClock, Intervention, SafetyVerdict,
};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotStatus {
    Empty,
    Drafted,
    Integrated,
    Passing,
    Failing,
}

impl SlotStatus {
    pub const ALL: [SlotStatus; 5] = [
        SlotStatus::Empty,
        SlotStatus::Drafted,
        SlotStatus::Integrated,
        SlotStatus::Passing,
        SlotStatus::Failing,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Position on the progress ladder; tested slots share the top rung.
    pub fn rank(self) -> u8 {
        match self {
            SlotStatus::Empty => 0,
            SlotStatus::Drafted => 1,
            SlotStatus::Integrated => 2,
            SlotStatus::Passing | SlotStatus::Failing => 3,
        }
    }

    pub fn is_drafted(self) -> bool {
        self != SlotStatus::Empty
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum AssertionOutcome {
    Pass,
    Fail { margin: f64 },
}

impl AssertionOutcome {
    pub fn from_margin(margin: f64) -> Self {
        if margin <= 0.0 {
            AssertionOutcome::Pass
        } else {
            AssertionOutcome::Fail { margin }
        }
    }

    pub fn is_pass(&self) -> bool {
        matches!(self, AssertionOutcome::Pass)
    }
}

/// Who last shaped a piece of the artifact, for credit attribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Authorship {
    pub role: Role,
    pub turn: u32,
}

/// Ground truth the environment keeps about a slot. Never copied into an
/// observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SlotHidden {
    pub drafted_after_scope: bool,
    pub drafted_turn: Option<u32>,
    /// Tag was set while a terminology decision was in force.
    pub term_aligned: bool,
    /// Current distance to passing per hidden assertion; 0 means passing.
    pub margins: Vec<f64>,
    pub unsafe_marker: bool,
    pub version: u32,
    pub lint_version: Option<u32>,
    pub test_version: Option<u32>,
    pub lint_violations: u32,
    /// Failures reported by the latest receipts that no repair has tried yet.
    pub pending: BTreeSet<FailureRef>,
    pub tested: bool,
    pub drafted_by: Option<Authorship>,
    pub tag_by: Option<Authorship>,
    pub assertion_by: Vec<Option<Authorship>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotState {
    pub status: SlotStatus,
    pub terminology_tag: Option<TermTag>,
    pub order_drafted: Option<u32>,
    /// Outcomes from the latest test receipt (coding only).
    pub assertion_results: Vec<AssertionOutcome>,
    pub hidden: SlotHidden,
}

impl SlotState {
    pub fn empty(assertions: usize) -> Self {
        Self {
            status: SlotStatus::Empty,
            terminology_tag: None,
            order_drafted: None,
            assertion_results: Vec::new(),
            hidden: SlotHidden {
                margins: vec![1.0; assertions],
                assertion_by: vec![None; assertions],
                ..SlotHidden::default()
            },
        }
    }

    pub fn changed_since_lint(&self) -> bool {
        self.hidden.lint_version != Some(self.hidden.version)
    }

    pub fn changed_since_test(&self) -> bool {
        self.hidden.test_version != Some(self.hidden.version)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    ScopeFrozen,
    TermFrozen,
    ChangeAccepted,
    BlockerRaised,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionPayload {
    Ordering(Vec<usize>),
    Term(TermTag),
    Slot(usize),
    Blocker {
        role: Role,
        kind: ActionKind,
        slot: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub kind: DecisionKind,
    pub turn: u32,
    pub payload: DecisionPayload,
}

/// Append-only record of decisions and blockers shared by every role.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SummaryRail {
    decisions: Vec<DecisionRecord>,
}

impl SummaryRail {
    pub fn append(&mut self, record: DecisionRecord) {
        self.decisions.push(record);
    }

    pub fn decisions(&self) -> &[DecisionRecord] {
        &self.decisions
    }

    pub fn len(&self) -> usize {
        self.decisions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decisions.is_empty()
    }

    pub fn last(&self, n: usize) -> &[DecisionRecord] {
        &self.decisions[self.decisions.len().saturating_sub(n)..]
    }

    pub fn has(&self, kind: DecisionKind) -> bool {
        self.decisions.iter().any(|d| d.kind == kind)
    }

    pub fn scope(&self) -> Option<(&[usize], u32)> {
        self.decisions.iter().rev().find_map(|d| match &d.payload {
            DecisionPayload::Ordering(o) => Some((o.as_slice(), d.turn)),
            _ => None,
        })
    }

    pub fn term(&self) -> Option<TermTag> {
        self.decisions.iter().rev().find_map(|d| match d.payload {
            DecisionPayload::Term(t) => Some(t),
            _ => None,
        })
    }
}

/// Private scratch state of one role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleMemory {
    pub role: Role,
    pub checklist: BTreeSet<u32>,
    pub notes_size: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tool {
    Lint,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tool", rename_all = "snake_case")]
pub enum ReceiptOutcome {
    Lint { violations: u32 },
    Test { results: Vec<AssertionOutcome> },
}

impl ReceiptOutcome {
    pub fn failing(&self) -> bool {
        match self {
            ReceiptOutcome::Lint { violations } => *violations > 0,
            ReceiptOutcome::Test { results } => results.iter().any(|r| !r.is_pass()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolReceipt {
    pub tool: Tool,
    pub slot: usize,
    pub outcome: ReceiptOutcome,
    pub tick_cost: u32,
    pub turn_issued: u32,
}

impl ToolReceipt {
    pub fn digest(&self) -> String {
        match &self.outcome {
            ReceiptOutcome::Lint { violations } => format!("lint[{}]={violations}", self.slot),
            ReceiptOutcome::Test { results } => {
                let pass = results.iter().filter(|r| r.is_pass()).count();
                format!("test[{}]={pass}/{}", self.slot, results.len())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Finalized,
    Handoff,
    Timeout,
}

/// Why a turn earned credit or a penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonCode {
    RedundantTurn,
    OverlongMessage,
    ConflictReopen,
    SchemaViolation,
    UnsafeTool,
    StyleDrift,
    Progress,
    TestEvidence,
}

impl ReasonCode {
    pub fn name(self) -> &'static str {
        match self {
            ReasonCode::RedundantTurn => "redundant_turn",
            ReasonCode::OverlongMessage => "overlong_message",
            ReasonCode::ConflictReopen => "conflict_reopen",
            ReasonCode::SchemaViolation => "schema_violation",
            ReasonCode::UnsafeTool => "unsafe_tool",
            ReasonCode::StyleDrift => "style_drift",
            ReasonCode::Progress => "progress",
            ReasonCode::TestEvidence => "test_evidence",
        }
    }

    pub fn is_coordination(self) -> bool {
        matches!(
            self,
            ReasonCode::RedundantTurn | ReasonCode::OverlongMessage | ReasonCode::ConflictReopen
        )
    }

    pub fn is_compliance(self) -> bool {
        matches!(
            self,
            ReasonCode::SchemaViolation | ReasonCode::UnsafeTool | ReasonCode::StyleDrift
        )
    }
}

/// A penalty-bearing event observed on one turn. `units` counts events,
/// except for overlong messages where it counts tokens over budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CreditEvent {
    pub reason: ReasonCode,
    pub units: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Effect {
    /// Artifact or rail changed.
    Progress,
    /// A tool reported on a slot version it had not seen.
    Information,
    /// A stochastic attempt that did not land.
    Attempted,
    /// Floor passed to another role.
    Transfer,
    /// Nothing changed.
    NoEffect,
    Terminal,
}

impl Effect {
    pub fn is_delta(self) -> bool {
        !matches!(self, Effect::NoEffect)
    }
}

/// Everything that happened on one turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub turn: u32,
    pub role: Role,
    pub kind: ActionKind,
    pub verb: Verb,
    pub target_slot: Option<usize>,
    pub legal: bool,
    pub effect: Effect,
    pub receipt: Option<ToolReceipt>,
    pub ticks: u32,
    pub tokens: u32,
    pub rail_appends: Vec<DecisionRecord>,
    pub events: Vec<CreditEvent>,
    pub clock: ClockSignal,
    pub budget: BudgetDecision,
    pub safety: SafetyVerdict,
    pub intervention: Option<Intervention>,
    pub terminal: Option<TerminationReason>,
}

impl StepLog {
    pub fn violations(&self) -> Vec<ReasonCode> {
        self.events.iter().map(|e| e.reason).collect()
    }

    pub fn has(&self, reason: ReasonCode) -> bool {
        self.events.iter().any(|e| e.reason == reason)
    }
}

/// Running totals of penalty events, kept alongside the step logs so that
/// counterfactual rollouts can be scored without retaining their logs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeCounters {
    pub redundant_turns: u32,
    pub overbudget_tokens: u32,
    pub conflict_reopens: u32,
    pub schema_violations: u32,
    pub unsafe_tool_calls: u32,
    pub style_drift: u32,
    pub interventions: u32,
    pub nudges: u32,
    pub forced_handoffs: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeState {
    pub task: TaskSpec,
    pub team: Vec<Role>,
    /// Turn order; the floor passes along this sequence.
    pub order: Vec<Role>,
    pub seed: u64,
    pub slots: Vec<SlotState>,
    pub owners: Vec<Role>,
    pub rail: SummaryRail,
    pub memories: BTreeMap<Role, RoleMemory>,
    pub receipts: Vec<ToolReceipt>,
    pub turn: u32,
    pub ticks_elapsed: u32,
    pub token_count: u32,
    pub budgets: BudgetState,
    pub clock: HandoffClock,
    pub coach: CoachState,
    /// One outcome stream per role in `order`.
    pub streams: Vec<Stream>,
    pub terminal: Option<TerminationReason>,
    pub counters: EpisodeCounters,
    pub drafts_completed: u32,
    pub last_effect: Option<(Role, ActionKind)>,
}

impl EpisodeState {
    pub fn speaker(&self) -> Role {
        self.order[self.clock.speaker]
    }

    pub fn position(&self, role: Role) -> Option<usize> {
        self.order.iter().position(|&r| r == role)
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal.is_some()
    }

    pub fn owned_slots(&self, role: Role) -> impl Iterator<Item = usize> + '_ {
        self.owners
            .iter()
            .enumerate()
            .filter(move |(_, &o)| o == role)
            .map(|(i, _)| i)
    }

    pub fn histogram(&self) -> [u32; 5] {
        let mut h = [0; 5];
        for s in &self.slots {
            h[s.status.index()] += 1;
        }
        h
    }

    pub fn finalize_ready(&self) -> bool {
        match self.task.family {
            super::TaskFamily::Writing => self.slots.iter().all(|s| s.status.rank() >= 2),
            super::TaskFamily::Coding => self.slots.iter().all(|s| s.hidden.tested),
        }
    }
}
