//! Runtime safeguards: handoff clock, message-budget tokens, safety filter,
//! coach monitor and per-episode budget caps. Guards act through the legal
//! action set and through credit events; none of them raise errors.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::env::{ActionKind, ActionPrimitive, EpisodeState, Role};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardConfig {
    /// Consecutive turns after which a role is nudged to pass the floor.
    pub nudge_after: u32,
    /// Consecutive turns after which the role must pass the floor.
    pub force_after: u32,
    pub coach_window: usize,
    pub coach_repeats: usize,
    pub coach_cooldown: u32,
    /// Message tokens per episode, split evenly across the team.
    pub message_budget_total: u32,
}

impl Default for GuardConfig {
    fn default() -> Self {
        Self {
            nudge_after: 3,
            force_after: 5,
            coach_window: 6,
            coach_repeats: 3,
            coach_cooldown: 3,
            message_budget_total: 720,
        }
    }
}

impl GuardConfig {
    pub fn validate(&self) -> crate::Result<()> {
        use crate::Error;
        if self.nudge_after == 0 || self.force_after <= self.nudge_after {
            return Err(Error::field("force_after", "must exceed nudge_after > 0"));
        }
        if self.coach_repeats == 0 || self.coach_repeats > self.coach_window {
            return Err(Error::field("coach_repeats", "must lie in 1..=coach_window"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetState {
    pub ticks_remaining: u32,
    pub message_tokens_remaining: BTreeMap<Role, u32>,
    pub turns_remaining: u32,
}

impl BudgetState {
    pub fn new(team: &[Role], turns: u32, ticks: u32, message_total: u32) -> Self {
        let per_role = message_total / team.len().max(1) as u32;
        Self {
            ticks_remaining: ticks,
            message_tokens_remaining: team.iter().map(|&r| (r, per_role)).collect(),
            turns_remaining: turns,
        }
    }

    pub fn tokens_left(&self, role: Role) -> u32 {
        self.message_tokens_remaining.get(&role).copied().unwrap_or(0)
    }

    /// Deducts at most what is left; returns the amount actually spent.
    pub fn spend_tokens(&mut self, role: Role, tokens: u32) -> u32 {
        let left = self.message_tokens_remaining.entry(role).or_insert(0);
        let spent = tokens.min(*left);
        *left -= spent;
        spent
    }

    pub fn spend_turn(&mut self, ticks: u32) -> u32 {
        self.turns_remaining = self.turns_remaining.saturating_sub(1);
        let spent = ticks.min(self.ticks_remaining);
        self.ticks_remaining -= spent;
        spent
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockSignal {
    None,
    Nudge,
    ForcedHandoff,
}

/// Who holds the floor and for how many consecutive turns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandoffClock {
    pub speaker: usize,
    pub streak: u32,
}

/// Signal for `role`'s upcoming turn.
pub fn tick_handoff_clock(state: &EpisodeState, role: Role, cfg: &GuardConfig) -> ClockSignal {
    if state.team.len() < 2 {
        return ClockSignal::None;
    }
    let upcoming = if state.speaker() == role {
        state.clock.streak + 1
    } else {
        1
    };
    if upcoming >= cfg.force_after {
        ClockSignal::ForcedHandoff
    } else if upcoming >= cfg.nudge_after {
        ClockSignal::Nudge
    } else {
        ClockSignal::None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum BudgetDecision {
    Allow,
    Truncate { allowed: u32, over: u32 },
    Deny,
}

pub fn check_message_budget(budget: &BudgetState, role: Role, payload_tokens: u32) -> BudgetDecision {
    let remaining = budget.tokens_left(role);
    if payload_tokens <= remaining {
        BudgetDecision::Allow
    } else if remaining > 0 {
        BudgetDecision::Truncate {
            allowed: remaining,
            over: payload_tokens - remaining,
        }
    } else {
        BudgetDecision::Deny
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyReason {
    Ok,
    UnsafeToolArg,
    RedFlagPrompt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetyVerdict {
    allowed: bool,
    reason: SafetyReason,
}

impl SafetyVerdict {
    pub const OK: SafetyVerdict = SafetyVerdict {
        allowed: true,
        reason: SafetyReason::Ok,
    };

    pub fn deny(reason: SafetyReason) -> Self {
        assert_ne!(reason, SafetyReason::Ok, "a denial needs a reason");
        Self {
            allowed: false,
            reason,
        }
    }

    pub fn allowed(&self) -> bool {
        self.allowed
    }

    pub fn reason(&self) -> SafetyReason {
        self.reason
    }
}

/// Screens tool calls against the synthetic unsafe marker. Running tests on a
/// marked slot is an unsafe tool call; proposing a rewrite of one is a
/// red-flagged prompt. Linting stays allowed because it is how the marker is
/// surfaced.
pub fn safety_screen(action: &ActionPrimitive, state: &EpisodeState) -> SafetyVerdict {
    let marked = |slot: usize| state.slots.get(slot).is_some_and(|s| s.hidden.unsafe_marker);
    match *action {
        ActionPrimitive::Test { slot } if marked(slot) => SafetyVerdict::deny(SafetyReason::UnsafeToolArg),
        ActionPrimitive::ProposeChange { slot } if marked(slot) => {
            SafetyVerdict::deny(SafetyReason::RedFlagPrompt)
        }
        _ => SafetyVerdict::OK,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoachEntry {
    pub turn: u32,
    pub role: Role,
    pub kind: ActionKind,
    pub slot: Option<usize>,
    pub no_delta: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Suppression {
    pub role: Role,
    pub kind: ActionKind,
    pub slot: Option<usize>,
    /// First turn index at which the action is legal again.
    pub until_turn: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoachState {
    pub window: VecDeque<CoachEntry>,
    pub capacity: usize,
    pub interventions_issued: u32,
    pub suppressions: Vec<Suppression>,
}

impl CoachState {
    pub fn new(capacity: usize) -> Self {
        Self {
            window: VecDeque::with_capacity(capacity),
            capacity,
            interventions_issued: 0,
            suppressions: Vec::new(),
        }
    }

    pub fn push(&mut self, entry: CoachEntry) {
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(entry);
    }

    pub fn is_suppressed(&self, role: Role, kind: ActionKind, slot: Option<usize>, turn: u32) -> bool {
        self.suppressions
            .iter()
            .any(|s| s.role == role && s.kind == kind && s.slot == slot && turn < s.until_turn)
    }

    /// Records an intervention: drops the looping entries from the window and
    /// suppresses the triple until `until_turn`.
    pub fn apply(&mut self, iv: &Intervention, until_turn: u32) {
        self.window
            .retain(|e| !(e.role == iv.role && e.kind == iv.kind && e.slot == iv.slot));
        self.suppressions.retain(|s| s.until_turn > iv.turn);
        self.suppressions.push(Suppression {
            role: iv.role,
            kind: iv.kind,
            slot: iv.slot,
            until_turn,
        });
        self.interventions_issued += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intervention {
    pub turn: u32,
    pub role: Role,
    pub kind: ActionKind,
    pub slot: Option<usize>,
}

/// Pure detection over the window: the most recent (role, action, target)
/// triple that occurs at least `repeats` times without changing the artifact.
pub fn coach_intervene(coach: &CoachState, repeats: usize) -> Option<Intervention> {
    let mut counts: BTreeMap<(Role, ActionKind, Option<usize>), usize> = BTreeMap::new();
    for e in coach.window.iter().filter(|e| e.no_delta) {
        if matches!(e.kind, ActionKind::HandoffPeer | ActionKind::HandoffHuman) {
            continue;
        }
        *counts.entry((e.role, e.kind, e.slot)).or_default() += 1;
    }
    coach
        .window
        .iter()
        .rev()
        .find(|e| counts.get(&(e.role, e.kind, e.slot)).is_some_and(|&c| c >= repeats))
        .map(|e| Intervention {
            turn: e.turn,
            role: e.role,
            kind: e.kind,
            slot: e.slot,
        })
}
