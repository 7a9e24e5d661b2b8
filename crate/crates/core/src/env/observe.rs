use serde::{Deserialize, Serialize};

use super::role::Role;
use super::state::{DecisionKind, DecisionRecord, EpisodeState, RoleMemory, SlotStatus};
use super::task::{Difficulty, LengthClass, TaskFamily, TermTag};
use super::Env;
use crate::error::{Error, Result};
use crate::guards::{tick_handoff_clock, ClockSignal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BriefDigest {
    pub family: TaskFamily,
    pub difficulty: Difficulty,
    pub slot_count: usize,
    pub length_class: LengthClass,
    pub max_turns: u32,
    pub tick_budget: u32,
}

/// What a role sees of one of its own slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotView {
    pub index: usize,
    pub status: SlotStatus,
    pub terminology_tag: Option<TermTag>,
    pub order_drafted: Option<u32>,
    pub failing_assertions: usize,
    pub open_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactSlice {
    /// Own slots only, at most `slice_cap` of them.
    pub slots: Vec<SlotView>,
    /// Team-wide count of slots per status, indexed by `SlotStatus::index`.
    pub histogram: [u32; 5],
    /// Drafted slots that changed since their last lint.
    pub unreviewed: u32,
    /// Drafted slots whose latest test has not been rerun since a change.
    pub untested: u32,
    /// Slots anywhere with a failure waiting on repair.
    pub open_failures: u32,
    /// The next undrafted slot in the frozen order belongs to this role.
    pub next_in_order_mine: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemainingBudget {
    pub turns: u32,
    pub ticks: u32,
    pub message_tokens: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClockView {
    pub holds_floor: bool,
    pub streak: u32,
    pub nudged: bool,
    pub forced: bool,
}

/// A role's bounded local view. Carries only the observing role's memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub role: Role,
    pub turn: u32,
    pub brief: BriefDigest,
    pub artifact: ArtifactSlice,
    pub rail_digest: Vec<DecisionRecord>,
    pub scope_frozen: bool,
    pub term_frozen: bool,
    pub blocker_raised: bool,
    pub own_memory: RoleMemory,
    pub remaining: RemainingBudget,
    pub clock: ClockView,
}

impl Env {
    pub fn observe(&self, state: &EpisodeState, role: Role) -> Result<Observation> {
        if state.is_terminal() {
            return Err(Error::TerminalState);
        }
        let own_memory = state.memories.get(&role).cloned().ok_or(Error::UnknownRole(role))?;

        let slots = state
            .owned_slots(role)
            .take(self.config.slice_cap)
            .map(|i| {
                let s = &state.slots[i];
                SlotView {
                    index: i,
                    status: s.status,
                    terminology_tag: s.terminology_tag,
                    order_drafted: s.order_drafted,
                    failing_assertions: s.assertion_results.iter().filter(|a| !a.is_pass()).count(),
                    open_failures: s.hidden.pending.len(),
                }
            })
            .collect();
        let drafted = || state.slots.iter().filter(|s| s.status.is_drafted());
        let next_in_order_mine = state.rail.scope().is_some_and(|(ordering, _)| {
            ordering
                .iter()
                .find(|&&i| state.slots[i].status == SlotStatus::Empty)
                .is_some_and(|&i| state.owners[i] == role)
        });
        let artifact = ArtifactSlice {
            slots,
            histogram: state.histogram(),
            unreviewed: drafted().filter(|s| s.changed_since_lint()).count() as u32,
            untested: drafted().filter(|s| s.changed_since_test()).count() as u32,
            open_failures: state.slots.iter().filter(|s| !s.hidden.pending.is_empty()).count() as u32,
            next_in_order_mine,
        };

        let signal = tick_handoff_clock(state, role, &self.config.guards);
        let holds_floor = state.speaker() == role;
        Ok(Observation {
            role,
            turn: state.turn,
            brief: BriefDigest {
                family: state.task.family,
                difficulty: state.task.difficulty,
                slot_count: state.task.slot_count,
                length_class: state.task.length_class(),
                max_turns: state.task.max_turns,
                tick_budget: state.task.tick_budget,
            },
            artifact,
            rail_digest: state.rail.last(self.config.rail_window).to_vec(),
            scope_frozen: state.rail.has(DecisionKind::ScopeFrozen),
            term_frozen: state.rail.has(DecisionKind::TermFrozen),
            blocker_raised: state.rail.has(DecisionKind::BlockerRaised),
            own_memory,
            remaining: RemainingBudget {
                turns: state.budgets.turns_remaining,
                ticks: state.budgets.ticks_remaining,
                message_tokens: state.budgets.tokens_left(role),
            },
            clock: ClockView {
                holds_floor,
                streak: if holds_floor { state.clock.streak } else { 0 },
                nudged: signal == ClockSignal::Nudge,
                forced: signal == ClockSignal::ForcedHandoff,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{DecisionPayload, TaskSpec};

    fn fresh() -> (Env, EpisodeState) {
        let env = Env::default();
        let task = TaskSpec::generate(TaskFamily::Writing, Difficulty::Easy, 5, 30, 90, 3).unwrap();
        let s = env
            .new_episode(&task, &[Role::Planner, Role::Writer, Role::Reviewer], 3)
            .unwrap();
        (env, s)
    }

    #[test]
    fn writer_sees_only_own_empty_slots() {
        let (env, s) = fresh();
        let o = env.observe(&s, Role::Writer).unwrap();
        assert_eq!(o.artifact.slots.len(), 5);
        assert!(o.artifact.slots.iter().all(|v| v.status == SlotStatus::Empty));
        assert!(env.observe(&s, Role::Planner).unwrap().artifact.slots.is_empty());
        assert_eq!(o, env.observe(&s, Role::Writer).unwrap());
        assert!(matches!(env.observe(&s, Role::Coder), Err(Error::UnknownRole(Role::Coder))));
    }

    #[test]
    fn memory_stays_private() {
        let (env, mut s) = fresh();
        let rm = s.memories.get_mut(&Role::Reviewer).unwrap();
        rm.checklist.extend([901, 902]);
        rm.notes_size = 777;
        let o = env.observe(&s, Role::Writer).unwrap();
        assert_eq!(o.own_memory.role, Role::Writer);
        let text = serde_json::to_string(&o).unwrap();
        assert!(!text.contains("901") && !text.contains("777"));
    }

    #[test]
    fn rail_digest_keeps_last_window() {
        let (mut env, mut s) = fresh();
        env.config.rail_window = 3;
        for t in 0..5 {
            s.rail.append(DecisionRecord {
                kind: DecisionKind::ChangeAccepted,
                turn: t,
                payload: DecisionPayload::Slot(0),
            });
        }
        let o = env.observe(&s, Role::Writer).unwrap();
        let turns: Vec<u32> = o.rail_digest.iter().map(|d| d.turn).collect();
        assert_eq!(turns, vec![2, 3, 4]);
    }
}
