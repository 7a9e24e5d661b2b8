//! Hand-written baselines. Neither learns; both pick from the legal set only.

use rand::Rng;

use crate::env::{ActionKind, ActionPrimitive, Env, EpisodeState, Role, TaskFamily};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::trainer::{Actor, Choice};

fn choose(legal: &[ActionPrimitive], wanted: &[ActionKind], rng: &mut Stream) -> Result<Choice> {
    // One draw per turn, like the learned policy, so streams stay aligned.
    let _: f64 = rng.random();
    let index = wanted
        .iter()
        .find_map(|k| legal.iter().position(|a| a.kind() == *k))
        .or_else(|| legal.iter().position(|a| a.kind() == ActionKind::HandoffPeer))
        .ok_or(Error::EmptyLegalSet)?;
    Ok(Choice {
        index,
        log_prob: 0.0,
        features: Vec::new(),
    })
}

fn any_unlinted(state: &EpisodeState) -> bool {
    state.slots.iter().any(|s| s.status.is_drafted() && s.hidden.lint_version.is_none())
}

fn any_untested(state: &EpisodeState) -> bool {
    state.task.family == TaskFamily::Coding
        && state.slots.iter().any(|s| s.status.is_drafted() && !s.hidden.tested)
}

fn any_changed(state: &EpisodeState, test: bool) -> bool {
    state.slots.iter().any(|s| {
        s.status.is_drafted() && if test { s.changed_since_test() } else { s.changed_since_lint() }
    })
}

/// One generalist runs plan, draft everything, integrate, review each slot
/// once, repair what the receipts flagged, then finalize.
#[derive(Debug, Clone, Copy, Default)]
pub struct SingleAgent;

impl SingleAgent {
    pub fn team() -> Vec<Role> {
        vec![Role::Solo]
    }
}

impl Actor for SingleAgent {
    fn act(&self, _: &Env, state: &EpisodeState, _: Role, legal: &[ActionPrimitive], rng: &mut Stream) -> Result<Choice> {
        use ActionKind::*;
        let mut wanted = Vec::with_capacity(6);
        if state.rail.scope().is_none() {
            wanted.push(Plan);
        }
        wanted.extend([DraftSection, Implement, Integrate]);
        if any_unlinted(state) {
            wanted.push(Lint);
        }
        wanted.push(Repair);
        if any_untested(state) {
            wanted.push(Test);
        }
        wanted.push(Finalize);
        choose(legal, &wanted, rng)
    }
}

/// Fixed rotation, one action per hold of the floor. The reviewer checks
/// every new or repaired slot and the tester lints then tests each one.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedTeam;

impl Actor for ScriptedTeam {
    fn act(&self, _: &Env, state: &EpisodeState, role: Role, legal: &[ActionPrimitive], rng: &mut Stream) -> Result<Choice> {
        use ActionKind::*;
        if state.clock.streak >= 1 {
            return choose(legal, &[HandoffPeer], rng);
        }
        let wanted: Vec<ActionKind> = match role {
            Role::Planner if state.rail.scope().is_none() => vec![Plan],
            Role::Planner => vec![Finalize, Integrate],
            Role::Writer | Role::Coder => vec![Repair, DraftSection, Implement],
            Role::Reviewer if any_changed(state, false) => vec![Lint],
            Role::Reviewer => vec![Integrate, Finalize],
            Role::Tester if any_changed(state, false) => vec![Lint],
            Role::Tester if any_changed(state, true) => vec![Test],
            Role::Tester => vec![Finalize],
            Role::Solo => vec![],
        };
        choose(legal, &wanted, rng)
    }
}
