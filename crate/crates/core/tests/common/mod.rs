#![allow(dead_code)]

pub mod oracle;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use teamgrpo_core::env::{ActionPrimitive, Difficulty, Env, EpisodeState, FailureRef, Role, TaskFamily, TaskSpec};
use teamgrpo_core::guards::BudgetDecision;
use teamgrpo_core::rng;
use teamgrpo_core::Error;

/// Violations seen while driving episodes with random actions.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct InvariantReport {
    pub episodes: u64,
    pub steps: u64,
    pub budget_underflows: u64,
    pub post_terminal_steps: u64,
    pub memory_leaks: u64,
    pub unterminated: u64,
    pub guard_violations: u64,
}

impl InvariantReport {
    pub fn merge(&mut self, o: &InvariantReport) {
        self.episodes += o.episodes;
        self.steps += o.steps;
        self.budget_underflows += o.budget_underflows;
        self.post_terminal_steps += o.post_terminal_steps;
        self.memory_leaks += o.memory_leaks;
        self.unterminated += o.unterminated;
        self.guard_violations += o.guard_violations;
    }

    pub fn clean(&self) -> bool {
        self.budget_underflows + self.post_terminal_steps + self.memory_leaks + self.unterminated + self.guard_violations
            == 0
    }
}

pub fn random_team(family: TaskFamily, r: &mut impl Rng) -> Vec<Role> {
    match r.random_range(0..4) {
        0 => vec![Role::Solo],
        1 => {
            let mut t: Vec<Role> = Role::default_team(family).into_iter().filter(|x| !x.is_drafter()).collect();
            t.shuffle(r);
            t.truncate(1);
            t.insert(r.random_range(0..=t.len()), if family == TaskFamily::Writing { Role::Writer } else { Role::Coder });
            t
        }
        _ => {
            let mut t = Role::default_team(family);
            t.shuffle(r);
            t
        }
    }
}

pub fn random_task(r: &mut impl Rng, seed: u64) -> TaskSpec {
    let family = if r.random_bool(0.5) { TaskFamily::Writing } else { TaskFamily::Coding };
    let difficulty = *Difficulty::ALL.choose(r).unwrap();
    let slots = r.random_range(1..=6);
    let max_turns = r.random_range(1..=48);
    let ticks = max_turns * r.random_range(1..=4);
    TaskSpec::generate(family, difficulty, slots, max_turns, ticks, seed).unwrap()
}

/// Something no role could legally do right now, or a legal move by a role
/// that does not hold the floor.
fn stray_action(env: &Env, s: &EpisodeState, r: &mut impl Rng) -> (Role, ActionPrimitive) {
    let role = *s.team.choose(r).unwrap();
    let slot = r.random_range(0..s.slots.len() + 1);
    let action = match r.random_range(0..4) {
        0 => ActionPrimitive::Repair { slot, failure: FailureRef::Lint },
        1 => ActionPrimitive::Integrate { slot },
        2 => ActionPrimitive::Test { slot },
        _ => match env.legal_actions(s, role) {
            Ok(legal) => legal.choose(r).unwrap().clone(),
            Err(_) => ActionPrimitive::Finalize,
        },
    };
    (role, action)
}

fn check_budgets(s: &EpisodeState, per_role: u32) -> bool {
    let b = &s.budgets;
    let tokens_spent: u32 = s.team.iter().map(|r| per_role - b.tokens_left(*r).min(per_role)).sum();
    b.ticks_remaining as u64 + s.ticks_elapsed as u64 == s.task.tick_budget as u64
        && b.turns_remaining + s.turn == s.task.max_turns
        && s.team.iter().all(|r| b.tokens_left(*r) <= per_role)
        && tokens_spent == s.token_count
        && s.ticks_elapsed <= s.task.tick_budget
}

fn check_observations(env: &Env, s: &EpisodeState) -> bool {
    s.team.iter().all(|&role| {
        let Ok(obs) = env.observe(s, role) else { return false };
        obs.role == role
            && obs.own_memory.role == role
            && Some(&obs.own_memory) == s.memories.get(&role)
            && obs.artifact.slots.iter().all(|v| s.owners[v.index] == role)
    })
}

/// Drives one episode with random (and sometimes misdirected) actions and
/// checks every invariant after each step.
pub fn random_episode(env: &Env, seed: u64) -> InvariantReport {
    let mut r = rng::stream(seed);
    let task = random_task(&mut r, seed);
    let team = random_team(task.family, &mut r);
    let mut s = env.new_episode(&task, &team, seed).unwrap();
    let guards = &env.config.guards;
    let per_role = guards.message_budget_total / team.len() as u32;
    let mut rep = InvariantReport {
        episodes: 1,
        ..Default::default()
    };

    while !s.is_terminal() {
        if s.turn > task.max_turns {
            rep.unterminated += 1;
            break;
        }
        let speaker = s.speaker();
        let legal = env.legal_actions(&s, speaker).unwrap();
        let suppressed = s.coach.suppressions.iter().any(|sup| {
            sup.role == speaker
                && s.turn < sup.until_turn
                && legal.iter().any(|a| a.kind() == sup.kind && a.target_slot() == sup.slot)
        });
        if suppressed {
            rep.guard_violations += 1;
        }
        let (role, action) = if r.random_bool(0.85) {
            (speaker, legal.choose(&mut r).unwrap().clone())
        } else {
            stray_action(env, &s, &mut r)
        };
        let tokens_before = s.budgets.tokens_left(role);
        let (_, log) = env.apply_action(&mut s, role, &action).unwrap();
        rep.steps += 1;

        if !check_budgets(&s, per_role) || log.tokens > tokens_before {
            rep.budget_underflows += 1;
        }
        if matches!(log.budget, BudgetDecision::Deny) && log.tokens != 0 {
            rep.guard_violations += 1;
        }
        if team.len() > 1 && s.clock.streak >= guards.force_after {
            rep.guard_violations += 1;
        }
        if !log.legal && (log.effect.is_delta() || log.receipt.is_some()) {
            rep.guard_violations += 1;
        }
        if !s.is_terminal() && !check_observations(env, &s) {
            rep.memory_leaks += 1;
        }
    }
    if s.turn > task.max_turns || !s.is_terminal() {
        rep.unterminated += 1;
    }
    let speaker = s.speaker();
    if !matches!(env.apply_action(&mut s, speaker, &ActionPrimitive::Finalize), Err(Error::TerminalState)) {
        rep.post_terminal_steps += 1;
    }
    if env.legal_actions(&s, speaker).is_ok() || env.observe(&s, speaker).is_ok() {
        rep.post_terminal_steps += 1;
    }
    rep
}

/// A finished episode played with uniformly random legal actions.
pub fn random_record(env: &Env, seed: u64) -> teamgrpo_core::trace::EpisodeRecord {
    let mut r = rng::stream(seed);
    let task = random_task(&mut r, seed);
    let team = random_team(task.family, &mut r);
    let mut s = env.new_episode(&task, &team, seed).unwrap();
    let mut steps = Vec::new();
    while !s.is_terminal() {
        let role = s.speaker();
        let legal = env.legal_actions(&s, role).unwrap();
        let a = legal.choose(&mut r).unwrap().clone();
        steps.push(env.apply_action(&mut s, role, &a).unwrap().1);
    }
    teamgrpo_core::trace::EpisodeRecord::from_state(env, &s, steps)
}
