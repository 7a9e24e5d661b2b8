use rand::Rng;

use super::action::{ActionKind, ActionPrimitive, FailureRef, HandoffTarget};
use super::quality::implement_margins;
use super::role::Role;
use super::state::*;
use super::task::{TaskFamily, TaskSpec, TermTag, TAG_SET_SIZE};
use super::Env;
use crate::error::{Error, Result};
use crate::guards::{
    check_message_budget, coach_intervene, safety_screen, tick_handoff_clock, BudgetDecision,
    BudgetState, ClockSignal, CoachEntry, CoachState, HandoffClock, SafetyVerdict,
};
use crate::rng::{self, label};

impl Env {
    /// Starts an episode. `team` is given in turn order; the first role holds
    /// the floor.
    pub fn new_episode(&self, task: &TaskSpec, team: &[Role], seed: u64) -> Result<EpisodeState> {
        if team.is_empty() {
            return Err(Error::Config("team must not be empty".into()));
        }
        for (i, r) in team.iter().enumerate() {
            if team[..i].contains(r) {
                return Err(Error::Config(format!("role {r} appears twice in the team")));
            }
        }
        task.validate()?;
        let mut drafters: Vec<Role> = team.iter().copied().filter(|r| r.is_drafter()).collect();
        if drafters.is_empty() {
            return Err(Error::Config("team has no drafting role".into()));
        }
        drafters.sort();
        let owners: Vec<Role> = (0..task.slot_count).map(|i| drafters[i % drafters.len()]).collect();
        let mut team_sorted = team.to_vec();
        team_sorted.sort();
        let memories = team
            .iter()
            .map(|&r| {
                let checklist = owners
                    .iter()
                    .enumerate()
                    .filter(|(_, &o)| o == r)
                    .map(|(i, _)| i as u32)
                    .collect();
                (
                    r,
                    RoleMemory {
                        role: r,
                        checklist,
                        notes_size: 0,
                    },
                )
            })
            .collect();
        Ok(EpisodeState {
            task: task.clone(),
            team: team_sorted,
            order: team.to_vec(),
            seed,
            slots: task
                .hidden_target
                .iter()
                .map(|t| SlotState::empty(t.assertion_difficulties.len()))
                .collect(),
            owners,
            rail: SummaryRail::default(),
            memories,
            receipts: Vec::new(),
            turn: 0,
            ticks_elapsed: 0,
            token_count: 0,
            budgets: BudgetState::new(
                team,
                task.max_turns,
                task.tick_budget,
                self.config.guards.message_budget_total,
            ),
            clock: HandoffClock { speaker: 0, streak: 0 },
            coach: CoachState::new(self.config.guards.coach_window),
            streams: team
                .iter()
                .map(|r| rng::derived_stream(seed, &[label::ENV_ROLE, r.index() as u64]))
                .collect(),
            terminal: None,
            counters: EpisodeCounters::default(),
            drafts_completed: 0,
            last_effect: None,
        })
    }

    /// Action templates `role` may take in this state, at most one per
    /// [`ActionKind`], in kind order. `HandoffPeer` is always present.
    pub fn legal_actions(&self, state: &EpisodeState, role: Role) -> Result<Vec<ActionPrimitive>> {
        if state.is_terminal() {
            return Err(Error::TerminalState);
        }
        if state.position(role).is_none() {
            return Err(Error::UnknownRole(role));
        }
        let forced = tick_handoff_clock(state, role, &self.config.guards) == ClockSignal::ForcedHandoff;
        let mut out = Vec::with_capacity(ActionKind::COUNT);
        for kind in ActionKind::ALL {
            if forced && !matches!(kind, ActionKind::HandoffPeer | ActionKind::Integrate) {
                continue;
            }
            if let Some(a) = self.template(state, role, kind) {
                if kind != ActionKind::HandoffPeer
                    && state.coach.is_suppressed(role, kind, a.target_slot(), state.turn)
                {
                    continue;
                }
                out.push(a);
            }
        }
        Ok(out)
    }

    fn template(&self, state: &EpisodeState, role: Role, kind: ActionKind) -> Option<ActionPrimitive> {
        let family = state.task.family;
        if !role.can(kind, family) {
            return None;
        }
        let drafted = |i: &usize| state.slots[*i].status.is_drafted();
        let all = 0..state.slots.len();
        match kind {
            ActionKind::Plan => Some(ActionPrimitive::Plan {
                ordering: state.task.required_order(),
                term_tag: state.task.brief_tag(),
            }),
            ActionKind::DraftSection | ActionKind::Implement => {
                let slot = self.next_draft_slot(state, role)?;
                let tokens = self.config.tokens.draft;
                Some(if kind == ActionKind::DraftSection {
                    ActionPrimitive::DraftSection { slot, tokens }
                } else {
                    ActionPrimitive::Implement { slot, tokens }
                })
            }
            ActionKind::ProposeChange => {
                let scope_turn = state.rail.scope().map(|(_, t)| t);
                let premature = all.clone().filter(drafted).find(|&i| {
                    match (state.slots[i].hidden.drafted_turn, scope_turn) {
                        (Some(d), Some(s)) => d < s,
                        _ => false,
                    }
                });
                premature
                    .or_else(|| all.clone().find(drafted))
                    .map(|slot| ActionPrimitive::ProposeChange { slot })
            }
            ActionKind::Integrate => all
                .clone()
                .find(|&i| state.slots[i].status == SlotStatus::Drafted)
                .map(|slot| ActionPrimitive::Integrate { slot }),
            ActionKind::Lint => all
                .clone()
                .filter(drafted)
                .find(|&i| state.slots[i].changed_since_lint())
                .or_else(|| all.clone().find(drafted))
                .map(|slot| ActionPrimitive::Lint { slot }),
            ActionKind::Test => all
                .clone()
                .filter(drafted)
                .find(|&i| state.slots[i].changed_since_test())
                .or_else(|| all.clone().find(drafted))
                .map(|slot| ActionPrimitive::Test { slot }),
            ActionKind::Repair => state.owned_slots(role).find_map(|slot| {
                state.slots[slot]
                    .hidden
                    .pending
                    .iter()
                    .next()
                    .map(|&failure| ActionPrimitive::Repair { slot, failure })
            }),
            ActionKind::Finalize => state.finalize_ready().then_some(ActionPrimitive::Finalize),
            ActionKind::HandoffPeer => Some(ActionPrimitive::Handoff {
                to: HandoffTarget::Peer,
            }),
            ActionKind::HandoffHuman => state
                .rail
                .has(DecisionKind::BlockerRaised)
                .then_some(ActionPrimitive::Handoff {
                    to: HandoffTarget::Human,
                }),
        }
    }

    /// The owned empty slot that comes first in the frozen order, or the
    /// lowest-index one when no order is frozen.
    fn next_draft_slot(&self, state: &EpisodeState, role: Role) -> Option<usize> {
        let empty = |i: &usize| state.slots[*i].status == SlotStatus::Empty;
        match state.rail.scope() {
            Some((ordering, _)) => ordering
                .iter()
                .copied()
                .find(|i| state.owners[*i] == role && empty(i)),
            None => state.owned_slots(role).find(empty),
        }
    }

    pub fn payload_tokens(&self, action: &ActionPrimitive) -> u32 {
        match *action {
            ActionPrimitive::DraftSection { tokens, .. } | ActionPrimitive::Implement { tokens, .. } => tokens,
            _ => self.config.tokens.of(action.kind()),
        }
    }

    /// Applies one turn. Illegal, over-budget and unsafe actions are absorbed:
    /// the turn advances with no artifact effect and the event is recorded.
    pub fn apply_action(
        &self,
        state: &mut EpisodeState,
        role: Role,
        action: &ActionPrimitive,
    ) -> Result<(Option<ToolReceipt>, StepLog)> {
        if state.is_terminal() {
            return Err(Error::TerminalState);
        }
        let pos = state.position(role).ok_or(Error::UnknownRole(role))?;
        let turn = state.turn;
        let kind = action.kind();
        let is_speaker = state.speaker() == role;
        let clock = tick_handoff_clock(state, role, &self.config.guards);
        let legal = is_speaker && self.legal_actions(state, role)?.contains(action);

        let mut events = Vec::new();
        let mut rail_appends = Vec::new();
        let mut receipt = None;
        let mut budget = BudgetDecision::Allow;
        let mut safety = SafetyVerdict::OK;
        let mut tokens = 0;
        let mut ticks = self.config.tick_cost(kind, role);
        let mut effect = Effect::NoEffect;

        if !legal {
            events.push(CreditEvent {
                reason: ReasonCode::SchemaViolation,
                units: 1.0,
            });
            ticks = self.config.ticks.illegal;
        } else {
            budget = check_message_budget(&state.budgets, role, self.payload_tokens(action));
            match budget {
                BudgetDecision::Deny => {
                    events.push(CreditEvent {
                        reason: ReasonCode::SchemaViolation,
                        units: 1.0,
                    });
                    ticks = self.config.ticks.illegal;
                }
                BudgetDecision::Truncate { allowed, over } => {
                    events.push(CreditEvent {
                        reason: ReasonCode::OverlongMessage,
                        units: over as f64,
                    });
                    tokens = allowed;
                }
                BudgetDecision::Allow => tokens = self.payload_tokens(action),
            }
            if budget != BudgetDecision::Deny {
                tokens = state.budgets.spend_tokens(role, tokens);
                safety = safety_screen(action, state);
                if !safety.allowed() {
                    events.push(CreditEvent {
                        reason: ReasonCode::UnsafeTool,
                        units: 1.0,
                    });
                } else {
                    effect = self.execute(state, pos, role, action, ticks, &mut events, &mut rail_appends, &mut receipt);
                }
            }
        }

        let spent = state.budgets.spend_turn(ticks);
        state.ticks_elapsed += spent;
        state.token_count += tokens;
        state.turn += 1;

        if is_speaker {
            let yields = (legal && kind == ActionKind::HandoffPeer) || clock == ClockSignal::ForcedHandoff;
            if yields {
                state.clock.speaker = (state.clock.speaker + 1) % state.order.len();
                state.clock.streak = 0;
            } else {
                state.clock.streak += 1;
            }
            match clock {
                ClockSignal::Nudge => state.counters.nudges += 1,
                ClockSignal::ForcedHandoff => state.counters.forced_handoffs += 1,
                ClockSignal::None => {}
            }
        }

        if legal && effect == Effect::NoEffect && safety.allowed() && budget != BudgetDecision::Deny {
            events.push(CreditEvent {
                reason: ReasonCode::RedundantTurn,
                units: 1.0,
            });
        }
        if legal && kind == ActionKind::HandoffPeer {
            if let Some((_, ActionKind::HandoffPeer)) = state.last_effect {
                events.push(CreditEvent {
                    reason: ReasonCode::RedundantTurn,
                    units: 1.0,
                });
            }
        }
        state.last_effect = Some((role, kind));

        let mut intervention = None;
        if legal {
            state.coach.push(CoachEntry {
                turn,
                role,
                kind,
                slot: action.target_slot(),
                no_delta: !effect.is_delta(),
            });
            if let Some(iv) = coach_intervene(&state.coach, self.config.guards.coach_repeats) {
                let record = DecisionRecord {
                    kind: DecisionKind::BlockerRaised,
                    turn,
                    payload: DecisionPayload::Blocker {
                        role: iv.role,
                        kind: iv.kind,
                        slot: iv.slot,
                    },
                };
                state.rail.append(record.clone());
                rail_appends.push(record);
                state.coach.apply(&iv, state.turn + self.config.guards.coach_cooldown);
                state.counters.interventions += 1;
                intervention = Some(iv);
            }
        }

        self.update_memory(state, role, tokens);

        if state.terminal.is_none() {
            state.terminal = self.check_termination(state);
        }
        if state.terminal.is_some()
            && state.task.family == TaskFamily::Writing
            && self.quality_score(state).style < self.config.style_threshold
        {
            events.push(CreditEvent {
                reason: ReasonCode::StyleDrift,
                units: 1.0,
            });
        }

        for e in &events {
            let c = &mut state.counters;
            match e.reason {
                ReasonCode::RedundantTurn => c.redundant_turns += 1,
                ReasonCode::OverlongMessage => c.overbudget_tokens += e.units as u32,
                ReasonCode::ConflictReopen => c.conflict_reopens += 1,
                ReasonCode::SchemaViolation => c.schema_violations += 1,
                ReasonCode::UnsafeTool => c.unsafe_tool_calls += 1,
                ReasonCode::StyleDrift => c.style_drift += 1,
                ReasonCode::Progress | ReasonCode::TestEvidence => {}
            }
        }

        let log = StepLog {
            turn,
            role,
            kind,
            verb: kind.verb(),
            target_slot: action.target_slot(),
            legal,
            effect,
            receipt: receipt.clone(),
            ticks: spent,
            tokens,
            rail_appends,
            events,
            clock,
            budget,
            safety,
            intervention,
            terminal: state.terminal,
        };
        Ok((receipt, log))
    }

    #[allow(clippy::too_many_arguments)]
    fn execute(
        &self,
        state: &mut EpisodeState,
        pos: usize,
        role: Role,
        action: &ActionPrimitive,
        ticks: u32,
        events: &mut Vec<CreditEvent>,
        rail_appends: &mut Vec<DecisionRecord>,
        receipt: &mut Option<ToolReceipt>,
    ) -> Effect {
        let turn = state.turn;
        let author = Authorship { role, turn };
        match action {
            ActionPrimitive::Plan { ordering, term_tag } => {
                if state.rail.scope().is_some() {
                    events.push(CreditEvent {
                        reason: ReasonCode::ConflictReopen,
                        units: 1.0,
                    });
                    return Effect::NoEffect;
                }
                for record in [
                    DecisionRecord {
                        kind: DecisionKind::ScopeFrozen,
                        turn,
                        payload: DecisionPayload::Ordering(ordering.clone()),
                    },
                    DecisionRecord {
                        kind: DecisionKind::TermFrozen,
                        turn,
                        payload: DecisionPayload::Term(*term_tag),
                    },
                ] {
                    state.rail.append(record.clone());
                    rail_appends.push(record);
                }
                Effect::Progress
            }
            ActionPrimitive::DraftSection { slot, .. } | ActionPrimitive::Implement { slot, .. } => {
                self.draft(state, pos, role, *slot, author)
            }
            ActionPrimitive::ProposeChange { slot } => {
                let n = state.task.hidden_target[*slot].assertion_difficulties.len();
                state.slots[*slot] = SlotState::empty(n);
                let record = DecisionRecord {
                    kind: DecisionKind::ChangeAccepted,
                    turn,
                    payload: DecisionPayload::Slot(*slot),
                };
                state.rail.append(record.clone());
                rail_appends.push(record);
                Effect::Progress
            }
            ActionPrimitive::Integrate { slot } => {
                state.slots[*slot].status = SlotStatus::Integrated;
                Effect::Progress
            }
            ActionPrimitive::Lint { slot } | ActionPrimitive::Test { slot } => {
                let tool = if matches!(action, ActionPrimitive::Lint { .. }) {
                    Tool::Lint
                } else {
                    Tool::Test
                };
                let fresh = match tool {
                    Tool::Lint => state.slots[*slot].changed_since_lint(),
                    Tool::Test => state.slots[*slot].changed_since_test(),
                };
                // Template guarantees the precondition.
                let r = self
                    .issue_receipt(state, tool, *slot, ticks)
                    .expect("tool template targets a drafted slot");
                *receipt = Some(r);
                if fresh {
                    Effect::Information
                } else {
                    Effect::NoEffect
                }
            }
            ActionPrimitive::Repair { slot, failure } => {
                let u: f64 = state.streams[pos].random();
                let p = self.config.profile(role).repair_success;
                let term = state.rail.term();
                let s = &mut state.slots[*slot];
                s.hidden.pending.remove(failure);
                match *failure {
                    FailureRef::Assertion(j) => {
                        if u < p {
                            s.hidden.margins[j] = 0.0;
                        } else {
                            s.hidden.margins[j] *= 0.5;
                        }
                        s.hidden.assertion_by[j] = Some(author);
                        s.hidden.version += 1;
                        Effect::Progress
                    }
                    FailureRef::Lint => match term {
                        Some(t) if u < p => {
                            s.terminology_tag = Some(t);
                            s.hidden.term_aligned = true;
                            s.hidden.unsafe_marker = false;
                            s.hidden.tag_by = Some(author);
                            s.hidden.version += 1;
                            Effect::Progress
                        }
                        _ => Effect::Attempted,
                    },
                }
            }
            ActionPrimitive::Finalize => {
                state.terminal = Some(TerminationReason::Finalized);
                Effect::Terminal
            }
            ActionPrimitive::Handoff { to: HandoffTarget::Peer } => Effect::Transfer,
            ActionPrimitive::Handoff { to: HandoffTarget::Human } => {
                state.terminal = Some(TerminationReason::Handoff);
                Effect::Terminal
            }
        }
    }

    fn draft(&self, state: &mut EpisodeState, pos: usize, role: Role, slot: usize, author: Authorship) -> Effect {
        // Fixed number of draws per attempt keeps the role's stream aligned
        // across alternative histories.
        let stream = &mut state.streams[pos];
        let u_success: f64 = stream.random();
        let u_fidelity: f64 = stream.random();
        let u_tag: f64 = stream.random();
        let u_quality: f64 = stream.random();
        let u_unsafe: f64 = stream.random();

        let cfg = &self.config;
        let skill = cfg.profile(role);
        let scope = state.rail.scope().is_some();
        let term = state.rail.term();
        let p = (skill.draft_success + if scope { cfg.plan_bonus } else { 0.0 }).min(1.0);
        if u_success >= p {
            return Effect::Attempted;
        }
        let random_tag = TermTag(((u_tag * TAG_SET_SIZE as f64) as u8).min(TAG_SET_SIZE - 1));
        let tag = match term {
            Some(t) if u_fidelity < skill.style_fidelity => t,
            _ => random_tag,
        };
        let difficulties = &state.task.hidden_target[slot].assertion_difficulties;
        let quality = (skill.impl_quality
            + if scope { cfg.impl_plan_bonus } else { 0.0 }
            + cfg.impl_noise * (2.0 * u_quality - 1.0))
            .clamp(0.0, 1.0);
        let margins = implement_margins(quality, difficulties);
        let is_coding = state.task.family == TaskFamily::Coding;
        let order = state.drafts_completed;
        state.drafts_completed += 1;

        let s = &mut state.slots[slot];
        s.status = SlotStatus::Drafted;
        s.terminology_tag = Some(tag);
        s.order_drafted = Some(order);
        s.assertion_results.clear();
        let h = &mut s.hidden;
        h.drafted_after_scope = scope;
        h.drafted_turn = Some(author.turn);
        h.term_aligned = term.is_some();
        h.assertion_by = vec![Some(author); margins.len()];
        h.margins = margins;
        h.unsafe_marker = is_coding && u_unsafe < skill.unsafe_rate;
        h.version += 1;
        h.pending.clear();
        h.tested = false;
        h.drafted_by = Some(author);
        h.tag_by = Some(author);
        Effect::Progress
    }

    /// Runs a tool against a slot and appends the receipt. The outcome is a
    /// pure function of the slot's current artifact state.
    pub fn run_tool(&self, state: &mut EpisodeState, tool: Tool, slot: usize) -> Result<ToolReceipt> {
        let base = self.config.ticks.tool;
        self.issue_receipt(state, tool, slot, base)
    }

    fn issue_receipt(&self, state: &mut EpisodeState, tool: Tool, slot: usize, tick_cost: u32) -> Result<ToolReceipt> {
        let term = state.rail.term();
        let family = state.task.family;
        let s = state
            .slots
            .get_mut(slot)
            .ok_or_else(|| Error::Precondition(format!("slot {slot} does not exist")))?;
        if !s.status.is_drafted() {
            return Err(Error::Precondition(format!("slot {slot} has nothing to check")));
        }
        let outcome = match tool {
            Tool::Lint => {
                let mismatch = term.is_none_or(|t| s.terminology_tag != Some(t));
                let violations =
                    mismatch as u32 + (!s.hidden.term_aligned) as u32 + s.hidden.unsafe_marker as u32;
                s.hidden.lint_version = Some(s.hidden.version);
                s.hidden.lint_violations = violations;
                s.hidden.pending.remove(&FailureRef::Lint);
                if violations > 0 {
                    s.hidden.pending.insert(FailureRef::Lint);
                }
                ReceiptOutcome::Lint { violations }
            }
            Tool::Test => {
                if family != TaskFamily::Coding {
                    return Err(Error::Precondition("tests exist only for coding tasks".into()));
                }
                let results: Vec<AssertionOutcome> =
                    s.hidden.margins.iter().map(|&m| AssertionOutcome::from_margin(m)).collect();
                s.status = if results.iter().all(AssertionOutcome::is_pass) {
                    SlotStatus::Passing
                } else {
                    SlotStatus::Failing
                };
                s.hidden.tested = true;
                s.hidden.test_version = Some(s.hidden.version);
                s.hidden.pending.retain(|f| matches!(f, FailureRef::Lint));
                for (j, r) in results.iter().enumerate() {
                    if !r.is_pass() {
                        s.hidden.pending.insert(FailureRef::Assertion(j));
                    }
                }
                s.assertion_results = results.clone();
                ReceiptOutcome::Test { results }
            }
        };
        let receipt = ToolReceipt {
            tool,
            slot,
            outcome,
            tick_cost,
            turn_issued: state.turn,
        };
        state.receipts.push(receipt.clone());
        Ok(receipt)
    }

    /// `Timeout` once the turn or tick cap is reached; otherwise whatever
    /// terminal marker the state already carries.
    pub fn check_termination(&self, state: &EpisodeState) -> Option<TerminationReason> {
        if state.terminal.is_some() {
            return state.terminal;
        }
        (state.turn >= state.task.max_turns || state.ticks_elapsed >= state.task.tick_budget)
            .then_some(TerminationReason::Timeout)
    }

    fn update_memory(&self, state: &mut EpisodeState, role: Role, tokens: u32) {
        let open: std::collections::BTreeSet<u32> = if role.is_drafter() {
            state
                .owned_slots(role)
                .filter(|&i| {
                    let s = &state.slots[i];
                    s.status.rank() < 2 || !s.hidden.pending.is_empty()
                })
                .map(|i| i as u32)
                .collect()
        } else {
            (0..state.slots.len())
                .filter(|&i| {
                    let s = &state.slots[i];
                    s.status.is_drafted() && s.changed_since_lint()
                })
                .map(|i| i as u32)
                .collect()
        };
        if let Some(m) = state.memories.get_mut(&role) {
            m.checklist = open;
            m.notes_size += tokens;
        }
    }
}
