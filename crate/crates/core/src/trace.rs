//! Finished-episode records and the JSONL trace dialect.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::env::{
    ActionKind, DecisionRecord, Env, EpisodeCounters, EpisodeState, QualityBreakdown, QualityCredit, ReasonCode,
    Role, StepLog, TaskSpec, TerminationReason, ToolReceipt, Verb,
};
use crate::error::{Error, Result};
use crate::guards::{Intervention, SafetyReason};
use crate::reward::{AuditFragment, RewardBreakdown};

pub const TRACE_SCHEMA: u32 = 1;

/// Everything needed to score and audit one episode after the fact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub task: TaskSpec,
    pub order: Vec<Role>,
    pub seed: u64,
    pub steps: Vec<StepLog>,
    pub quality: QualityBreakdown,
    pub credits: Vec<QualityCredit>,
    pub counters: EpisodeCounters,
    pub ticks_elapsed: u32,
    pub token_count: u32,
    pub terminal: Option<TerminationReason>,
}

impl EpisodeRecord {
    pub fn from_state(env: &Env, state: &EpisodeState, steps: Vec<StepLog>) -> Self {
        let (quality, credits) = env.quality_with_credit(state);
        Self {
            task: state.task.clone(),
            order: state.order.clone(),
            seed: state.seed,
            steps,
            quality,
            credits,
            counters: state.counters.clone(),
            ticks_elapsed: state.ticks_elapsed,
            token_count: state.token_count,
            terminal: state.terminal,
        }
    }

    pub fn turns(&self) -> usize {
        self.steps.len()
    }

    pub fn receipts(&self) -> Vec<ToolReceipt> {
        self.steps.iter().filter_map(|s| s.receipt.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema: u32,
    pub config_hash: String,
    pub seed: u64,
    pub order: Vec<Role>,
    pub task: TaskSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn: u32,
    pub role: Role,
    pub verb: Verb,
    pub kind: ActionKind,
    pub target_slot: Option<usize>,
    pub receipt: Option<ToolReceipt>,
    pub ticks: u32,
    pub tokens: u32,
    pub rail_appends: Vec<DecisionRecord>,
    pub violations: Vec<ReasonCode>,
}

impl From<&StepLog> for TurnRecord {
    fn from(s: &StepLog) -> Self {
        Self {
            turn: s.turn,
            role: s.role,
            verb: s.verb,
            kind: s.kind,
            target_slot: s.target_slot,
            receipt: s.receipt.clone(),
            ticks: s.ticks,
            tokens: s.tokens,
            rail_appends: s.rail_appends.clone(),
            violations: s.violations(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub turn: u32,
    pub role: Role,
    pub reason: SafetyReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceLine {
    Header(TraceHeader),
    Turn(TurnRecord),
    Intervention(Intervention),
    Verdict(VerdictRecord),
    Reward(RewardBreakdown),
    Fragment(AuditFragment),
}

/// Trace lines for one episode: header, per-turn rows with their guard rows,
/// then the reward and its fragments.
pub fn trace_lines(
    config_hash: &str,
    record: &EpisodeRecord,
    breakdown: Option<&RewardBreakdown>,
    fragments: &[AuditFragment],
) -> Vec<TraceLine> {
    let mut out = vec![TraceLine::Header(TraceHeader {
        schema: TRACE_SCHEMA,
        config_hash: config_hash.to_string(),
        seed: record.seed,
        order: record.order.clone(),
        task: record.task.clone(),
    })];
    for s in &record.steps {
        out.push(TraceLine::Turn(s.into()));
        if !s.safety.allowed() {
            out.push(TraceLine::Verdict(VerdictRecord {
                turn: s.turn,
                role: s.role,
                reason: s.safety.reason(),
            }));
        }
        if let Some(iv) = &s.intervention {
            out.push(TraceLine::Intervention(iv.clone()));
        }
    }
    if let Some(b) = breakdown {
        out.push(TraceLine::Reward(b.clone()));
    }
    out.extend(fragments.iter().cloned().map(TraceLine::Fragment));
    out
}

pub fn write_jsonl<W: Write>(mut w: W, lines: &[TraceLine]) -> Result<()> {
    for line in lines {
        let text = serde_json::to_string(line).map_err(|e| Error::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(w, "{text}")?;
    }
    Ok(())
}

/// Parses a JSONL trace; errors carry the 1-based line number.
pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<TraceLine>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(parsed);
    }
    Ok(out)
}

/// Human-readable per-turn report. Depends only on the parsed lines.
pub fn render_audit(lines: &[TraceLine]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "turn  role      verb            target  receipt           credit");
    let fragments_at = |turn: u32| {
        lines
            .iter()
            .filter_map(|l| match l {
                TraceLine::Fragment(f) if f.turn == turn && f.component != crate::reward::Component::Speed => {
                    Some(format!("{}:{}{:+.4}", f.component.name(), f.reason_code.name(), f.delta))
                }
                _ => None,
            })
            .collect::<Vec<_>>()
    };
    for line in lines {
        match line {
            TraceLine::Header(h) => {
                let _ = writeln!(
                    out,
                    "# episode seed={} family={} slots={} config={}",
                    h.seed,
                    h.task.family.name(),
                    h.task.slot_count,
                    h.config_hash
                );
            }
            TraceLine::Turn(t) => {
                let target = t.target_slot.map_or("-".to_string(), |s| s.to_string());
                let receipt = t.receipt.as_ref().map_or("-".to_string(), |r| r.digest());
                let mut credit = fragments_at(t.turn);
                for v in &t.violations {
                    let tag = format!("FLAG:{}", v.name());
                    if !credit.contains(&tag) {
                        credit.insert(0, tag);
                    }
                }
                let _ = writeln!(
                    out,
                    "{:<5} {:<9} {:<15} {:<7} {:<17} {}",
                    t.turn,
                    t.role.name(),
                    t.kind_label(),
                    target,
                    receipt,
                    credit.join(" ")
                );
            }
            TraceLine::Intervention(iv) => {
                let _ = writeln!(
                    out,
                    "      coach: blocker on {} {:?} slot {:?} at turn {}",
                    iv.role.name(),
                    iv.kind,
                    iv.slot,
                    iv.turn
                );
            }
            TraceLine::Verdict(v) => {
                let _ = writeln!(out, "      safety: {:?} for {} at turn {}", v.reason, v.role.name(), v.turn);
            }
            TraceLine::Reward(b) => {
                let _ = writeln!(
                    out,
                    "# reward combined={:.4} quality={:.4} ticks={} coordination={:.4} compliance={:.4}",
                    b.combined, b.raw.quality, b.raw.speed_raw, b.raw.coordination_penalty, b.raw.compliance_penalty
                );
            }
            TraceLine::Fragment(_) => {}
        }
    }
    out
}

impl TurnRecord {
    fn kind_label(&self) -> String {
        match self.kind {
            ActionKind::HandoffPeer => "handoff>peer".into(),
            ActionKind::HandoffHuman => "handoff>human".into(),
            _ => self.verb.name().into(),
        }
    }
}
