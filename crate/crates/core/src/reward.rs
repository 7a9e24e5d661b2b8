//! Four-part joint reward: raw scoring, per-batch normalization, curriculum
//! weights and audit fragments.

use serde::{Deserialize, Serialize};

use crate::env::{EpisodeCounters, ReasonCode, Role, TaskFamily};
use crate::error::{Error, Result};
use crate::trace::EpisodeRecord;

pub const CLAMP: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawRewardComponents {
    pub quality: f64,
    /// Ticks elapsed; lower is better.
    pub speed_raw: f64,
    pub coordination_penalty: f64,
    pub compliance_penalty: f64,
}

impl RawRewardComponents {
    /// Values in normalization order, with speed negated so higher is better.
    pub fn signed(&self) -> [f64; 4] {
        [
            self.quality,
            -self.speed_raw,
            self.coordination_penalty,
            self.compliance_penalty,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyCoefficients {
    pub redundant_turn: f64,
    pub overbudget_token: f64,
    pub conflict_reopen: f64,
    pub schema_violation: f64,
    pub unsafe_tool: f64,
    pub style_drift: f64,
}

impl Default for PenaltyCoefficients {
    fn default() -> Self {
        Self {
            redundant_turn: 0.5,
            overbudget_token: 0.01,
            conflict_reopen: 1.0,
            schema_violation: 1.0,
            unsafe_tool: 1.0,
            style_drift: 1.0,
        }
    }
}

impl PenaltyCoefficients {
    pub fn of(&self, reason: ReasonCode) -> f64 {
        match reason {
            ReasonCode::RedundantTurn => self.redundant_turn,
            ReasonCode::OverlongMessage => self.overbudget_token,
            ReasonCode::ConflictReopen => self.conflict_reopen,
            ReasonCode::SchemaViolation => self.schema_violation,
            ReasonCode::UnsafeTool => self.unsafe_tool,
            ReasonCode::StyleDrift => self.style_drift,
            ReasonCode::Progress | ReasonCode::TestEvidence => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("redundant_turn", self.redundant_turn),
            ("overbudget_token", self.overbudget_token),
            ("conflict_reopen", self.conflict_reopen),
            ("schema_violation", self.schema_violation),
            ("unsafe_tool", self.unsafe_tool),
            ("style_drift", self.style_drift),
        ];
        for (name, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::field(name, "must be a finite non-negative number"));
            }
        }
        Ok(())
    }

    /// The two penalties implied by the episode counters.
    pub fn penalties(&self, c: &EpisodeCounters) -> (f64, f64) {
        let coordination = self.redundant_turn * c.redundant_turns as f64
            + self.overbudget_token * c.overbudget_tokens as f64
            + self.conflict_reopen * c.conflict_reopens as f64;
        let compliance = self.schema_violation * c.schema_violations as f64
            + self.unsafe_tool * c.unsafe_tool_calls as f64
            + self.style_drift * c.style_drift as f64;
        (coordination, compliance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub w_quality: f64,
    pub w_speed: f64,
    pub w_coordination: f64,
    pub w_compliance: f64,
}

impl RewardWeights {
    /// Rescales to sum 1.
    pub fn new(w_quality: f64, w_speed: f64, w_coordination: f64, w_compliance: f64) -> Result<Self> {
        let w = [w_quality, w_speed, w_coordination, w_compliance];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::field("weights", "must be finite and non-negative"));
        }
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            return Err(Error::field("weights", "must not all be zero"));
        }
        Ok(Self {
            w_quality: w_quality / total,
            w_speed: w_speed / total,
            w_coordination: w_coordination / total,
            w_compliance: w_compliance / total,
        })
    }

    pub fn early() -> Self {
        Self::new(0.35, 0.15, 0.40, 0.10).expect("valid constants")
    }

    pub fn late() -> Self {
        Self::new(0.60, 0.15, 0.15, 0.10).expect("valid constants")
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w_quality, self.w_speed, self.w_coordination, self.w_compliance]
    }

    fn lerp(a: &Self, b: &Self, t: f64) -> Self {
        let mix = |x: f64, y: f64| x * (1.0 - t) + y * t;
        Self {
            w_quality: mix(a.w_quality, b.w_quality),
            w_speed: mix(a.w_speed, b.w_speed),
            w_coordination: mix(a.w_coordination, b.w_coordination),
            w_compliance: mix(a.w_compliance, b.w_compliance),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub early: RewardWeights,
    pub late: RewardWeights,
    pub total_steps: u64,
}

impl CurriculumSchedule {
    pub fn new(total_steps: u64) -> Self {
        Self {
            early: RewardWeights::early(),
            late: RewardWeights::late(),
            total_steps,
        }
    }
}

/// Linear from `early` at step 0 to `late` at half of `total_steps`, then
/// constant.
pub fn curriculum_weights(step: i64, schedule: &CurriculumSchedule) -> Result<RewardWeights> {
    if step < 0 {
        return Err(Error::field("training_step", "must be non-negative"));
    }
    let half = schedule.total_steps as f64 / 2.0;
    let t = if half <= 0.0 {
        1.0
    } else {
        (step as f64 / half).min(1.0)
    };
    Ok(RewardWeights::lerp(&schedule.early, &schedule.late, t))
}

/// Per-dimension batch statistics over signed raw components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 4],
    /// Population standard deviation; 0 marks a degenerate dimension.
    pub std: [f64; 4],
    pub count: usize,
}

impl NormStats {
    pub fn fit(batch: &[RawRewardComponents]) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = batch.len() as f64;
        let mut mean = [0.0; 4];
        for r in batch {
            for (m, v) in mean.iter_mut().zip(r.signed()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = [0.0; 4];
        for r in batch {
            for (d, v) in r.signed().iter().enumerate() {
                std[d] += (v - mean[d]).powi(2);
            }
        }
        for s in std.iter_mut() {
            *s = (*s / n).sqrt();
            // Spread below rounding noise is treated as no spread.
            if *s <= 1e-12 {
                *s = 0.0;
            }
        }
        Ok(Self {
            mean,
            std,
            count: batch.len(),
        })
    }

    /// Z-scores before clamping.
    pub fn zscore(&self, raw: &RawRewardComponents) -> [f64; 4] {
        let mut z = [0.0; 4];
        for (d, v) in raw.signed().iter().enumerate() {
            if self.std[d] > 0.0 && self.count > 1 {
                z[d] = (v - self.mean[d]) / self.std[d];
            }
        }
        z
    }

    pub fn apply(&self, raw: &RawRewardComponents) -> [f64; 4] {
        self.zscore(raw).map(|v| v.clamp(-CLAMP, CLAMP))
    }
}

pub fn normalize_batch(batch: &[RawRewardComponents]) -> Result<Vec<[f64; 4]>> {
    let stats = NormStats::fit(batch)?;
    Ok(batch.iter().map(|r| stats.apply(r)).collect())
}

/// Separate statistics per task family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyNorm {
    pub writing: Option<NormStats>,
    pub coding: Option<NormStats>,
}

impl FamilyNorm {
    pub fn fit(batch: &[(TaskFamily, RawRewardComponents)]) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let pick = |fam| {
            let v: Vec<_> = batch.iter().filter(|(f, _)| *f == fam).map(|(_, r)| *r).collect();
            (!v.is_empty()).then(|| NormStats::fit(&v)).transpose()
        };
        Ok(Self {
            writing: pick(TaskFamily::Writing)?,
            coding: pick(TaskFamily::Coding)?,
        })
    }

    pub fn stats(&self, family: TaskFamily) -> Option<&NormStats> {
        match family {
            TaskFamily::Writing => self.writing.as_ref(),
            TaskFamily::Coding => self.coding.as_ref(),
        }
    }

    /// Normalized vector; zero when the family had no batch members.
    pub fn apply(&self, family: TaskFamily, raw: &RawRewardComponents) -> [f64; 4] {
        self.stats(family).map_or([0.0; 4], |s| s.apply(raw))
    }
}

/// `w_q n_q + w_s n_s - w_c n_c - w_comp n_comp`.
pub fn combine_reward(normalized: &[f64; 4], weights: &RewardWeights) -> f64 {
    weights.w_quality * normalized[0] + weights.w_speed * normalized[1]
        - weights.w_coordination * normalized[2]
        - weights.w_compliance * normalized[3]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub raw: RawRewardComponents,
    pub normalized: [f64; 4],
    pub combined: f64,
    pub weights_used: RewardWeights,
    pub batch_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Quality,
    Speed,
    Coordination,
    Compliance,
}

impl Component {
    pub const ALL: [Component; 4] = [
        Component::Quality,
        Component::Speed,
        Component::Coordination,
        Component::Compliance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Quality => "quality",
            Component::Speed => "speed",
            Component::Coordination => "coordination",
            Component::Compliance => "compliance",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditFragment {
    pub turn: u32,
    pub role: Role,
    pub component: Component,
    pub delta: f64,
    pub reason_code: ReasonCode,
}

/// Raw components of a finished episode, summed from its step log. The sums
/// are checked against the counters the environment kept.
pub fn score_components(record: &EpisodeRecord, coeffs: &PenaltyCoefficients) -> Result<RawRewardComponents> {
    if record.terminal.is_none() {
        return Err(Error::NonTerminalTrace);
    }
    let mut coordination = 0.0;
    let mut compliance = 0.0;
    let mut ticks = 0u64;
    for step in &record.steps {
        ticks += step.ticks as u64;
        for e in &step.events {
            let v = coeffs.of(e.reason) * e.units;
            if e.reason.is_coordination() {
                coordination += v;
            } else if e.reason.is_compliance() {
                compliance += v;
            }
        }
    }
    let (c_coord, c_comp) = coeffs.penalties(&record.counters);
    if (c_coord - coordination).abs() > 1e-9 || (c_comp - compliance).abs() > 1e-9 {
        return Err(Error::TraceMismatch("step events disagree with episode counters".into()));
    }
    if ticks != record.ticks_elapsed as u64 {
        return Err(Error::TraceMismatch("step ticks disagree with elapsed ticks".into()));
    }
    Ok(RawRewardComponents {
        quality: record.quality.overall,
        speed_raw: ticks as f64,
        coordination_penalty: coordination,
        compliance_penalty: compliance,
    })
}

/// Per-turn fragments whose deltas sum, per component, to the raw value.
/// Quality fragments credit each authored piece of the artifact to the turn
/// that produced it; speed fragments are the ticks each turn took.
pub fn explain_credit(
    record: &EpisodeRecord,
    breakdown: &RewardBreakdown,
    coeffs: &PenaltyCoefficients,
) -> Result<Vec<AuditFragment>> {
    let raw = score_components(record, coeffs)?;
    let same = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    let b = &breakdown.raw;
    if !(same(raw.quality, b.quality)
        && same(raw.speed_raw, b.speed_raw)
        && same(raw.coordination_penalty, b.coordination_penalty)
        && same(raw.compliance_penalty, b.compliance_penalty))
    {
        return Err(Error::TraceMismatch("breakdown was scored from a different episode".into()));
    }
    let mut out = Vec::new();
    for c in &record.credits {
        out.push(AuditFragment {
            turn: c.turn,
            role: c.role,
            component: Component::Quality,
            delta: c.amount,
            reason_code: c.reason,
        });
    }
    for step in &record.steps {
        if step.ticks > 0 {
            out.push(AuditFragment {
                turn: step.turn,
                role: step.role,
                component: Component::Speed,
                delta: step.ticks as f64,
                reason_code: ReasonCode::Progress,
            });
        }
        for e in &step.events {
            let component = if e.reason.is_coordination() {
                Component::Coordination
            } else if e.reason.is_compliance() {
                Component::Compliance
            } else {
                continue;
            };
            out.push(AuditFragment {
                turn: step.turn,
                role: step.role,
                component,
                delta: coeffs.of(e.reason) * e.units,
                reason_code: e.reason,
            });
        }
    }
    out.sort_by_key(|f| (f.turn, f.component));
    Ok(out)
}

/// Sum of fragment deltas per component, in [`Component::ALL`] order.
pub fn fragment_totals(fragments: &[AuditFragment]) -> [f64; 4] {
    let mut t = [0.0; 4];
    for f in fragments {
        t[f.component as usize] += f.delta;
    }
    t
}

/// A role's own quality credit: the reward used when training on local
/// signals only.
pub fn local_return(record: &EpisodeRecord, role: Role) -> f64 {
    record.credits.iter().filter(|c| c.role == role).map(|c| c.amount).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(q: f64, s: f64, c: f64, k: f64) -> RawRewardComponents {
        RawRewardComponents {
            quality: q,
            speed_raw: s,
            coordination_penalty: c,
            compliance_penalty: k,
        }
    }

    #[test]
    fn zscores_of_one_two_three() {
        let n = normalize_batch(&[raw(1.0, 5.0, 0.0, 0.0), raw(2.0, 5.0, 0.0, 0.0), raw(3.0, 5.0, 0.0, 0.0)]).unwrap();
        // Population std of {1,2,3} is sqrt(2/3).
        let s = (2.0f64 / 3.0).sqrt();
        let oracle = [-1.0 / s, 0.0, 1.0 / s];
        for (row, o) in n.iter().zip(oracle) {
            assert!((row[0] - o).abs() < 1e-12);
            assert!((row[0] - o.signum() * 1.2247).abs() < 1e-4 || o == 0.0);
            assert_eq!(&row[1..], &[0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn degenerate_batches_map_to_zero() {
        assert_eq!(normalize_batch(&[raw(0.7, 9.0, 1.0, 2.0)]).unwrap(), vec![[0.0; 4]]);
        assert!(matches!(normalize_batch(&[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn speed_is_negated() {
        let n = normalize_batch(&[raw(0.0, 10.0, 0.0, 0.0), raw(0.0, 20.0, 0.0, 0.0)]).unwrap();
        assert!(n[0][1] > 0.0 && n[1][1] < 0.0);
    }

    #[test]
    fn curriculum_endpoints_and_midpoint() {
        let s = CurriculumSchedule::new(100);
        assert_eq!(curriculum_weights(0, &s).unwrap(), s.early);
        assert_eq!(curriculum_weights(50, &s).unwrap(), s.late);
        assert_eq!(curriculum_weights(90, &s).unwrap(), s.late);
        let mid = curriculum_weights(25, &s).unwrap();
        for (m, (e, l)) in mid.as_array().iter().zip(s.early.as_array().iter().zip(s.late.as_array())) {
            assert!((m - (e + l) / 2.0).abs() < 1e-12);
        }
        assert!(curriculum_weights(-1, &s).is_err());
    }

    #[test]
    fn weights_normalize() {
        let w = RewardWeights::new(2.0, 1.0, 1.0, 0.0).unwrap();
        assert_eq!(w.as_array(), [0.5, 0.25, 0.25, 0.0]);
        assert!(RewardWeights::new(0.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn combine_cases() {
        let w = RewardWeights::late();
        assert_eq!(combine_reward(&[0.0; 4], &w), 0.0);
        assert!((combine_reward(&[1.0, 0.0, 0.0, 0.0], &w) - 0.6).abs() < 1e-15);
        let n = [0.5, -1.0, 2.0, 0.25];
        let oracle = 0.6 * 0.5 + 0.15 * -1.0 - 0.15 * 2.0 - 0.10 * 0.25;
        assert!((combine_reward(&n, &w) - oracle).abs() < 1e-12);
    }
}
