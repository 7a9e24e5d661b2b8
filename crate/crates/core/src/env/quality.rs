use serde::{Deserialize, Serialize};

use super::role::Role;
use super::state::{Authorship, EpisodeState, ReasonCode};
use super::task::TaskFamily;
use super::Env;

/// Task quality, every component in [0, 1]. Writing fills `structure` and
/// `style`; coding fills `pass_fraction`. `overall` is the mean of the two
/// writing components or the pass fraction.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QualityBreakdown {
    pub structure: f64,
    pub style: f64,
    pub pass_fraction: f64,
    pub overall: f64,
}

/// Share of `overall` earned by one authored piece of the artifact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityCredit {
    pub turn: u32,
    pub role: Role,
    pub slot: usize,
    pub amount: f64,
    pub reason: ReasonCode,
}

/// Distance to passing for each hidden assertion given an implementation of
/// quality `q`: an assertion of difficulty `d` passes when `q >= d`, and
/// otherwise fails by the relative shortfall.
pub fn implement_margins(q: f64, difficulties: &[f64]) -> Vec<f64> {
    difficulties
        .iter()
        .map(|&d| if q >= d { 0.0 } else { ((d - q) / d).clamp(0.0, 1.0) })
        .collect()
}

impl Env {
    pub fn quality_score(&self, state: &EpisodeState) -> QualityBreakdown {
        let (b, _) = self.quality_with_credit(state);
        b
    }

    /// Quality plus its decomposition into per-author credits; the credits
    /// sum to `overall`.
    pub fn quality_with_credit(&self, state: &EpisodeState) -> (QualityBreakdown, Vec<QualityCredit>) {
        match state.task.family {
            TaskFamily::Writing => self.writing_quality(state),
            TaskFamily::Coding => self.coding_quality(state),
        }
    }

    fn writing_quality(&self, state: &EpisodeState) -> (QualityBreakdown, Vec<QualityCredit>) {
        let n = state.slots.len() as f64;
        let mut credits = Vec::new();
        let mut push = |a: Option<Authorship>, slot, amount| {
            if let Some(a) = a {
                credits.push(QualityCredit {
                    turn: a.turn,
                    role: a.role,
                    slot,
                    amount,
                    reason: ReasonCode::Progress,
                });
            }
        };

        let mut structured = 0usize;
        if let Some((ordering, _)) = state.rail.scope() {
            for (pos, &slot) in ordering.iter().enumerate() {
                let s = &state.slots[slot];
                let Some(mine) = s.order_drafted.filter(|_| s.hidden.drafted_after_scope) else {
                    continue;
                };
                let in_order = ordering[..pos]
                    .iter()
                    .all(|&e| state.slots[e].order_drafted.is_some_and(|o| o < mine));
                if in_order {
                    structured += 1;
                    push(s.hidden.drafted_by, slot, 0.5 / n);
                }
            }
        }

        let mut styled = 0usize;
        if let Some(term) = state.rail.term() {
            for (slot, s) in state.slots.iter().enumerate() {
                if s.status.is_drafted() && s.terminology_tag == Some(term) {
                    styled += 1;
                    push(s.hidden.tag_by, slot, 0.5 / n);
                }
            }
        }

        let structure = structured as f64 / n;
        let style = styled as f64 / n;
        let b = QualityBreakdown {
            structure,
            style,
            pass_fraction: 0.0,
            overall: 0.5 * (structure + style),
        };
        (b, credits)
    }

    fn coding_quality(&self, state: &EpisodeState) -> (QualityBreakdown, Vec<QualityCredit>) {
        let total = state.task.assertion_count() as f64;
        let mut credits = Vec::new();
        let mut score = 0.0;
        for (slot, s) in state.slots.iter().enumerate() {
            if !s.status.is_drafted() {
                continue;
            }
            for (j, &m) in s.hidden.margins.iter().enumerate() {
                let value = if m <= 0.0 {
                    1.0
                } else {
                    (1.0 - m) * self.config.partial_credit
                };
                if value == 0.0 {
                    continue;
                }
                score += value;
                if let Some(a) = s.hidden.assertion_by[j] {
                    credits.push(QualityCredit {
                        turn: a.turn,
                        role: a.role,
                        slot,
                        amount: value / total,
                        reason: if s.hidden.tested {
                            ReasonCode::TestEvidence
                        } else {
                            ReasonCode::Progress
                        },
                    });
                }
            }
        }
        let pass = (score / total).clamp(0.0, 1.0);
        let b = QualityBreakdown {
            structure: 0.0,
            style: 0.0,
            pass_fraction: pass,
            overall: pass,
        };
        (b, credits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Difficulty, SlotStatus, TaskSpec};

    #[test]
    fn margins_follow_shortfall() {
        assert_eq!(implement_margins(1.0, &[0.3, 0.9]), vec![0.0, 0.0]);
        assert_eq!(implement_margins(0.0, &[0.3, 0.9]), vec![1.0, 1.0]);
        let m = implement_margins(0.5, &[0.4, 0.8]);
        assert_eq!(m[0], 0.0);
        assert!((m[1] - 0.375).abs() < 1e-15);
    }

    #[test]
    fn empty_artifact_scores_zero() {
        let env = Env::default();
        for fam in [TaskFamily::Writing, TaskFamily::Coding] {
            let task = TaskSpec::generate(fam, Difficulty::Easy, 3, 20, 60, 1).unwrap();
            let s = env.new_episode(&task, &Role::default_team(fam), 1).unwrap();
            assert_eq!(env.quality_score(&s), QualityBreakdown::default());
        }
    }

    #[test]
    fn coding_partial_credit_example() {
        let env = Env::default();
        let mut task = TaskSpec::generate(TaskFamily::Coding, Difficulty::Easy, 2, 20, 60, 1).unwrap();
        for t in &mut task.hidden_target {
            t.assertion_difficulties = vec![0.5; 3];
        }
        let mut s = env.new_episode(&task, &[Role::Coder, Role::Tester], 1).unwrap();
        for slot in &mut s.slots {
            slot.status = SlotStatus::Drafted;
        }
        s.slots[0].hidden.margins = vec![0.0, 0.0, 0.0];
        s.slots[1].hidden.margins = vec![0.0, 0.5, 1.0];
        let q = env.quality_score(&s);
        // 4 passing, one near miss worth (1 - 0.5) * 0.5, one complete miss.
        let oracle = (4.0 + 0.25 + 0.0) / 6.0;
        assert!((q.pass_fraction - oracle).abs() < 1e-12);
        assert!((q.pass_fraction - 0.7083).abs() < 1e-4);
    }
}
