//! Counting the three recurring failure patterns in finished episodes.

use serde::{Deserialize, Serialize};

use crate::env::{ActionKind, TaskFamily};
use crate::trace::EpisodeRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureThresholds {
    /// Plan turns before the first draft above which an episode over-plans.
    pub plan_turns: u32,
    /// A coding episode tests late if its first test comes after this
    /// fraction of the turn cap, or never.
    pub late_test_fraction: f64,
}

impl Default for FailureThresholds {
    fn default() -> Self {
        Self {
            plan_turns: 3,
            late_test_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FailureModeCounts {
    pub over_planning: u32,
    pub review_repetition: u32,
    pub late_testing: u32,
}

impl FailureModeCounts {
    pub fn as_array(&self) -> [u32; 3] {
        [self.over_planning, self.review_repetition, self.late_testing]
    }
}

pub const MODE_NAMES: [&str; 3] = ["over_planning", "review_repetition", "late_testing"];

pub fn plans_before_first_draft(rec: &EpisodeRecord) -> u32 {
    rec.steps
        .iter()
        .take_while(|s| !matches!(s.kind, ActionKind::DraftSection | ActionKind::Implement))
        .filter(|s| s.kind == ActionKind::Plan)
        .count() as u32
}

pub fn first_test_turn(rec: &EpisodeRecord) -> Option<u32> {
    rec.steps.iter().find(|s| s.kind == ActionKind::Test).map(|s| s.turn)
}

pub fn detect_failure_modes(records: &[EpisodeRecord], th: &FailureThresholds) -> FailureModeCounts {
    let mut c = FailureModeCounts::default();
    for rec in records {
        if plans_before_first_draft(rec) > th.plan_turns {
            c.over_planning += 1;
        }
        c.review_repetition += rec
            .steps
            .iter()
            .filter_map(|s| s.intervention.as_ref())
            .filter(|iv| iv.kind.verb().is_review())
            .count() as u32;
        if rec.task.family == TaskFamily::Coding {
            let limit = th.late_test_fraction * rec.task.max_turns as f64;
            if first_test_turn(rec).is_none_or(|t| t as f64 > limit) {
                c.late_testing += 1;
            }
        }
    }
    c
}

/// Percentage change per mode, `None` where the reference count is zero.
pub fn percent_deltas(before: &FailureModeCounts, after: &FailureModeCounts) -> [Option<f64>; 3] {
    let (b, a) = (before.as_array(), after.as_array());
    std::array::from_fn(|i| (b[i] > 0).then(|| 100.0 * (a[i] as f64 - b[i] as f64) / b[i] as f64))
}

pub fn comparison_csv(before: &FailureModeCounts, after: &FailureModeCounts) -> String {
    let mut out = String::from("mode,untrained,trained,delta_pct\n");
    let deltas = percent_deltas(before, after);
    for i in 0..3 {
        let d = deltas[i].map_or_else(|| "n/a".to_string(), |d| format!("{d:.1}"));
        out.push_str(&format!("{},{},{},{}\n", MODE_NAMES[i], before.as_array()[i], after.as_array()[i], d));
    }
    out
}
