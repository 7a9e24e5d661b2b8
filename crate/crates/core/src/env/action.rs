use std::fmt;

use serde::{Deserialize, Serialize};

use super::task::TermTag;

/// The closed verb set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verb {
    Plan,
    DraftSection,
    Implement,
    ProposeChange,
    Integrate,
    Lint,
    Test,
    Repair,
    Finalize,
    Handoff,
}

impl Verb {
    pub fn name(self) -> &'static str {
        match self {
            Verb::Plan => "plan",
            Verb::DraftSection => "draft_section",
            Verb::Implement => "implement",
            Verb::ProposeChange => "propose_change",
            Verb::Integrate => "integrate",
            Verb::Lint => "lint",
            Verb::Test => "test",
            Verb::Repair => "repair",
            Verb::Finalize => "finalize",
            Verb::Handoff => "handoff",
        }
    }

    pub fn is_review(self) -> bool {
        matches!(self, Verb::Lint | Verb::Test)
    }
}

impl fmt::Display for Verb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Columns of the policy head: the verb set with `Handoff` split by
/// destination, since passing the floor and escalating to a human have
/// opposite consequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Plan,
    DraftSection,
    Implement,
    ProposeChange,
    Integrate,
    Lint,
    Test,
    Repair,
    Finalize,
    HandoffPeer,
    HandoffHuman,
}

impl ActionKind {
    pub const COUNT: usize = 11;
    pub const ALL: [ActionKind; 11] = [
        ActionKind::Plan,
        ActionKind::DraftSection,
        ActionKind::Implement,
        ActionKind::ProposeChange,
        ActionKind::Integrate,
        ActionKind::Lint,
        ActionKind::Test,
        ActionKind::Repair,
        ActionKind::Finalize,
        ActionKind::HandoffPeer,
        ActionKind::HandoffHuman,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn verb(self) -> Verb {
        match self {
            ActionKind::Plan => Verb::Plan,
            ActionKind::DraftSection => Verb::DraftSection,
            ActionKind::Implement => Verb::Implement,
            ActionKind::ProposeChange => Verb::ProposeChange,
            ActionKind::Integrate => Verb::Integrate,
            ActionKind::Lint => Verb::Lint,
            ActionKind::Test => Verb::Test,
            ActionKind::Repair => Verb::Repair,
            ActionKind::Finalize => Verb::Finalize,
            ActionKind::HandoffPeer | ActionKind::HandoffHuman => Verb::Handoff,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandoffTarget {
    /// Pass the floor to the next role in turn order.
    Peer,
    /// Escalate to a human operator; ends the episode.
    Human,
}

/// Identifies the failing check a repair addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureRef {
    Assertion(usize),
    Lint,
}

/// A concrete action. Payload requirements are encoded in the variants, so a
/// repair without a failure reference or a plan without an ordering cannot be
/// built.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "verb", rename_all = "snake_case")]
pub enum ActionPrimitive {
    Plan { ordering: Vec<usize>, term_tag: TermTag },
    DraftSection { slot: usize, tokens: u32 },
    Implement { slot: usize, tokens: u32 },
    ProposeChange { slot: usize },
    Integrate { slot: usize },
    Lint { slot: usize },
    Test { slot: usize },
    Repair { slot: usize, failure: FailureRef },
    Finalize,
    Handoff { to: HandoffTarget },
}

impl ActionPrimitive {
    pub fn kind(&self) -> ActionKind {
        match self {
            ActionPrimitive::Plan { .. } => ActionKind::Plan,
            ActionPrimitive::DraftSection { .. } => ActionKind::DraftSection,
            ActionPrimitive::Implement { .. } => ActionKind::Implement,
            ActionPrimitive::ProposeChange { .. } => ActionKind::ProposeChange,
            ActionPrimitive::Integrate { .. } => ActionKind::Integrate,
            ActionPrimitive::Lint { .. } => ActionKind::Lint,
            ActionPrimitive::Test { .. } => ActionKind::Test,
            ActionPrimitive::Repair { .. } => ActionKind::Repair,
            ActionPrimitive::Finalize => ActionKind::Finalize,
            ActionPrimitive::Handoff {
                to: HandoffTarget::Peer,
            } => ActionKind::HandoffPeer,
            ActionPrimitive::Handoff {
                to: HandoffTarget::Human,
            } => ActionKind::HandoffHuman,
        }
    }

    pub fn verb(&self) -> Verb {
        self.kind().verb()
    }

    pub fn target_slot(&self) -> Option<usize> {
        match *self {
            ActionPrimitive::DraftSection { slot, .. }
            | ActionPrimitive::Implement { slot, .. }
            | ActionPrimitive::ProposeChange { slot }
            | ActionPrimitive::Integrate { slot }
            | ActionPrimitive::Lint { slot }
            | ActionPrimitive::Test { slot }
            | ActionPrimitive::Repair { slot, .. } => Some(slot),
            _ => None,
        }
    }
}
