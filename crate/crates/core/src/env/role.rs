use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::action::ActionKind;
use super::task::TaskFamily;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Planner,
    Writer,
    Reviewer,
    Coder,
    Tester,
    /// Generalist that holds every capability; used by the single-agent baseline.
    Solo,
}

impl Role {
    pub const ALL: [Role; 6] = [
        Role::Planner,
        Role::Writer,
        Role::Reviewer,
        Role::Coder,
        Role::Tester,
        Role::Solo,
    ];
    pub const COUNT: usize = 6;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Planner => "planner",
            Role::Writer => "writer",
            Role::Reviewer => "reviewer",
            Role::Coder => "coder",
            Role::Tester => "tester",
            Role::Solo => "solo",
        }
    }

    /// Roles that author artifact slots and therefore own them.
    pub fn is_drafter(self) -> bool {
        matches!(self, Role::Writer | Role::Coder | Role::Solo)
    }

    pub fn is_generalist(self) -> bool {
        self == Role::Solo
    }

    pub fn can(self, kind: ActionKind, family: TaskFamily) -> bool {
        use ActionKind::*;
        match kind {
            HandoffPeer | HandoffHuman => true,
            DraftSection => family == TaskFamily::Writing && self.is_drafter(),
            Implement => family == TaskFamily::Coding && self.is_drafter(),
            Test => {
                family == TaskFamily::Coding
                    && matches!(self, Role::Tester | Role::Reviewer | Role::Solo)
            }
            Plan | ProposeChange => matches!(self, Role::Planner | Role::Solo),
            Repair => self.is_drafter(),
            Lint => matches!(self, Role::Reviewer | Role::Tester | Role::Solo),
            Integrate => true,
            Finalize => matches!(
                self,
                Role::Planner | Role::Reviewer | Role::Tester | Role::Solo
            ),
        }
    }

    pub fn default_team(family: TaskFamily) -> Vec<Role> {
        match family {
            TaskFamily::Writing => vec![Role::Planner, Role::Writer, Role::Reviewer],
            TaskFamily::Coding => vec![Role::Planner, Role::Coder, Role::Tester],
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| format!("unknown role `{s}`"))
    }
}
