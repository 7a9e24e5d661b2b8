use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Writing,
    Coding,
}

impl TaskFamily {
    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::Writing => "writing",
            TaskFamily::Coding => "coding",
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskFamily {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "writing" => Ok(TaskFamily::Writing),
            "coding" => Ok(TaskFamily::Coding),
            _ => Err(format!("unknown task family `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }

    /// Range of hidden assertion thresholds for coding slots.
    fn assertion_range(self) -> (f64, f64) {
        match self {
            Difficulty::Easy => (0.15, 0.75),
            Difficulty::Medium => (0.25, 0.85),
            Difficulty::Hard => (0.35, 0.95),
        }
    }

    fn assertions_per_slot(self) -> usize {
        match self {
            Difficulty::Easy | Difficulty::Medium => 3,
            Difficulty::Hard => 4,
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Difficulty {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Difficulty::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| format!("unknown difficulty `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthClass {
    Short,
    Long,
}

impl LengthClass {
    pub fn of_slots(slot_count: usize) -> Self {
        if slot_count <= 3 {
            LengthClass::Short
        } else {
            LengthClass::Long
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LengthClass::Short => "short",
            LengthClass::Long => "long",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TermTag(pub u8);

impl fmt::Display for TermTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotTarget {
    /// Position of this slot in the brief's required order.
    pub order_index: usize,
    pub term_tag: TermTag,
    /// Hidden test thresholds in (0, 1]; empty for writing.
    pub assertion_difficulties: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub difficulty: Difficulty,
    pub slot_count: usize,
    pub hidden_target: Vec<SlotTarget>,
    pub retrieval_pool: BTreeSet<u32>,
    pub brief_text_id: String,
    pub max_turns: u32,
    pub tick_budget: u32,
}

pub const TAG_SET_SIZE: u8 = 4;

impl TaskSpec {
    pub fn generate(
        family: TaskFamily,
        difficulty: Difficulty,
        slot_count: usize,
        max_turns: u32,
        tick_budget: u32,
        seed: u64,
    ) -> Result<Self> {
        if slot_count == 0 {
            return Err(Error::field("slot_count", "must be at least 1"));
        }
        let mut rng = rng::derived_stream(seed, &[rng::label::TASK]);
        let mut order: Vec<usize> = (0..slot_count).collect();
        order.shuffle(&mut rng);
        let tag = TermTag(rng.random_range(0..TAG_SET_SIZE));
        let (lo, hi) = difficulty.assertion_range();
        let hidden_target = order
            .iter()
            .map(|&order_index| SlotTarget {
                order_index,
                term_tag: tag,
                assertion_difficulties: match family {
                    TaskFamily::Writing => Vec::new(),
                    TaskFamily::Coding => (0..difficulty.assertions_per_slot())
                        .map(|_| lo + (hi - lo) * rng.random::<f64>())
                        .collect(),
                },
            })
            .collect();
        let pool_size = 3 * slot_count as u32;
        let base = rng.random_range(0..10_000u32) * 16;
        let spec = TaskSpec {
            family,
            difficulty,
            slot_count,
            hidden_target,
            retrieval_pool: (base..base + pool_size).collect(),
            brief_text_id: format!("{family}-{difficulty}-{seed:016x}"),
            max_turns,
            tick_budget,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.slot_count == 0 {
            return Err(Error::field("slot_count", "must be at least 1"));
        }
        if self.hidden_target.len() != self.slot_count {
            return Err(Error::field(
                "hidden_target",
                format!("{} targets for {} slots", self.hidden_target.len(), self.slot_count),
            ));
        }
        let mut seen = vec![false; self.slot_count];
        for t in &self.hidden_target {
            if t.order_index >= self.slot_count || seen[t.order_index] {
                return Err(Error::field("order", "order indices must be a permutation"));
            }
            seen[t.order_index] = true;
            if t.assertion_difficulties.iter().any(|d| !(*d > 0.0 && *d <= 1.0)) {
                return Err(Error::field("assertions", "difficulties must lie in (0, 1]"));
            }
        }
        if self.max_turns == 0 {
            return Err(Error::field("max_turns", "must be positive"));
        }
        if self.tick_budget == 0 {
            return Err(Error::field("tick_budget", "must be positive"));
        }
        Ok(())
    }

    /// Slots listed in the brief's required order.
    pub fn required_order(&self) -> Vec<usize> {
        let mut order = vec![0; self.slot_count];
        for (slot, t) in self.hidden_target.iter().enumerate() {
            order[t.order_index] = slot;
        }
        order
    }

    pub fn brief_tag(&self) -> TermTag {
        self.hidden_target[self.required_order()[0]].term_tag
    }

    pub fn length_class(&self) -> LengthClass {
        LengthClass::of_slots(self.slot_count)
    }

    pub fn assertion_count(&self) -> usize {
        self.hidden_target
            .iter()
            .map(|t| t.assertion_difficulties.len())
            .sum()
    }

    /// Loads a task from `key = value` text. Required: `family`,
    /// `difficulty`, `slot_count`, `max_turns`, `tick_budget`. Optional:
    /// `seed` (hidden-target generator), `order` (comma list of required
    /// positions per slot), `term_tag`, `assertions.<slot>` (comma list),
    /// `brief_text_id`.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let need = |k: &str| Error::field(k, "missing required key");
        let family: TaskFamily = kv.get("family")?.ok_or_else(|| need("family"))?;
        let difficulty: Difficulty = kv.get("difficulty")?.ok_or_else(|| need("difficulty"))?;
        let slot_count: usize = kv.get("slot_count")?.ok_or_else(|| need("slot_count"))?;
        let max_turns: u32 = kv.get("max_turns")?.ok_or_else(|| need("max_turns"))?;
        let tick_budget: u32 = kv.get("tick_budget")?.ok_or_else(|| need("tick_budget"))?;
        let seed: u64 = kv.get_or("seed", 0)?;
        let mut spec = TaskSpec::generate(family, difficulty, slot_count, max_turns, tick_budget, seed)?;
        if let Some(order) = kv.list::<usize>("order")? {
            if order.len() != slot_count {
                return Err(Error::field("order", "needs one entry per slot"));
            }
            for (t, o) in spec.hidden_target.iter_mut().zip(order) {
                t.order_index = o;
            }
        }
        if let Some(tag) = kv.get::<u8>("term_tag")? {
            if tag >= TAG_SET_SIZE {
                return Err(Error::field("term_tag", format!("must be below {TAG_SET_SIZE}")));
            }
            for t in &mut spec.hidden_target {
                t.term_tag = TermTag(tag);
            }
        }
        for slot in 0..slot_count {
            if let Some(ds) = kv.list::<f64>(&format!("assertions.{slot}"))? {
                spec.hidden_target[slot].assertion_difficulties = ds;
            }
        }
        if let Some(id) = kv.raw("brief_text_id") {
            spec.brief_text_id = id.to_string();
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvFile::parse(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_order_is_permutation() {
        for seed in 0..50 {
            let t = TaskSpec::generate(TaskFamily::Coding, Difficulty::Hard, 5, 40, 100, seed).unwrap();
            let mut o = t.required_order();
            o.sort_unstable();
            assert_eq!(o, vec![0, 1, 2, 3, 4]);
            assert_eq!(t.assertion_count(), 20);
        }
    }

    #[test]
    fn loads_from_text() {
        let t = TaskSpec::parse(
            "family = coding\ndifficulty = easy\nslot_count = 2\nmax_turns = 20\ntick_budget = 60\n\
             order = 1,0\nassertions.0 = 0.5, 0.9\n",
        )
        .unwrap();
        assert_eq!(t.required_order(), vec![1, 0]);
        assert_eq!(t.hidden_target[0].assertion_difficulties, vec![0.5, 0.9]);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(TaskSpec::generate(TaskFamily::Writing, Difficulty::Easy, 0, 10, 10, 1).is_err());
        assert!(TaskSpec::generate(TaskFamily::Writing, Difficulty::Easy, 2, 10, 0, 1).is_err());
        let err = TaskSpec::parse(
            "family = writing\ndifficulty = easy\nslot_count = 3\nmax_turns = 9\ntick_budget = 9\norder = 0,0,1",
        )
        .unwrap_err();
        assert!(err.to_string().contains("permutation"));
        let err = TaskSpec::parse("family = writing\n").unwrap_err();
        assert!(err.to_string().contains("difficulty"));
    }
}
