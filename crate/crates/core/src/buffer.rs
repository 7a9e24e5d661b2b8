//! Shared experience buffer: scored trajectories, their tool receipts and a
//! compact per-role self-critique.

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{LengthClass, ReasonCode, Role, ToolReceipt};
use crate::error::{Error, Result};
use crate::trainer::Trajectory;

pub const BUFFER_SCHEMA: u32 = 1;

/// Annotation keys that would smuggle private memory into shared storage.
const FORBIDDEN_KEYS: [&str; 5] = ["memory", "checklist", "notes", "scratch", "private"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfCritique {
    pub role: Role,
    pub reason_codes: BTreeMap<ReasonCode, u32>,
    /// Quality credited to this role at the end of the episode.
    pub quality_delta: f64,
    #[serde(default)]
    pub annotations: BTreeMap<String, String>,
}

impl SelfCritique {
    pub fn validate(&self) -> Result<()> {
        for key in self.annotations.keys() {
            let k = key.to_ascii_lowercase();
            if let Some(bad) = FORBIDDEN_KEYS.iter().find(|f| k.contains(*f)) {
                log::debug!("critique annotation `{key}` matches `{bad}`");
                return Err(Error::CritiqueLeak {
                    role: self.role,
                    field: key.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Per-role critiques built from what the trace shows publicly.
pub fn critiques_for(traj: &Trajectory) -> Vec<SelfCritique> {
    let rec = &traj.record;
    let mut roles = rec.order.clone();
    roles.sort();
    roles
        .into_iter()
        .map(|role| {
            let mut reason_codes = BTreeMap::new();
            for s in rec.steps.iter().filter(|s| s.role == role) {
                for e in &s.events {
                    *reason_codes.entry(e.reason).or_insert(0) += 1;
                }
            }
            let quality_delta = rec.credits.iter().filter(|c| c.role == role).map(|c| c.amount).sum();
            SelfCritique {
                role,
                reason_codes,
                quality_delta,
                annotations: BTreeMap::new(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub trajectory: Trajectory,
    pub receipts: Vec<ToolReceipt>,
    pub self_critique: Vec<SelfCritique>,
    /// Assigned on append.
    pub insertion_index: u64,
}

impl BufferEntry {
    pub fn from_trajectory(trajectory: Trajectory) -> Self {
        Self {
            receipts: trajectory.record.receipts(),
            self_critique: critiques_for(&trajectory),
            trajectory,
            insertion_index: 0,
        }
    }

    pub fn length_class(&self) -> LengthClass {
        self.trajectory.meta.length_class
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BufferConfig {
    pub capacity: usize,
    pub short_long_mix: f64,
    /// Fail when a class is short of entries instead of filling from the other.
    pub strict: bool,
    /// Keep entries across training iterations. Off by default: the clipped
    /// update needs log-probs from the current policy.
    pub retain: bool,
}

impl Default for BufferConfig {
    fn default() -> Self {
        Self {
            capacity: 64,
            short_long_mix: 0.5,
            strict: true,
            retain: false,
        }
    }
}

impl BufferConfig {
    pub fn validate(&self, batch_size: usize) -> Result<()> {
        if self.capacity < batch_size.max(1) {
            return Err(Error::field("buffer.capacity", format!("must be at least the batch size {batch_size}")));
        }
        if !(0.0..=1.0).contains(&self.short_long_mix) {
            return Err(Error::field("buffer.short_long_mix", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperienceBuffer {
    pub config: BufferConfig,
    entries: VecDeque<BufferEntry>,
    next_index: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum BufferLine {
    Header {
        schema: u32,
        config: BufferConfig,
        next_index: u64,
        entries: usize,
    },
    Entry(Box<BufferEntry>),
}

impl ExperienceBuffer {
    pub fn new(config: BufferConfig) -> Self {
        Self {
            config,
            entries: VecDeque::new(),
            next_index: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &BufferEntry> {
        self.entries.iter()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Appends with FIFO eviction; returns the assigned insertion index.
    pub fn append(&mut self, mut entry: BufferEntry) -> Result<u64> {
        for c in &entry.self_critique {
            c.validate()?;
        }
        entry.insertion_index = self.next_index;
        self.next_index += 1;
        while self.entries.len() >= self.config.capacity.max(1) {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
        Ok(self.next_index - 1)
    }

    /// Draws `n` entries without replacement, `round(mix * n)` of them short.
    pub fn sample_mixed_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&BufferEntry>> {
        if self.entries.len() < n {
            return Err(Error::InsufficientEntries {
                needed: n,
                available: self.entries.len(),
            });
        }
        let mut short: Vec<&BufferEntry> = Vec::new();
        let mut long: Vec<&BufferEntry> = Vec::new();
        for e in &self.entries {
            match e.length_class() {
                LengthClass::Short => short.push(e),
                LengthClass::Long => long.push(e),
            }
        }
        let mut want_short = (self.config.short_long_mix * n as f64).round() as usize;
        let mut want_long = n - want_short;
        if short.len() < want_short || long.len() < want_long {
            let (needed, available) = if short.len() < want_short {
                (want_short, short.len())
            } else {
                (want_long, long.len())
            };
            if self.config.strict {
                return Err(Error::InsufficientEntries { needed, available });
            }
            log::warn!("buffer class imbalance: need {needed}, have {available}; filling from the other class");
            want_short = want_short.min(short.len());
            want_long = want_long.min(long.len());
            let gap = n - want_short - want_long;
            if short.len() > want_short {
                want_short += gap;
            } else {
                want_long += gap;
            }
        }
        short.shuffle(rng);
        long.shuffle(rng);
        let mut batch: Vec<&BufferEntry> = short.into_iter().take(want_short).collect();
        batch.extend(long.into_iter().take(want_long));
        batch.sort_by_key(|e| e.insertion_index);
        Ok(batch)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = BufferLine::Header {
            schema: BUFFER_SCHEMA,
            config: self.config,
            next_index: self.next_index,
            entries: self.entries.len(),
        };
        let json = |l: &BufferLine| serde_json::to_string(l).map_err(|e| Error::Parse { line: 0, message: e.to_string() });
        writeln!(w, "{}", json(&header)?)?;
        for e in &self.entries {
            writeln!(w, "{}", json(&BufferLine::Entry(Box::new(e.clone())))?)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines.next().ok_or_else(|| Error::Parse {
            line: 1,
            message: "missing buffer header".into(),
        })??;
        let parse = |no: usize, text: &str| {
            serde_json::from_str::<BufferLine>(text).map_err(|e| Error::Parse {
                line: no,
                message: e.to_string(),
            })
        };
        let BufferLine::Header {
            schema,
            config,
            next_index,
            entries: declared,
        } = parse(1, &first)?
        else {
            return Err(Error::Parse {
                line: 1,
                message: "first line is not a buffer header".into(),
            });
        };
        if schema != BUFFER_SCHEMA {
            return Err(Error::Parse {
                line: 1,
                message: format!("unsupported buffer schema {schema}"),
            });
        }
        let mut entries = VecDeque::new();
        for (i, line) in lines.enumerate() {
            let no = i + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match parse(no, &line)? {
                BufferLine::Entry(e) => entries.push_back(*e),
                BufferLine::Header { .. } => {
                    return Err(Error::Parse {
                        line: no,
                        message: "unexpected second header".into(),
                    })
                }
            }
        }
        if entries.len() != declared {
            return Err(Error::Parse {
                line: entries.len() + 2,
                message: format!("header declares {declared} entries, file holds {}", entries.len()),
            });
        }
        Ok(Self {
            config,
            entries,
            next_index,
        })
    }

    pub fn persist(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
