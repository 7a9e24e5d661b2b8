//! Evaluation on a fixed task set shared by every method.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::scripted::{ScriptedTeam, SingleAgent};
use crate::env::{Env, LengthClass, Role, TaskFamily, TaskSpec};
use crate::error::{Error, Result};
use crate::par;
use crate::policy::PolicyParams;
use crate::rng::{self, label};
use crate::trace::EpisodeRecord;
use crate::trainer::{batch_layout, run_episode, sample_task, Actor, PolicyActor, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    SingleAgent,
    ScriptedTeam,
    GrpoTeam,
    GrpoAblationVariant,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::SingleAgent => "single_agent",
            MethodKind::ScriptedTeam => "scripted_team",
            MethodKind::GrpoTeam => "grpo_team",
            MethodKind::GrpoAblationVariant => "grpo_ablation_variant",
        }
    }
}

pub enum Method<'a> {
    SingleAgent,
    ScriptedTeam,
    Policy { params: &'a PolicyParams, kind: MethodKind },
}

impl Method<'_> {
    pub fn kind(&self) -> MethodKind {
        match self {
            Method::SingleAgent => MethodKind::SingleAgent,
            Method::ScriptedTeam => MethodKind::ScriptedTeam,
            Method::Policy { kind, .. } => *kind,
        }
    }
}

/// One evaluation episode: the task, its seed and the team's turn order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTask {
    pub task: TaskSpec,
    pub seed: u64,
    pub order: Vec<Role>,
}

/// Which families the evaluation set draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FamilyFilter {
    Both,
    Only(TaskFamily),
}

/// The fixed evaluation set for `seed`: `n` tasks at the final turn cap,
/// laid out like a training batch.
pub fn eval_tasks(cfg: &TrainConfig, n: usize, seed: u64, families: FamilyFilter) -> Result<Vec<EvalTask>> {
    let max_turns = cfg.tasks.turns_end;
    batch_layout(n, cfg.tasks.short_long_mix)
        .into_iter()
        .enumerate()
        .map(|(i, (family, class))| {
            let family = match families {
                FamilyFilter::Both => family,
                FamilyFilter::Only(f) => f,
            };
            let ep_seed = rng::derive_seed(seed, &[label::EVAL, i as u64]);
            let task = sample_task(cfg, family, class, max_turns, ep_seed)?;
            let mut order = Role::default_team(family);
            order.shuffle(&mut rng::derived_stream(ep_seed, &[label::ROLE_ORDER]));
            Ok(EvalTask {
                task,
                seed: ep_seed,
                order,
            })
        })
        .collect()
}

/// Digest of a task set, logged so runs can show they shared one.
pub fn task_set_hash(tasks: &[EvalTask]) -> String {
    use sha2::{Digest, Sha256};
    let text = serde_json::to_string(tasks).expect("tasks serialize");
    Sha256::digest(text.as_bytes())[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn run_method(env: &Env, cfg: &TrainConfig, tasks: &[EvalTask], method: &Method<'_>) -> Result<Vec<EpisodeRecord>> {
    let results = par::map(cfg.exec, tasks, |t| {
        let (actor, order): (Box<dyn Actor>, Vec<Role>) = match method {
            Method::SingleAgent => (Box::new(SingleAgent), SingleAgent::team()),
            Method::ScriptedTeam => (Box::new(ScriptedTeam), t.order.clone()),
            Method::Policy { params, .. } => (
                Box::new(PolicyActor {
                    weights: &params.weights,
                    greedy: false,
                }),
                t.order.clone(),
            ),
        };
        run_episode(env, &t.task, &order, t.seed, actor.as_ref(), false).map(|r| r.trajectory.record)
    });
    results.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: MethodKind,
    /// Finer name within the method, e.g. an ablation variant.
    pub label: String,
    pub speed_ratio: f64,
    pub writing_quality_pct: f64,
    pub coding_pass_pct: f64,
    pub mean_turns: f64,
    pub mean_tokens: f64,
    pub mean_ticks: f64,
    pub seed: u64,
}

pub const METRICS_HEADER: &str =
    "method,label,seed,speed_ratio,writing_quality_pct,coding_pass_pct,mean_turns,mean_tokens,mean_ticks";

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.4},{:.4},{:.4},{:.4},{:.4}",
            self.method.name(),
            self.label,
            self.seed,
            self.speed_ratio,
            self.writing_quality_pct,
            self.coding_pass_pct,
            self.mean_turns,
            self.mean_tokens,
            self.mean_ticks
        )
    }
}

pub(crate) fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn mean_ticks(records: &[EpisodeRecord]) -> f64 {
    mean(records.iter().map(|r| r.ticks_elapsed as f64))
}

/// Metrics of `records`, with speed measured against `single_ticks`, the
/// single agent's mean on the same tasks.
pub fn metrics_row(
    method: MethodKind,
    label: &str,
    records: &[EpisodeRecord],
    single_ticks: f64,
    seed: u64,
) -> Result<MetricsRow> {
    if records.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let of = |f: TaskFamily| records.iter().filter(move |r| r.task.family == f);
    let ticks = mean_ticks(records);
    Ok(MetricsRow {
        method,
        label: label.to_string(),
        speed_ratio: if ticks > 0.0 { single_ticks / ticks } else { 0.0 },
        writing_quality_pct: 100.0 * mean(of(TaskFamily::Writing).map(|r| r.quality.overall)),
        coding_pass_pct: 100.0 * mean(of(TaskFamily::Coding).map(|r| r.quality.pass_fraction)),
        mean_turns: mean(records.iter().map(|r| r.turns() as f64)),
        mean_tokens: mean(records.iter().map(|r| r.token_count as f64)),
        mean_ticks: ticks,
        seed,
    })
}

#[derive(Debug, Clone)]
pub struct EvalRun {
    pub row: MetricsRow,
    pub records: Vec<EpisodeRecord>,
    pub task_hash: String,
}

/// Evaluates `method` on the `n`-task set for `seed`. The single agent is
/// run on the same set to anchor the speed ratio.
pub fn evaluate(cfg: &TrainConfig, method: &Method<'_>, label: &str, n: usize, seed: u64) -> Result<EvalRun> {
    evaluate_on(cfg, method, label, n, seed, FamilyFilter::Both)
}

pub fn evaluate_on(
    cfg: &TrainConfig,
    method: &Method<'_>,
    label: &str,
    n: usize,
    seed: u64,
    families: FamilyFilter,
) -> Result<EvalRun> {
    let env = Env::new(cfg.env.clone())?;
    let tasks = eval_tasks(cfg, n, seed, families)?;
    let single = run_method(&env, cfg, &tasks, &Method::SingleAgent)?;
    let records = match method {
        Method::SingleAgent => single.clone(),
        _ => run_method(&env, cfg, &tasks, method)?,
    };
    Ok(EvalRun {
        row: metrics_row(method.kind(), label, &records, mean_ticks(&single), seed)?,
        records,
        task_hash: task_set_hash(&tasks),
    })
}

/// Mean and standard error over seeds (sample deviation; zero for one seed).
pub fn mean_sem(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let m = mean(xs.iter().copied());
    if n == 1 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

pub fn fmt_mean_sem(xs: &[f64], decimals: usize) -> String {
    let (m, s) = mean_sem(xs);
    format!("{m:.decimals$} ± {s:.decimals$}")
}

/// Table of per-method `mean ± s.e.m.` over seeds, one line per label in
/// first-seen order.
pub fn summary_table(rows: &[MetricsRow]) -> String {
    let mut labels: Vec<(&str, MethodKind)> = Vec::new();
    for r in rows {
        if !labels.iter().any(|(l, _)| *l == r.label) {
            labels.push((&r.label, r.method));
        }
    }
    let mut out = String::from("method,label,seeds,speed_ratio,writing_quality_pct,coding_pass_pct,mean_turns,mean_tokens\n");
    for (label, kind) in labels {
        let sel: Vec<&MetricsRow> = rows.iter().filter(|r| r.label == label).collect();
        let col = |f: fn(&MetricsRow) -> f64| sel.iter().map(|r| f(r)).collect::<Vec<_>>();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            kind.name(),
            label,
            sel.len(),
            fmt_mean_sem(&col(|r| r.speed_ratio), 2),
            fmt_mean_sem(&col(|r| r.writing_quality_pct), 1),
            fmt_mean_sem(&col(|r| r.coding_pass_pct), 1),
            fmt_mean_sem(&col(|r| r.mean_turns), 1),
            fmt_mean_sem(&col(|r| r.mean_tokens), 0),
        );
    }
    out
}

/// Share of `records` in each length class, for logging.
pub fn class_counts(records: &[EpisodeRecord]) -> (usize, usize) {
    let short = records.iter().filter(|r| r.task.length_class() == LengthClass::Short).count();
    (short, records.len() - short)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_agent_against_itself_is_one() {
        let cfg = TrainConfig::default();
        let run = evaluate(&cfg, &Method::SingleAgent, "single", 6, 2).unwrap();
        assert_eq!(run.row.speed_ratio, 1.0);
    }

    #[test]
    fn ratio_is_baseline_over_method() {
        let cfg = TrainConfig::default();
        let run = evaluate(&cfg, &Method::SingleAgent, "single", 4, 2).unwrap();
        let ticks = mean_ticks(&run.records);
        let row = metrics_row(MethodKind::GrpoTeam, "x", &run.records, 2.0 * ticks, 0).unwrap();
        assert!((row.speed_ratio - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mean_sem_formatting() {
        assert_eq!(fmt_mean_sem(&[2.91, 3.09], 2), "3.00 ± 0.09");
        assert_eq!(mean_sem(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn task_sets_are_reproducible() {
        let cfg = TrainConfig::default();
        let a = eval_tasks(&cfg, 8, 7, FamilyFilter::Both).unwrap();
        let b = eval_tasks(&cfg, 8, 7, FamilyFilter::Both).unwrap();
        assert_eq!(task_set_hash(&a), task_set_hash(&b));
        let w = eval_tasks(&cfg, 8, 7, FamilyFilter::Only(TaskFamily::Writing)).unwrap();
        assert!(w.iter().all(|t| t.task.family == TaskFamily::Writing));
    }
}
