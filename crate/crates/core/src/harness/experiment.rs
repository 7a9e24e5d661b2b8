//! Multi-seed experiment drivers and their output files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::eval::{self, evaluate, evaluate_on, fmt_mean_sem, mean_sem, FamilyFilter, Method, MethodKind, MetricsRow};
use super::failures::{comparison_csv, detect_failure_modes, FailureModeCounts, FailureThresholds};
use crate::checkpoint;
use crate::env::TaskFamily;
use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::par;
use crate::policy::PolicyParams;
use crate::reward::{combine_reward, explain_credit, score_components, FamilyNorm, RewardBreakdown};
use crate::trace::{self, EpisodeRecord, TraceLine};
use crate::trainer::{initial_params, train_loop, BaselineMode, CurveRow, RewardMode, TrainConfig, TrainOutcome, CURVE_HEADER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub eval_episodes: usize,
    pub failures: FailureThresholds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            seeds: vec![1, 2, 3, 4, 5],
            out_dir: PathBuf::from("runs"),
            eval_episodes: 32,
            failures: FailureThresholds::default(),
        }
    }
}

const OWN_KEYS: [&str; 5] = [
    "seeds",
    "out_dir",
    "eval_episodes",
    "failures.plan_turns",
    "failures.late_test_fraction",
];

impl ExperimentConfig {
    /// Digest of everything that shapes results; the output location is
    /// left out so identical runs in different directories match.
    pub fn hash(&self) -> String {
        let shaped = Self {
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        let text = serde_json::to_string(&shaped).expect("config serializes");
        Sha256::digest(text.as_bytes())[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seeds" => {
                self.seeds = v
                    .split(',')
                    .map(|s| s.trim().parse().map_err(|_| Error::field(key, format!("cannot parse `{s}`"))))
                    .collect::<Result<_>>()?;
            }
            "out_dir" => self.out_dir = PathBuf::from(v),
            "eval_episodes" => {
                self.eval_episodes = v.parse().map_err(|_| Error::field(key, format!("cannot parse `{v}`")))?
            }
            "failures.plan_turns" => {
                self.failures.plan_turns = v.parse().map_err(|_| Error::field(key, format!("cannot parse `{v}`")))?
            }
            "failures.late_test_fraction" => {
                self.failures.late_test_fraction =
                    v.parse().map_err(|_| Error::field(key, format!("cannot parse `{v}`")))?
            }
            _ => self.train.set(key, value)?,
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, kv: &KvFile) -> Result<()> {
        for key in OWN_KEYS {
            if let Some(v) = kv.raw(key) {
                self.set(key, v)?;
            }
        }
        self.train.apply_kv(kv, &OWN_KEYS)?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::field("seeds", "need at least one seed"));
        }
        if self.eval_episodes == 0 {
            return Err(Error::field("eval_episodes", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.failures.late_test_fraction) {
            return Err(Error::field("failures.late_test_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out_dir.join(format!("seed_{seed}"))
    }

    fn header(&self) -> String {
        format!("# config_hash={}\n", self.hash())
    }
}

pub fn to_pretty_json(exp: &ExperimentConfig) -> String {
    serde_json::to_string_pretty(exp).expect("config serializes")
}

pub fn curve_csv(config_hash: &str, curve: &[CurveRow]) -> String {
    let mut out = format!("# config_hash={config_hash}\n{CURVE_HEADER}\n");
    for row in curve {
        out.push_str(&row.csv());
        out.push('\n');
    }
    out
}

/// Per-iteration mean and standard error over seeds for every curve column.
pub fn aggregate_curves(config_hash: &str, curves: &[Vec<CurveRow>]) -> String {
    let columns: Vec<&str> = CURVE_HEADER.split(',').skip(1).collect();
    let mut out = format!("# config_hash={config_hash}\niteration");
    for c in &columns {
        let _ = write!(out, ",{c}_mean,{c}_sem");
    }
    out.push('\n');
    let rows = curves.iter().map(Vec::len).min().unwrap_or(0);
    for i in 0..rows {
        let _ = write!(out, "{}", curves[0][i].iteration);
        let fields: Vec<Vec<f64>> = curves
            .iter()
            .map(|c| {
                let r = &c[i];
                vec![
                    r.mean_reward,
                    r.team_score,
                    r.mean_quality,
                    r.mean_turns,
                    r.mean_ticks,
                    r.mean_tokens,
                    r.clip_fraction,
                    r.kl,
                    r.entropy,
                    r.loss,
                ]
            })
            .collect();
        for k in 0..columns.len() {
            let xs: Vec<f64> = fields.iter().map(|f| f[k]).collect();
            let (m, s) = mean_sem(&xs);
            let _ = write!(out, ",{m:.6},{s:.6}");
        }
        out.push('\n');
    }
    out
}

/// Trains every seed, writing `seed_<s>/{curve.csv,checkpoint.txt,buffer.jsonl}`
/// and `curve_aggregate.csv` under the output directory.
pub fn run_train(exp: &ExperimentConfig) -> Result<Vec<TrainOutcome>> {
    exp.validate()?;
    let hash = exp.hash();
    fs::create_dir_all(&exp.out_dir)?;
    fs::write(exp.out_dir.join("config.json"), to_pretty_json(exp) + "\n")?;
    let outcomes: Vec<TrainOutcome> = par::map(exp.train.exec, &exp.seeds, |&s| train_loop(&exp.train, s))
        .into_iter()
        .collect::<Result<_>>()?;
    for (&seed, o) in exp.seeds.iter().zip(&outcomes) {
        let dir = exp.seed_dir(seed);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("curve.csv"), curve_csv(&hash, &o.curve))?;
        checkpoint::save(&dir.join("checkpoint.txt"), &o.params, &o.critic, &hash)?;
        o.buffer.persist(&dir.join("buffer.jsonl"))?;
        log::info!("seed {seed}: {} iterations written to {}", o.curve.len(), dir.display());
    }
    let curves: Vec<Vec<CurveRow>> = outcomes.iter().map(|o| o.curve.clone()).collect();
    fs::write(exp.out_dir.join("curve_aggregate.csv"), aggregate_curves(&hash, &curves))?;
    Ok(outcomes)
}

/// Trace lines for a set of evaluation records, scored against each other
/// with the late-curriculum weights.
pub fn eval_trace_lines(cfg: &TrainConfig, config_hash: &str, records: &[EpisodeRecord]) -> Result<Vec<TraceLine>> {
    let raws = records
        .iter()
        .map(|r| score_components(r, &cfg.penalties))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<_> = records.iter().zip(&raws).map(|(r, raw)| (r.task.family, *raw)).collect();
    let norm = FamilyNorm::fit(&pairs)?;
    let mut lines = Vec::new();
    for (rec, raw) in records.iter().zip(&raws) {
        let normalized = norm.apply(rec.task.family, raw);
        let b = RewardBreakdown {
            raw: *raw,
            normalized,
            combined: combine_reward(&normalized, &cfg.late_weights),
            weights_used: cfg.late_weights,
            batch_id: 0,
        };
        let fragments = explain_credit(rec, &b, &cfg.penalties)?;
        lines.extend(trace::trace_lines(config_hash, rec, Some(&b), &fragments));
    }
    Ok(lines)
}

fn write_trace(path: &Path, lines: &[TraceLine]) -> Result<()> {
    let f = std::io::BufWriter::new(fs::File::create(path)?);
    trace::write_jsonl(f, lines)
}

/// Single agent, scripted team and `params` on one seed's evaluation set.
pub fn eval_methods(cfg: &TrainConfig, params: &PolicyParams, n: usize, seed: u64) -> Result<Vec<eval::EvalRun>> {
    let methods = [
        (Method::SingleAgent, "single_agent"),
        (Method::ScriptedTeam, "scripted_team"),
        (
            Method::Policy {
                params,
                kind: MethodKind::GrpoTeam,
            },
            "grpo_team",
        ),
    ];
    methods.iter().map(|(m, label)| evaluate(cfg, m, label, n, seed)).collect()
}

fn params_for(exp: &ExperimentConfig, seed: u64, explicit: Option<&Path>) -> Result<PolicyParams> {
    let path = explicit.map_or_else(|| exp.seed_dir(seed).join("checkpoint.txt"), Path::to_path_buf);
    let ck = checkpoint::load(&path).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })?;
    Ok(ck.params)
}

/// Evaluates the trained team of each seed (or `checkpoint` for all seeds)
/// against both baselines. Writes `metrics.csv`, `metrics_summary.csv` and
/// per-seed traces under `eval/`.
pub fn run_eval(exp: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Vec<MetricsRow>> {
    exp.validate()?;
    let hash = exp.hash();
    let dir = exp.out_dir.join("eval");
    fs::create_dir_all(&dir)?;
    let mut rows = Vec::new();
    for &seed in &exp.seeds {
        let params = params_for(exp, seed, checkpoint)?;
        for run in eval_methods(&exp.train, &params, exp.eval_episodes, seed)? {
            let lines = eval_trace_lines(&exp.train, &hash, &run.records)?;
            write_trace(&dir.join(format!("seed_{seed}_{}.jsonl", run.row.label)), &lines)?;
            rows.push(run.row);
        }
    }
    let mut csv = exp.header() + eval::METRICS_HEADER + "\n";
    for r in &rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    fs::write(exp.out_dir.join("metrics.csv"), csv)?;
    fs::write(exp.out_dir.join("metrics_summary.csv"), exp.header() + &eval::summary_table(&rows))?;
    Ok(rows)
}

pub const ABLATION_VARIANTS: [&str; 4] = ["full", "constant_baseline", "no_coordination", "local_only"];

pub fn ablation_config(base: &TrainConfig, variant: &str) -> Result<TrainConfig> {
    let mut c = base.clone();
    match variant {
        "full" => {}
        "constant_baseline" => c.grpo.baseline_mode = BaselineMode::Constant,
        "no_coordination" => c.grpo.coordination_term = false,
        "local_only" => c.grpo.reward_mode = RewardMode::LocalOnly,
        _ => return Err(Error::field("variant", format!("unknown ablation `{variant}`"))),
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    /// Per seed, in seed order.
    pub quality: Vec<f64>,
    pub turns: Vec<f64>,
    pub speed: Vec<f64>,
    pub task_hashes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub seeds: Vec<u64>,
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn csv(&self, config_hash: &str) -> String {
        let mut out = format!("# config_hash={config_hash}\nvariant,quality_pct,turns,speed_ratio,quality_mean,turns_mean,speed_mean,task_hash\n");
        for r in &self.rows {
            let m = |xs: &[f64]| mean_sem(xs).0;
            let _ = writeln!(
                out,
                "{},{},{},{},{:.4},{:.4},{:.6},{}",
                r.variant,
                fmt_mean_sem(&r.quality, 1),
                fmt_mean_sem(&r.turns, 1),
                fmt_mean_sem(&r.speed, 2),
                m(&r.quality),
                m(&r.turns),
                m(&r.speed),
                r.task_hashes.join("/"),
            );
        }
        out
    }
}

/// Trains the four variants on identical seeds and evaluates each on the
/// same writing task set.
pub fn ablation_table(cfg: &TrainConfig, seeds: &[u64], n: usize) -> Result<AblationTable> {
    let jobs: Vec<(usize, u64)> = (0..ABLATION_VARIANTS.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let runs = par::map(cfg.exec, &jobs, |&(v, seed)| -> Result<eval::EvalRun> {
        let vc = ablation_config(cfg, ABLATION_VARIANTS[v])?;
        let trained = train_loop(&vc, seed)?;
        let method = Method::Policy {
            params: &trained.params,
            kind: MethodKind::GrpoAblationVariant,
        };
        evaluate_on(cfg, &method, ABLATION_VARIANTS[v], n, seed, FamilyFilter::Only(TaskFamily::Writing))
    });
    let runs: Vec<eval::EvalRun> = runs.into_iter().collect::<Result<_>>()?;
    let rows = ABLATION_VARIANTS
        .iter()
        .enumerate()
        .map(|(v, name)| {
            let sel: Vec<&eval::EvalRun> = jobs.iter().zip(&runs).filter(|((jv, _), _)| *jv == v).map(|(_, r)| r).collect();
            AblationRow {
                variant: name.to_string(),
                quality: sel.iter().map(|r| r.row.writing_quality_pct).collect(),
                turns: sel.iter().map(|r| r.row.mean_turns).collect(),
                speed: sel.iter().map(|r| r.row.speed_ratio).collect(),
                task_hashes: sel.iter().map(|r| r.task_hash.clone()).collect(),
            }
        })
        .collect();
    Ok(AblationTable {
        rows,
        seeds: seeds.to_vec(),
    })
}

pub fn run_ablation(exp: &ExperimentConfig) -> Result<AblationTable> {
    exp.validate()?;
    let table = ablation_table(&exp.train, &exp.seeds, exp.eval_episodes)?;
    fs::create_dir_all(&exp.out_dir)?;
    fs::write(exp.out_dir.join("ablation.csv"), table.csv(&exp.hash()))?;
    Ok(table)
}

/// Failure-mode counts of the untrained and the trained team on one seed's
/// evaluation set.
pub fn failure_comparison(
    cfg: &TrainConfig,
    trained: &PolicyParams,
    n: usize,
    seed: u64,
    th: &FailureThresholds,
) -> Result<(FailureModeCounts, FailureModeCounts)> {
    let untrained = initial_params(cfg, seed)?;
    let count = |params: &PolicyParams| -> Result<FailureModeCounts> {
        let m = Method::Policy {
            params,
            kind: MethodKind::GrpoTeam,
        };
        Ok(detect_failure_modes(&evaluate(cfg, &m, "grpo_team", n, seed)?.records, th))
    };
    Ok((count(&untrained)?, count(trained)?))
}

fn add(a: FailureModeCounts, b: FailureModeCounts) -> FailureModeCounts {
    FailureModeCounts {
        over_planning: a.over_planning + b.over_planning,
        review_repetition: a.review_repetition + b.review_repetition,
        late_testing: a.late_testing + b.late_testing,
    }
}

/// Summed over seeds, using each seed's checkpoint. Writes `failures.csv`.
pub fn run_failures(exp: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<(FailureModeCounts, FailureModeCounts)> {
    exp.validate()?;
    let mut before = FailureModeCounts::default();
    let mut after = FailureModeCounts::default();
    for &seed in &exp.seeds {
        let params = params_for(exp, seed, checkpoint)?;
        let (b, a) = failure_comparison(&exp.train, &params, exp.eval_episodes, seed, &exp.failures)?;
        before = add(before, b);
        after = add(after, a);
    }
    fs::create_dir_all(&exp.out_dir)?;
    fs::write(exp.out_dir.join("failures.csv"), exp.header() + &comparison_csv(&before, &after))?;
    Ok((before, after))
}

/// Human-readable report of a JSONL trace file.
pub fn replay_audit(path: &Path) -> Result<String> {
    let f = std::io::BufReader::new(fs::File::open(path)?);
    Ok(trace::render_audit(&trace::read_jsonl(f)?))
}
