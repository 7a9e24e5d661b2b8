use super::baseline::{batch_baselines, compute_advantages, episode_returns, ReturnFn};
use super::config::{BaselineMode, TrainConfig};
use super::rollout::{collect_rollouts, Outcome, Rollout};
use super::surrogate::{apply_update, surrogate_loss_and_grad, UpdateReport};
use crate::buffer::{BufferConfig, BufferEntry, ExperienceBuffer};
use crate::env::{Env, Role};
use crate::error::Result;
use crate::policy::{CriticParams, PolicyParams};
use crate::reward::{
    curriculum_weights, score_components, CurriculumSchedule, FamilyNorm, PenaltyCoefficients, RawRewardComponents,
    RewardBreakdown, RewardWeights,
};
use crate::rng::{self, label};

pub const CURVE_HEADER: &str =
    "iteration,mean_reward,team_score,mean_quality,mean_turns,mean_ticks,mean_tokens,clip_fraction,kl,entropy,loss";

/// One learning-curve row. `mean_reward` is the batch-normalized combined
/// reward, which centres on zero by construction; `team_score` is the same
/// four signals on a fixed scale and is comparable across iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub iteration: u32,
    pub mean_reward: f64,
    pub team_score: f64,
    pub mean_quality: f64,
    pub mean_turns: f64,
    pub mean_ticks: f64,
    pub mean_tokens: f64,
    pub clip_fraction: f64,
    pub kl: f64,
    pub entropy: f64,
    pub loss: f64,
}

impl CurveRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.4},{:.4},{:.4},{:.6},{:.6},{:.6},{:.6}",
            self.iteration,
            self.mean_reward,
            self.team_score,
            self.mean_quality,
            self.mean_turns,
            self.mean_ticks,
            self.mean_tokens,
            self.clip_fraction,
            self.kl,
            self.entropy,
            self.loss
        )
    }
}

/// Fixed-scale score in [0, 1]: quality, time left in the tick budget, and
/// the two penalties mapped through `1 / (1 + p)`.
pub fn team_score(raw: &RawRewardComponents, tick_budget: u32, w: &RewardWeights) -> f64 {
    let speed = (1.0 - raw.speed_raw / tick_budget.max(1) as f64).clamp(0.0, 1.0);
    w.w_quality * raw.quality
        + w.w_speed * speed
        + w.w_coordination / (1.0 + raw.coordination_penalty)
        + w.w_compliance / (1.0 + raw.compliance_penalty)
}

#[derive(Debug, Clone)]
pub struct ScoredBatch {
    pub outcomes: Vec<Outcome>,
    pub breakdowns: Vec<RewardBreakdown>,
    pub norm: FamilyNorm,
}

/// Scores every rollout, fits per-family normalization and fills in each
/// trajectory's breakdown.
pub fn score_batch(
    rollouts: &mut [Rollout],
    coeffs: &PenaltyCoefficients,
    weights: &RewardWeights,
    batch_id: u64,
) -> Result<ScoredBatch> {
    let mut outcomes = Vec::with_capacity(rollouts.len());
    for r in rollouts.iter() {
        let rec = &r.trajectory.record;
        let raw = score_components(rec, coeffs)?;
        let mut local = [0.0; Role::COUNT];
        for c in &rec.credits {
            local[c.role.index()] += c.amount;
        }
        outcomes.push(Outcome {
            family: rec.task.family,
            raw,
            local,
        });
    }
    let pairs: Vec<_> = outcomes.iter().map(|o| (o.family, o.raw)).collect();
    let norm = FamilyNorm::fit(&pairs)?;
    let mut breakdowns = Vec::with_capacity(outcomes.len());
    for (r, o) in rollouts.iter_mut().zip(&outcomes) {
        let normalized = norm.apply(o.family, &o.raw);
        let b = RewardBreakdown {
            raw: o.raw,
            normalized,
            combined: crate::reward::combine_reward(&normalized, weights),
            weights_used: *weights,
            batch_id,
        };
        r.trajectory.breakdown = Some(b.clone());
        breakdowns.push(b);
    }
    Ok(ScoredBatch {
        outcomes,
        breakdowns,
        norm,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub critic: CriticParams,
    pub curve: Vec<CurveRow>,
    pub config_hash: String,
    /// Scored episodes of the final iteration, or of every iteration that
    /// still fits when retention is on.
    pub buffer: ExperienceBuffer,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn initial_params(cfg: &TrainConfig, seed: u64) -> Result<PolicyParams> {
    PolicyParams::init(&Role::ALL, cfg.adapter_rank, &mut rng::derived_stream(seed, &[label::INIT]))
}

/// Full training run. Deterministic in `(cfg, seed)` regardless of how
/// rollouts are scheduled.
pub fn train_loop(cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    let env = Env::new(cfg.env.clone())?;
    let g = &cfg.grpo;
    let mut params = initial_params(cfg, seed)?;
    let mut critic = CriticParams::zeros();
    let schedule = CurriculumSchedule {
        early: cfg.early_weights,
        late: cfg.late_weights,
        total_steps: g.iterations as u64,
    };
    let mut curve = Vec::with_capacity(g.iterations as usize);
    let mut buffer = ExperienceBuffer::new(BufferConfig {
        short_long_mix: cfg.tasks.short_long_mix,
        ..cfg.buffer
    });

    for it in 0..g.iterations {
        let loo = g.baseline_mode == BaselineMode::LeaveOneOut;
        let mut rollouts = collect_rollouts(&env, cfg, &params, it, seed, loo)?;
        let weights = curriculum_weights(it as i64, &schedule)?;
        let scored = score_batch(&mut rollouts, &cfg.penalties, &weights, it as u64)?;
        let ret = ReturnFn::new(g.reward_mode, scored.norm, weights, g.coordination_term);
        let returns: Vec<Vec<f64>> = rollouts
            .iter()
            .zip(&scored.outcomes)
            .map(|(r, o)| episode_returns(&r.trajectory, o, &ret))
            .collect();
        let baselines = batch_baselines(
            &env,
            &rollouts,
            &returns,
            &params.weights,
            &critic,
            g,
            &ret,
            &cfg.penalties,
            cfg.exec,
        )?;
        let advantages = compute_advantages(&returns, &baselines, g.baseline_mode)?;
        let batch: Vec<_> = rollouts.into_iter().map(|r| r.trajectory).collect();
        if !cfg.buffer.retain {
            buffer.clear();
        }
        for t in &batch {
            buffer.append(BufferEntry::from_trajectory(t.clone()))?;
        }

        let mut report = UpdateReport {
            loss: 0.0,
            critic_loss: 0.0,
            mean_kl: 0.0,
            mean_entropy: 0.0,
            clip_fraction: 0.0,
        };
        for _ in 0..g.epochs {
            let out = surrogate_loss_and_grad(&batch, &params, &critic, &advantages, &returns, g)?;
            report = apply_update(&mut params, &mut critic, &out, g)?;
        }

        let n = batch.len() as f64;
        let row = CurveRow {
            iteration: it,
            mean_reward: mean(scored.breakdowns.iter().map(|b| b.combined)),
            team_score: mean(
                batch
                    .iter()
                    .zip(&scored.outcomes)
                    .map(|(t, o)| team_score(&o.raw, t.record.task.tick_budget, &cfg.late_weights)),
            ),
            mean_quality: mean(scored.outcomes.iter().map(|o| o.raw.quality)),
            mean_turns: batch.iter().map(|t| t.record.turns() as f64).sum::<f64>() / n,
            mean_ticks: batch.iter().map(|t| t.record.ticks_elapsed as f64).sum::<f64>() / n,
            mean_tokens: batch.iter().map(|t| t.record.token_count as f64).sum::<f64>() / n,
            clip_fraction: report.clip_fraction,
            kl: report.mean_kl,
            entropy: report.mean_entropy,
            loss: report.loss,
        };
        log::info!("{}", row.csv());
        curve.push(row);
    }
    Ok(TrainOutcome {
        params,
        critic,
        curve,
        config_hash: cfg.hash(),
        buffer,
    })
}
