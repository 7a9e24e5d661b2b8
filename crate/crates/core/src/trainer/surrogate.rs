use serde::{Deserialize, Serialize};

use super::baseline::AdvantageEstimate;
use super::config::GrpoConfig;
use super::rollout::Trajectory;
use crate::env::ActionKind;
use crate::error::{Error, Result};
use crate::policy::{critic_value, CriticParams, PolicyParams, Weights, ACTIONS};

/// Loss, its analytic gradient, and diagnostics for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateOutput {
    pub loss: f64,
    pub grad: Weights,
    pub critic_loss: f64,
    pub critic_grad: CriticParams,
    pub mean_entropy: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub loss: f64,
    pub critic_loss: f64,
    pub mean_kl: f64,
    pub mean_entropy: f64,
    pub clip_fraction: f64,
}

fn masked_softmax(z: &[f64; ACTIONS], legal: &[ActionKind]) -> Vec<f64> {
    let m = legal.iter().map(|k| z[k.index()]).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = legal.iter().map(|k| (z[k.index()] - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Clipped surrogate with entropy bonus and a KL(current ‖ reference)
/// penalty, averaged over transitions:
///
/// `L = -mean[min(r A, clip(r, 1-ε, 1+ε) A)] - c_H mean H + c_KL mean KL`
///
/// When the clipped branch is the smaller one and `r` lies outside the clip
/// range, that transition contributes no policy-gradient term. The critic
/// loss is `mean ½ (V(g) - R)²` against `returns`.
pub fn surrogate_loss_and_grad(
    batch: &[Trajectory],
    params: &PolicyParams,
    critic: &CriticParams,
    advantages: &[Vec<AdvantageEstimate>],
    returns: &[Vec<f64>],
    cfg: &GrpoConfig,
) -> Result<SurrogateOutput> {
    let n: usize = batch.iter().map(|t| t.transitions.len()).sum();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let inv = 1.0 / n as f64;
    let eps = cfg.clip_epsilon;
    let mut grad = params.weights.zeros_like();
    let mut critic_grad = CriticParams {
        weights: vec![0.0; critic.weights.len()],
        bias: 0.0,
    };
    let (mut loss, mut critic_loss, mut ent_sum, mut kl_sum, mut clipped) = (0.0, 0.0, 0.0, 0.0, 0usize);

    for (ti, traj) in batch.iter().enumerate() {
        for (k, tr) in traj.transitions.iter().enumerate() {
            let adv = advantages[ti][k].advantage;
            let p = masked_softmax(&params.weights.logits(tr.role, &tr.features)?, &tr.legal);
            let q = masked_softmax(&params.reference().logits(tr.role, &tr.features)?, &tr.legal);
            let logp: Vec<f64> = p.iter().map(|v| v.ln()).collect();
            let a = tr.action;

            let ratio = (logp[a] - tr.log_prob_old).exp();
            let unclipped = ratio * adv;
            let clipped_val = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
            let clip_active = clipped_val < unclipped;
            if ratio < 1.0 - eps || ratio > 1.0 + eps {
                clipped += 1;
            }
            loss -= unclipped.min(clipped_val) * inv;

            let h: f64 = -p.iter().zip(&logp).map(|(pi, li)| pi * li).sum::<f64>();
            let kl: f64 = p
                .iter()
                .zip(&logp)
                .zip(&q)
                .map(|((pi, li), qi)| pi * (li - qi.ln()))
                .sum();
            ent_sum += h;
            kl_sum += kl;
            loss += (-cfg.entropy_coef * h + cfg.kl_coef * kl) * inv;

            let mut g = [0.0; ACTIONS];
            for (j, kind) in tr.legal.iter().enumerate() {
                let mut gj = 0.0;
                if !clip_active {
                    let onehot = if j == a { 1.0 } else { 0.0 };
                    gj -= adv * ratio * (onehot - p[j]);
                }
                let dh = -p[j] * (logp[j] + h);
                let dkl = p[j] * ((logp[j] - q[j].ln()) - kl);
                gj += -cfg.entropy_coef * dh + cfg.kl_coef * dkl;
                g[kind.index()] = gj * inv;
            }
            params.weights.accumulate(tr.role, &tr.features, &g, &mut grad);

            let v = critic_value(critic, &tr.global_features)?;
            let err = v - returns[ti][k];
            critic_loss += 0.5 * err * err * inv;
            for (gw, x) in critic_grad.weights.iter_mut().zip(&tr.global_features) {
                *gw += err * x * inv;
            }
            critic_grad.bias += err * inv;
        }
    }
    Ok(SurrogateOutput {
        loss,
        grad,
        critic_loss,
        critic_grad,
        mean_entropy: ent_sum * inv,
        mean_kl: kl_sum * inv,
        clip_fraction: clipped as f64 * inv,
    })
}

/// One plain gradient-descent step on policy and critic. A non-finite
/// gradient aborts the step and leaves both untouched.
pub fn apply_update(
    params: &mut PolicyParams,
    critic: &mut CriticParams,
    out: &SurrogateOutput,
    cfg: &GrpoConfig,
) -> Result<UpdateReport> {
    if !out.grad.is_finite() {
        return Err(Error::NonFiniteGradient("policy gradient".into()));
    }
    if !(out.critic_grad.bias.is_finite() && out.critic_grad.weights.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFiniteGradient("critic gradient".into()));
    }
    params.weights.add_scaled(&out.grad, -cfg.learning_rate);
    for (w, g) in critic.weights.iter_mut().zip(&out.critic_grad.weights) {
        *w -= cfg.critic_lr * g;
    }
    critic.bias -= cfg.critic_lr * out.critic_grad.bias;
    Ok(UpdateReport {
        loss: out.loss,
        critic_loss: out.critic_loss,
        mean_kl: out.mean_kl,
        mean_entropy: out.mean_entropy,
        clip_fraction: out.clip_fraction,
    })
}
