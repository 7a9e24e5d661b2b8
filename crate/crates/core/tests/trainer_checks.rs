mod common;

use common::oracle;
use teamgrpo_core::env::{Env, Role};
use teamgrpo_core::par::Exec;
use teamgrpo_core::policy::{featurize_local, kl_probs, PolicyParams};
use teamgrpo_core::reward::{score_components, FamilyNorm, PenaltyCoefficients, RewardWeights};
use teamgrpo_core::rng;
use teamgrpo_core::trainer::{
    apply_update, collect_rollouts, compute_advantages, counterfactual_baseline, initial_params, surrogate_loss_and_grad,
    train_loop, BaselineMode, GrpoConfig, ReturnFn, RewardMode, Rollout, TrainConfig,
};

fn fitted_return(rollouts: &[Rollout], coeffs: &PenaltyCoefficients) -> ReturnFn {
    let pairs: Vec<_> = rollouts
        .iter()
        .map(|r| (r.trajectory.meta.family, score_components(&r.trajectory.record, coeffs).unwrap()))
        .collect();
    ReturnFn::new(RewardMode::Joint, FamilyNorm::fit(&pairs).unwrap(), RewardWeights::late(), true)
}

#[test]
fn exhaustive_baseline_matches_enumeration() {
    let env = Env::default();
    let coeffs = PenaltyCoefficients::default();
    let base = initial_params(&TrainConfig::default(), 1).unwrap();
    let w = oracle::random_weights(&base, 1.0, &mut rng::stream(11));
    let fixtures = oracle::loo_fixtures(&env, &w, 30, 5);
    let ret = fitted_return(&fixtures, &coeffs);
    let cfg = GrpoConfig {
        exhaustive: true,
        ..GrpoConfig::default()
    };
    let mut checked = 0;
    for r in &fixtures {
        for t in 0..r.trajectory.transitions.len() {
            let got = counterfactual_baseline(&env, r, t, &w, &cfg, &ret, &coeffs).unwrap();
            let pv = oracle::enumerate_replacements(&env, r, t, &w, &ret.norm, &ret.weights, &coeffs);
            let (want, _) = oracle::mean_var(&pv);
            assert!((got - want).abs() < 1e-9, "fixture {checked}: {got} vs {want}");
            checked += 1;
        }
    }
    assert!(checked >= 30);
}

#[test]
fn sampled_baseline_is_unbiased_in_aggregate() {
    let env = Env::default();
    let coeffs = PenaltyCoefficients::default();
    let base = initial_params(&TrainConfig::default(), 1).unwrap();
    let w = oracle::random_weights(&base, 1.0, &mut rng::stream(12));
    let fixtures = oracle::loo_fixtures(&env, &w, 60, 9);
    let ret = fitted_return(&fixtures, &coeffs);
    let cfg = GrpoConfig {
        counterfactual_k: 64,
        ..GrpoConfig::default()
    };
    for r in &fixtures {
        let pv = oracle::enumerate_replacements(&env, r, 0, &w, &ret.norm, &ret.weights, &coeffs);
        let (mean, var) = oracle::mean_var(&pv);
        let got = counterfactual_baseline(&env, r, 0, &w, &cfg, &ret, &coeffs).unwrap();
        assert!((got - mean).abs() <= 5.0 * (var / 64.0).sqrt() + 1e-9);
    }
}

#[test]
fn noop_replacement_is_the_pass_branch() {
    let env = Env::default();
    let coeffs = PenaltyCoefficients::default();
    let base = initial_params(&TrainConfig::default(), 1).unwrap();
    let w = oracle::random_weights(&base, 1.0, &mut rng::stream(13));
    let fixtures = oracle::loo_fixtures(&env, &w, 10, 2);
    let ret = fitted_return(&fixtures, &coeffs);
    let cfg = GrpoConfig {
        replacement: teamgrpo_core::trainer::Replacement::Noop,
        ..GrpoConfig::default()
    };
    for r in &fixtures {
        let snap = &r.snapshots[0];
        let legal = env.legal_actions(&snap.state, snap.state.speaker()).unwrap();
        let pass = legal
            .iter()
            .position(|a| a.kind() == teamgrpo_core::env::ActionKind::HandoffPeer)
            .unwrap();
        let pv = oracle::enumerate_replacements(&env, r, 0, &w, &ret.norm, &ret.weights, &coeffs);
        let got = counterfactual_baseline(&env, r, 0, &w, &cfg, &ret, &coeffs).unwrap();
        assert!((got - pv[pass].1).abs() < 1e-12);
    }
}

#[test]
fn surrogate_gradient_matches_finite_differences() {
    let env = Env::default();
    let mut cfg = TrainConfig::default();
    cfg.grpo.batch_episodes = 2;
    let base = initial_params(&cfg, 3).unwrap();
    let mut r = rng::stream(21);
    for draw in 0..2u64 {
        let w = oracle::random_weights(&base, 0.5, &mut r);
        let reference = oracle::random_weights(&base, 0.5, &mut r);
        let params = PolicyParams::with_reference(w, reference).unwrap();
        let batch: Vec<_> = collect_rollouts(&env, &cfg, &params, 0, draw, false)
            .unwrap()
            .into_iter()
            .map(|r| r.trajectory)
            .collect();
        let (adv, ret) = oracle::random_targets(&batch, &mut r);
        let err = oracle::gradient_error(&params, &batch, &adv, &ret, &cfg.grpo, 1e-5);
        assert!(err < 1e-4, "draw {draw}: relative error {err:e}");
    }
}

#[test]
fn kl_term_pulls_back_toward_the_reference() {
    let env = Env::default();
    let mut cfg = TrainConfig::default();
    cfg.grpo.batch_episodes = 4;
    cfg.grpo.entropy_coef = 0.0;
    cfg.grpo.kl_coef = 1.0;
    cfg.grpo.learning_rate = 0.2;
    let base = initial_params(&cfg, 3).unwrap();
    let drifted = oracle::random_weights(&base, 0.5, &mut rng::stream(4));
    let mut params = PolicyParams::with_reference(drifted, base.weights.clone()).unwrap();
    let batch: Vec<_> = collect_rollouts(&env, &cfg, &params, 0, 1, false)
        .unwrap()
        .into_iter()
        .map(|r| r.trajectory)
        .collect();
    let zeros: Vec<Vec<_>> = batch.iter().map(|t| vec![0.0; t.transitions.len()]).collect();
    let adv = compute_advantages(&zeros, &zeros, BaselineMode::Constant).unwrap();
    let mut critic = teamgrpo_core::policy::CriticParams::zeros();
    let mut last = f64::INFINITY;
    for _ in 0..20 {
        let out = surrogate_loss_and_grad(&batch, &params, &critic, &adv, &zeros, &cfg.grpo).unwrap();
        assert!(out.mean_kl <= last + 1e-12);
        last = out.mean_kl;
        apply_update(&mut params, &mut critic, &out, &cfg.grpo).unwrap();
    }
    assert!(last > 0.0);
    let checksum = params.reference_checksum().to_string();
    assert_eq!(checksum, base.weights.checksum());
}

#[test]
fn fresh_policy_sits_on_its_reference() {
    let env = Env::default();
    let cfg = TrainConfig::default();
    let params = initial_params(&cfg, 8).unwrap();
    let batch = collect_rollouts(&env, &cfg, &params, 0, 1, false).unwrap();
    let adv: Vec<Vec<_>> = batch.iter().map(|r| vec![1.0; r.trajectory.transitions.len()]).collect();
    let adv = compute_advantages(&adv, &adv, BaselineMode::Constant).unwrap();
    let trajs: Vec<_> = batch.into_iter().map(|r| r.trajectory).collect();
    let ret: Vec<Vec<f64>> = trajs.iter().map(|t| vec![0.0; t.transitions.len()]).collect();
    let critic = teamgrpo_core::policy::CriticParams::zeros();
    let out = surrogate_loss_and_grad(&trajs, &params, &critic, &adv, &ret, &cfg.grpo).unwrap();
    assert!(out.mean_kl.abs() < 1e-15);
    assert_eq!(out.clip_fraction, 0.0);
}

#[test]
fn advantages_are_standardized_over_the_batch() {
    let mut r = rng::stream(3);
    use rand::Rng;
    for _ in 0..50 {
        let returns: Vec<Vec<f64>> = (0..r.random_range(2..6))
            .map(|_| (0..r.random_range(1..8)).map(|_| r.random_range(-3.0..3.0)).collect())
            .collect();
        let baselines: Vec<Vec<f64>> = returns
            .iter()
            .map(|row| row.iter().map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let adv = compute_advantages(&returns, &baselines, BaselineMode::LeaveOneOut).unwrap();
        let flat: Vec<f64> = adv.iter().flatten().map(|a| a.advantage).collect();
        let n = flat.len() as f64;
        let mean = flat.iter().sum::<f64>() / n;
        let var = flat.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
        for (row, (rr, bb)) in adv.iter().zip(returns.iter().zip(&baselines)) {
            for (a, (x, y)) in row.iter().zip(rr.iter().zip(bb)) {
                assert_eq!(a.baseline_value, *y);
                let _ = x;
            }
        }
    }
}

#[test]
fn features_on_replay_match_the_recorded_ones() {
    let env = Env::default();
    let cfg = TrainConfig::default();
    let params = initial_params(&cfg, 2).unwrap();
    for r in collect_rollouts(&env, &cfg, &params, 0, 3, true).unwrap() {
        for (t, snap) in r.trajectory.transitions.iter().zip(&r.snapshots) {
            let role: Role = snap.state.speaker();
            assert_eq!(role, t.role);
            assert_eq!(featurize_local(&env.observe(&snap.state, role).unwrap()), t.features);
        }
    }
}

#[test]
fn scheduling_does_not_change_training() {
    let mut cfg = TrainConfig::default();
    cfg.grpo.iterations = 3;
    cfg.grpo.batch_episodes = 6;
    cfg.exec = Exec::Sequential;
    let a = train_loop(&cfg, 4).unwrap();
    cfg.exec = Exec::Parallel;
    let b = train_loop(&cfg, 4).unwrap();
    assert_eq!(a.params, b.params);
    let csv = |o: &teamgrpo_core::trainer::TrainOutcome| o.curve.iter().map(|r| r.csv()).collect::<Vec<_>>();
    assert_eq!(csv(&a), csv(&b));
}

#[test]
fn kl_helper_agrees_with_hand_computation() {
    let p = [0.5, 0.25, 0.25];
    let q = [0.25, 0.5, 0.25];
    let want = 0.5 * (2.0f64).ln() + 0.25 * (0.5f64).ln();
    assert!((kl_probs(&p, &q).unwrap() - want).abs() < 1e-15);
}
