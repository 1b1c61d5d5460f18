mod common;

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rotorlab::alloc::{AllocMode, AllocationNet};
use rotorlab::rl::{
    actor_objective, evaluate_policy, gae, gaussian_log_prob, ppo_update, rollout, squash_log_det, squashed_log_prob,
    train, ActorBatch, Environment, InteractionMeter, PolicyPair, PpoConfig, TerminationReason, ACTION_DIM,
};
use rotorlab::sim::{InitBounds, RewardMode, SimParams, OBS_DIM};

fn quad_env() -> Environment {
    let config = common::standard_quad();
    let alloc = AllocationNet::untrained(&config, AllocMode::Unconstrained, 3);
    Environment::new(&config, alloc, SimParams::default(), RewardMode::PositionOnly, InitBounds::default()).unwrap()
}

fn small_ppo() -> PpoConfig {
    PpoConfig { n_envs: 8, rollout_length: 32, minibatch_size: 64, max_interactions: 8 * 32 * 3, ..PpoConfig::default() }
}

/// `A_t = Σ_l (γλ)^l δ_{t+l}`, summed directly and cut after a terminal step.
fn gae_direct(r: &[f64], v: &[f64], d: &[bool], last: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = r.len();
    let value_after = |k: usize| if k + 1 < n { v[k + 1] } else { last };
    (0..n)
        .map(|t| {
            let mut acc = 0.0;
            let mut factor = 1.0;
            for k in t..n {
                let delta = r[k] + if d[k] { 0.0 } else { gamma * value_after(k) } - v[k];
                acc += factor * delta;
                if d[k] {
                    break;
                }
                factor *= gamma * lambda;
            }
            acc
        })
        .collect()
}

proptest! {
    #![proptest_config(common::proptest_config(256))]

    #[test]
    fn gae_matches_double_loop(seed in any::<u64>(), gamma in 0.5f64..=1.0, lambda in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 100;
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.05)).collect();
        let last = rng.random_range(-1.0..1.0);
        let (adv, ret) = gae(&r, &v, &d, last, gamma, lambda);
        let direct = gae_direct(&r, &v, &d, last, gamma, lambda);
        for t in 0..n {
            prop_assert!((adv[t] - direct[t]).abs() <= 1e-12);
            prop_assert!((ret[t] - adv[t] - v[t]).abs() <= 1e-15);
        }
    }

    #[test]
    fn squash_correction_matches_numerical_jacobian(x in proptest::collection::vec(-3.0f64..3.0, 6)) {
        let h = 1e-5;
        let numeric: f64 = x.iter().map(|&xi| (((xi + h).tanh() - (xi - h).tanh()) / (2.0 * h)).ln()).sum();
        prop_assert!((squash_log_det(&x) - numeric).abs() <= 1e-6);
        let mu = vec![0.1; 6];
        let ls = vec![-0.7; 6];
        prop_assert!((squashed_log_prob(&x, &mu, &ls) - (gaussian_log_prob(&x, &mu, &ls) - numeric)).abs() <= 1e-6);
    }
}

fn toy_batch(policy: &PolicyPair, seed: u64, advantages: Vec<f64>, offsets: &[f64]) -> ActorBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = advantages.len();
    let obs = Array2::from_shape_fn((b, OBS_DIM), |_| rng.random_range(-1.0..1.0));
    let next_obs = Array2::from_shape_fn((b, OBS_DIM), |_| rng.random_range(-1.0..1.0));
    let spatial_noise = Array2::from_shape_fn((b, OBS_DIM), |_| rng.random_range(-0.05..0.05));
    let mu = policy.actor.forward_raw(obs.view()).unwrap();
    let raw_actions = Array2::from_shape_fn((b, ACTION_DIM), |(k, j)| mu[(k, j)] + rng.random_range(-0.5..0.5));
    let old_log_probs = (0..b)
        .map(|k| {
            let x: Vec<f64> = raw_actions.row(k).to_vec();
            let m: Vec<f64> = mu.row(k).to_vec();
            gaussian_log_prob(&x, &m, &policy.log_std) + offsets[k]
        })
        .collect();
    ActorBatch { obs, raw_actions, old_log_probs, advantages, next_obs, pair_valid: vec![true; b], spatial_noise }
}

fn objective_total(policy: &PolicyPair, batch: &ActorBatch, config: &PpoConfig) -> f64 {
    actor_objective(policy, batch, config).unwrap().0.total
}

#[test]
fn surrogate_gradient_matches_finite_differences() {
    let config = PpoConfig { entropy_coef: 0.01, caps_temporal: 0.3, caps_spatial: 0.2, ..PpoConfig::default() };
    let mut policy = PolicyPair::new(&config, 4);
    // Ratios 1, e^0.5 and e^-0.6: one inside the clip band, two outside with either sign of advantage.
    let batch = toy_batch(&policy, 1, vec![0.7, -1.2, 0.9], &[0.0, -0.5, 0.6]);
    let (_, grads) = actor_objective(&policy, &batch, &config).unwrap();
    let n_net = policy.actor.num_params();
    assert_eq!(grads.len(), n_net + ACTION_DIM);
    let h = 1e-6;
    for k in 0..grads.len() {
        let nudge = |p: &mut PolicyPair, d: f64| {
            if k < n_net {
                p.actor.params_mut()[k] += d;
            } else {
                p.log_std[k - n_net] += d;
            }
        };
        nudge(&mut policy, h);
        let up = objective_total(&policy, &batch, &config);
        nudge(&mut policy, -2.0 * h);
        let down = objective_total(&policy, &batch, &config);
        nudge(&mut policy, h);
        let numeric = (up - down) / (2.0 * h);
        let scale = grads[k].abs().max(numeric.abs()).max(1e-4);
        assert!((grads[k] - numeric).abs() / scale <= 1e-4, "param {k}: {} vs {numeric}", grads[k]);
    }
}

#[test]
fn unbounded_clip_gives_vanilla_policy_gradient() {
    let config = PpoConfig { clip: 1e12, entropy_coef: 0.0, caps_temporal: 0.0, caps_spatial: 0.0, ..PpoConfig::default() };
    let policy = PolicyPair::new(&config, 9);
    let batch = toy_batch(&policy, 2, vec![0.4, -1.1, 2.0, 0.3], &[0.2, -0.4, 0.1, 0.9]);
    let (_, grads) = actor_objective(&policy, &batch, &config).unwrap();

    // −(1/b) Σ ρ_k A_k ∇ log π(x_k), one sample at a time.
    let b = batch.advantages.len() as f64;
    let n_net = policy.actor.num_params();
    let mut expected = vec![0.0; n_net + ACTION_DIM];
    for k in 0..batch.advantages.len() {
        let obs = batch.obs.slice(ndarray::s![k..k + 1, ..]).to_owned();
        let cache = policy.actor.forward_cached(obs.view()).unwrap();
        let x: Vec<f64> = batch.raw_actions.row(k).to_vec();
        let mu: Vec<f64> = cache.raw.row(0).to_vec();
        let ratio = (gaussian_log_prob(&x, &mu, &policy.log_std) - batch.old_log_probs[k]).exp();
        let weight = -ratio * batch.advantages[k] / b;
        let mut dlogp_dmu = Array2::zeros((1, ACTION_DIM));
        for j in 0..ACTION_DIM {
            let var = (2.0 * policy.log_std[j]).exp();
            dlogp_dmu[(0, j)] = weight * (x[j] - mu[j]) / var;
            expected[n_net + j] += weight * ((x[j] - mu[j]).powi(2) / var - 1.0);
        }
        for (e, g) in expected.iter_mut().zip(policy.actor.backward_raw(&cache, dlogp_dmu.view()).unwrap()) {
            *e += g;
        }
    }
    for (g, e) in grads.iter().zip(&expected) {
        assert!((g - e).abs() <= 1e-8, "{g} vs {e}");
    }
}

#[test]
fn zero_advantages_give_zero_actor_gradient() {
    let config = PpoConfig { entropy_coef: 0.0, caps_temporal: 0.0, caps_spatial: 0.0, ..PpoConfig::default() };
    let policy = PolicyPair::new(&config, 2);
    let batch = toy_batch(&policy, 3, vec![0.0; 5], &[0.0, 0.1, -0.1, 0.3, 0.0]);
    let (_, grads) = actor_objective(&policy, &batch, &config).unwrap();
    assert!(grads.iter().all(|&g| g == 0.0));
}

#[test]
fn temporal_smoothness_vanishes_for_constant_observations() {
    let config = PpoConfig { caps_temporal: 1.0, ..PpoConfig::default() };
    let policy = PolicyPair::new(&config, 2);
    let mut batch = toy_batch(&policy, 4, vec![0.5, -0.5, 1.0], &[0.0; 3]);
    batch.next_obs = batch.obs.clone();
    let (terms, _) = actor_objective(&policy, &batch, &config).unwrap();
    assert_eq!(terms.temporal, 0.0);
}

#[test]
fn interaction_meter_is_exact() {
    let env = quad_env();
    let config = small_ppo();
    let policy = PolicyPair::new(&config, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut meter = InteractionMeter::new();
    let mut expected = 0u64;
    for (n, t) in [(8, 32), (3, 7), (0, 10), (5, 0)] {
        let traj = rollout(&policy, &env, n, t, &mut rng, &mut meter).unwrap();
        assert_eq!(traj.interactions, (n * t) as u64);
        expected += (n * t) as u64;
    }
    for (n, t) in [(4, 20), (2, 0)] {
        evaluate_policy(&policy, &env, n, t, 5, &mut meter).unwrap();
        expected += (n * t) as u64;
    }
    assert_eq!(meter.count(), expected);

    let mut meter = InteractionMeter::new();
    let (_, curve) = train(&env, &config, None, 1, &mut meter).unwrap();
    assert_eq!(curve.updates, 3);
    assert_eq!(meter.count(), 3 * config.interactions_per_rollout());
    let ticks: Vec<u64> = curve.points.iter().map(|p| p.interactions).collect();
    assert_eq!(ticks, vec![256, 512, 768]);
}

#[test]
fn empty_rollout_and_evaluation() {
    let env = quad_env();
    let policy = PolicyPair::new(&PpoConfig::default(), 0);
    let mut meter = InteractionMeter::new();
    let traj = rollout(&policy, &env, 4, 0, &mut ChaCha8Rng::seed_from_u64(1), &mut meter).unwrap();
    assert!(traj.is_empty());
    assert_eq!(evaluate_policy(&policy, &env, 4, 0, 1, &mut meter).unwrap(), 0.0);
    assert_eq!(meter.count(), 0);
}

#[test]
fn training_is_deterministic_given_seed_and_init() {
    let env = quad_env();
    let config = small_ppo();
    let init = PolicyPair::new(&config, 11);
    let run = || train(&env, &config, Some(init.clone()), 7, &mut InteractionMeter::new()).unwrap();
    let (p1, c1) = run();
    let (p2, c2) = run();
    assert_eq!(p1, p2);
    assert_eq!(c1.points, c2.points);
    assert_eq!(c1.updates, c2.updates);
    assert_ne!(p1, init);

    let mut meter = InteractionMeter::new();
    let a = evaluate_policy(&p1, &env, 6, 40, 3, &mut meter).unwrap();
    let b = evaluate_policy(&p1, &env, 6, 40, 3, &mut meter).unwrap();
    assert_eq!(a, b);
}

#[test]
fn restored_policy_reproduces_the_next_update() {
    let env = quad_env();
    let config = small_ppo();
    let (donor, _) = train(&env, &config, None, 2, &mut InteractionMeter::new()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let traj = rollout(&donor, &env, 8, 32, &mut rng, &mut InteractionMeter::new()).unwrap();

    let mut original = donor.clone();
    let mut restored = PolicyPair::from_bytes(&donor.to_bytes()).unwrap();
    assert_eq!(restored, donor);
    ppo_update(&mut original, &traj, &config, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    ppo_update(&mut restored, &traj, &config, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    assert_eq!(original, restored);
    assert_ne!(original, donor);
}

#[test]
fn met_goal_stops_before_any_update() {
    let env = quad_env();
    let config = PpoConfig { goal_reward: Some(0.0), goal_window: 10, ..small_ppo() };
    let init = PolicyPair::new(&config, 1);
    let mut meter = InteractionMeter::new();
    let (policy, curve) = train(&env, &config, Some(init.clone()), 3, &mut meter).unwrap();
    assert_eq!(curve.terminated_reason, TerminationReason::GoalReached);
    assert_eq!(curve.updates, 0);
    assert_eq!(curve.points.len(), 1);
    assert_eq!(policy, init);
}
