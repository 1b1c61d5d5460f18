use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::env::{rollout, Environment, Trajectory};
use super::policy::{gaussian_log_prob, PolicyPair, ACTION_DIM};
use super::{CurvePoint, InteractionMeter, PpoConfig, RlError, TerminationReason, TrainingCurve};
use crate::sim::OBS_DIM;

const HALF_LN_TAU_E: f64 = 1.418_938_533_204_672_7;

/// Generalized advantage estimation over one sequence.
///
/// `dones[t]` marks a terminal transition (no bootstrap past it); the value after the
/// final step is `last_value`. Returns `(advantages, returns)` with `returns = adv + values`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "gae inputs must be aligned");
    let mut adv = vec![0.0; n];
    let mut next_value = last_value;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        let a = delta + gamma * lambda * live * next_adv;
        adv[t] = a;
        next_value = values[t];
        next_adv = a;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// GAE on scaled rewards for every environment of a trajectory, in trajectory row order.
/// Dead rows get 0.
pub fn gae_masked(traj: &Trajectory, gamma: f64, lambda: f64, reward_scale: f64) -> (Vec<f64>, Vec<f64>) {
    let n = traj.n_envs;
    let mut adv = vec![0.0; traj.len()];
    let mut ret = vec![0.0; traj.len()];
    for i in 0..n {
        let rows: Vec<usize> = (0..traj.steps).map(|t| t * n + i).take_while(|&r| traj.alive[r]).collect();
        let r: Vec<f64> = rows.iter().map(|&k| traj.rewards[k] * reward_scale).collect();
        let v: Vec<f64> = rows.iter().map(|&k| traj.values[k]).collect();
        let d: Vec<bool> = rows.iter().map(|&k| traj.terminal[k]).collect();
        let (a, g) = gae(&r, &v, &d, traj.last_values[i], gamma, lambda);
        for (j, &k) in rows.iter().enumerate() {
            adv[k] = a[j];
            ret[k] = g[j];
        }
    }
    (adv, ret)
}

/// Inputs to the actor loss for one minibatch.
#[derive(Debug, Clone)]
pub struct ActorBatch {
    pub obs: Array2<f64>,
    pub raw_actions: Array2<f64>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub next_obs: Array2<f64>,
    /// Whether `(obs, next_obs)` is a consecutive pair inside one episode.
    pub pair_valid: Vec<bool>,
    /// Perturbation for the spatial smoothness term.
    pub spatial_noise: Array2<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ActorLossTerms {
    pub surrogate: f64,
    pub entropy: f64,
    pub temporal: f64,
    pub spatial: f64,
    pub total: f64,
    pub clip_fraction: f64,
}

/// Clipped surrogate, entropy bonus and both smoothness penalties, with the gradient
/// of the total with respect to the actor parameters followed by the log-std.
pub fn actor_objective(
    policy: &PolicyPair,
    batch: &ActorBatch,
    config: &PpoConfig,
) -> Result<(ActorLossTerms, Vec<f64>), RlError> {
    let b = batch.obs.nrows();
    let actor = &policy.actor;
    let cache = actor.forward_cached(batch.obs.view())?;
    let std: Vec<f64> = policy.log_std.iter().map(|l| l.exp()).collect();
    let mut grad_raw = Array2::zeros((b, ACTION_DIM));
    let mut grad_log_std = vec![0.0; ACTION_DIM];
    let mut terms = ActorLossTerms::default();
    let mut clipped_count = 0usize;
    let (lo, hi) = (1.0 - config.clip, 1.0 + config.clip);

    for k in 0..b {
        let mu = cache.raw.row(k);
        let x = batch.raw_actions.row(k);
        let lp = gaussian_log_prob(x.as_slice().expect("row"), mu.as_slice().expect("row"), &policy.log_std);
        let ratio = (lp - batch.old_log_probs[k]).exp();
        let a = batch.advantages[k];
        let unclipped = ratio * a;
        let clipped = ratio.clamp(lo, hi) * a;
        terms.surrogate -= unclipped.min(clipped) / b as f64;
        if ratio < lo || ratio > hi {
            clipped_count += 1;
        }
        if unclipped <= clipped {
            let g = -ratio * a / b as f64;
            for j in 0..ACTION_DIM {
                let z = (x[j] - mu[j]) / std[j];
                grad_raw[(k, j)] += g * z / std[j];
                grad_log_std[j] += g * (z * z - 1.0);
            }
        }
    }
    terms.clip_fraction = clipped_count as f64 / b.max(1) as f64;
    terms.entropy = policy.log_std.iter().map(|l| l + HALF_LN_TAU_E).sum();
    for g in grad_log_std.iter_mut() {
        *g -= config.entropy_coef;
    }

    let y = &cache.output;
    let mut grad_y = Array2::<f64>::zeros((b, ACTION_DIM));
    let mut grads = vec![0.0; actor.num_params()];
    let mut add = |g: Vec<f64>| grads.iter_mut().zip(g).for_each(|(a, b)| *a += b);

    if config.caps_temporal != 0.0 {
        let n_pairs = batch.pair_valid.iter().filter(|&&v| v).count();
        if n_pairs > 0 {
            let next = actor.forward_cached(batch.next_obs.view())?;
            let mut grad_next = Array2::zeros((b, ACTION_DIM));
            let scale = config.caps_temporal / n_pairs as f64;
            for k in (0..b).filter(|&k| batch.pair_valid[k]) {
                for j in 0..ACTION_DIM {
                    let d = y[(k, j)] - next.output[(k, j)];
                    terms.temporal += d * d / n_pairs as f64;
                    grad_y[(k, j)] += 2.0 * scale * d;
                    grad_next[(k, j)] -= 2.0 * scale * d;
                }
            }
            add(actor.backward(&next, grad_next.view())?);
        }
    }
    if config.caps_spatial != 0.0 && b > 0 {
        let perturbed = &batch.obs + &batch.spatial_noise;
        let noisy = actor.forward_cached(perturbed.view())?;
        let mut grad_noisy = Array2::zeros((b, ACTION_DIM));
        let scale = config.caps_spatial / b as f64;
        for k in 0..b {
            for j in 0..ACTION_DIM {
                let d = y[(k, j)] - noisy.output[(k, j)];
                terms.spatial += d * d / b as f64;
                grad_y[(k, j)] += 2.0 * scale * d;
                grad_noisy[(k, j)] -= 2.0 * scale * d;
            }
        }
        add(actor.backward(&noisy, grad_noisy.view())?);
    }
    ndarray::Zip::from(&mut grad_raw).and(&grad_y).and(y).for_each(|g, &gy, &yy| *g += gy * (1.0 - yy * yy));
    add(actor.backward_raw(&cache, grad_raw.view())?);

    terms.total = terms.surrogate - config.entropy_coef * terms.entropy
        + config.caps_temporal * terms.temporal
        + config.caps_spatial * terms.spatial;
    grads.extend(grad_log_std);
    Ok((terms, grads))
}

fn clip_norm(grads: &mut [f64], max_norm: Option<f64>) {
    if let Some(max) = max_norm {
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > max {
            let k = max / norm;
            grads.iter_mut().for_each(|g| *g *= k);
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub actor: ActorLossTerms,
    pub value_loss: f64,
    pub minibatches: usize,
}

/// Several epochs of minibatch PPO on one trajectory. Advantages are normalized over
/// the whole trajectory (mean 0, std 1).
pub fn ppo_update<R: Rng + ?Sized>(
    policy: &mut PolicyPair,
    traj: &Trajectory,
    config: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateStats, RlError> {
    let (mut adv, returns) = gae_masked(traj, config.gamma, config.gae_lambda, config.reward_scale);
    let valid: Vec<usize> = (0..traj.len()).filter(|&k| traj.alive[k]).collect();
    let mut stats = UpdateStats::default();
    if valid.is_empty() {
        return Ok(stats);
    }
    let mean = valid.iter().map(|&k| adv[k]).sum::<f64>() / valid.len() as f64;
    let var = valid.iter().map(|&k| (adv[k] - mean).powi(2)).sum::<f64>() / valid.len() as f64;
    let sd = var.sqrt() + 1e-8;
    for &k in &valid {
        adv[k] = (adv[k] - mean) / sd;
    }
    let noise = Normal::new(0.0, config.caps_sigma.max(0.0)).map_err(|e| RlError::InvalidConfig(e.to_string()))?;
    let mut order = valid.clone();
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.minibatch_size) {
            let spatial_noise = Array2::from_shape_fn((chunk.len(), OBS_DIM), |_| noise.sample(rng));
            let batch = ActorBatch {
                obs: traj.obs.select(Axis(0), chunk),
                raw_actions: traj.raw_actions.select(Axis(0), chunk),
                old_log_probs: chunk.iter().map(|&k| traj.log_probs[k]).collect(),
                advantages: chunk.iter().map(|&k| adv[k]).collect(),
                next_obs: traj.next_obs.select(Axis(0), chunk),
                pair_valid: chunk.iter().map(|&k| !traj.terminal[k]).collect(),
                spatial_noise,
            };
            let (terms, mut grads) = actor_objective(policy, &batch, config)?;
            if !terms.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(RlError::Diverged(format!("actor loss {}", terms.total)));
            }
            clip_norm(&mut grads, config.max_grad_norm);
            let PolicyPair { actor, log_std, actor_opt, .. } = policy;
            actor_opt.step_segments(&mut [actor.params_mut(), log_std.as_mut_slice()], &grads)?;

            let cache = policy.critic.forward_cached(batch.obs.view())?;
            let n = chunk.len() as f64;
            let mut value_loss = 0.0;
            let mut g = Array2::zeros((chunk.len(), 1));
            for (r, &k) in chunk.iter().enumerate() {
                let d = cache.output[(r, 0)] - returns[k];
                value_loss += d * d / n;
                g[(r, 0)] = 2.0 * config.value_coef * d / n;
            }
            if !value_loss.is_finite() {
                return Err(RlError::Diverged(format!("value loss {value_loss}")));
            }
            let mut grads = policy.critic.backward(&cache, g.view())?;
            clip_norm(&mut grads, config.max_grad_norm);
            policy.critic_opt.step(policy.critic.params_mut(), &grads)?;

            stats.actor.surrogate += terms.surrogate;
            stats.actor.entropy += terms.entropy;
            stats.actor.temporal += terms.temporal;
            stats.actor.spatial += terms.spatial;
            stats.actor.total += terms.total;
            stats.actor.clip_fraction += terms.clip_fraction;
            stats.value_loss += value_loss;
            stats.minibatches += 1;
        }
    }
    let m = stats.minibatches.max(1) as f64;
    let a = &mut stats.actor;
    for v in [&mut a.surrogate, &mut a.entropy, &mut a.temporal, &mut a.spatial, &mut a.total, &mut a.clip_fraction] {
        *v /= m;
    }
    stats.value_loss /= m;
    Ok(stats)
}

/// Trains a policy on `env` until the rollout-reward moving average reaches the goal
/// or the training budget runs out.
///
/// With `init`, the actor, log-std, critic and both optimizer states are taken from it
/// verbatim. Interactions are charged to `meter`; curve points report the meter
/// reading, so cost charged before the call (e.g. donor selection) is included.
pub fn train(
    env: &Environment,
    config: &PpoConfig,
    init: Option<PolicyPair>,
    seed: u64,
    meter: &mut InteractionMeter,
) -> Result<(PolicyPair, TrainingCurve), RlError> {
    config.validate()?;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fresh_seed: u64 = rng.random();
    let mut policy = match init {
        Some(p) => {
            p.validate()?;
            p
        }
        None => PolicyPair::new(config, fresh_seed),
    };
    let per_rollout = config.interactions_per_rollout();
    let mut used = 0u64;
    let mut curve = TrainingCurve {
        points: Vec::new(),
        seed,
        wall_clock_seconds: 0.0,
        terminated_reason: TerminationReason::BudgetExhausted,
        updates: 0,
    };
    loop {
        if per_rollout == 0 || used + per_rollout > config.max_interactions {
            break;
        }
        let traj = rollout(&policy, env, config.n_envs, config.rollout_length, &mut rng, meter)?;
        used += traj.interactions;
        curve.points.push(CurvePoint { interactions: meter.count(), reward: traj.mean_return() });
        if let Some(goal) = config.goal_reward {
            if curve.moving_average(curve.points.len() - 1, config.goal_window) >= goal {
                curve.terminated_reason = TerminationReason::GoalReached;
                break;
            }
        }
        ppo_update(&mut policy, &traj, config, &mut rng)?;
        curve.updates += 1;
    }
    curve.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok((policy, curve))
}
