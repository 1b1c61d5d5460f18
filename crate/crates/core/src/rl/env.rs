use nalgebra::Vector3;
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::policy::{gaussian_log_prob, PolicyPair, ACTION_DIM};
use super::{InteractionMeter, RlError};
use crate::airframe::{compute_wrench_box, feasibility_check, AirframeConfig, FeasibilityOptions, WrenchBox};
use crate::alloc::AllocationNet;
use crate::sim::{
    compute_reward, observe, sample_initial_state, step_in_place, InitBounds, RewardConfig, RewardMode,
    RigidBodyState, SimParams, VehicleModel, OBS_DIM,
};

/// Everything needed to fly one airframe in closed loop:
/// observation → actor → normalized wrench → wrench box → allocation net → thrusts → simulator.
#[derive(Debug, Clone)]
pub struct Environment {
    pub config: AirframeConfig,
    pub vehicle: VehicleModel,
    pub wrench_box: WrenchBox,
    /// Frozen; training never updates it.
    pub alloc: AllocationNet,
    pub sim: SimParams,
    pub reward: RewardConfig,
    pub init: InitBounds,
    pub target: Vector3<f64>,
}

impl Environment {
    /// Builds the closed loop. Hover thrusts for the reward come from the feasibility QP.
    pub fn new(
        config: &AirframeConfig,
        alloc: AllocationNet,
        sim: SimParams,
        reward_mode: RewardMode,
        init: InitBounds,
    ) -> Result<Self, RlError> {
        sim.validate()?;
        if alloc.config_hash != config.config_hash() {
            return Err(RlError::InvalidConfig("allocation net belongs to a different airframe".into()));
        }
        let wrench_box = compute_wrench_box(config).map_err(|e| RlError::InvalidConfig(e.to_string()))?;
        // Level hover first; airframes with tilted rotors fall back to a tilted hover.
        let mut feas = feasibility_check(config, &FeasibilityOptions::default());
        if !feas.is_feasible() {
            feas = feasibility_check(config, &FeasibilityOptions { free_attitude: true, ..FeasibilityOptions::default() });
        }
        let hover = feas
            .hover_thrusts()
            .ok_or_else(|| RlError::InvalidConfig(format!("airframe is not feasible: {feas:?}")))?
            .to_vec();
        Ok(Self {
            config: config.clone(),
            vehicle: VehicleModel::new(config),
            wrench_box,
            alloc,
            sim,
            reward: RewardConfig::new(reward_mode, hover),
            init,
            target: Vector3::zeros(),
        })
    }

    pub fn motor_count(&self) -> usize {
        self.vehicle.motor_count()
    }

    /// Thrusts for a batch of normalized commands. `noise` adds zero-mean Gaussian
    /// perturbations of the given std to the normalized allocation output.
    fn thrusts<R: Rng + ?Sized>(
        &self,
        actions: ArrayView2<f64>,
        noise: f64,
        rng: &mut R,
    ) -> Result<Array2<f64>, RlError> {
        if noise <= 0.0 {
            return Ok(self.alloc.thrusts(actions)?);
        }
        let (lo, hi) = (self.alloc.u_min, self.alloc.u_max);
        let normal = Normal::new(0.0, noise).map_err(|e| RlError::InvalidConfig(e.to_string()))?;
        let y = self.alloc.normalized(actions)?;
        Ok(y.mapv(|y| (lo + (y + normal.sample(rng)) * (hi - lo)).clamp(lo, hi)))
    }
}

/// On-policy samples, stored step-major: row `t·n_envs + i` is environment `i` at step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub n_envs: usize,
    pub steps: usize,
    pub obs: Array2<f64>,
    pub next_obs: Array2<f64>,
    /// Pre-squash actions.
    pub raw_actions: Array2<f64>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    /// False once the environment has crashed; such rows carry no data.
    pub alive: Vec<bool>,
    /// The step on which the environment crashed.
    pub terminal: Vec<bool>,
    /// Critic values of the final observations, for bootstrapping unfinished episodes.
    pub last_values: Vec<f64>,
    /// Accumulated reward of each environment's episode.
    pub episode_returns: Vec<f64>,
    pub interactions: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn mean_return(&self) -> f64 {
        if self.episode_returns.is_empty() {
            0.0
        } else {
            self.episode_returns.iter().sum::<f64>() / self.episode_returns.len() as f64
        }
    }
}

fn obs_matrix<R: Rng + ?Sized>(states: &[RigidBodyState], env: &Environment, rng: &mut R) -> Array2<f64> {
    let mut m = Array2::zeros((states.len(), OBS_DIM));
    for (i, s) in states.iter().enumerate() {
        let o = observe(s, &env.target, &env.sim, rng);
        m.row_mut(i).iter_mut().zip(o).for_each(|(d, v)| *d = v);
    }
    m
}

/// Steps alive environments and returns the rewards; crashed environments earn 0 on
/// the crash step and are marked dead.
fn advance(
    env: &Environment,
    states: &mut [RigidBodyState],
    alive: &mut [bool],
    thrusts: &Array2<f64>,
) -> Result<(Vec<f64>, Vec<bool>), RlError> {
    let n = states.len();
    let mut rewards = vec![0.0; n];
    let mut crashed = vec![false; n];
    for i in 0..n {
        if !alive[i] {
            continue;
        }
        let u = thrusts.row(i);
        let u = u.as_slice().expect("standard layout");
        let hit = step_in_place(&mut states[i], u, &env.vehicle, &env.sim).map_err(|e| match e {
            crate::sim::SimError::NonFiniteState(_) => crate::sim::SimError::NonFiniteState(i),
            other => other,
        })?;
        if hit {
            crashed[i] = true;
            alive[i] = false;
        } else {
            rewards[i] = compute_reward(&states[i], &env.target, &states[i].motor_thrusts, &env.reward);
        }
    }
    Ok((rewards, crashed))
}

/// Collects `steps` transitions from `n_envs` fresh episodes with the stochastic policy.
/// Charges `n_envs × steps` interactions to `meter`.
pub fn rollout<R: Rng + ?Sized>(
    policy: &PolicyPair,
    env: &Environment,
    n_envs: usize,
    steps: usize,
    rng: &mut R,
    meter: &mut InteractionMeter,
) -> Result<Trajectory, RlError> {
    let n_m = env.motor_count();
    let rows = n_envs * steps;
    let mut traj = Trajectory {
        n_envs,
        steps,
        obs: Array2::zeros((rows, OBS_DIM)),
        next_obs: Array2::zeros((rows, OBS_DIM)),
        raw_actions: Array2::zeros((rows, ACTION_DIM)),
        log_probs: vec![0.0; rows],
        rewards: vec![0.0; rows],
        values: vec![0.0; rows],
        alive: vec![false; rows],
        terminal: vec![false; rows],
        last_values: vec![0.0; n_envs],
        episode_returns: vec![0.0; n_envs],
        interactions: rows as u64,
    };
    if rows == 0 {
        return Ok(traj);
    }
    let mut states: Vec<RigidBodyState> = (0..n_envs).map(|_| sample_initial_state(rng, &env.init, n_m)).collect();
    let mut alive = vec![true; n_envs];
    let mut obs = obs_matrix(&states, env, rng);
    let std: Vec<f64> = policy.log_std.iter().map(|l| l.exp()).collect();

    for t in 0..steps {
        let mu = policy.actor.forward_raw(obs.view())?;
        let values = policy.critic.forward(obs.view())?;
        let mut actions = Array2::zeros((n_envs, ACTION_DIM));
        for i in 0..n_envs {
            let row = t * n_envs + i;
            if !alive[i] {
                continue;
            }
            let mu_i = mu.row(i);
            let mut x = [0.0; ACTION_DIM];
            for j in 0..ACTION_DIM {
                let eps: f64 = StandardNormal.sample(rng);
                x[j] = mu_i[j] + std[j] * eps;
                actions[(i, j)] = x[j].tanh();
                traj.raw_actions[(row, j)] = x[j];
            }
            traj.log_probs[row] = gaussian_log_prob(&x, mu_i.as_slice().expect("row"), &policy.log_std);
            traj.values[row] = values[(i, 0)];
            traj.alive[row] = true;
            traj.obs.row_mut(row).assign(&obs.row(i));
        }
        let thrusts = env.thrusts(actions.view(), 0.0, rng)?;
        let (rewards, crashed) = advance(env, &mut states, &mut alive, &thrusts)?;
        let next = obs_matrix(&states, env, rng);
        for i in 0..n_envs {
            let row = t * n_envs + i;
            if !traj.alive[row] {
                continue;
            }
            traj.rewards[row] = rewards[i];
            traj.terminal[row] = crashed[i];
            traj.episode_returns[i] += rewards[i];
            traj.next_obs.row_mut(row).assign(&next.row(i));
        }
        obs = next;
    }
    let last = policy.critic.forward(obs.view())?;
    for i in 0..n_envs {
        traj.last_values[i] = if alive[i] { last[(i, 0)] } else { 0.0 };
    }
    meter.charge(traj.interactions);
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub n_envs: usize,
    pub steps: usize,
    pub seed: u64,
    /// Std of Gaussian noise added to the normalized allocation output.
    pub allocation_noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean over environments of the accumulated reward.
    pub mean_return: f64,
    /// Mean ‖p_e‖ over all steps of surviving environments.
    pub mean_position_error: f64,
    /// Mean ‖p_e‖ over the last quarter of the episode, surviving environments only.
    pub steady_state_position_error: f64,
    pub crashes: usize,
    pub interactions: u64,
}

/// Deterministic mean-action episodes from a seeded batch of initial states.
/// Every call with the same seed starts from the same states, so different
/// policies are compared on common random numbers.
pub fn evaluate_detailed(
    policy: &PolicyPair,
    env: &Environment,
    options: &EvalOptions,
    meter: &mut InteractionMeter,
) -> Result<EvalReport, RlError> {
    let n = options.n_envs;
    let steps = options.steps;
    let interactions = (n * steps) as u64;
    meter.charge(interactions);
    if n == 0 || steps == 0 {
        return Ok(EvalReport {
            mean_return: 0.0,
            mean_position_error: 0.0,
            steady_state_position_error: 0.0,
            crashes: 0,
            interactions,
        });
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut states: Vec<RigidBodyState> =
        (0..n).map(|_| sample_initial_state(&mut init_rng, &env.init, env.motor_count())).collect();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(options.seed ^ 0x5eed_0f_0b5e_7a7e);
    let mut alive = vec![true; n];
    let mut returns = vec![0.0; n];
    let mut err_sum = vec![0.0; n];
    let mut tail_sum = vec![0.0; n];
    let tail_start = steps - steps.div_ceil(4);
    for t in 0..steps {
        let obs = obs_matrix(&states, env, &mut noise_rng);
        let actions = policy.mean_action(obs.view())?;
        let thrusts = env.thrusts(actions.view(), options.allocation_noise_std, &mut noise_rng)?;
        let (rewards, _) = advance(env, &mut states, &mut alive, &thrusts)?;
        for i in 0..n {
            returns[i] += rewards[i];
            let e = (env.target - states[i].p).norm();
            err_sum[i] += e;
            if t >= tail_start {
                tail_sum[i] += e;
            }
        }
    }
    let survivors: Vec<usize> = (0..n).filter(|&i| alive[i]).collect();
    let mean_over = |v: &[f64], denom: f64| {
        if survivors.is_empty() {
            f64::INFINITY
        } else {
            survivors.iter().map(|&i| v[i] / denom).sum::<f64>() / survivors.len() as f64
        }
    };
    Ok(EvalReport {
        mean_return: returns.iter().sum::<f64>() / n as f64,
        mean_position_error: mean_over(&err_sum, steps as f64),
        steady_state_position_error: mean_over(&tail_sum, (steps - tail_start) as f64),
        crashes: n - survivors.len(),
        interactions,
    })
}

/// Mean accumulated reward of deterministic episodes; charges `n_envs × steps` interactions.
pub fn evaluate_policy(
    policy: &PolicyPair,
    env: &Environment,
    n_envs: usize,
    steps: usize,
    seed: u64,
    meter: &mut InteractionMeter,
) -> Result<f64, RlError> {
    let options = EvalOptions { n_envs, steps, seed, allocation_noise_std: 0.0 };
    Ok(evaluate_detailed(policy, env, &options, meter)?.mean_return)
}
