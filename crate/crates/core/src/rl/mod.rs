//! PPO training of the wrench-level controller in closed loop with a frozen
//! allocation network.

mod env;
mod policy;
mod ppo;

pub use env::{evaluate_detailed, evaluate_policy, rollout, Environment, EvalOptions, EvalReport, Trajectory};
pub use policy::{gaussian_log_prob, squash_log_det, squashed_log_prob, PolicyPair, ACTION_DIM};
pub use ppo::{actor_objective, gae, gae_masked, ppo_update, train, ActorBatch, ActorLossTerms, UpdateStats};

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neural::NeuralError;
use crate::sim::SimError;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub n_envs: usize,
    /// Steps per rollout. Every rollout starts fresh episodes, so this is also the episode length.
    pub rollout_length: usize,
    pub value_coef: f64,
    /// Rewards are multiplied by this before advantage estimation, so critic targets stay small.
    pub reward_scale: f64,
    pub entropy_coef: f64,
    pub caps_temporal: f64,
    pub caps_spatial: f64,
    pub caps_sigma: f64,
    /// Gradients with a larger Euclidean norm are rescaled to it before each Adam step.
    pub max_grad_norm: Option<f64>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub initial_log_std: f64,
    pub max_interactions: u64,
    /// Stop once the moving average of rollout rewards reaches this.
    pub goal_reward: Option<f64>,
    pub goal_window: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatch_size: 256,
            n_envs: 64,
            rollout_length: 128,
            value_coef: 0.5,
            reward_scale: 0.1,
            entropy_coef: 1e-3,
            caps_temporal: 0.05,
            caps_spatial: 0.05,
            caps_sigma: 0.05,
            max_grad_norm: Some(0.5),
            actor_lr: 5e-4,
            critic_lr: 1e-3,
            initial_log_std: -1.0,
            max_interactions: 5_000_000,
            goal_reward: None,
            goal_window: 10,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::InvalidConfig(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if self.n_envs == 0 || self.minibatch_size == 0 || self.goal_window == 0 {
            return bad("n_envs, minibatch_size and goal_window must be positive");
        }
        if !(self.reward_scale > 0.0) {
            return bad("reward_scale must be positive");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        Ok(())
    }

    pub fn interactions_per_rollout(&self) -> u64 {
        (self.n_envs * self.rollout_length) as u64
    }
}

/// Running count of simulated environment steps, the currency of every savings figure.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionMeter {
    count: u64,
}

impl InteractionMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn charge(&mut self, n: u64) {
        self.count += n;
    }

    pub fn count(&self) -> u64 {
        self.count
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    GoalReached,
    BudgetExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Meter reading after the rollout, including any cost charged before training.
    pub interactions: u64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub points: Vec<CurvePoint>,
    pub seed: u64,
    pub wall_clock_seconds: f64,
    pub terminated_reason: TerminationReason,
    pub updates: usize,
}

impl TrainingCurve {
    pub fn final_reward(&self) -> Option<f64> {
        self.points.last().map(|p| p.reward)
    }

    /// Moving average over the last `window` points (or all of them, if fewer).
    pub fn moving_average(&self, upto: usize, window: usize) -> f64 {
        let end = upto + 1;
        let start = end.saturating_sub(window);
        let slice = &self.points[start..end];
        slice.iter().map(|p| p.reward).sum::<f64>() / slice.len() as f64
    }

    /// Interactions at the first point whose moving average reaches `goal`.
    pub fn interactions_to_goal(&self, goal: f64, window: usize) -> Option<u64> {
        (0..self.points.len()).find(|&i| self.moving_average(i, window) >= goal).map(|i| self.points[i].interactions)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["interactions", "reward"])?;
        for p in &self.points {
            w.write_record([p.interactions.to_string(), p.reward.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> csv::Result<Vec<CurvePoint>> {
        csv::Reader::from_reader(input).deserialize().collect()
    }
}
