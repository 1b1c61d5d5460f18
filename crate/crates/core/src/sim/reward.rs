use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::RigidBodyState;

/// One exponential kernel term `a·exp(−b·h²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub a: f64,
    pub b: f64,
}

impl Kernel {
    pub fn eval(&self, h: f64) -> f64 {
        self.a * (-self.b * h * h).exp()
    }

    fn sum(&self, hs: impl IntoIterator<Item = f64>) -> f64 {
        hs.into_iter().map(|h| self.eval(h)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Full,
    PositionOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub position: Kernel,
    pub velocity: Kernel,
    pub body_rate: Kernel,
    pub thrust: Kernel,
    pub up: Kernel,
    pub forward: Kernel,
    pub mode: RewardMode,
    pub hover_thrusts: Vec<f64>,
}

impl RewardConfig {
    pub fn new(mode: RewardMode, hover_thrusts: Vec<f64>) -> Self {
        Self {
            position: Kernel { a: 1.0, b: 2.0 },
            velocity: Kernel { a: 1.0, b: 0.3 },
            body_rate: Kernel { a: 1.0, b: 0.3 },
            thrust: Kernel { a: 0.25, b: 8.0 },
            up: Kernel { a: 1.0, b: 5.0 },
            forward: Kernel { a: 1.0, b: 5.0 },
            mode,
            hover_thrusts,
        }
    }

    pub fn validate(&self) -> bool {
        [self.position, self.velocity, self.body_rate, self.thrust, self.up, self.forward].iter().all(|k| k.b > 0.0)
    }
}

/// Reward with every kernel at its peak.
pub fn max_reward(config: &RewardConfig) -> f64 {
    let r_p = 3.0 * config.position.a;
    match config.mode {
        RewardMode::PositionOnly => r_p,
        RewardMode::Full => {
            let r_v = 3.0 * config.velocity.a;
            let r_w = 3.0 * config.body_rate.a;
            let r_u = config.hover_thrusts.len() as f64 * config.thrust.a;
            r_p * (config.forward.a + r_v + r_w) + r_p + r_v + config.up.a + r_u
        }
    }
}

/// Exponential-kernel tracking reward for hovering at `target`.
pub fn compute_reward(state: &RigidBodyState, target: &Vector3<f64>, thrusts: &[f64], config: &RewardConfig) -> f64 {
    let e = target - state.p;
    let r_p = config.position.sum(e.iter().copied());
    if config.mode == RewardMode::PositionOnly {
        return r_p;
    }
    let r_v = config.velocity.sum(state.v.iter().copied());
    let r_w = config.body_rate.sum(state.omega.iter().copied());
    let r_u = config.thrust.sum(thrusts.iter().zip(&config.hover_thrusts).map(|(u, h)| u - h));
    let h_up = 1.0 - (state.q * Vector3::z()).z;
    let h_forw = 1.0 - (state.q * Vector3::x()).x;
    let r_up = config.up.eval(h_up);
    let r_forw = config.forward.eval(h_forw);
    r_p * (r_forw + r_v + r_w) + r_p + r_v + r_up + r_u
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;

    #[test]
    fn perfect_hover_is_the_peak() {
        let hover = vec![1.2; 4];
        let config = RewardConfig::new(RewardMode::Full, hover.clone());
        let s = RigidBodyState::at_rest(4);
        let r = compute_reward(&s, &Vector3::zeros(), &hover, &config);
        // r_p = 3, r_v = 3, r_Ω = 3, r_up = r_forw = 1, r_u = 4·0.25.
        assert!((r - (3.0 * (1.0 + 3.0 + 3.0) + 3.0 + 3.0 + 1.0 + 1.0)).abs() < 1e-12);
        assert!((r - max_reward(&config)).abs() < 1e-12);
    }

    #[test]
    fn position_only_at_target() {
        let config = RewardConfig::new(RewardMode::PositionOnly, vec![1.0; 4]);
        let mut s = RigidBodyState::at_rest(4);
        s.v = Vector3::new(3.0, 1.0, 0.0);
        assert_eq!(compute_reward(&s, &Vector3::zeros(), &[0.0; 4], &config), 3.0);
    }

    #[test]
    fn upside_down_has_maximal_up_error() {
        let config = RewardConfig::new(RewardMode::Full, vec![0.0; 4]);
        let mut s = RigidBodyState::at_rest(4);
        s.q = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI);
        let upright = compute_reward(&RigidBodyState::at_rest(4), &Vector3::zeros(), &[0.0; 4], &config);
        let flipped = compute_reward(&s, &Vector3::zeros(), &[0.0; 4], &config);
        // Only r_up changes: exp(-5·2²) instead of 1.
        assert!((upright - flipped - (1.0 - (-20.0f64).exp())).abs() < 1e-12);
    }
}
