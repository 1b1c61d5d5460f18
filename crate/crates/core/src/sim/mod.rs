//! Batched rigid-body multirotor simulation, observations, rewards and initial-state sampling.

mod reward;
mod trajectory;

pub use reward::{compute_reward, max_reward, Kernel, RewardConfig, RewardMode};
pub use trajectory::{TrajectoryRow, TrajectoryWriter};

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::airframe::{build_allocation_matrix, point_mass_inertia, AirframeConfig, AllocationMatrix, GRAVITY};

pub const OBS_DIM: usize = 15;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("non-finite state in environment {0}")]
    NonFiniteState(usize),
    #[error("expected {expected} thrust commands, got {got}")]
    CommandShape { expected: usize, got: usize },
    #[error("invalid simulation parameter: {0}")]
    InvalidParams(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fidelity {
    /// Ideal motors, noise-free observations.
    Low,
    /// First-order motor lag and Gaussian observation noise.
    High,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    pub dt: f64,
    pub fidelity: Fidelity,
    pub motor_time_constant: f64,
    pub sensor_noise_std: [f64; OBS_DIM],
    pub gravity: [f64; 3],
    pub episode_length: usize,
    pub crash_position_bound: f64,
    pub crash_tilt_bound: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            dt: 0.01,
            fidelity: Fidelity::Low,
            motor_time_constant: 0.03,
            sensor_noise_std: [0.01, 0.01, 0.01, 0.02, 0.02, 0.02, 0.005, 0.005, 0.005, 0.005, 0.005, 0.005, 0.02, 0.02, 0.02],
            gravity: [0.0, 0.0, -GRAVITY],
            episode_length: 200,
            crash_position_bound: 5.0,
            crash_tilt_bound: 85f64.to_radians(),
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0) {
            return Err(SimError::InvalidParams("dt must be positive"));
        }
        if self.episode_length == 0 {
            return Err(SimError::InvalidParams("episode_length must be at least 1"));
        }
        if self.fidelity == Fidelity::High && !(self.motor_time_constant > 0.0) {
            return Err(SimError::InvalidParams("motor_time_constant must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigidBodyState {
    /// World position.
    pub p: Vector3<f64>,
    /// World velocity.
    pub v: Vector3<f64>,
    /// Attitude, body to world.
    pub q: UnitQuaternion<f64>,
    /// Body rates.
    pub omega: Vector3<f64>,
    /// Thrust currently produced by each motor.
    pub motor_thrusts: Vec<f64>,
}

impl RigidBodyState {
    pub fn at_rest(n_m: usize) -> Self {
        Self {
            p: Vector3::zeros(),
            v: Vector3::zeros(),
            q: UnitQuaternion::identity(),
            omega: Vector3::zeros(),
            motor_thrusts: vec![0.0; n_m],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.v.iter()).chain(self.omega.iter()).chain(self.q.coords.iter()).all(|x| x.is_finite())
            && self.motor_thrusts.iter().all(|x| x.is_finite())
    }

    /// Angle between body z and world z.
    pub fn tilt(&self) -> f64 {
        let z = self.q * Vector3::z();
        z.z.clamp(-1.0, 1.0).acos()
    }
}

/// The physical quantities of one airframe that the integrator needs.
#[derive(Debug, Clone)]
pub struct VehicleModel {
    pub allocation: AllocationMatrix,
    pub mass: f64,
    pub inertia: Matrix3<f64>,
    pub inertia_inv: Matrix3<f64>,
    pub u_min: f64,
    pub u_max: f64,
}

impl VehicleModel {
    pub fn new(config: &AirframeConfig) -> Self {
        let inertia = point_mass_inertia(config);
        let inertia_inv = inertia.try_inverse().expect("airframe inertia is positive definite");
        let (u_min, u_max) = config.thrust_bounds();
        Self { allocation: build_allocation_matrix(config), mass: config.mass(), inertia, inertia_inv, u_min, u_max }
    }

    pub fn motor_count(&self) -> usize {
        self.allocation.motor_count()
    }
}

/// Advances `state` by one step in place and reports whether it crashed.
///
/// Semi-implicit Euler: velocities and rates are updated from the current
/// accelerations first, then position and attitude use the new values.
pub fn step_in_place(
    state: &mut RigidBodyState,
    thrust_commands: &[f64],
    model: &VehicleModel,
    params: &SimParams,
) -> Result<bool, SimError> {
    let n_m = model.motor_count();
    if thrust_commands.len() != n_m {
        return Err(SimError::CommandShape { expected: n_m, got: thrust_commands.len() });
    }
    let dt = params.dt;
    match params.fidelity {
        Fidelity::Low => {
            for (u, c) in state.motor_thrusts.iter_mut().zip(thrust_commands) {
                *u = c.clamp(model.u_min, model.u_max);
            }
        }
        Fidelity::High => {
            let k = (dt / params.motor_time_constant).min(1.0);
            for (u, c) in state.motor_thrusts.iter_mut().zip(thrust_commands) {
                *u += k * (c.clamp(model.u_min, model.u_max) - *u);
            }
        }
    }
    let wrench = model.allocation.apply(&state.motor_thrusts);
    let force = Vector3::new(wrench[0], wrench[1], wrench[2]);
    let torque = Vector3::new(wrench[3], wrench[4], wrench[5]);

    let g = Vector3::from(params.gravity);
    let accel = state.q * force / model.mass + g;
    let omega_dot = model.inertia_inv * (torque - state.omega.cross(&(model.inertia * state.omega)));
    state.v += accel * dt;
    state.omega += omega_dot * dt;
    state.p += state.v * dt;

    let w = state.omega;
    let dq = state.q.quaternion() * Quaternion::new(0.0, w.x, w.y, w.z) * (0.5 * dt);
    state.q = UnitQuaternion::new_normalize(state.q.quaternion() + dq);

    if !state.is_finite() {
        return Err(SimError::NonFiniteState(0));
    }
    Ok(state.p.norm() > params.crash_position_bound || state.tilt() > params.crash_tilt_bound)
}

/// Pure single-environment step.
pub fn step(
    state: &RigidBodyState,
    thrust_commands: &[f64],
    model: &VehicleModel,
    params: &SimParams,
) -> Result<(RigidBodyState, bool), SimError> {
    let mut next = state.clone();
    let crashed = step_in_place(&mut next, thrust_commands, model, params)?;
    Ok((next, crashed))
}

/// Steps every environment; `commands` holds one row of `n_m` thrusts per state.
/// Environments are independent, so the result does not depend on how a batch is split.
pub fn step_batch(
    states: &mut [RigidBodyState],
    commands: &[f64],
    model: &VehicleModel,
    params: &SimParams,
) -> Result<Vec<bool>, SimError> {
    let n_m = model.motor_count();
    if commands.len() != states.len() * n_m {
        return Err(SimError::CommandShape { expected: states.len() * n_m, got: commands.len() });
    }
    states
        .iter_mut()
        .zip(commands.chunks(n_m))
        .enumerate()
        .map(|(i, (s, c))| {
            step_in_place(s, c, model, params).map_err(|e| match e {
                SimError::NonFiniteState(_) => SimError::NonFiniteState(i),
                other => other,
            })
        })
        .collect()
}

/// Noise-free observation `[target − p, v, first two columns of R, ω]`.
pub fn observe_clean(state: &RigidBodyState, target: &Vector3<f64>) -> [f64; OBS_DIM] {
    let r = state.q.to_rotation_matrix();
    let r = r.matrix();
    let e = target - state.p;
    [
        e.x,
        e.y,
        e.z,
        state.v.x,
        state.v.y,
        state.v.z,
        r[(0, 0)],
        r[(1, 0)],
        r[(2, 0)],
        r[(0, 1)],
        r[(1, 1)],
        r[(2, 1)],
        state.omega.x,
        state.omega.y,
        state.omega.z,
    ]
}

/// Observation as the policy sees it; high fidelity adds per-channel Gaussian noise.
pub fn observe<R: Rng + ?Sized>(
    state: &RigidBodyState,
    target: &Vector3<f64>,
    params: &SimParams,
    rng: &mut R,
) -> [f64; OBS_DIM] {
    let mut o = observe_clean(state, target);
    if params.fidelity == Fidelity::High {
        for (x, &sd) in o.iter_mut().zip(&params.sensor_noise_std) {
            if sd > 0.0 {
                *x += Normal::new(0.0, sd).expect("finite std").sample(rng);
            }
        }
    }
    o
}

/// Ranges for the initial-state distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitBounds {
    pub position: f64,
    pub velocity: f64,
    pub max_tilt: f64,
    pub body_rate: f64,
    pub random_yaw: bool,
}

impl Default for InitBounds {
    fn default() -> Self {
        Self { position: 1.0, velocity: 0.3, max_tilt: 20f64.to_radians(), body_rate: 0.3, random_yaw: true }
    }
}

impl InitBounds {
    pub fn zero() -> Self {
        Self { position: 0.0, velocity: 0.0, max_tilt: 0.0, body_rate: 0.0, random_yaw: false }
    }
}

fn sym<R: Rng + ?Sized>(rng: &mut R, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.random_range(-bound..=bound)
    } else {
        0.0
    }
}

/// Uniform position, velocity and rate boxes; tilt uniform up to `max_tilt` about a
/// uniformly oriented horizontal axis, followed by a uniform yaw.
pub fn sample_initial_state<R: Rng + ?Sized>(rng: &mut R, bounds: &InitBounds, n_m: usize) -> RigidBodyState {
    let p = Vector3::new(sym(rng, bounds.position), sym(rng, bounds.position), sym(rng, bounds.position));
    let v = Vector3::new(sym(rng, bounds.velocity), sym(rng, bounds.velocity), sym(rng, bounds.velocity));
    let tilt_axis_angle = rng.random_range(0.0..std::f64::consts::TAU);
    let tilt = if bounds.max_tilt > 0.0 { rng.random_range(0.0..=bounds.max_tilt) } else { 0.0 };
    let yaw = if bounds.random_yaw { rng.random_range(-std::f64::consts::PI..std::f64::consts::PI) } else { 0.0 };
    let omega = Vector3::new(sym(rng, bounds.body_rate), sym(rng, bounds.body_rate), sym(rng, bounds.body_rate));
    let axis = nalgebra::Unit::new_normalize(Vector3::new(tilt_axis_angle.cos(), tilt_axis_angle.sin(), 0.0));
    let q = UnitQuaternion::from_axis_angle(&axis, tilt) * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw);
    RigidBodyState { p, v, q, omega, motor_thrusts: vec![0.0; n_m] }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::airframe::PhysicalParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quad() -> (AirframeConfig, VehicleModel) {
        let config = AirframeConfig::standard(4, 0.2, PhysicalParams::default()).unwrap();
        let model = VehicleModel::new(&config);
        (config, model)
    }

    #[test]
    fn hover_is_an_equilibrium() {
        let (config, model) = quad();
        let u = vec![config.mass() * GRAVITY / 4.0; 4];
        let mut s = RigidBodyState::at_rest(4);
        let params = SimParams::default();
        for _ in 0..500 {
            assert!(!step_in_place(&mut s, &u, &model, &params).unwrap());
        }
        // Rounding in the rotor layout leaves torques of order 1e-17.
        assert!(s.p.norm() < 1e-9 && s.v.norm() < 1e-9 && s.omega.norm() < 1e-9, "{s:?}");
        assert!((s.q.quaternion().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_rate_keeps_attitude() {
        let (_, model) = quad();
        let mut s = RigidBodyState::at_rest(4);
        s.q = UnitQuaternion::from_euler_angles(0.1, -0.2, 0.3);
        let q0 = s.q;
        step_in_place(&mut s, &[0.0; 4], &model, &SimParams::default()).unwrap();
        assert!(s.q.angle_to(&q0) < 1e-15);
    }

    #[test]
    fn free_fall_matches_discrete_sum() {
        let (_, model) = quad();
        let params = SimParams { crash_position_bound: 1e9, ..Default::default() };
        let mut s = RigidBodyState::at_rest(4);
        s.v.z = 1.5;
        let (mut vz, mut pz) = (1.5, 0.0);
        for k in 1..=200 {
            step_in_place(&mut s, &[0.0; 4], &model, &params).unwrap();
            vz -= GRAVITY * params.dt;
            pz += vz * params.dt;
            assert!((s.v.z - (1.5 - GRAVITY * params.dt * k as f64)).abs() < 1e-12);
            assert!((s.p.z - pz).abs() < 1e-12);
        }
    }

    #[test]
    fn observation_layout() {
        let mut s = RigidBodyState::at_rest(4);
        let o = observe_clean(&s, &Vector3::zeros());
        assert_eq!(&o[6..12], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!(o[..6].iter().chain(&o[12..]).all(|&x| x == 0.0));
        s.q = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2);
        let o = observe_clean(&s, &Vector3::zeros());
        let expected = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0];
        for (a, b) in o[6..12].iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn crash_detection() {
        let (_, model) = quad();
        let params = SimParams::default();
        let mut s = RigidBodyState::at_rest(4);
        s.p.x = 6.0;
        assert!(step_in_place(&mut s, &[0.0; 4], &model, &params).unwrap());
        let mut s = RigidBodyState::at_rest(4);
        s.q = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), 1.6);
        assert!(step_in_place(&mut s, &[0.0; 4], &model, &params).unwrap());
    }

    #[test]
    fn non_finite_state_is_reported() {
        let (_, model) = quad();
        let mut states = vec![RigidBodyState::at_rest(4), RigidBodyState::at_rest(4)];
        states[1].v.x = f64::NAN;
        let err = step_batch(&mut states, &[0.0; 8], &model, &SimParams::default()).unwrap_err();
        assert_eq!(err, SimError::NonFiniteState(1));
    }

    #[test]
    fn initial_state_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sample_initial_state(&mut rng, &InitBounds::zero(), 4);
        assert_eq!(s, RigidBodyState::at_rest(4));
        let a = sample_initial_state(&mut ChaCha8Rng::seed_from_u64(9), &InitBounds::default(), 4);
        let b = sample_initial_state(&mut ChaCha8Rng::seed_from_u64(9), &InitBounds::default(), 4);
        assert_eq!(a, b);
        let mut mean = Vector3::zeros();
        for _ in 0..10_000 {
            let s = sample_initial_state(&mut rng, &InitBounds::default(), 4);
            assert!(s.tilt() <= 20f64.to_radians() + 1e-12);
            mean += s.p;
        }
        // σ of U(-1,1) is 0.577, so the mean of 10⁴ draws has σ ≈ 5.8e-3.
        assert!((mean / 10_000.0).amax() <= 0.05);
    }

    #[test]
    fn high_fidelity_motor_lag() {
        let (_, model) = quad();
        let params = SimParams { fidelity: Fidelity::High, motor_time_constant: 0.05, ..Default::default() };
        let mut s = RigidBodyState::at_rest(4);
        step_in_place(&mut s, &[2.0; 4], &model, &params).unwrap();
        assert!((s.motor_thrusts[0] - 2.0 * 0.2).abs() < 1e-15);
        let mut noisy = ChaCha8Rng::seed_from_u64(1);
        let o = observe(&s, &Vector3::zeros(), &params, &mut noisy);
        assert_ne!(o, observe_clean(&s, &Vector3::zeros()));
    }
}
