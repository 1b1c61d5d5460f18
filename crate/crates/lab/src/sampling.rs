//! Random airframe generation around the standard planar layouts.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use rotorlab::airframe::{
    feasibility_check, nominal_azimuths, nominal_spin, AirframeConfig, FeasibilityOptions, PhysicalParams, RotorSpec,
};

use crate::LabError;

pub const MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingSpec {
    pub motor_count: usize,
    /// Arm length bounds, m.
    pub l_min: f64,
    pub l_max: f64,
    /// Half-angle of the cone around each nominal arm direction, rad.
    pub cone_angle: f64,
    /// Largest angle between a rotor axis and the body z-axis, rad.
    pub max_tilt: f64,
    /// Radius of the ball neighbors' rotor positions are drawn from, m.
    pub neighbor_pos_dev: f64,
    /// Largest extra rotation applied to neighbors' rotors, rad.
    pub neighbor_ang_dev: f64,
    #[serde(default)]
    pub params: PhysicalParams,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        Self {
            motor_count: 4,
            l_min: 0.1,
            l_max: 0.35,
            cone_angle: 60f64.to_radians(),
            max_tilt: 20f64.to_radians(),
            neighbor_pos_dev: 0.05,
            neighbor_ang_dev: 5f64.to_radians(),
            params: PhysicalParams::default(),
        }
    }
}

impl SamplingSpec {
    pub fn validate(&self) -> Result<(), LabError> {
        let angle_ok = |a: f64| (0.0..std::f64::consts::FRAC_PI_2).contains(&a);
        if self.motor_count != 4 && self.motor_count != 6 {
            return Err(LabError::Validation(format!("motor_count must be 4 or 6, got {}", self.motor_count)));
        }
        if !(self.l_min > 0.0 && self.l_min <= self.l_max && self.l_max.is_finite()) {
            return Err(LabError::Validation("arm lengths need 0 < l_min <= l_max".into()));
        }
        if !angle_ok(self.cone_angle) || !angle_ok(self.max_tilt) || !angle_ok(self.neighbor_ang_dev) {
            return Err(LabError::Validation("angles must lie in [0, π/2)".into()));
        }
        if !(self.neighbor_pos_dev >= 0.0 && self.neighbor_pos_dev.is_finite()) {
            return Err(LabError::Validation("neighbor_pos_dev must be non-negative".into()));
        }
        Ok(())
    }
}

/// Uniform direction on the spherical cap of half-angle `angle` around `axis`.
fn direction_in_cone<R: Rng + ?Sized>(rng: &mut R, axis: &Vector3<f64>, angle: f64) -> Vector3<f64> {
    let cos_t = 1.0 - rng.random::<f64>() * (1.0 - angle.cos());
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi = rng.random::<f64>() * std::f64::consts::TAU;
    let a = axis.normalize();
    let helper = if a.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
    let u = a.cross(&helper).normalize();
    let v = a.cross(&u);
    a * cos_t + (u * phi.cos() + v * phi.sin()) * sin_t
}

fn uniform_unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    direction_in_cone(rng, &Vector3::z(), std::f64::consts::PI)
}

fn rotation(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).matrix()
}

/// Screening options: sampled airframes may hover at a tilted attitude.
pub fn hover_options() -> FeasibilityOptions {
    FeasibilityOptions { free_attitude: true, ..FeasibilityOptions::default() }
}

fn is_feasible(config: &AirframeConfig) -> bool {
    feasibility_check(config, &hover_options()).is_feasible()
}

fn draw_config<R: Rng + ?Sized>(spec: &SamplingSpec, rng: &mut R) -> Result<AirframeConfig, LabError> {
    let rotors = nominal_azimuths(spec.motor_count)
        .into_iter()
        .enumerate()
        .map(|(i, az)| {
            let nominal = Vector3::new(az.cos(), az.sin(), 0.0);
            let length = rng.random_range(spec.l_min..=spec.l_max);
            let position = direction_in_cone(rng, &nominal, spec.cone_angle) * length;
            let tilt_az = rng.random::<f64>() * std::f64::consts::TAU;
            let tilt = rng.random::<f64>() * spec.max_tilt;
            let orientation = rotation(Vector3::new(tilt_az.cos(), tilt_az.sin(), 0.0), tilt);
            RotorSpec::new(position, orientation, nominal_spin(i))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AirframeConfig::new(rotors, spec.params.clone())?)
}

/// One random feasible airframe. Infeasible draws are discarded and redrawn.
pub fn sample_config<R: Rng + ?Sized>(spec: &SamplingSpec, rng: &mut R) -> Result<AirframeConfig, LabError> {
    spec.validate()?;
    for _ in 0..MAX_ATTEMPTS {
        let config = draw_config(spec, rng)?;
        if is_feasible(&config) {
            return Ok(config);
        }
    }
    Err(LabError::SamplingExhausted(MAX_ATTEMPTS))
}

/// Perturbs each rotor of `base` within the neighbor deviations.
pub fn sample_neighbor<R: Rng + ?Sized>(
    base: &AirframeConfig,
    spec: &SamplingSpec,
    rng: &mut R,
) -> Result<AirframeConfig, LabError> {
    spec.validate()?;
    for _ in 0..MAX_ATTEMPTS {
        let rotors = base
            .rotors()
            .iter()
            .map(|r| {
                let offset = uniform_unit_vector(rng) * spec.neighbor_pos_dev * rng.random::<f64>().cbrt();
                let turn = rotation(uniform_unit_vector(rng), rng.random::<f64>() * spec.neighbor_ang_dev);
                RotorSpec::new(r.position() + offset, turn * r.orientation(), r.spin())
            })
            .collect::<Result<Vec<_>, _>>()?;
        let config = base.with_rotors(rotors)?;
        if is_feasible(&config) {
            return Ok(config);
        }
    }
    Err(LabError::SamplingExhausted(MAX_ATTEMPTS))
}

pub fn sample_neighbors<R: Rng + ?Sized>(
    base: &AirframeConfig,
    k: usize,
    spec: &SamplingSpec,
    rng: &mut R,
) -> Result<Vec<AirframeConfig>, LabError> {
    (0..k).map(|_| sample_neighbor(base, spec, rng)).collect()
}

/// Angle between a rotor's thrust axis and the body z-axis.
pub fn rotor_tilt(r: &RotorSpec) -> f64 {
    r.thrust_axis().z.clamp(-1.0, 1.0).acos()
}
