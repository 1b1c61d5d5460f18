//! Parametric multirotor airframes and the physical quantities derived from them.
//!
//! An airframe is a list of rotors (position, orientation and spin direction in the
//! body frame) plus a shared set of physical constants. Everything the simulator,
//! the allocation pipeline and the similarity measures need is computed here: the
//! 6×n allocation matrix, the point-mass inertia, the corners of the admissible
//! wrench set and its principal-component bounding box.

mod feasibility;
mod wrench_box;

pub use feasibility::{feasibility_check, Feasibility, FeasibilityOptions};
pub use wrench_box::{compute_wrench_box, WrenchBox};

use nalgebra::{Matrix3, Matrix6xX, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Standard gravitational acceleration, m/s².
pub const GRAVITY: f64 = 9.81;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum AirframeError {
    #[error("unsupported rotor count {0}, expected 4 or 6")]
    RotorCount(usize),
    #[error("rotor {index}: orientation is not a proper rotation (error {error:.3e})")]
    NotARotation { index: usize, error: f64 },
    #[error("rotor {index}: spin direction must be +1 or -1, got {value}")]
    InvalidSpin { index: usize, value: i64 },
    #[error("invalid thrust bounds [{u_min}, {u_max}]")]
    ThrustBounds { u_min: f64, u_max: f64 },
    #[error("invalid physical parameter: {0}")]
    Parameter(&'static str),
    #[error("derived inertia is not positive definite")]
    Inertia,
    #[error("admissible wrench set is degenerate (all corners coincide)")]
    DegenerateSet,
    #[error("airframe json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("airframe io: {0}")]
    Io(#[from] std::io::Error),
}

/// Rotor spin direction, the sign `α` in the yaw-torque term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Spin {
    Ccw,
    Cw,
}

impl Spin {
    pub fn sign(self) -> f64 {
        match self {
            Spin::Ccw => 1.0,
            Spin::Cw => -1.0,
        }
    }

    pub fn from_sign(value: i64) -> Option<Self> {
        match value {
            1 => Some(Spin::Ccw),
            -1 => Some(Spin::Cw),
            _ => None,
        }
    }
}

/// A single rotor: where it sits, how it is tilted and which way it spins.
#[derive(Debug, Clone, PartialEq)]
pub struct RotorSpec {
    position: Vector3<f64>,
    orientation: Matrix3<f64>,
    spin: Spin,
}

impl RotorSpec {
    pub fn new(position: Vector3<f64>, orientation: Matrix3<f64>, spin: Spin) -> Result<Self, AirframeError> {
        let error = rotation_error(&orientation);
        if !(error <= ORTHONORMAL_TOL) || !position.iter().all(|x| x.is_finite()) {
            return Err(AirframeError::NotARotation { index: 0, error });
        }
        Ok(Self { position, orientation, spin })
    }

    pub fn position(&self) -> &Vector3<f64> {
        &self.position
    }

    pub fn orientation(&self) -> &Matrix3<f64> {
        &self.orientation
    }

    pub fn spin(&self) -> Spin {
        self.spin
    }

    /// Thrust axis in the body frame, `R z` with `z = e₃`.
    pub fn thrust_axis(&self) -> Vector3<f64> {
        self.orientation.column(2).into_owned()
    }
}

/// Max of `‖RᵀR − I‖∞` and `|det R − 1|`.
fn rotation_error(r: &Matrix3<f64>) -> f64 {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    ortho.max((r.determinant() - 1.0).abs())
}

/// Constants shared by every rotor of an airframe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParams {
    /// Total mass, kg.
    pub mass: f64,
    /// Thrust coefficient `u = c_t ω²`, N·s².
    pub c_t: f64,
    /// Torque-to-thrust ratio, m.
    pub c_q: f64,
    /// Per-motor thrust bounds, N.
    pub u_min: f64,
    pub u_max: f64,
    /// Mass of each motor for the point-mass inertia model, kg.
    pub motor_mass: f64,
    /// Central body inertia, kg·m², row-major.
    pub body_inertia: [f64; 9],
}

impl Default for PhysicalParams {
    /// A 500 g quadrotor-class vehicle with a thrust-to-weight ratio of about two.
    fn default() -> Self {
        Self {
            mass: 0.5,
            c_t: 1.0e-5,
            c_q: 0.016,
            u_min: 0.0,
            u_max: 2.5,
            motor_mass: 0.03,
            body_inertia: [2.0e-3, 0.0, 0.0, 0.0, 2.0e-3, 0.0, 0.0, 0.0, 3.0e-3],
        }
    }
}

impl PhysicalParams {
    pub fn body_inertia_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.body_inertia)
    }

    fn validate(&self) -> Result<(), AirframeError> {
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(AirframeError::Parameter("mass must be positive"));
        }
        if !(self.c_t > 0.0 && self.c_t.is_finite()) {
            return Err(AirframeError::Parameter("c_t must be positive"));
        }
        if !(self.c_q >= 0.0 && self.c_q.is_finite()) {
            return Err(AirframeError::Parameter("c_q must be non-negative"));
        }
        if !(self.motor_mass >= 0.0 && self.motor_mass.is_finite()) {
            return Err(AirframeError::Parameter("motor_mass must be non-negative"));
        }
        if !(self.u_min >= 0.0 && self.u_min < self.u_max && self.u_max.is_finite()) {
            return Err(AirframeError::ThrustBounds { u_min: self.u_min, u_max: self.u_max });
        }
        let j = self.body_inertia_matrix();
        if (j - j.transpose()).abs().max() > 1e-12 || !j.iter().all(|x| x.is_finite()) {
            return Err(AirframeError::Parameter("body_inertia must be symmetric"));
        }
        Ok(())
    }
}

/// A complete multirotor morphology.
#[derive(Debug, Clone, PartialEq)]
pub struct AirframeConfig {
    rotors: Vec<RotorSpec>,
    params: PhysicalParams,
}

impl AirframeConfig {
    pub fn new(rotors: Vec<RotorSpec>, params: PhysicalParams) -> Result<Self, AirframeError> {
        if rotors.len() != 4 && rotors.len() != 6 {
            return Err(AirframeError::RotorCount(rotors.len()));
        }
        params.validate()?;
        let config = Self { rotors, params };
        let j = point_mass_inertia(&config);
        if j.cholesky().is_none() {
            return Err(AirframeError::Inertia);
        }
        Ok(config)
    }

    /// The planar "X" layout with `n` rotors on arms of equal length, alternating spins.
    pub fn standard(n: usize, arm_length: f64, params: PhysicalParams) -> Result<Self, AirframeError> {
        let rotors = nominal_azimuths(n)
            .into_iter()
            .enumerate()
            .map(|(i, az)| RotorSpec {
                position: Vector3::new(arm_length * az.cos(), arm_length * az.sin(), 0.0),
                orientation: Matrix3::identity(),
                spin: nominal_spin(i),
            })
            .collect();
        Self::new(rotors, params)
    }

    pub fn rotors(&self) -> &[RotorSpec] {
        &self.rotors
    }

    pub fn params(&self) -> &PhysicalParams {
        &self.params
    }

    pub fn motor_count(&self) -> usize {
        self.rotors.len()
    }

    pub fn mass(&self) -> f64 {
        self.params.mass
    }

    pub fn thrust_bounds(&self) -> (f64, f64) {
        (self.params.u_min, self.params.u_max)
    }

    pub fn thrust_range(&self) -> f64 {
        self.params.u_max - self.params.u_min
    }

    /// Hover wrench at identity attitude.
    pub fn hover_wrench(&self) -> Vector6<f64> {
        Vector6::new(0.0, 0.0, self.params.mass * GRAVITY, 0.0, 0.0, 0.0)
    }

    /// Returns a copy with every rotor replaced, keeping the physical constants.
    pub fn with_rotors(&self, rotors: Vec<RotorSpec>) -> Result<Self, AirframeError> {
        Self::new(rotors, self.params.clone())
    }

    /// Content hash of the canonical JSON form, lowercase hex SHA-256.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(&AirframeJson::from(self)).expect("airframe json is infallible");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&AirframeJson::from(self)).expect("airframe json is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self, AirframeError> {
        let raw: AirframeJson = serde_json::from_str(text)?;
        raw.try_into()
    }

    pub fn load(path: &std::path::Path) -> Result<Self, AirframeError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Evenly spaced arm azimuths of the standard layout (X for quads, 0° first arm for hexes).
pub fn nominal_azimuths(n: usize) -> Vec<f64> {
    use std::f64::consts::PI;
    let offset = if n == 4 { PI / 4.0 } else { 0.0 };
    (0..n).map(|i| offset + 2.0 * PI * i as f64 / n as f64).collect()
}

/// Alternating spins, so that neighbouring rotors cancel yaw torque.
pub fn nominal_spin(index: usize) -> Spin {
    if index % 2 == 0 {
        Spin::Ccw
    } else {
        Spin::Cw
    }
}

/// JSON wire form of an airframe.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AirframeJson {
    pub rotors: Vec<RotorJson>,
    pub mass: f64,
    pub c_t: f64,
    pub c_q: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub motor_mass: f64,
    pub body_inertia: [f64; 9],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RotorJson {
    pub t: [f64; 3],
    /// Row-major rotation matrix.
    pub r: [f64; 9],
    pub alpha: i64,
}

impl From<&AirframeConfig> for AirframeJson {
    fn from(c: &AirframeConfig) -> Self {
        let rotors = c
            .rotors
            .iter()
            .map(|r| RotorJson {
                t: [r.position.x, r.position.y, r.position.z],
                r: row_major(&r.orientation),
                alpha: r.spin.sign() as i64,
            })
            .collect();
        let p = &c.params;
        Self {
            rotors,
            mass: p.mass,
            c_t: p.c_t,
            c_q: p.c_q,
            u_min: p.u_min,
            u_max: p.u_max,
            motor_mass: p.motor_mass,
            body_inertia: p.body_inertia,
        }
    }
}

impl TryFrom<AirframeJson> for AirframeConfig {
    type Error = AirframeError;

    fn try_from(raw: AirframeJson) -> Result<Self, Self::Error> {
        let rotors = raw
            .rotors
            .iter()
            .enumerate()
            .map(|(index, r)| {
                let spin = Spin::from_sign(r.alpha).ok_or(AirframeError::InvalidSpin { index, value: r.alpha })?;
                RotorSpec::new(Vector3::from(r.t), Matrix3::from_row_slice(&r.r), spin).map_err(|e| match e {
                    AirframeError::NotARotation { error, .. } => AirframeError::NotARotation { index, error },
                    other => other,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let params = PhysicalParams {
            mass: raw.mass,
            c_t: raw.c_t,
            c_q: raw.c_q,
            u_min: raw.u_min,
            u_max: raw.u_max,
            motor_mass: raw.motor_mass,
            body_inertia: raw.body_inertia,
        };
        AirframeConfig::new(rotors, params)
    }
}

pub(crate) fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = m[(r, c)];
        }
    }
    out
}

/// Maps per-motor thrusts to the body wrench `[F; τ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationMatrix(Matrix6xX<f64>);

impl AllocationMatrix {
    /// Wraps an arbitrary 6×n matrix, e.g. a toy system for solver checks.
    pub fn from_matrix(f: Matrix6xX<f64>) -> Self {
        Self(f)
    }

    pub fn matrix(&self) -> &Matrix6xX<f64> {
        &self.0
    }

    pub fn motor_count(&self) -> usize {
        self.0.ncols()
    }

    /// Wrench produced by thrusts `u`.
    pub fn apply(&self, u: &[f64]) -> Vector6<f64> {
        debug_assert_eq!(u.len(), self.0.ncols());
        let mut w = Vector6::zeros();
        for (j, &uj) in u.iter().enumerate() {
            w += self.0.column(j) * uj;
        }
        w
    }
}

/// Column `i` is `[R_i z; t_i × R_i z − α_i c_q R_i z]`.
pub fn build_allocation_matrix(config: &AirframeConfig) -> AllocationMatrix {
    let c_q = config.params.c_q;
    let mut f = Matrix6xX::zeros(config.motor_count());
    for (i, rotor) in config.rotors.iter().enumerate() {
        let axis = rotor.thrust_axis();
        let torque = rotor.position.cross(&axis) - rotor.spin.sign() * c_q * axis;
        f.fixed_view_mut::<3, 1>(0, i).copy_from(&axis);
        f.fixed_view_mut::<3, 1>(3, i).copy_from(&torque);
    }
    AllocationMatrix(f)
}

/// `J = J_body + Σ m_motor (‖t‖² I − t tᵀ)`.
pub fn point_mass_inertia(config: &AirframeConfig) -> Matrix3<f64> {
    let m = config.params.motor_mass;
    config.rotors.iter().fold(config.params.body_inertia_matrix(), |acc, r| {
        let t = &r.position;
        acc + m * (Matrix3::identity() * t.norm_squared() - t * t.transpose())
    })
}

/// Images of every corner of the thrust box `[u_min, u_max]^n` under `F`.
///
/// The admissible wrench set is a zonotope, so its hull vertices are a subset of
/// these points.
pub fn admissible_wrench_corners(config: &AirframeConfig) -> Vec<Vector6<f64>> {
    let f = build_allocation_matrix(config);
    let n = config.motor_count();
    let (lo, hi) = config.thrust_bounds();
    let mut u = vec![0.0; n];
    (0..1usize << n)
        .map(|mask| {
            for (j, uj) in u.iter_mut().enumerate() {
                *uj = if mask >> j & 1 == 1 { hi } else { lo };
            }
            f.apply(&u)
        })
        .collect()
}
