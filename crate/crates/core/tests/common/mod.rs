#![allow(dead_code)]

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::Rng;
use rotorlab::airframe::{AirframeConfig, PhysicalParams, RotorSpec, Spin};

pub fn random_rotation<R: Rng>(rng: &mut R, max_angle: f64) -> Matrix3<f64> {
    let axis = loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if v.norm() > 1e-3 && v.norm() <= 1.0 {
            break v;
        }
    };
    let angle = rng.random_range(0.0..=max_angle);
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner()
}

/// Arbitrary (not necessarily flyable) airframe with 4 or 6 rotors.
pub fn random_config<R: Rng>(rng: &mut R) -> AirframeConfig {
    let n = if rng.random_bool(0.5) { 4 } else { 6 };
    let rotors = (0..n)
        .map(|_| {
            let t = Vector3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.1..0.1));
            let spin = if rng.random_bool(0.5) { Spin::Ccw } else { Spin::Cw };
            RotorSpec::new(t, random_rotation(rng, std::f64::consts::PI), spin).unwrap()
        })
        .collect();
    AirframeConfig::new(rotors, PhysicalParams::default()).unwrap()
}

pub fn standard_quad() -> AirframeConfig {
    AirframeConfig::standard(4, 0.2, PhysicalParams::default()).unwrap()
}

/// Arms near the nominal "X" directions, rotors tilted by at most 20°.
pub fn random_airframe_like<R: Rng>(rng: &mut R) -> AirframeConfig {
    let n = if rng.random_bool(0.5) { 4 } else { 6 };
    let rotors = rotorlab::airframe::nominal_azimuths(n)
        .into_iter()
        .enumerate()
        .map(|(i, az)| {
            let az = az + rng.random_range(-0.3..0.3);
            let l = rng.random_range(0.1..0.35);
            let t = Vector3::new(l * az.cos(), l * az.sin(), rng.random_range(-0.03..0.03));
            let tilt_axis = rng.random_range(0.0..std::f64::consts::TAU);
            let axis = Unit::new_normalize(Vector3::new(tilt_axis.cos(), tilt_axis.sin(), 0.0));
            let r = Rotation3::from_axis_angle(&axis, rng.random_range(0.0..20f64.to_radians())).into_inner();
            RotorSpec::new(t, r, rotorlab::airframe::nominal_spin(i)).unwrap()
        })
        .collect();
    AirframeConfig::new(rotors, PhysicalParams::default()).unwrap()
}

/// Fixed-seed proptest settings so every run explores the same cases.
pub fn proptest_config(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases,
        failure_persistence: None,
        rng_seed: proptest::test_runner::RngSeed::Fixed(0x5eed),
        ..proptest::test_runner::Config::default()
    }
}
