mod common;

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rotorlab::airframe::{
    admissible_wrench_corners, build_allocation_matrix, compute_wrench_box, point_mass_inertia, AirframeConfig,
    RotorSpec,
};

/// Column `i` evaluated component by component from the rotor parameters.
fn column_by_hand(config: &AirframeConfig, i: usize) -> [f64; 6] {
    let rotor = &config.rotors()[i];
    let r = rotor.orientation();
    let t = rotor.position();
    let (a, c_q) = (rotor.spin().sign(), config.params().c_q);
    let z = [r[(0, 2)], r[(1, 2)], r[(2, 2)]];
    let cross = [t[1] * z[2] - t[2] * z[1], t[2] * z[0] - t[0] * z[2], t[0] * z[1] - t[1] * z[0]];
    [z[0], z[1], z[2], cross[0] - a * c_q * z[0], cross[1] - a * c_q * z[1], cross[2] - a * c_q * z[2]]
}

fn rotate_config(config: &AirframeConfig, q: &Matrix3<f64>) -> AirframeConfig {
    let rotors = config
        .rotors()
        .iter()
        .map(|r| RotorSpec::new(q * r.position(), q * r.orientation(), r.spin()).unwrap())
        .collect();
    config.with_rotors(rotors).unwrap()
}

#[test]
fn seeded_hexarotor_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let config = loop {
        let c = common::random_config(&mut rng);
        if c.motor_count() == 6 {
            break c;
        }
    };
    let f = build_allocation_matrix(&config);
    for i in 0..6 {
        let col = column_by_hand(&config, i);
        for (k, expected) in col.iter().enumerate() {
            assert!((f.matrix()[(k, i)] - expected).abs() <= 1e-12);
        }
    }
}

#[test]
fn standard_quad_thrust_axis_extent() {
    let config = common::standard_quad();
    let b = compute_wrench_box(&config).unwrap();
    let (lo, hi) = config.thrust_bounds();
    // The dominant axis is the vertical force; its extent covers the total thrust range.
    assert!(b.basis[(2, 0)].abs() > 0.999);
    let proj: Vec<f64> = admissible_wrench_corners(&config).iter().map(|c| b.principal_offset(c)[0]).collect();
    let range = proj.iter().cloned().fold(f64::MIN, f64::max) - proj.iter().cloned().fold(f64::MAX, f64::min);
    assert!((b.half_extents[0] - range / 2.0).abs() < 1e-9);
    assert!((b.half_extents[0] - 4.0 * (hi - lo) / 2.0).abs() < 1e-6);
}

proptest! {
    #![proptest_config(common::proptest_config(1000))]

    #[test]
    fn allocation_columns_match_formula(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = common::random_config(&mut rng);
        let f = build_allocation_matrix(&config);
        for i in 0..config.motor_count() {
            let col = column_by_hand(&config, i);
            for k in 0..6 {
                prop_assert!((f.matrix()[(k, i)] - col[k]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn common_rotation_transforms_allocation_blockwise(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = common::random_config(&mut rng);
        let q = common::random_rotation(&mut rng, std::f64::consts::PI);
        let rotated = build_allocation_matrix(&rotate_config(&config, &q));
        let mut block = Matrix6::zeros();
        block.fixed_view_mut::<3, 3>(0, 0).copy_from(&q);
        block.fixed_view_mut::<3, 3>(3, 3).copy_from(&q);
        let expected = block * build_allocation_matrix(&config).matrix();
        prop_assert!((rotated.matrix() - expected).abs().max() <= 1e-9);
    }

    #[test]
    fn inertia_is_symmetric_positive_semidefinite(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = common::random_config(&mut rng);
        let j = point_mass_inertia(&config);
        prop_assert!((j - j.transpose()).abs().max() <= 1e-15);
        prop_assert!(j.symmetric_eigenvalues().min() >= 0.0);
    }
}

proptest! {
    #![proptest_config(common::proptest_config(20))]

    #[test]
    fn wrench_box_contains_random_admissible_wrenches(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = common::random_config(&mut rng);
        let b = compute_wrench_box(&config).unwrap();
        prop_assert!((b.basis.transpose() * b.basis - Matrix6::identity()).abs().max() <= 1e-9);
        let f = build_allocation_matrix(&config);
        let (lo, hi) = config.thrust_bounds();
        let mut u = vec![0.0; config.motor_count()];
        for _ in 0..10_000 {
            u.iter_mut().for_each(|x| *x = rng.random_range(lo..=hi));
            prop_assert!(b.contains(&f.apply(&u), 1e-9));
        }
        for corner in admissible_wrench_corners(&config) {
            prop_assert!(b.contains(&corner, 1e-9));
        }
    }

    #[test]
    fn command_round_trip_on_unfloored_axes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = common::random_config(&mut rng);
        let b = compute_wrench_box(&config).unwrap();
        for _ in 0..100 {
            let a = Vector6::from_fn(|_, _| rng.random_range(-1.0..=1.0));
            let back = b.wrench_to_command(&b.command_to_wrench(&a));
            for k in (0..6).filter(|&k| !b.floored[k]) {
                prop_assert!((back[k] - a[k]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn translating_rotors_keeps_force_rows(seed in any::<u64>(), dx in -0.2f64..0.2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = common::random_config(&mut rng);
        let shift = Vector3::new(dx, 0.0, 0.0);
        let moved = config
            .with_rotors(config.rotors().iter().map(|r| RotorSpec::new(r.position() + shift, *r.orientation(), r.spin()).unwrap()).collect())
            .unwrap();
        let (a, b) = (build_allocation_matrix(&config), build_allocation_matrix(&moved));
        prop_assert!((a.matrix().rows(0, 3) - b.matrix().rows(0, 3)).abs().max() == 0.0);
    }
}
