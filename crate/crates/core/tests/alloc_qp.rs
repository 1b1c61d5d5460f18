mod common;

use nalgebra::{DMatrix, DVector, Matrix6xX, Vector6};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rotorlab::airframe::{build_allocation_matrix, AirframeConfig, AllocationMatrix, PhysicalParams};
use rotorlab::alloc::{pseudo_inverse, solve_allocation_qp, solve_unconstrained, BoxQp, QpOptions};

/// `uᵀ(I + FᵀF)u − 2 wᵀF u` for two motors, as `[h00, h01, h11, g0, g1]`.
fn toy_objective(f: &AllocationMatrix, w: &Vector6<f64>) -> [f64; 5] {
    let m = f.matrix();
    let (a, b) = (m.column(0), m.column(1));
    [1.0 + a.dot(&a), a.dot(&b), 1.0 + b.dot(&b), -2.0 * w.dot(&a), -2.0 * w.dot(&b)]
}

fn eval_toy(q: &[f64; 5], u0: f64, u1: f64) -> f64 {
    q[0] * u0 * u0 + 2.0 * q[1] * u0 * u1 + q[2] * u1 * u1 + q[3] * u0 + q[4] * u1
}

/// Minimum over an `n×n` grid on `[lo0,hi0]×[lo1,hi1]`.
fn grid_min(q: &[f64; 5], lo: [f64; 2], hi: [f64; 2], n: usize) -> (f64, [f64; 2]) {
    let mut best = (f64::INFINITY, [0.0; 2]);
    for i in 0..n {
        let u0 = lo[0] + (hi[0] - lo[0]) * i as f64 / (n - 1) as f64;
        for j in 0..n {
            let u1 = lo[1] + (hi[1] - lo[1]) * j as f64 / (n - 1) as f64;
            let v = eval_toy(q, u0, u1);
            if v < best.0 {
                best = (v, [u0, u1]);
            }
        }
    }
    best
}

#[test]
fn two_motor_toy_matches_refined_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = AllocationMatrix::from_matrix(Matrix6xX::from_fn(2, |_, _| rng.random_range(-1.0..1.0)));
    let (u_min, u_max) = (0.0, 2.0);
    let qp = BoxQp::new(&f, u_min, u_max, QpOptions::default()).unwrap();
    for _ in 0..100 {
        let u_ref = [rng.random_range(-1.0..3.0), rng.random_range(-1.0..3.0)];
        let w = f.apply(&u_ref) + Vector6::from_fn(|_, _| rng.random_range(-0.3..0.3));
        let sol = qp.solve(&w).unwrap();
        let q = toy_objective(&f, &w);
        let (_, coarse) = grid_min(&q, [u_min; 2], [u_max; 2], 2001);
        let h = (u_max - u_min) / 2000.0;
        let lo = coarse.map(|c| (c - h).max(u_min));
        let hi = coarse.map(|c| (c + h).min(u_max));
        let (refined, _) = grid_min(&q, lo, hi, 201);
        let got = qp.objective_at(&sol.thrusts, &w);
        assert!((got - eval_toy(&q, sol.thrusts[0], sol.thrusts[1])).abs() <= 1e-12);
        assert!((got - refined).abs() <= 1e-6, "qp {got} vs grid {refined}");
        assert!(got <= refined + 1e-12);
    }
}

fn check_kkt(f: &AllocationMatrix, w: &Vector6<f64>, lo: f64, hi: f64, rho: f64) -> Result<(), TestCaseError> {
    let sol = solve_allocation_qp(f, w, lo, hi, QpOptions { rho, ..QpOptions::default() }).unwrap();
    prop_assert!(sol.kkt_residual <= 1e-8);
    let fm = DMatrix::from_column_slice(6, f.motor_count(), f.matrix().as_slice());
    let u = DVector::from_column_slice(&sol.thrusts);
    let w_dyn = DVector::from_column_slice(w.as_slice());
    let grad = (&u + fm.transpose() * (&fm * &u) * rho) * 2.0 - fm.transpose() * w_dyn * (2.0 * rho);
    let scale = 1.0 + grad.amax();
    for (i, &ui) in sol.thrusts.iter().enumerate() {
        prop_assert!(ui >= lo - 1e-9 && ui <= hi + 1e-9);
        let g = grad[i];
        if ui <= lo + 1e-9 {
            prop_assert!(g >= -1e-6 * scale, "lower bound active with gradient {g}");
        } else if ui >= hi - 1e-9 {
            prop_assert!(g <= 1e-6 * scale, "upper bound active with gradient {g}");
        } else {
            prop_assert!(g.abs() <= 1e-6 * scale, "interior gradient {g}");
        }
    }
    let slack = f.apply(&sol.thrusts) - w;
    prop_assert!((slack - sol.slack).amax() <= 1e-9);
    Ok(())
}

proptest! {
    #![proptest_config(common::proptest_config(1000))]

    #[test]
    fn kkt_holds_on_random_instances(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = common::random_config(&mut rng);
        let f = build_allocation_matrix(&config);
        let (lo, hi) = config.thrust_bounds();
        let w = Vector6::from_fn(|k, _| if k < 3 { rng.random_range(-10.0..10.0) } else { rng.random_range(-1.0..1.0) });
        check_kkt(&f, &w, lo, hi, 1.0)?;
    }
}

proptest! {
    #![proptest_config(common::proptest_config(50))]

    #[test]
    fn optimum_beats_random_feasible_points(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = common::random_config(&mut rng);
        let f = build_allocation_matrix(&config);
        let (lo, hi) = config.thrust_bounds();
        let qp = BoxQp::new(&f, lo, hi, QpOptions::default()).unwrap();
        let w = Vector6::from_fn(|_, _| rng.random_range(-3.0..3.0));
        let best = qp.objective_at(&qp.solve(&w).unwrap().thrusts, &w);
        let mut u = vec![0.0; f.motor_count()];
        for _ in 0..1000 {
            u.iter_mut().for_each(|x| *x = rng.random_range(lo..=hi));
            prop_assert!(best <= qp.objective_at(&u, &w) + 1e-12);
        }
    }

    #[test]
    fn heavy_slack_weight_reaches_admissible_wrenches(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = if rng.random_bool(0.5) { 4 } else { 6 };
        let standard = AirframeConfig::standard(n, rng.random_range(0.1..0.35), PhysicalParams::default()).unwrap();
        // On tilted geometry the residual slack scales like ‖u‖/(ρ σ_min(F)), so ρ must be larger.
        let tilted = common::random_airframe_like(&mut rng);
        for (config, rho) in [(standard, 1e6), (tilted, 1e8)] {
            let f = build_allocation_matrix(&config);
            let (lo, hi) = config.thrust_bounds();
            let u: Vec<f64> = (0..f.motor_count()).map(|_| rng.random_range(lo..=hi)).collect();
            let w = f.apply(&u);
            let sol = solve_allocation_qp(&f, &w, lo, hi, QpOptions { rho, ..QpOptions::default() }).unwrap();
            prop_assert!(sol.kkt_residual <= 1e-8);
            prop_assert!(sol.slack.norm() <= 1e-4 * w.norm(), "slack {} for |w| {} at rho {rho}", sol.slack.norm(), w.norm());
        }
    }

    #[test]
    fn pseudo_inverse_reproduces_range_wrenches(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = common::random_config(&mut rng);
        let f = build_allocation_matrix(&config);
        let u: Vec<f64> = (0..f.motor_count()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w = f.apply(&u);
        let back = f.apply(&solve_unconstrained(&f, &w));
        prop_assert!((back - w).amax() <= 1e-9);
        let pinv = pseudo_inverse(&f);
        prop_assert_eq!(pinv.shape(), (f.motor_count(), 6));
    }
}
