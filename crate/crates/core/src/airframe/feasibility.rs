use nalgebra::{Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::{build_allocation_matrix, AirframeConfig, AllocationMatrix};
use crate::alloc::{BoxQp, QpOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityOptions {
    /// Torque magnitude that must be reachable around each body axis, N·m.
    pub torque_authority: f64,
    /// Allowed hover residual as a fraction of the weight.
    pub hover_tolerance: f64,
    /// Allowed authority residual as a fraction of `torque_authority`.
    pub authority_tolerance: f64,
    /// Slack weight used to approximate hard wrench equality.
    pub rho: f64,
    /// Hover may use any body attitude: the hover force only has to have magnitude
    /// `m·g`, not point along body z. Needed for airframes with tilted rotors.
    #[serde(default)]
    pub free_attitude: bool,
}

impl Default for FeasibilityOptions {
    fn default() -> Self {
        Self { torque_authority: 0.05, hover_tolerance: 0.02, authority_tolerance: 0.02, rho: 1e6, free_attitude: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Feasibility {
    Feasible { hover_thrusts: Vec<f64> },
    Infeasible { reason: String },
}

impl Feasibility {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Feasibility::Feasible { .. })
    }

    pub fn hover_thrusts(&self) -> Option<&[f64]> {
        match self {
            Feasibility::Feasible { hover_thrusts } => Some(hover_thrusts),
            Feasibility::Infeasible { .. } => None,
        }
    }
}

/// Checks that the airframe can hover at identity attitude and can add a torque
/// of `±torque_authority` about every body axis on top of the hover wrench.
///
/// With `free_attitude`, hover may use any attitude, and the authority test holds
/// only the thrust along the hover force direction fixed while lateral force is free.
pub fn feasibility_check(config: &AirframeConfig, options: &FeasibilityOptions) -> Feasibility {
    let f = build_allocation_matrix(config);
    let (lo, hi) = config.thrust_bounds();
    let qp_options = QpOptions { rho: options.rho, tolerance: 1e-9, max_iterations: 50_000 };
    let qp = match BoxQp::new(&f, lo, hi, qp_options) {
        Ok(qp) => qp,
        Err(e) => return Feasibility::Infeasible { reason: e.to_string() },
    };
    // A non-converged solve still carries its best iterate, which is all we need here.
    let solve = |qp: &BoxQp, w: &Vector6<f64>| match qp.solve(w) {
        Ok(s) => s,
        Err(crate::alloc::AllocError::MaxIterations(best)) => *best,
        Err(e) => unreachable!("prepared QP cannot fail with {e}"),
    };

    let weight = config.hover_wrench()[2];
    let hover = if options.free_attitude {
        free_hover_wrench(config, &f, &|w| solve(&qp, w))
    } else {
        config.hover_wrench()
    };
    let hover_sol = solve(&qp, &hover);
    let residual = hover_sol.slack.norm();
    if residual > options.hover_tolerance * weight {
        return Feasibility::Infeasible {
            reason: format!("hover residual {residual:.4} N exceeds {:.4} N", options.hover_tolerance * weight),
        };
    }

    let (authority_qp, hover_target) = if options.free_attitude {
        let d = hover.fixed_rows::<3>(0).normalize();
        let mut reduced = f.0.clone();
        for j in 0..reduced.ncols() {
            let along = d.dot(&f.0.fixed_view::<3, 1>(0, j));
            reduced.fixed_view_mut::<3, 1>(0, j).copy_from(&Vector3::new(0.0, 0.0, along));
        }
        let qp = match BoxQp::new(&AllocationMatrix(reduced), lo, hi, qp_options) {
            Ok(qp) => qp,
            Err(e) => return Feasibility::Infeasible { reason: e.to_string() },
        };
        (qp, config.hover_wrench())
    } else {
        (qp, hover)
    };

    let tau = options.torque_authority;
    for axis in 0..3 {
        for sign in [1.0, -1.0] {
            let mut w = hover_target;
            w[3 + axis] += sign * tau;
            let residual = solve(&authority_qp, &w).slack.norm();
            if residual > options.authority_tolerance * tau {
                let name = ["roll", "pitch", "yaw"][axis];
                let dir = if sign > 0.0 { '+' } else { '-' };
                return Feasibility::Infeasible {
                    reason: format!("no {dir}{name} authority (residual {residual:.2e})"),
                };
            }
        }
    }
    Feasibility::Feasible { hover_thrusts: hover_sol.thrusts }
}

/// Fixed point of "aim the hover force where the best allocation points it":
/// starting from body z, re-solve for `[m g d; 0]` with `d` the direction of the
/// previous solution's force.
fn free_hover_wrench(
    config: &AirframeConfig,
    f: &AllocationMatrix,
    solve: &dyn Fn(&Vector6<f64>) -> crate::alloc::AllocationSolution,
) -> Vector6<f64> {
    let weight = config.hover_wrench()[2];
    let mut w = config.hover_wrench();
    for _ in 0..200 {
        let force = f.apply(&solve(&w).thrusts).fixed_rows::<3>(0).into_owned();
        if force.norm() < 1e-9 * weight {
            break;
        }
        let d = force.normalize() * weight;
        let moved = (d - w.fixed_rows::<3>(0)).norm();
        w.fixed_rows_mut::<3>(0).copy_from(&d);
        if moved < 1e-10 * weight {
            break;
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::airframe::{PhysicalParams, RotorSpec, Spin, GRAVITY};

    #[test]
    fn standard_quad_hovers_symmetrically() {
        let config = AirframeConfig::standard(4, 0.2, PhysicalParams::default()).unwrap();
        let result = feasibility_check(&config, &FeasibilityOptions::default());
        let hover = result.hover_thrusts().expect("feasible");
        let expected = config.mass() * GRAVITY / 4.0;
        for u in hover {
            assert!((u - expected).abs() < 1e-5, "{u} vs {expected}");
        }
    }

    #[test]
    fn uniform_spin_has_no_yaw_authority() {
        let base = AirframeConfig::standard(4, 0.2, PhysicalParams::default()).unwrap();
        let rotors = base
            .rotors()
            .iter()
            .map(|r| RotorSpec::new(*r.position(), *r.orientation(), Spin::Ccw).unwrap())
            .collect();
        let config = base.with_rotors(rotors).unwrap();
        assert!(!feasibility_check(&config, &FeasibilityOptions::default()).is_feasible());
    }

    #[test]
    fn tilted_quad_hovers_only_with_free_attitude() {
        let base = AirframeConfig::standard(4, 0.2, PhysicalParams::default()).unwrap();
        let tilt = nalgebra::Rotation3::from_axis_angle(&nalgebra::Vector3::x_axis(), 0.15);
        let rotors = base
            .rotors()
            .iter()
            .map(|r| RotorSpec::new(tilt * r.position(), *tilt.matrix(), r.spin()).unwrap())
            .collect();
        let config = base.with_rotors(rotors).unwrap();
        assert!(!feasibility_check(&config, &FeasibilityOptions::default()).is_feasible());
        let free = FeasibilityOptions { free_attitude: true, ..FeasibilityOptions::default() };
        let result = feasibility_check(&config, &free);
        let hover = result.hover_thrusts().expect("feasible at a tilted attitude");
        let expected = config.mass() * GRAVITY / 4.0;
        for u in hover {
            assert!((u - expected).abs() < 1e-4, "{u} vs {expected}");
        }
    }

    #[test]
    fn underpowered_quad_cannot_hover() {
        let params = PhysicalParams { u_max: 0.5 * 9.81 / 4.0 * 0.9, ..PhysicalParams::default() };
        let config = AirframeConfig::standard(4, 0.2, params).unwrap();
        let result = feasibility_check(&config, &FeasibilityOptions::default());
        match result {
            Feasibility::Infeasible { reason } => assert!(reason.contains("hover"), "{reason}"),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }
}
