//! Box-constrained slack QP for control allocation.
//!
//! `min ‖u‖² + ρ‖s‖²  s.t.  u_min ≤ u ≤ u_max,  F u − w_d = s`
//!
//! Substituting the equality constraint leaves a strictly convex QP in `u` alone:
//! `min uᵀ(I + ρFᵀF)u − 2ρ w_dᵀF u` over the thrust box. It is solved with
//! accelerated projected gradient steps, and whenever the set of active bounds
//! settles the free variables are solved for exactly.

use nalgebra::{DMatrix, DVector, Vector6};

use super::AllocError;
use crate::airframe::AllocationMatrix;

/// Above this motor count the exact active-set fallback is skipped.
const MAX_ENUMERATED_MOTORS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    /// Weight of the slack term relative to the thrust term.
    pub rho: f64,
    /// Target gradient-mapping residual, in thrust units.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self { rho: 1.0, tolerance: 1e-8, max_iterations: 20_000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationSolution {
    /// Motor thrusts, N.
    pub thrusts: Vec<f64>,
    /// Achieved minus desired wrench.
    pub slack: Vector6<f64>,
    /// `‖u − Π(u − ∇f(u)/L)‖∞` with `L` the Hessian's largest eigenvalue.
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// A QP prepared for one allocation matrix, thrust box and slack weight.
#[derive(Debug, Clone)]
pub struct BoxQp {
    f: AllocationMatrix,
    hessian: DMatrix<f64>,
    lipschitz: f64,
    lower: f64,
    upper: f64,
    options: QpOptions,
}

impl BoxQp {
    pub fn new(f: &AllocationMatrix, u_min: f64, u_max: f64, options: QpOptions) -> Result<Self, AllocError> {
        if !(u_min < u_max) {
            return Err(AllocError::InvalidBounds { u_min, u_max });
        }
        if !(options.rho > 0.0) {
            return Err(AllocError::InvalidOption("rho must be positive"));
        }
        let n = f.motor_count();
        let fm = f.matrix();
        let hessian = (DMatrix::identity(n, n) + fm.transpose() * fm * options.rho) * 2.0;
        let lipschitz = hessian.clone().symmetric_eigenvalues().max();
        Ok(Self { f: f.clone(), hessian, lipschitz, lower: u_min, upper: u_max, options })
    }

    pub fn options(&self) -> &QpOptions {
        &self.options
    }

    fn linear_term(&self, w_d: &Vector6<f64>) -> DVector<f64> {
        -(self.f.matrix().transpose() * w_d) * (2.0 * self.options.rho)
    }

    fn gradient(&self, u: &DVector<f64>, c: &DVector<f64>) -> DVector<f64> {
        &self.hessian * u + c
    }

    fn objective(&self, u: &DVector<f64>, c: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.hessian * u)) + c.dot(u)
    }

    fn project(&self, u: &mut DVector<f64>) {
        u.apply(|x| *x = x.clamp(self.lower, self.upper));
    }

    fn residual(&self, u: &DVector<f64>, c: &DVector<f64>) -> f64 {
        let g = self.gradient(u, c);
        let mut step = u - g / self.lipschitz;
        self.project(&mut step);
        (u - step).amax()
    }

    /// Exact minimizer over the variables not pinned to a bound in `u`, or `None`
    /// if it leaves the box.
    fn polish(&self, u: &DVector<f64>, c: &DVector<f64>) -> Option<DVector<f64>> {
        let free: Vec<usize> = (0..u.len()).filter(|&i| u[i] > self.lower && u[i] < self.upper).collect();
        self.solve_free(u, &free, c)
    }

    /// Minimizes over the variables in `free` with the others held at their values in `u`.
    fn solve_free(&self, u: &DVector<f64>, free: &[usize], c: &DVector<f64>) -> Option<DVector<f64>> {
        let mut out = u.clone();
        if !free.is_empty() {
            let k = free.len();
            let mut h = DMatrix::zeros(k, k);
            let mut rhs = DVector::zeros(k);
            for (a, &i) in free.iter().enumerate() {
                let mut r = -c[i];
                for j in 0..u.len() {
                    if !free.contains(&j) {
                        r -= self.hessian[(i, j)] * u[j];
                    }
                }
                rhs[a] = r;
                for (b, &j) in free.iter().enumerate() {
                    h[(a, b)] = self.hessian[(i, j)];
                }
            }
            let sol = h.cholesky()?.solve(&rhs);
            for (a, &i) in free.iter().enumerate() {
                if sol[a] < self.lower || sol[a] > self.upper {
                    return None;
                }
                out[i] = sol[a];
            }
        }
        Some(out)
    }

    /// Tries every assignment of each variable to its lower bound, upper bound or the
    /// free set and keeps the best stationary point. 3ⁿ subproblems, so small `n` only.
    fn enumerate_active_sets(&self, c: &DVector<f64>) -> Option<DVector<f64>> {
        let n = c.len();
        let mut best: Option<(f64, DVector<f64>)> = None;
        let mut u = DVector::zeros(n);
        for code in 0..3usize.pow(n as u32) {
            let mut free = Vec::with_capacity(n);
            let mut k = code;
            for i in 0..n {
                match k % 3 {
                    0 => u[i] = self.lower,
                    1 => u[i] = self.upper,
                    _ => free.push(i),
                }
                k /= 3;
            }
            if let Some(p) = self.solve_free(&u, &free, c) {
                let r = self.residual(&p, c);
                if best.as_ref().is_none_or(|(br, _)| r < *br) {
                    best = Some((r, p));
                }
            }
        }
        best.map(|(_, p)| p)
    }

    fn finish(&self, u: DVector<f64>, c: &DVector<f64>, w_d: &Vector6<f64>, iterations: usize) -> AllocationSolution {
        let kkt_residual = self.residual(&u, c);
        let thrusts: Vec<f64> = u.iter().copied().collect();
        let slack = self.f.apply(&thrusts) - w_d;
        AllocationSolution { thrusts, slack, kkt_residual, iterations }
    }

    pub fn solve(&self, w_d: &Vector6<f64>) -> Result<AllocationSolution, AllocError> {
        let c = self.linear_term(w_d);
        let tol = self.options.tolerance;

        // Clamped unconstrained optimum as the starting point.
        let mut x = match self.hessian.clone().cholesky() {
            Some(ch) => ch.solve(&(-&c)),
            None => DVector::zeros(c.len()),
        };
        self.project(&mut x);
        if let Some(p) = self.polish(&x, &c) {
            if self.residual(&p, &c) <= tol {
                return Ok(self.finish(p, &c, w_d, 0));
            }
        }

        let mut best = x.clone();
        let mut best_res = self.residual(&x, &c);
        let mut y = x.clone();
        let mut t = 1.0_f64;
        let mut f_x = self.objective(&x, &c);
        for it in 1..=self.options.max_iterations {
            let g = self.gradient(&y, &c);
            let mut x_next = &y - g / self.lipschitz;
            self.project(&mut x_next);
            let f_next = self.objective(&x_next, &c);
            if f_next > f_x {
                // Momentum overshot: restart from the last iterate.
                y = x.clone();
                t = 1.0;
                continue;
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = &x_next + (&x_next - &x) * ((t - 1.0) / t_next);
            x = x_next;
            t = t_next;
            f_x = f_next;

            let res = self.residual(&x, &c);
            if res < best_res {
                best_res = res;
                best = x.clone();
            }
            if res <= tol {
                return Ok(self.finish(x, &c, w_d, it));
            }
            if it % 4 == 0 {
                if let Some(p) = self.polish(&x, &c) {
                    let r = self.residual(&p, &c);
                    if r <= tol {
                        return Ok(self.finish(p, &c, w_d, it));
                    }
                    if r < best_res && self.objective(&p, &c) <= f_x {
                        x = p;
                        y = x.clone();
                        t = 1.0;
                        f_x = self.objective(&x, &c);
                        best_res = r;
                        best = x.clone();
                    }
                }
            }
        }
        if c.len() <= MAX_ENUMERATED_MOTORS {
            if let Some(p) = self.enumerate_active_sets(&c) {
                let r = self.residual(&p, &c);
                if r <= tol {
                    return Ok(self.finish(p, &c, w_d, self.options.max_iterations));
                }
                if r < best_res {
                    best = p;
                }
            }
        }
        Err(AllocError::MaxIterations(Box::new(self.finish(best, &c, w_d, self.options.max_iterations))))
    }

    /// Solves every wrench independently; results keep the input order.
    pub fn solve_batch(&self, wrenches: &[Vector6<f64>]) -> Vec<Result<AllocationSolution, AllocError>> {
        wrenches.iter().map(|w| self.solve(w)).collect()
    }

    /// Objective value `uᵀ(I + ρFᵀF)u − 2ρ w_dᵀF u` at `u`.
    pub fn objective_at(&self, u: &[f64], w_d: &Vector6<f64>) -> f64 {
        let u = DVector::from_column_slice(u);
        self.objective(&u, &self.linear_term(w_d))
    }
}

/// One-shot convenience wrapper around [`BoxQp`].
pub fn solve_allocation_qp(
    f: &AllocationMatrix,
    w_d: &Vector6<f64>,
    u_min: f64,
    u_max: f64,
    options: QpOptions,
) -> Result<AllocationSolution, AllocError> {
    BoxQp::new(f, u_min, u_max, options)?.solve(w_d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::airframe::{build_allocation_matrix, AirframeConfig, PhysicalParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn quad() -> AirframeConfig {
        AirframeConfig::standard(4, 0.2, PhysicalParams::default()).unwrap()
    }

    #[test]
    fn zero_wrench_gives_zero_thrust() {
        let f = build_allocation_matrix(&quad());
        let sol = solve_allocation_qp(&f, &Vector6::zeros(), 0.0, 2.5, QpOptions::default()).unwrap();
        assert!(sol.thrusts.iter().all(|&u| u == 0.0));
        assert!(sol.slack.amax() == 0.0);
    }

    #[test]
    fn interior_optimum_matches_linear_solve() {
        let f = build_allocation_matrix(&quad());
        let w = Vector6::new(0.0, 0.0, 4.0, 0.05, -0.03, 0.01);
        let sol = solve_allocation_qp(&f, &w, 0.0, 2.5, QpOptions::default()).unwrap();
        let fm = f.matrix();
        let direct = (DMatrix::<f64>::identity(4, 4) + fm.transpose() * fm)
            .cholesky()
            .unwrap()
            .solve(&(fm.transpose() * w));
        for i in 0..4 {
            assert!((sol.thrusts[i] - direct[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn kkt_and_bounds_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [4, 6] {
            let f = build_allocation_matrix(&AirframeConfig::standard(n, 0.2, PhysicalParams::default()).unwrap());
            let qp = BoxQp::new(&f, 0.0, 2.5, QpOptions::default()).unwrap();
            for _ in 0..200 {
                let w = Vector6::from_fn(|i, _| if i < 3 { rng.random_range(-5.0..15.0) } else { rng.random_range(-1.0..1.0) });
                let sol = qp.solve(&w).unwrap();
                assert!(sol.kkt_residual <= 1e-8);
                assert!(sol.thrusts.iter().all(|&u| (0.0..=2.5).contains(&u)));
                assert!((f.apply(&sol.thrusts) - w - sol.slack).amax() < 1e-9);
            }
        }
    }

    #[test]
    fn large_slack_weight_reaches_admissible_wrench() {
        let config = quad();
        let f = build_allocation_matrix(&config);
        let options = QpOptions { rho: 1e6, ..QpOptions::default() };
        let w = config.hover_wrench();
        let sol = solve_allocation_qp(&f, &w, 0.0, 2.5, options).unwrap();
        assert!(sol.slack.norm() <= 1e-4 * w.norm());
    }

    #[test]
    fn rejects_inverted_bounds() {
        let f = build_allocation_matrix(&quad());
        assert!(matches!(
            solve_allocation_qp(&f, &Vector6::zeros(), 2.0, 1.0, QpOptions::default()),
            Err(AllocError::InvalidBounds { .. })
        ));
    }
}
