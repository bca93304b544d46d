//! Discrete-time brute-force Stackelberg oracle (deterministic case).
//!
//! Independent ground truth for the continuous pipeline: the dynamics are
//! transcribed by explicit Euler,
//!
//! ```text
//! x_{k+1} = (I + h A) x_k + h B1 u_k + h B2 v_k,
//! ```
//!
//! with stage costs `h (x' Q_i x + ctrl' R_i ctrl)/2` and terminal costs
//! `x_N' G_i x_N / 2`. For a frozen leader sequence the follower's problem
//! is an unconstrained strictly convex quadratic; its KKT system is solved
//! exactly (to round-off) by a backward value recursion. The leader's
//! reduced problem `u -> J1(u, best_response(u))` is again strictly convex
//! and is minimized by conjugate gradients, with the gradient evaluated
//! through the adjoint of the composite map — a second forward-backward
//! pair mirroring the continuous optimality system. Both solves are
//! independent of the Riccati pipeline they validate.
//!
//! Over adapted controls the stochastic problem is infinite-dimensional
//! per scenario, so the oracle is restricted to `C = 0`, where the slice
//! is an exact finite-dimensional program.

use nalgebra::{DMatrix, DVector};

use crate::augment::assemble_hat;
use crate::error::{Error, Result};
use crate::game::GameSpec;
use crate::grid::TimeGrid;
use crate::openloop::{costs_moment, simulate, synthesize};
use crate::riccati::{solve_riccati, RiccatiSystem};

/// Euler transcription of a deterministic game on a grid.
#[derive(Debug, Clone)]
pub struct DiscreteGame {
    pub spec: GameSpec,
    pub grid: TimeGrid,
    /// One-step matrix `M = I + h A`.
    m: DMatrix<f64>,
    /// `B2 R2^-1 B2'`.
    b2_eff: DMatrix<f64>,
}

/// Follower's exact best response to a frozen leader sequence.
#[derive(Debug, Clone)]
pub struct FollowerBr {
    /// States at nodes `0..=N`.
    pub x: Vec<DVector<f64>>,
    /// Controls on intervals `0..N`.
    pub v: Vec<DVector<f64>>,
    /// Adjoints at nodes `0..=N` (`p_0` is diagnostic only).
    pub p2: Vec<DVector<f64>>,
}

/// Outcome of the leader's reduced minimization.
#[derive(Debug, Clone)]
pub struct LeaderSolution {
    /// Optimal leader sequence on intervals `0..N`.
    pub u: Vec<DVector<f64>>,
    pub j1: f64,
    pub cg_iterations: usize,
    pub gradient_norm: f64,
}

const CG_TOL: f64 = 1e-10;
const CG_MAX_ITER: usize = 20_000;

impl DiscreteGame {
    pub fn new(spec: &GameSpec, grid: &TimeGrid) -> Result<Self> {
        if !spec.is_deterministic() {
            return Err(Error::RequiresDeterministic);
        }
        let n = spec.n();
        let h = grid.h();
        let m = DMatrix::identity(n, n) + &spec.a * h;
        let r2_inv = spec.r2.clone().try_inverse().ok_or(Error::SingularKkt(
            "R2 is not invertible",
        ))?;
        let b2_eff = &spec.b2 * r2_inv * spec.b2.transpose();
        Ok(DiscreteGame {
            spec: spec.clone(),
            grid: grid.clone(),
            m,
            b2_eff,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    fn zeros_u(&self) -> Vec<DVector<f64>> {
        vec![DVector::zeros(self.spec.m1()); self.n_steps()]
    }

    /// State path under explicit controls.
    pub fn rollout(&self, u: &[DVector<f64>], v: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let h = self.grid.h();
        let mut x = Vec::with_capacity(self.n_steps() + 1);
        x.push(self.spec.x0.clone());
        for k in 0..self.n_steps() {
            let next = &self.m * &x[k] + (&self.spec.b1 * &u[k] + &self.spec.b2 * &v[k]) * h;
            x.push(next);
        }
        x
    }

    /// Discrete follower cost of explicit control paths.
    pub fn follower_cost(&self, u: &[DVector<f64>], v: &[DVector<f64>]) -> f64 {
        let h = self.grid.h();
        let x = self.rollout(u, v);
        let n = self.n_steps();
        let mut j = 0.0;
        for k in 0..n {
            j += 0.5
                * h
                * ((&self.spec.q2 * &x[k]).dot(&x[k]) + (&self.spec.r2 * &v[k]).dot(&v[k]));
        }
        j + 0.5 * (&self.spec.g2 * &x[n]).dot(&x[n])
    }

    /// Discrete leader cost of a state/control pair.
    pub fn leader_cost(&self, x: &[DVector<f64>], u: &[DVector<f64>]) -> f64 {
        let h = self.grid.h();
        let n = self.n_steps();
        let mut j = 0.0;
        for k in 0..n {
            j += 0.5
                * h
                * ((&self.spec.q1 * &x[k]).dot(&x[k]) + (&self.spec.r1 * &u[k]).dot(&u[k]));
        }
        j + 0.5 * (&self.spec.g1 * &x[n]).dot(&x[n])
    }

    /// Exact minimizer of the discrete follower cost for a frozen leader
    /// sequence, via the backward value recursion
    /// `p_k = M' p_{k+1} + h Q2 x_k`, `v_k = -R2^-1 B2' p_{k+1}` resolved
    /// with the affine ansatz `p_k = P_k x_k + s_k`.
    pub fn follower_br(&self, u: &[DVector<f64>]) -> Result<FollowerBr> {
        assert_eq!(u.len(), self.n_steps(), "leader sequence has wrong length");
        let n_steps = self.n_steps();
        let h = self.grid.h();
        let spec = &self.spec;
        let n = spec.n();
        let m2 = spec.m2();

        let mut p_mat = vec![DMatrix::<f64>::zeros(n, n); n_steps + 1];
        let mut s = vec![DVector::<f64>::zeros(n); n_steps + 1];
        let mut gain = vec![DMatrix::<f64>::zeros(m2, n); n_steps];
        let mut offset = vec![DVector::<f64>::zeros(m2); n_steps];
        p_mat[n_steps] = spec.g2.clone();
        for k in (0..n_steps).rev() {
            let p_next = p_mat[k + 1].clone();
            let w = &spec.r2 + spec.b2.transpose() * &p_next * &spec.b2 * h;
            let w_inv = w
                .try_inverse()
                .ok_or(Error::SingularKkt("follower stage matrix is singular"))?;
            let bt_p = spec.b2.transpose() * &p_next;
            gain[k] = &w_inv * &bt_p * &self.m;
            offset[k] = &w_inv
                * (&bt_p * (&spec.b1 * &u[k]) * h + spec.b2.transpose() * &s[k + 1]);
            let closed = &self.m - &spec.b2 * &gain[k] * h;
            p_mat[k] = &spec.q2 * h + self.m.transpose() * &p_next * &closed;
            s[k] = self.m.transpose()
                * (&p_next * (&spec.b1 * &u[k] - &spec.b2 * &offset[k]) * h + &s[k + 1]);
        }

        let mut x = Vec::with_capacity(n_steps + 1);
        let mut v = Vec::with_capacity(n_steps);
        x.push(spec.x0.clone());
        for k in 0..n_steps {
            let vk = -(&gain[k] * &x[k]) - &offset[k];
            let next = &self.m * &x[k] + (&spec.b1 * &u[k] + &spec.b2 * &vk) * h;
            v.push(vk);
            x.push(next);
        }
        let p2 = (0..=n_steps)
            .map(|k| &p_mat[k] * &x[k] + &s[k])
            .collect();
        Ok(FollowerBr { x, v, p2 })
    }

    /// Reduced leader cost `J1(u, follower_br(u))`.
    pub fn reduced_cost(&self, u: &[DVector<f64>]) -> Result<f64> {
        let br = self.follower_br(u)?;
        Ok(self.leader_cost(&br.x, u))
    }

    /// Exact gradient of the reduced cost through the adjoint pair
    /// `(lambda, mu)` of the follower's KKT system, solved by the same
    /// affine-recursion factorization (`lambda_k = Psi_k mu_k + rho_k`).
    /// Component `k` is `h (R1 u_k - B1' lambda_{k+1})`.
    pub fn reduced_gradient(&self, u: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let br = self.follower_br(u)?;
        let n_steps = self.n_steps();
        let h = self.grid.h();
        let spec = &self.spec;
        let n = spec.n();

        // Backward factorization of the adjoint two-point system:
        //   mu_k     = M mu_{k-1} - h Beff lambda_k,            mu_0 = 0,
        //   lambda_k = M' lambda_{k+1} + h Q2 mu_k - h Q1 x_k,
        //   lambda_N = G2 mu_N - G1 x_N.
        let mut psi = vec![DMatrix::<f64>::zeros(n, n); n_steps + 1];
        let mut rho = vec![DVector::<f64>::zeros(n); n_steps + 1];
        psi[n_steps] = spec.g2.clone();
        rho[n_steps] = -(&spec.g1 * &br.x[n_steps]);
        let eye = DMatrix::<f64>::identity(n, n);
        let mut resolvent = vec![DMatrix::<f64>::zeros(n, n); n_steps + 1];
        for k in (1..=n_steps).rev() {
            resolvent[k] = (&eye + &self.b2_eff * &psi[k] * h)
                .try_inverse()
                .ok_or(Error::SingularKkt("adjoint resolvent is singular"))?;
            if k > 0 {
                let prop = &psi[k] * &resolvent[k];
                psi[k - 1] = self.m.transpose() * &prop * &self.m + &spec.q2 * h;
                rho[k - 1] = self.m.transpose()
                    * (&prop * (-(&self.b2_eff * &rho[k] * h)) + &rho[k])
                    - &spec.q1 * &br.x[k - 1] * h;
            }
        }

        let mut mu = DVector::<f64>::zeros(n);
        let mut lambda = vec![DVector::<f64>::zeros(n); n_steps + 1];
        for k in 1..=n_steps {
            mu = &resolvent[k] * (&self.m * &mu - &self.b2_eff * &rho[k] * h);
            lambda[k] = &psi[k] * &mu + &rho[k];
        }

        Ok((0..n_steps)
            .map(|k| (&spec.r1 * &u[k] - spec.b1.transpose() * &lambda[k + 1]) * h)
            .collect())
    }

    /// Minimizes the reduced cost by conjugate gradients on the normal
    /// equations, converged when the gradient norm drops to 1e-10.
    pub fn leader_solve(&self) -> Result<LeaderSolution> {
        let n_steps = self.n_steps();
        let dot = |a: &[DVector<f64>], b: &[DVector<f64>]| -> f64 {
            a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
        };
        let norm = |a: &[DVector<f64>]| dot(a, a).sqrt();

        let g0 = self.reduced_gradient(&self.zeros_u())?;
        // Hessian application via linearity of the gradient.
        let apply = |d: &[DVector<f64>]| -> Result<Vec<DVector<f64>>> {
            let gd = self.reduced_gradient(d)?;
            Ok(gd.iter().zip(&g0).map(|(a, b)| a - b).collect())
        };

        let mut u = self.zeros_u();
        let mut r: Vec<DVector<f64>> = g0.iter().map(|g| -g).collect();
        let mut p = r.clone();
        let mut rs = dot(&r, &r);
        if rs.sqrt() <= CG_TOL {
            let j1 = self.reduced_cost(&u)?;
            return Ok(LeaderSolution {
                u,
                j1,
                cg_iterations: 0,
                gradient_norm: rs.sqrt(),
            });
        }
        for iter in 1..=CG_MAX_ITER {
            let ap = apply(&p)?;
            let alpha = rs / dot(&p, &ap);
            for k in 0..n_steps {
                u[k] += &p[k] * alpha;
                r[k] -= &ap[k] * alpha;
            }
            let rs_new = dot(&r, &r);
            if rs_new.sqrt() <= CG_TOL {
                let j1 = self.reduced_cost(&u)?;
                let grad = self.reduced_gradient(&u)?;
                return Ok(LeaderSolution {
                    u,
                    j1,
                    cg_iterations: iter,
                    gradient_norm: norm(&grad),
                });
            }
            let beta = rs_new / rs;
            for k in 0..n_steps {
                p[k] = &r[k] + &p[k] * beta;
            }
            rs = rs_new;
        }
        Err(Error::MaxIterations {
            limit: CG_MAX_ITER,
            gradient_norm: rs.sqrt(),
        })
    }
}

/// One row of the grid-refinement study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceRow {
    pub n: usize,
    pub j1_disc: f64,
    pub j1_cont: f64,
    pub abs_err: f64,
    /// Observed order against the next row, when defined.
    pub order: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    /// Continuous reference value (moment costs on a fine grid).
    pub j1_cont: f64,
}

/// Reference resolution for the continuous anchor value.
fn reference_steps(n_list: &[usize]) -> usize {
    let max_n = n_list.iter().copied().max().unwrap_or(2000);
    (16 * max_n).max(32_000)
}

/// Continuous leader cost at high resolution (deterministic case).
pub fn continuous_leader_cost(spec: &GameSpec, n_steps: usize) -> Result<f64> {
    let grid = TimeGrid::new(n_steps, spec.horizon)?;
    let sys = RiccatiSystem::from_hat(&assemble_hat(spec));
    let sol = solve_riccati(&sys, &grid)?;
    Ok(costs_moment(&sol, spec, &grid)?.0)
}

/// Grid-refinement study of the discrete leader optimum against the
/// continuous Riccati value; the transcription is first order in `h`.
pub fn convergence_report(spec: &GameSpec, n_list: &[usize]) -> Result<ConvergenceReport> {
    if !spec.is_deterministic() {
        return Err(Error::RequiresDeterministic);
    }
    let j1_cont = continuous_leader_cost(spec, reference_steps(n_list))?;
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let grid = TimeGrid::new(n, spec.horizon)?;
        let game = DiscreteGame::new(spec, &grid)?;
        let solution = game.leader_solve()?;
        rows.push(ConvergenceRow {
            n,
            j1_disc: solution.j1,
            j1_cont,
            abs_err: (solution.j1 - j1_cont).abs(),
            order: None,
        });
    }
    for i in 0..rows.len().saturating_sub(1) {
        let (e0, e1) = (rows[i].abs_err, rows[i + 1].abs_err);
        let (n0, n1) = (rows[i].n as f64, rows[i + 1].n as f64);
        if e0 > 0.0 && e1 > 0.0 && n1 > n0 {
            rows[i].order = Some((e0 / e1).ln() / (n1 / n0).ln());
        }
    }
    Ok(ConvergenceReport { rows, j1_cont })
}

/// A control sequence on the grid's intervals.
pub type ControlPath = Vec<DVector<f64>>;

/// Continuous equilibrium controls sampled on the oracle's intervals
/// (deterministic case, single path).
pub fn sampled_continuous_controls(
    spec: &GameSpec,
    grid: &TimeGrid,
) -> Result<(ControlPath, ControlPath)> {
    let sys = RiccatiSystem::from_hat(&assemble_hat(spec));
    let sol = solve_riccati(&sys, grid)?;
    let law = synthesize(sol, spec);
    let ens = simulate(&law, spec, grid, 1, 0)?;
    let u = (0..grid.n_steps()).map(|k| ens.control_u(0, k)).collect();
    let v = (0..grid.n_steps()).map(|k| ens.control_v(0, k)).collect();
    Ok((u, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise;
    use crate::samples;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn game(spec: &GameSpec, n: usize) -> DiscreteGame {
        let grid = TimeGrid::new(n, spec.horizon).unwrap();
        DiscreteGame::new(spec, &grid).unwrap()
    }

    #[test]
    fn stochastic_specs_are_rejected() {
        let spec = samples::reference_stochastic().validate().unwrap();
        let grid = TimeGrid::new(16, 1.0).unwrap();
        assert!(matches!(
            DiscreteGame::new(&spec, &grid),
            Err(Error::RequiresDeterministic)
        ));
    }

    #[test]
    fn follower_br_vanishes_without_stakes() {
        // Q2 = G2 = 0 leaves only the control penalty: v = 0.
        let spec = GameSpec::scalar(0.1, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0)
            .validate()
            .unwrap();
        let g = game(&spec, 50);
        let u = vec![DVector::from_element(1, 0.7); 50];
        let br = g.follower_br(&u).unwrap();
        for v in &br.v {
            assert_eq!(v[0], 0.0);
        }
    }

    #[test]
    fn follower_br_vanishes_without_b2() {
        let spec = samples::follower_free().validate().unwrap();
        let g = game(&spec, 50);
        let u = vec![DVector::from_element(1, -0.4); 50];
        let br = g.follower_br(&u).unwrap();
        for v in &br.v {
            assert_eq!(v[0], 0.0);
        }
    }

    /// The recursion must return the exact argmin: no perturbation may
    /// decrease the discrete follower cost.
    #[test]
    fn follower_br_is_the_exact_argmin() {
        let spec = samples::reference_deterministic().validate().unwrap();
        let n = 60;
        let g = game(&spec, n);
        let mut rng = noise::aux_rng(3, 0);
        let u: Vec<DVector<f64>> = (0..n)
            .map(|_| DVector::from_fn(1, |_, _| rng.sample(StandardNormal)))
            .collect();
        let br = g.follower_br(&u).unwrap();
        let j_star = g.follower_cost(&u, &br.v);
        for _ in 0..20 {
            let dir: Vec<DVector<f64>> = (0..n)
                .map(|_| DVector::from_fn(1, |_, _| rng.sample(StandardNormal)))
                .collect();
            for eps in [1e-4, 1e-2] {
                let v: Vec<DVector<f64>> = br
                    .v
                    .iter()
                    .zip(&dir)
                    .map(|(v, d)| v + d * eps)
                    .collect();
                let j = g.follower_cost(&u, &v);
                assert!(
                    j - j_star >= -1e-12,
                    "perturbation decreased J2 by {}",
                    j_star - j
                );
            }
        }
    }

    /// Central finite differences are exact for quadratics; the adjoint
    /// gradient must match them to round-off.
    #[test]
    fn reduced_gradient_matches_finite_differences() {
        let spec = samples::reference_deterministic().validate().unwrap();
        let n = 40;
        let g = game(&spec, n);
        let mut rng = noise::aux_rng(5, 0);
        let u: Vec<DVector<f64>> = (0..n)
            .map(|_| DVector::from_fn(1, |_, _| rng.sample(StandardNormal)))
            .collect();
        let grad = g.reduced_gradient(&u).unwrap();
        let delta = 1e-4;
        for k in (0..n).step_by(7) {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[k][0] += delta;
            dn[k][0] -= delta;
            let fd =
                (g.reduced_cost(&up).unwrap() - g.reduced_cost(&dn).unwrap()) / (2.0 * delta);
            assert!(
                (fd - grad[k][0]).abs() <= 1e-9 * (1.0 + fd.abs()),
                "node {k}: fd {fd} vs adjoint {}",
                grad[k][0]
            );
        }
    }

    #[test]
    fn zero_initial_state_solves_to_zero() {
        let mut spec = samples::reference_deterministic();
        spec.x0[0] = 0.0;
        let spec = spec.validate().unwrap();
        let g = game(&spec, 80);
        let sol = g.leader_solve().unwrap();
        assert_eq!(sol.j1, 0.0);
        for u in &sol.u {
            assert_eq!(u[0], 0.0);
        }
    }

    /// Without a follower the problem is single-player discrete LQR, whose
    /// value has its own backward recursion: an independent second oracle.
    #[test]
    fn follower_free_matches_discrete_lqr_value() {
        let spec = samples::follower_free().validate().unwrap();
        let n = 200;
        let g = game(&spec, n);
        let sol = g.leader_solve().unwrap();

        let h = 1.0 / n as f64;
        let (a, b1, q1, r1, g1) = (0.0, 1.0, 0.0, 1.0, 1.0);
        let m = 1.0 + h * a;
        let mut p = g1;
        for _ in 0..n {
            let w = r1 + h * b1 * p * b1;
            p = h * q1 + m * p * m - h * m * p * b1 / w * b1 * p * m;
        }
        let expected = 0.5 * p;
        assert!(
            (sol.j1 - expected).abs() <= 1e-10,
            "CG {} vs recursion {}",
            sol.j1,
            expected
        );
    }

    #[test]
    fn leader_stationarity_at_the_solution() {
        let spec = samples::reference_deterministic().validate().unwrap();
        let n = 100;
        let g = game(&spec, n);
        let sol = g.leader_solve().unwrap();
        assert!(sol.gradient_norm <= CG_TOL * 10.0);
        // Independent numerical gradient (central differences, exact for
        // quadratics up to round-off).
        let delta = 1e-4;
        let mut norm_sq = 0.0;
        for k in 0..n {
            let mut up = sol.u.clone();
            let mut dn = sol.u.clone();
            up[k][0] += delta;
            dn[k][0] -= delta;
            let fd =
                (g.reduced_cost(&up).unwrap() - g.reduced_cost(&dn).unwrap()) / (2.0 * delta);
            norm_sq += fd * fd;
        }
        assert!(norm_sq.sqrt() <= 1e-8, "numerical gradient {}", norm_sq.sqrt());
    }

    #[test]
    fn degenerate_weights_report_zero_errors() {
        let spec = GameSpec::scalar(0.2, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0)
            .validate()
            .unwrap();
        let report = convergence_report(&spec, &[50, 100]).unwrap();
        for row in &report.rows {
            assert_eq!(row.abs_err, 0.0);
            assert!(row.order.is_none());
        }
    }

    #[test]
    fn transcription_is_first_order() {
        let spec = samples::reference_deterministic().validate().unwrap();
        let report = convergence_report(&spec, &[250, 500, 1000]).unwrap();
        for row in &report.rows[..2] {
            let order = row.order.expect("order defined");
            assert!(
                (0.7..=1.3).contains(&order),
                "observed order {order} at N = {}",
                row.n
            );
        }
    }

    #[test]
    fn follower_br_tracks_the_continuous_response() {
        let spec = samples::reference_deterministic().validate().unwrap();
        let n = 2000;
        let grid = TimeGrid::new(n, spec.horizon).unwrap();
        let g = DiscreteGame::new(&spec, &grid).unwrap();
        let (u_cont, v_cont) = sampled_continuous_controls(&spec, &grid).unwrap();
        let br = g.follower_br(&u_cont).unwrap();
        let mut gap = 0.0_f64;
        for k in 0..n {
            gap = gap.max((&br.v[k] - &v_cont[k]).amax());
        }
        assert!(gap <= 5e-3, "sup-norm gap {gap}");
    }
}
