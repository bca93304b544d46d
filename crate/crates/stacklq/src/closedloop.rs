//! Closed-loop (memoryless perfect-state) leader problem for scalar games.
//!
//! The leader's strategy is a field `u(t, x)` whose state slope is bounded
//! by `K_b`; affine strategies suffice, and the optimal slope is bang-bang
//! because the Hamiltonian is affine in it. With the ansatz
//! `y = xi x`, `p1 = eta x`, `p2 = zeta x` the scalar profile solves the
//! two-point boundary-value system
//!
//! ```text
//! xi'   = [r1 eta + r2 zeta + B1 bang] xi + r2 eta,            xi(0) = 0,
//! eta'  = [r1 eta + r2 zeta - 2A - C^2] eta + Q2 xi - Q1,      eta(T) = -G2 xi(T) + G1,
//! zeta' = [r1 eta + r2 zeta - 2A - C^2 - B1 bang] zeta - Q2,   zeta(T) = G2,
//! ```
//!
//! with `r1 = B1^2/R1`, `r2 = B2^2/R2`, switching quantity
//! `delta = -B1 xi zeta` and `bang = bang(K_b, delta)`. The bang terms
//! carry the bound `K_b` explicitly: writing out
//! `B1 * bang(K_b, delta) * xi = K_b sgn(zeta) |B1 xi|`, the slope factor
//! `K_b` must multiply the sign term for the equations to be consistent
//! with the Hamiltonian system they come from.
//!
//! Under constant coefficients the martingale components of `eta` and
//! `zeta` vanish identically; they are carried as explicit zero paths.
//!
//! The candidate strategy is
//! `u(t, x) = bang(t) x - bang(t) x*(t) - R1^-1 B1 eta(t) x*(t)` around the
//! nominal trajectory `x*`. Along the realized nominal path this reduces
//! to `u = -R1^-1 B1 eta x`, which is what the simulator integrates; the
//! affine decomposition (slope + offset around a deterministic reference)
//! is kept on the law for inspection and slope checks.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::game::{GameSpec, ScalarGame};
use crate::grid::TimeGrid;
use crate::noise;
use crate::openloop::{estimate_from_path_costs, CostEstimate};
use crate::riccati::BLOWUP_LIMIT;

/// Bang-bang selector: `-bound` for positive switching values, `+bound`
/// for negative ones. The tie `delta = 0` maps to `0`, which turns the
/// slope off and recovers the open-loop form.
pub fn bang(bound: f64, delta: f64) -> f64 {
    debug_assert!(bound >= 0.0);
    if delta > 0.0 {
        -bound
    } else if delta < 0.0 {
        bound
    } else {
        0.0
    }
}

/// Converged solution of the boundary-value system plus the realized
/// bang record.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopProfile {
    pub grid: TimeGrid,
    pub xi: Vec<f64>,
    pub eta: Vec<f64>,
    pub zeta: Vec<f64>,
    /// Realized slope `u2* = bang(K_b, delta)` per node.
    pub bang: Vec<f64>,
    /// Martingale components, identically zero for constant coefficients.
    pub eta2: Vec<f64>,
    pub zeta2: Vec<f64>,
    pub bound: f64,
    pub iterations: usize,
    pub terminal_mismatch_eta: f64,
    pub terminal_mismatch_zeta: f64,
}

impl ClosedLoopProfile {
    /// Switching quantity `delta = -B1 xi zeta` at node `k`.
    pub fn delta(&self, k: usize, b1: f64) -> f64 {
        -b1 * self.xi[k] * self.zeta[k]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileMethod {
    /// Alternate backward `(eta, zeta)` and forward `xi` integration with
    /// a damped update and a bang field frozen per sweep.
    FixedPoint,
    /// Forward shooting on `(eta(0), zeta(0))` with Broyden updates
    /// against both terminal conditions.
    Shooting,
}

const PROFILE_TOL: f64 = 1e-9;
const FIXED_POINT_MAX_ITER: usize = 1000;
const SHOOTING_MAX_ITER: usize = 100;

struct ProfileOde {
    s: ScalarGame,
    bound: f64,
}

impl ProfileOde {
    /// `(eta', zeta')` given interpolated `xi` and a frozen bang value.
    fn eta_zeta_rhs(&self, eta: f64, zeta: f64, xi: f64, b: f64) -> (f64, f64) {
        let s = &self.s;
        let common = s.r1_eff() * eta + s.r2_eff() * zeta;
        let shift = common - 2.0 * s.a - s.c * s.c;
        let deta = shift * eta + s.q2 * xi - s.q1;
        let dzeta = (shift - s.b1 * b) * zeta - s.q2;
        (deta, dzeta)
    }

    fn xi_rhs(&self, xi: f64, eta: f64, zeta: f64, b: f64) -> f64 {
        let s = &self.s;
        let common = s.r1_eff() * eta + s.r2_eff() * zeta;
        (common + s.b1 * b) * xi + s.r2_eff() * eta
    }

    /// Live bang value from the current states (used by shooting).
    fn live_bang(&self, xi: f64, zeta: f64) -> f64 {
        bang(self.bound, -self.s.b1 * xi * zeta)
    }
}

fn interp(path: &[f64], grid: &TimeGrid, t: f64) -> f64 {
    let (k, w) = grid.locate(t);
    if w == 0.0 {
        path[k]
    } else if w == 1.0 {
        path[k + 1]
    } else {
        path[k] * (1.0 - w) + path[k + 1] * w
    }
}

fn check_finite_scalar(v: f64, t: f64) -> Result<()> {
    if !v.is_finite() || v.abs() > BLOWUP_LIMIT {
        return Err(Error::BlowUp { t, entry: v });
    }
    Ok(())
}

/// Solves the `(xi, eta, zeta)` boundary-value system.
///
/// The game must be scalar. Existence is open in general;
/// `NoConvergence` is a legitimate, reportable outcome rather than a bug.
pub fn solve_profile(
    spec: &GameSpec,
    grid: &TimeGrid,
    bound: f64,
    method: ProfileMethod,
) -> Result<ClosedLoopProfile> {
    let s = spec.as_scalar()?;
    if !(bound >= 0.0) {
        return Err(Error::DimensionMismatch(format!(
            "closed-loop bound must be nonnegative, got {bound}"
        )));
    }
    let ode = ProfileOde { s, bound };
    match method {
        ProfileMethod::FixedPoint => solve_fixed_point(&ode, grid),
        ProfileMethod::Shooting => solve_shooting(&ode, grid),
    }
}

fn finish_profile(
    ode: &ProfileOde,
    grid: &TimeGrid,
    xi: Vec<f64>,
    eta: Vec<f64>,
    zeta: Vec<f64>,
    iterations: usize,
) -> ClosedLoopProfile {
    let n = grid.n_steps();
    let bang_field: Vec<f64> = (0..=n)
        .map(|k| bang(ode.bound, -ode.s.b1 * xi[k] * zeta[k]))
        .collect();
    let terminal_mismatch_eta = (eta[n] - (-ode.s.g2 * xi[n] + ode.s.g1)).abs();
    let terminal_mismatch_zeta = (zeta[n] - ode.s.g2).abs();
    ClosedLoopProfile {
        grid: grid.clone(),
        eta2: vec![0.0; n + 1],
        zeta2: vec![0.0; n + 1],
        xi,
        eta,
        zeta,
        bang: bang_field,
        bound: ode.bound,
        iterations,
        terminal_mismatch_eta,
        terminal_mismatch_zeta,
    }
}

/// One backward `(eta, zeta)` pass followed by one forward `xi` pass,
/// with the bang field frozen; errors on finite-time escape.
/// `bang_field[k]` is the value on the interval `[t_k, t_{k+1}]`.
fn sweep_once(
    ode: &ProfileOde,
    grid: &TimeGrid,
    xi: &[f64],
    bang_field: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let n = grid.n_steps();
    let h = grid.h();
    let mut eta_new = vec![0.0; n + 1];
    let mut zeta_new = vec![0.0; n + 1];
    eta_new[n] = -ode.s.g2 * xi[n] + ode.s.g1;
    zeta_new[n] = ode.s.g2;
    for k in (0..n).rev() {
        // The left node's bang value rules the interval [t_k, t_{k+1}].
        let b = bang_field[k];
        let t_hi = grid.node(k + 1);
        let xi_hi = xi[k + 1];
        let xi_mid = interp(xi, grid, t_hi - 0.5 * h);
        let xi_lo = xi[k];
        let (e, z) = (eta_new[k + 1], zeta_new[k + 1]);
        let (k1e, k1z) = ode.eta_zeta_rhs(e, z, xi_hi, b);
        let (k2e, k2z) = ode.eta_zeta_rhs(e - 0.5 * h * k1e, z - 0.5 * h * k1z, xi_mid, b);
        let (k3e, k3z) = ode.eta_zeta_rhs(e - 0.5 * h * k2e, z - 0.5 * h * k2z, xi_mid, b);
        let (k4e, k4z) = ode.eta_zeta_rhs(e - h * k3e, z - h * k3z, xi_lo, b);
        eta_new[k] = e - h / 6.0 * (k1e + 2.0 * k2e + 2.0 * k3e + k4e);
        zeta_new[k] = z - h / 6.0 * (k1z + 2.0 * k2z + 2.0 * k3z + k4z);
        check_finite_scalar(eta_new[k], grid.node(k))?;
        check_finite_scalar(zeta_new[k], grid.node(k))?;
    }

    let mut xi_new = vec![0.0; n + 1];
    for k in 0..n {
        let b = bang_field[k];
        let t = grid.node(k);
        let ez = |tt: f64| (interp(&eta_new, grid, tt), interp(&zeta_new, grid, tt));
        let x = xi_new[k];
        let (e1, z1) = (eta_new[k], zeta_new[k]);
        let k1 = ode.xi_rhs(x, e1, z1, b);
        let (e2, z2) = ez(t + 0.5 * h);
        let k2 = ode.xi_rhs(x + 0.5 * h * k1, e2, z2, b);
        let k3 = ode.xi_rhs(x + 0.5 * h * k2, e2, z2, b);
        let (e4, z4) = (eta_new[k + 1], zeta_new[k + 1]);
        let k4 = ode.xi_rhs(x + h * k3, e4, z4, b);
        xi_new[k + 1] = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        check_finite_scalar(xi_new[k + 1], grid.node(k + 1))?;
    }
    Ok((xi_new, eta_new, zeta_new))
}

/// Frozen bang field on intervals, from the midpoint values of the
/// previous sweep's paths. Midpoints avoid pinning the degenerate
/// boundary tie `delta(0) = 0` onto the whole first interval.
fn interval_bang_field(ode: &ProfileOde, grid: &TimeGrid, xi: &[f64], zeta: &[f64]) -> Vec<f64> {
    let h = grid.h();
    (0..grid.n_steps())
        .map(|k| {
            let t = grid.node(k) + 0.5 * h;
            let xi_mid = interp(xi, grid, t);
            let zeta_mid = interp(zeta, grid, t);
            bang(ode.bound, -ode.s.b1 * xi_mid * zeta_mid)
        })
        .collect()
}

fn solve_fixed_point(ode: &ProfileOde, grid: &TimeGrid) -> Result<ClosedLoopProfile> {
    let n = grid.n_steps();
    let mut xi = vec![0.0; n + 1];
    let mut eta = vec![0.0; n + 1];
    let mut zeta = vec![0.0; n + 1];
    let mut bang_field = vec![0.0; n];
    let mut snapshot = (xi.clone(), eta.clone(), zeta.clone());
    let mut prev_bang: Vec<Vec<f64>> = Vec::new();
    let mut damping = 0.5_f64;
    let mut last_update = f64::INFINITY;

    for iter in 1..=FIXED_POINT_MAX_ITER {
        let (xi_new, eta_new, zeta_new) = match sweep_once(ode, grid, &xi, &bang_field) {
            Ok(paths) => paths,
            Err(_) => {
                // The last merge overshot into escape territory; roll back
                // and retry more cautiously.
                (xi, eta, zeta) = snapshot.clone();
                damping = (damping * 0.5).max(1.0 / 1024.0);
                if damping <= 1.0 / 1024.0 {
                    return Err(Error::NoConvergence {
                        iterations: iter,
                        update: last_update,
                    });
                }
                continue;
            }
        };

        // Raw Picard step, capped so one merge can never move the iterate
        // by more than (1 + its sup norm); the terminal feedback
        // eta(T) = -G2 xi(T) + G1 makes uncapped early steps escape.
        let mut raw = 0.0_f64;
        let mut scale = 1.0_f64;
        for k in 0..=n {
            raw = raw
                .max((xi_new[k] - xi[k]).abs())
                .max((eta_new[k] - eta[k]).abs())
                .max((zeta_new[k] - zeta[k]).abs());
            scale = scale.max(xi[k].abs()).max(eta[k].abs()).max(zeta[k].abs());
        }
        let lambda = damping.min(scale / raw.max(1e-300));

        snapshot = (xi.clone(), eta.clone(), zeta.clone());
        let mut update = 0.0_f64;
        for k in 0..=n {
            let dx = lambda * (xi_new[k] - xi[k]);
            let de = lambda * (eta_new[k] - eta[k]);
            let dz = lambda * (zeta_new[k] - zeta[k]);
            update = update.max(dx.abs()).max(de.abs()).max(dz.abs());
            xi[k] += dx;
            eta[k] += de;
            zeta[k] += dz;
        }

        if update < PROFILE_TOL {
            return Ok(finish_profile(ode, grid, xi, eta, zeta, iter));
        }

        // Refresh the bang field between sweeps; bisect the damping if the
        // field cycles with period two or the update grows.
        let new_bang = interval_bang_field(ode, grid, &xi, &zeta);
        let cycling = prev_bang.len() >= 2
            && new_bang == prev_bang[prev_bang.len() - 2]
            && new_bang != prev_bang[prev_bang.len() - 1];
        if cycling || update > last_update {
            damping = (damping * 0.5).max(1.0 / 1024.0);
        }
        prev_bang.push(bang_field.clone());
        if prev_bang.len() > 2 {
            prev_bang.remove(0);
        }
        bang_field = new_bang;
        last_update = update;
    }
    Err(Error::NoConvergence {
        iterations: FIXED_POINT_MAX_ITER,
        update: last_update,
    })
}

/// Loose fixed-point pass used only to seed the shooting unknowns.
fn warm_start(ode: &ProfileOde, grid: &TimeGrid) -> Option<(f64, f64)> {
    let coarse = TimeGrid::new(grid.n_steps().min(200), grid.horizon()).ok()?;
    solve_fixed_point(ode, &coarse)
        .ok()
        .map(|p| (p.eta[0], p.zeta[0]))
}

/// Forward integration of the full triple from guessed initial costates.
/// The bang value is frozen per step from an Euler midpoint predictor,
/// matching the fixed-point sweep's midpoint-of-interval convention.
fn shoot(ode: &ProfileOde, grid: &TimeGrid, eta0: f64, zeta0: f64) -> Result<[Vec<f64>; 3]> {
    let n = grid.n_steps();
    let h = grid.h();
    let mut xi = vec![0.0; n + 1];
    let mut eta = vec![0.0; n + 1];
    let mut zeta = vec![0.0; n + 1];
    eta[0] = eta0;
    zeta[0] = zeta0;
    let rhs = |state: [f64; 3], b: f64| -> [f64; 3] {
        let [x, e, z] = state;
        let (de, dz) = ode.eta_zeta_rhs(e, z, x, b);
        [ode.xi_rhs(x, e, z, b), de, dz]
    };
    for k in 0..n {
        let y0 = [xi[k], eta[k], zeta[k]];
        let predictor = rhs(y0, ode.live_bang(y0[0], y0[2]));
        let mid: [f64; 3] = std::array::from_fn(|i| y0[i] + 0.5 * h * predictor[i]);
        let b = ode.live_bang(mid[0], mid[2]);
        let k1 = rhs(y0, b);
        let k2 = rhs(std::array::from_fn(|i| y0[i] + 0.5 * h * k1[i]), b);
        let k3 = rhs(std::array::from_fn(|i| y0[i] + 0.5 * h * k2[i]), b);
        let k4 = rhs(std::array::from_fn(|i| y0[i] + h * k3[i]), b);
        let next: [f64; 3] =
            std::array::from_fn(|i| y0[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
        for v in next {
            check_finite_scalar(v, grid.node(k + 1))?;
        }
        xi[k + 1] = next[0];
        eta[k + 1] = next[1];
        zeta[k + 1] = next[2];
    }
    Ok([xi, eta, zeta])
}

fn solve_shooting(ode: &ProfileOde, grid: &TimeGrid) -> Result<ClosedLoopProfile> {
    let n = grid.n_steps();
    let residual = |theta: &DVector<f64>| -> Result<(DVector<f64>, [Vec<f64>; 3])> {
        let paths = shoot(ode, grid, theta[0], theta[1])?;
        let [ref xi, ref eta, ref zeta] = paths;
        let r = DVector::from_column_slice(&[
            eta[n] - (-ode.s.g2 * xi[n] + ode.s.g1),
            zeta[n] - ode.s.g2,
        ]);
        Ok((r, paths))
    };

    // Warm start from a coarse fixed-point pass; the forward system can
    // escape in finite time from a cold guess. Fall back to the terminal
    // data if the pass itself fails.
    let mut theta = match warm_start(ode, grid) {
        Some((eta0, zeta0)) => DVector::from_column_slice(&[eta0, zeta0]),
        None => DVector::from_column_slice(&[ode.s.g1, ode.s.g2]),
    };
    let (mut r, mut paths) = residual(&theta)?;

    // Forward-difference Jacobian to seed Broyden.
    let fd = 1e-6;
    let mut jac = DMatrix::zeros(2, 2);
    for j in 0..2 {
        let mut bumped = theta.clone();
        let step = fd * (1.0 + bumped[j].abs());
        bumped[j] += step;
        let (rb, _) = residual(&bumped)?;
        jac.set_column(j, &((rb - &r) / step));
    }

    for iter in 1..=SHOOTING_MAX_ITER {
        if r.amax() <= PROFILE_TOL {
            let [xi, eta, zeta] = paths;
            return Ok(finish_profile(ode, grid, xi, eta, zeta, iter));
        }
        let step = jac
            .clone()
            .lu()
            .solve(&r)
            .ok_or(Error::SingularKkt("shooting Jacobian is singular"))?;
        let theta_new = &theta - &step;
        let (r_new, paths_new) = residual(&theta_new)?;
        let dtheta = &theta_new - &theta;
        let dr = &r_new - &r;
        let denom = dtheta.dot(&dtheta);
        if denom > 0.0 {
            jac += (dr - &jac * &dtheta) * dtheta.transpose() / denom;
        }
        theta = theta_new;
        r = r_new;
        paths = paths_new;
    }
    Err(Error::NoConvergence {
        iterations: SHOOTING_MAX_ITER,
        update: r.amax(),
    })
}

/// Candidate strategy assembled from a converged profile: affine map
/// `u(t, x) = bang(t) x + offset(t)` around the deterministic reference
/// trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopLaw {
    pub profile: ClosedLoopProfile,
    /// Drift-flow reference path `x*` (diffusion dropped).
    pub reference: Vec<f64>,
    /// `offset = -bang x* - R1^-1 B1 eta x*` per node.
    pub offset: Vec<f64>,
    s: ScalarGame,
}

impl ClosedLoopLaw {
    /// The strategy field at node `k`.
    pub fn u(&self, k: usize, x: f64) -> f64 {
        self.profile.bang[k] * x + self.offset[k]
    }

    /// Slope of the field; bounded by `K_b` everywhere.
    pub fn slope(&self, k: usize) -> f64 {
        self.profile.bang[k]
    }

    /// Leader control along the realized nominal path.
    pub fn u_nominal(&self, k: usize, x: f64) -> f64 {
        -(self.s.b1 / self.s.r1) * self.profile.eta[k] * x
    }

    /// Follower control consistent with `p2 = zeta x`.
    pub fn v_nominal(&self, k: usize, x: f64) -> f64 {
        -(self.s.b2 / self.s.r2) * self.profile.zeta[k] * x
    }
}

/// Integrates the deterministic reference path and assembles the affine
/// strategy.
pub fn synthesize_closed(
    profile: ClosedLoopProfile,
    spec: &GameSpec,
    grid: &TimeGrid,
) -> Result<ClosedLoopLaw> {
    let s = spec.as_scalar()?;
    assert_eq!(
        grid, &profile.grid,
        "profile was solved on a different grid"
    );
    let n = grid.n_steps();
    let h = grid.h();
    let mut reference = vec![0.0; n + 1];
    reference[0] = s.x0;
    let drift = |t: f64, x: f64, profile: &ClosedLoopProfile| -> f64 {
        let eta = interp(&profile.eta, grid, t);
        let zeta = interp(&profile.zeta, grid, t);
        (s.a - s.r1_eff() * eta - s.r2_eff() * zeta) * x
    };
    for k in 0..n {
        let t = grid.node(k);
        let x = reference[k];
        let k1 = drift(t, x, &profile);
        let k2 = drift(t + 0.5 * h, x + 0.5 * h * k1, &profile);
        let k3 = drift(t + 0.5 * h, x + 0.5 * h * k2, &profile);
        let k4 = drift(t + h, x + h * k3, &profile);
        reference[k + 1] = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    let offset: Vec<f64> = (0..=n)
        .map(|k| -profile.bang[k] * reference[k] - (s.b1 / s.r1) * profile.eta[k] * reference[k])
        .collect();
    Ok(ClosedLoopLaw {
        profile,
        reference,
        offset,
        s,
    })
}

/// One simulated closed-loop path.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedPath {
    pub x: Vec<f64>,
    pub dw: Vec<f64>,
}

/// Ensemble of closed-loop paths; the transported quantities
/// `y = xi x`, `p1 = eta x`, `p2 = zeta x`, `q1 = C eta x`,
/// `q2 = C zeta x` are reconstructed through accessors.
#[derive(Debug, Clone)]
pub struct ClosedLoopEnsemble {
    pub grid: TimeGrid,
    pub seed: u64,
    pub paths: Vec<ClosedPath>,
    pub law: ClosedLoopLaw,
}

impl ClosedLoopEnsemble {
    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }

    pub fn x(&self, path: usize, k: usize) -> f64 {
        self.paths[path].x[k]
    }

    pub fn y(&self, path: usize, k: usize) -> f64 {
        self.law.profile.xi[k] * self.x(path, k)
    }

    pub fn p1(&self, path: usize, k: usize) -> f64 {
        self.law.profile.eta[k] * self.x(path, k)
    }

    pub fn p2(&self, path: usize, k: usize) -> f64 {
        self.law.profile.zeta[k] * self.x(path, k)
    }

    pub fn q1(&self, path: usize, k: usize) -> f64 {
        (self.law.s.c * self.law.profile.eta[k] + self.law.profile.eta2[k]) * self.x(path, k)
    }

    pub fn q2(&self, path: usize, k: usize) -> f64 {
        (self.law.s.c * self.law.profile.zeta[k] + self.law.profile.zeta2[k]) * self.x(path, k)
    }

    pub fn u(&self, path: usize, k: usize) -> f64 {
        self.law.u_nominal(k, self.x(path, k))
    }

    pub fn v(&self, path: usize, k: usize) -> f64 {
        self.law.v_nominal(k, self.x(path, k))
    }
}

/// Simulates the closed system under the candidate strategy with the
/// follower playing `v = -R2^-1 B2 zeta x`, and evaluates both costs by
/// path-wise trapezoidal quadrature.
///
/// The nominal path solves the same SDE as the simulated state under the
/// same noise, so the strategy's realized control is
/// `u = -R1^-1 B1 eta x` along every path.
pub fn simulate_closed(
    law: &ClosedLoopLaw,
    spec: &GameSpec,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<(ClosedLoopEnsemble, CostEstimate)> {
    let s = spec.as_scalar()?;
    assert_eq!(
        grid, &law.profile.grid,
        "law was synthesized on a different grid"
    );
    let n = grid.n_steps();
    let h = grid.h();
    let mut paths = Vec::with_capacity(n_paths);
    let mut costs = Vec::with_capacity(n_paths);
    for p in 0..n_paths {
        let mut x = vec![0.0; n + 1];
        let mut dw = vec![0.0; n];
        x[0] = s.x0;
        let mut j1 = 0.0;
        let mut j2 = 0.0;
        for k in 0..=n {
            let u = law.u_nominal(k, x[k]);
            let v = law.v_nominal(k, x[k]);
            let w = grid.trapezoid_weight(k);
            j1 += w * 0.5 * (s.q1 * x[k] * x[k] + s.r1 * u * u);
            j2 += w * 0.5 * (s.q2 * x[k] * x[k] + s.r2 * v * v);
            if k == n {
                break;
            }
            let inc = noise::brownian_increment(seed, p as u64, k as u64, h);
            let drift = s.a * x[k] + s.b1 * u + s.b2 * v;
            let next = x[k] + h * drift + s.c * x[k] * inc;
            check_finite_scalar(next, grid.node(k + 1))?;
            x[k + 1] = next;
            dw[k] = inc;
        }
        j1 += 0.5 * s.g1 * x[n] * x[n];
        j2 += 0.5 * s.g2 * x[n] * x[n];
        costs.push((j1, j2));
        paths.push(ClosedPath { x, dw });
    }
    let estimate = estimate_from_path_costs(&costs);
    Ok((
        ClosedLoopEnsemble {
            grid: grid.clone(),
            seed,
            paths,
            law: law.clone(),
        },
        estimate,
    ))
}

/// Exact-expectation closed-loop costs through the scalar second-moment
/// ODE `m' = [2(A - r1 eta - r2 zeta) + C^2] m`, `m(0) = x0^2`.
pub fn costs_closed_moment(
    profile: &ClosedLoopProfile,
    spec: &GameSpec,
    grid: &TimeGrid,
) -> Result<(f64, f64)> {
    let s = spec.as_scalar()?;
    let h = grid.h();
    let rhs = |t: f64, state: [f64; 3]| -> [f64; 3] {
        let eta = interp(&profile.eta, grid, t);
        let zeta = interp(&profile.zeta, grid, t);
        let [m, _, _] = state;
        let dm = (2.0 * (s.a - s.r1_eff() * eta - s.r2_eff() * zeta) + s.c * s.c) * m;
        let dj1 = 0.5 * (s.q1 + s.r1_eff() * eta * eta) * m;
        let dj2 = 0.5 * (s.q2 + s.r2_eff() * zeta * zeta) * m;
        [dm, dj1, dj2]
    };
    let mut state = [s.x0 * s.x0, 0.0, 0.0];
    for k in 0..grid.n_steps() {
        let t = grid.node(k);
        let k1 = rhs(t, state);
        let k2 = rhs(
            t + 0.5 * h,
            std::array::from_fn(|i| state[i] + 0.5 * h * k1[i]),
        );
        let k3 = rhs(
            t + 0.5 * h,
            std::array::from_fn(|i| state[i] + 0.5 * h * k2[i]),
        );
        let k4 = rhs(t + h, std::array::from_fn(|i| state[i] + h * k3[i]));
        state = std::array::from_fn(|i| {
            state[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        });
        check_finite_scalar(state[0], grid.node(k + 1))?;
    }
    let m_t = state[0];
    Ok((
        state[1] + 0.5 * s.g1 * m_t,
        state[2] + 0.5 * s.g2 * m_t,
    ))
}

/// RMS over paths of the integrated discrete defects of the transported
/// `(y, p1, p2)` equations; all three are `O(h)`.
pub fn transport_defect_rms(ens: &ClosedLoopEnsemble, spec: &GameSpec) -> Result<[f64; 3]> {
    let s = spec.as_scalar()?;
    let grid = &ens.grid;
    let h = grid.h();
    let n = grid.n_steps();
    let mut acc = [0.0_f64; 3];
    for p in 0..ens.n_paths() {
        let mut d = [0.0_f64; 3];
        for k in 0..n {
            let bang_k = ens.law.profile.bang[k];
            let (y, p1, p2) = (ens.y(p, k), ens.p1(p, k), ens.p2(p, k));
            let (q1, q2) = (ens.q1(p, k), ens.q2(p, k));
            let x = ens.x(p, k);
            let dw = ens.paths[p].dw[k];
            // dy = [(A + B1 bang) y + r2 p1] dt + C y dW
            let y_drift = (s.a + s.b1 * bang_k) * y + s.r2_eff() * p1;
            d[0] += ens.y(p, k + 1) - y - h * y_drift - s.c * y * dw;
            // dp1 = -[A p1 + C q1 - Q2 y + Q1 x] dt + q1 dW
            let p1_drift = s.a * p1 + s.c * q1 - s.q2 * y + s.q1 * x;
            d[1] += ens.p1(p, k + 1) - p1 + h * p1_drift - q1 * dw;
            // dp2 = -[(A + B1 bang) p2 + C q2 + Q2 x] dt + q2 dW
            let p2_drift = (s.a + s.b1 * bang_k) * p2 + s.c * q2 + s.q2 * x;
            d[2] += ens.p2(p, k + 1) - p2 + h * p2_drift - q2 * dw;
        }
        for i in 0..3 {
            acc[i] += d[i] * d[i];
        }
    }
    Ok(std::array::from_fn(|i| {
        (acc[i] / ens.n_paths() as f64).sqrt()
    }))
}

/// One Hamiltonian check point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HamiltonianSample {
    pub node: usize,
    pub x: f64,
}

/// Outcome of [`hamiltonian_scan`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanReport {
    pub samples: usize,
    pub degenerate: usize,
    pub sign_violations: usize,
    /// Worst deviation of `H1(u1* + d) - H1(u1*)` from `R1 d^2 / 2`.
    pub max_curvature_error: f64,
}

/// Samples along the deterministic nominal path, evenly spaced in time.
pub fn nominal_samples(law: &ClosedLoopLaw, count: usize) -> Vec<HamiltonianSample> {
    let n = law.profile.grid.n_steps();
    (0..count)
        .map(|i| {
            let node = i * n / count.max(1);
            HamiltonianSample {
                node,
                x: law.reference[node],
            }
        })
        .collect()
}

/// Pointwise minimality checks of the leader's Hamiltonian.
///
/// (a) As a function of the offset control `u1`, the Hamiltonian is an
/// exact quadratic: `H1(u1* + d) - H1(u1*) = R1 d^2 / 2`.
/// (b) After substituting `u1*`, it is affine in the slope `u2` with
/// slope coefficient `-B1 y p2`; at non-degenerate samples the minimizer
/// over `{-K_b, 0, K_b}` must be the profile's bang value.
pub fn hamiltonian_scan(
    profile: &ClosedLoopProfile,
    spec: &GameSpec,
    samples: &[HamiltonianSample],
) -> Result<ScanReport> {
    let s = spec.as_scalar()?;
    let mut degenerate = 0usize;
    let mut sign_violations = 0usize;
    let mut max_curvature_error = 0.0_f64;

    let h1 = |k: usize, x: f64, u1: f64, u2: f64| -> f64 {
        let y = profile.xi[k] * x;
        let p1 = profile.eta[k] * x;
        let p2 = profile.zeta[k] * x;
        let q1 = s.c * profile.eta[k] * x;
        let q2 = s.c * profile.zeta[k] * x;
        p1 * ((s.a + s.b1 * u2) * x + s.b1 * u1 - s.r2_eff() * p2) + s.c * x * q1
            - y * ((s.a + s.b1 * u2) * p2 + s.c * q2 + s.q2 * x)
            + 0.5 * (s.q1 * x * x + s.r1 * (u2 * x + u1) * (u2 * x + u1))
    };

    for sample in samples {
        let k = sample.node;
        let x = sample.x;
        let p1 = profile.eta[k] * x;
        let u2_star = profile.bang[k];
        let u1_star = -u2_star * x - s.b1 / s.r1 * p1;

        // (a) exact quadratic completion in u1.
        for delta in [0.5, 1.0, -0.75] {
            let diff = h1(k, x, u1_star + delta, u2_star) - h1(k, x, u1_star, u2_star);
            let err = (diff - 0.5 * s.r1 * delta * delta).abs();
            max_curvature_error = max_curvature_error.max(err);
        }

        // (b) bang minimality in u2 (u1 re-optimized at each candidate).
        let delta_tilde = profile.delta(k, s.b1);
        let y = profile.xi[k] * x;
        let p2 = profile.zeta[k] * x;
        let slope = -s.b1 * y * p2;
        if delta_tilde.abs() <= 1e-10 || slope == 0.0 {
            degenerate += 1;
            continue;
        }
        let scan = [-profile.bound, 0.0, profile.bound];
        let mut best = f64::INFINITY;
        let mut best_u2 = 0.0;
        for &u2 in &scan {
            let u1 = -u2 * x - s.b1 / s.r1 * p1;
            let value = h1(k, x, u1, u2);
            if value < best {
                best = value;
                best_u2 = u2;
            }
        }
        let sign_ok = slope.signum() == delta_tilde.signum() && best_u2 == u2_star;
        if !sign_ok {
            sign_violations += 1;
        }
    }
    Ok(ScanReport {
        samples: samples.len(),
        degenerate,
        sign_violations,
        max_curvature_error,
    })
}
