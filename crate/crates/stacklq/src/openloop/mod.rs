//! Open-loop equilibrium: feedback synthesis, simulation, and costs.
//!
//! With `K` solving the augmented backward equation, the equilibrium
//! controls are linear in the stacked state `xhat = (x, y)`:
//!
//! ```text
//! u* = -R1^-1 B1' p1,   v* = -R2^-1 B2' p2,   phat = K xhat,
//! ```
//!
//! and the closed forward dynamics read
//! `dxhat = (Ahat - Bhat K) xhat dt + Chat xhat dW`. Euler-Maruyama with
//! scalar noise is used throughout (weak order 1, matching every
//! first-order budget downstream), with Brownian increments derived
//! per `(seed, path, step)` so ensembles are reproducible regardless of
//! how paths are partitioned.
//!
//! Costs are evaluated two independent ways: trapezoidal quadrature along
//! Monte Carlo paths, and transport of the second moment
//! `Sigma = E[xhat xhat']` through its deterministic Lyapunov ODE.

mod probes;

pub use probes::{
    follower_best_response, follower_response_check, perturbation_probe, FollowerResponse,
    Probe, ProbeReport,
};

use nalgebra::{DMatrix, DVector};

use crate::augment::{assemble_hat, HatSystem};
use crate::error::{Error, Result};
use crate::game::GameSpec;
use crate::grid::TimeGrid;
use crate::noise;
use crate::riccati::{RiccatiSolution, SystemTag, BLOWUP_LIMIT};

/// Node-wise linear feedback on the stacked state, synthesized from a
/// hat-system Riccati solution.
#[derive(Debug, Clone)]
pub struct FeedbackLaw {
    pub riccati: RiccatiSolution,
    /// `-R1^-1 B1'` applied to the `p1` rows of `K`, one `m1 x 2n` gain
    /// per node.
    pub u_gain: Vec<DMatrix<f64>>,
    /// `-R2^-1 B2'` applied to the `p2` rows of `K`, one `m2 x 2n` gain
    /// per node.
    pub v_gain: Vec<DMatrix<f64>>,
    pub(crate) hat: HatSystem,
    pub(crate) n: usize,
    neg_r1inv_b1t: DMatrix<f64>,
    neg_r2inv_b2t: DMatrix<f64>,
}

impl FeedbackLaw {
    pub fn grid(&self) -> &TimeGrid {
        &self.riccati.grid
    }

    /// Leader gain at arbitrary `t` (linear interpolation of `K`).
    pub fn u_gain_at(&self, t: f64) -> DMatrix<f64> {
        let k = self.riccati.at(t);
        &self.neg_r1inv_b1t * k.rows(0, self.n)
    }

    /// Follower gain at arbitrary `t`.
    pub fn v_gain_at(&self, t: f64) -> DMatrix<f64> {
        let k = self.riccati.at(t);
        &self.neg_r2inv_b2t * k.rows(self.n, self.n)
    }
}

/// Builds the equilibrium feedback pair from a hat-system solution.
pub fn synthesize(sol: RiccatiSolution, spec: &GameSpec) -> FeedbackLaw {
    assert_eq!(sol.tag, SystemTag::Hat, "law requires a hat-system solution");
    assert_eq!(sol.dim(), 2 * spec.n(), "Riccati dimension mismatch");
    let n = spec.n();
    let hat = assemble_hat(spec);
    let r1_inv = spec.r1.clone().try_inverse().expect("R1 positive definite");
    let r2_inv = spec.r2.clone().try_inverse().expect("R2 positive definite");
    let neg_r1inv_b1t = -(r1_inv * spec.b1.transpose());
    let neg_r2inv_b2t = -(r2_inv * spec.b2.transpose());
    let u_gain = sol
        .k
        .iter()
        .map(|k| &neg_r1inv_b1t * k.rows(0, n))
        .collect();
    let v_gain = sol
        .k
        .iter()
        .map(|k| &neg_r2inv_b2t * k.rows(n, n))
        .collect();
    FeedbackLaw {
        riccati: sol,
        u_gain,
        v_gain,
        hat,
        n,
        neg_r1inv_b1t,
        neg_r2inv_b2t,
    }
}

/// One simulated path: stacked state per node plus the Brownian increments
/// that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    /// `xhat` at nodes `0..=N`.
    pub xhat: Vec<DVector<f64>>,
    /// Increments `dW_k`, `k = 0..N`.
    pub dw: Vec<f64>,
}

/// Monte Carlo ensemble under a feedback law.
///
/// Only the forward state and increments are stored; the adjoint and
/// control paths are exact functions of them (`phat = K xhat`,
/// `qhat = K Chat xhat`, `u = gain_u xhat`, `v = gain_v xhat`) and are
/// reconstructed through the accessors, so they satisfy those identities
/// by construction.
#[derive(Debug, Clone)]
pub struct TrajectoryEnsemble {
    pub grid: TimeGrid,
    pub seed: u64,
    pub paths: Vec<PathSample>,
    pub law: FeedbackLaw,
}

impl TrajectoryEnsemble {
    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }

    /// State dimension `n` of the original game.
    pub fn n(&self) -> usize {
        self.law.n
    }

    pub fn xhat(&self, path: usize, k: usize) -> &DVector<f64> {
        &self.paths[path].xhat[k]
    }

    /// Original state component `x`.
    pub fn x(&self, path: usize, k: usize) -> DVector<f64> {
        self.xhat(path, k).rows(0, self.n()).into_owned()
    }

    /// Leader's extra forward component `y`.
    pub fn y(&self, path: usize, k: usize) -> DVector<f64> {
        self.xhat(path, k).rows(self.n(), self.n()).into_owned()
    }

    /// `phat = K xhat` (stacked `p1, p2`).
    pub fn phat(&self, path: usize, k: usize) -> DVector<f64> {
        self.law.riccati.node(k) * self.xhat(path, k)
    }

    /// `qhat = K Chat xhat` (stacked `q1, q2`).
    pub fn qhat(&self, path: usize, k: usize) -> DVector<f64> {
        self.law.riccati.node(k) * (&self.law.hat.c_hat * self.xhat(path, k))
    }

    pub fn control_u(&self, path: usize, k: usize) -> DVector<f64> {
        &self.law.u_gain[k] * self.xhat(path, k)
    }

    pub fn control_v(&self, path: usize, k: usize) -> DVector<f64> {
        &self.law.v_gain[k] * self.xhat(path, k)
    }
}

/// Per-node one-step transition matrices `I + h (Ahat - Bhat K_k)`.
fn transition_matrices(law: &FeedbackLaw, grid: &TimeGrid) -> Vec<DMatrix<f64>> {
    let h = grid.h();
    let dim = law.riccati.dim();
    let eye = DMatrix::<f64>::identity(dim, dim);
    (0..grid.n_steps())
        .map(|k| &eye + (&law.hat.a_hat - &law.hat.b_hat * law.riccati.node(k)) * h)
        .collect()
}

fn initial_xhat(spec: &GameSpec) -> DVector<f64> {
    let n = spec.n();
    let mut x = DVector::zeros(2 * n);
    x.rows_mut(0, n).copy_from(&spec.x0);
    x
}

fn simulate_path(
    transition: &[DMatrix<f64>],
    c_hat: &DMatrix<f64>,
    x0: &DVector<f64>,
    grid: &TimeGrid,
    seed: u64,
    path: usize,
) -> Result<PathSample> {
    let n_steps = grid.n_steps();
    let h = grid.h();
    let mut xhat = Vec::with_capacity(n_steps + 1);
    let mut dw = Vec::with_capacity(n_steps);
    xhat.push(x0.clone());
    for k in 0..n_steps {
        let inc = noise::brownian_increment(seed, path as u64, k as u64, h);
        let prev = &xhat[k];
        let next = &transition[k] * prev + (c_hat * prev) * inc;
        for &v in next.iter() {
            if !v.is_finite() || v.abs() > BLOWUP_LIMIT {
                return Err(Error::BlowUp {
                    t: grid.node(k + 1),
                    entry: v,
                });
            }
        }
        dw.push(inc);
        xhat.push(next);
    }
    Ok(PathSample { xhat, dw })
}

/// Simulates `n_paths` Euler-Maruyama paths of the closed system.
///
/// `x` starts at `x0` and `y` at zero on every path. Deterministic given
/// `(seed, n_paths, grid)`.
pub fn simulate(
    law: &FeedbackLaw,
    spec: &GameSpec,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    assert_eq!(grid, law.grid(), "law was synthesized on a different grid");
    let transition = transition_matrices(law, grid);
    let x0 = initial_xhat(spec);
    let mut paths = Vec::with_capacity(n_paths);
    for p in 0..n_paths {
        paths.push(simulate_path(
            &transition,
            &law.hat.c_hat,
            &x0,
            grid,
            seed,
            p,
        )?);
    }
    Ok(TrajectoryEnsemble {
        grid: grid.clone(),
        seed,
        paths,
        law: law.clone(),
    })
}

/// Monte Carlo cost estimates with standard errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostEstimate {
    pub j1: f64,
    pub j2: f64,
    pub se1: f64,
    pub se2: f64,
    pub n_paths: usize,
}

/// Trapezoidal leader/follower costs of one path.
fn path_costs(sample: &PathSample, law: &FeedbackLaw, spec: &GameSpec, grid: &TimeGrid) -> (f64, f64) {
    let n = spec.n();
    let n_steps = grid.n_steps();
    let mut j1 = 0.0;
    let mut j2 = 0.0;
    for k in 0..=n_steps {
        let w = grid.trapezoid_weight(k);
        let xh = &sample.xhat[k];
        let x = xh.rows(0, n);
        let u = &law.u_gain[k] * xh;
        let v = &law.v_gain[k] * xh;
        j1 += w * 0.5 * ((&spec.q1 * x).dot(&x) + (&spec.r1 * &u).dot(&u));
        j2 += w * 0.5 * ((&spec.q2 * x).dot(&x) + (&spec.r2 * &v).dot(&v));
    }
    let xt = sample.xhat[n_steps].rows(0, n);
    j1 += 0.5 * (&spec.g1 * xt).dot(&xt);
    j2 += 0.5 * (&spec.g2 * xt).dot(&xt);
    (j1, j2)
}

pub(crate) fn estimate_from_path_costs(costs: &[(f64, f64)]) -> CostEstimate {
    let n = costs.len();
    let mut mean1 = 0.0;
    let mut mean2 = 0.0;
    // Fixed ascending-index reduction for bit-reproducibility.
    for &(c1, c2) in costs {
        mean1 += c1;
        mean2 += c2;
    }
    mean1 /= n as f64;
    mean2 /= n as f64;
    let (mut var1, mut var2) = (0.0, 0.0);
    for &(c1, c2) in costs {
        var1 += (c1 - mean1) * (c1 - mean1);
        var2 += (c2 - mean2) * (c2 - mean2);
    }
    let (se1, se2) = if n > 1 {
        let d = (n - 1) as f64 * n as f64;
        ((var1 / d).sqrt(), (var2 / d).sqrt())
    } else {
        (0.0, 0.0)
    };
    CostEstimate {
        j1: mean1,
        j2: mean2,
        se1,
        se2,
        n_paths: n,
    }
}

/// Sample-mean costs over a stored ensemble.
pub fn costs_mc(ens: &TrajectoryEnsemble, spec: &GameSpec) -> CostEstimate {
    let costs: Vec<(f64, f64)> = ens
        .paths
        .iter()
        .map(|p| path_costs(p, &ens.law, spec, &ens.grid))
        .collect();
    estimate_from_path_costs(&costs)
}

/// Streaming variant of [`costs_mc`]: simulates path by path without
/// materializing the ensemble. Bit-identical to
/// `costs_mc(&simulate(..)?, spec)` for the same arguments.
pub fn costs_mc_streaming(
    law: &FeedbackLaw,
    spec: &GameSpec,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<CostEstimate> {
    assert_eq!(grid, law.grid(), "law was synthesized on a different grid");
    let transition = transition_matrices(law, grid);
    let x0 = initial_xhat(spec);
    let mut costs = Vec::with_capacity(n_paths);
    for p in 0..n_paths {
        let sample = simulate_path(&transition, &law.hat.c_hat, &x0, grid, seed, p)?;
        costs.push(path_costs(&sample, law, spec, grid));
    }
    Ok(estimate_from_path_costs(&costs))
}

/// Exact-expectation costs via the second-moment Lyapunov ODE
///
/// ```text
/// Sigma' = (Ahat - Bhat K) Sigma + Sigma (Ahat - Bhat K)' + Chat Sigma Chat',
/// ```
///
/// with `Sigma(0) = xhat0 xhat0'`, integrated by the 4th-order one-step
/// method together with the running costs
/// `j_i' = tr(W_i Sigma)/2` where `W_i` folds the state weight and the
/// control weight through the gains.
pub fn costs_moment(
    sol: &RiccatiSolution,
    spec: &GameSpec,
    grid: &TimeGrid,
) -> Result<(f64, f64)> {
    assert_eq!(sol.tag, SystemTag::Hat, "moment costs need the hat solution");
    let n = spec.n();
    let dim = 2 * n;
    let hat = assemble_hat(spec);
    let r1_inv = spec.r1.clone().try_inverse().expect("R1 positive definite");
    let r2_inv = spec.r2.clone().try_inverse().expect("R2 positive definite");
    let neg_r1inv_b1t = -(r1_inv * spec.b1.transpose());
    let neg_r2inv_b2t = -(r2_inv * spec.b2.transpose());

    let mut q1e = DMatrix::zeros(dim, dim);
    q1e.view_mut((0, 0), (n, n)).copy_from(&spec.q1);
    let mut q2e = DMatrix::zeros(dim, dim);
    q2e.view_mut((0, 0), (n, n)).copy_from(&spec.q2);
    let mut g1e = DMatrix::zeros(dim, dim);
    g1e.view_mut((0, 0), (n, n)).copy_from(&spec.g1);
    let mut g2e = DMatrix::zeros(dim, dim);
    g2e.view_mut((0, 0), (n, n)).copy_from(&spec.g2);

    // Drift of the augmented state (Sigma, j1, j2) at time t.
    let rhs = |t: f64, sigma: &DMatrix<f64>| -> (DMatrix<f64>, f64, f64) {
        let k = sol.at(t);
        let d = &hat.a_hat - &hat.b_hat * &k;
        let gu = &neg_r1inv_b1t * k.rows(0, n);
        let gv = &neg_r2inv_b2t * k.rows(n, n);
        let w1 = &q1e + gu.transpose() * &spec.r1 * gu;
        let w2 = &q2e + gv.transpose() * &spec.r2 * gv;
        let ds = &d * sigma + sigma * d.transpose() + &hat.c_hat * sigma * hat.c_hat.transpose();
        let dj1 = 0.5 * (&w1 * sigma).trace();
        let dj2 = 0.5 * (&w2 * sigma).trace();
        (ds, dj1, dj2)
    };

    let h = grid.h();
    let x0 = initial_xhat(spec);
    let mut sigma = &x0 * x0.transpose();
    let mut j1 = 0.0;
    let mut j2 = 0.0;
    for k in 0..grid.n_steps() {
        let t = grid.node(k);
        let (s1, a1, b1) = rhs(t, &sigma);
        let (s2, a2, b2) = rhs(t + 0.5 * h, &(&sigma + &s1 * (0.5 * h)));
        let (s3, a3, b3) = rhs(t + 0.5 * h, &(&sigma + &s2 * (0.5 * h)));
        let (s4, a4, b4) = rhs(t + h, &(&sigma + &s3 * h));
        sigma += (s1 + s2 * 2.0 + s3 * 2.0 + s4) * (h / 6.0);
        j1 += (a1 + 2.0 * a2 + 2.0 * a3 + a4) * (h / 6.0);
        j2 += (b1 + 2.0 * b2 + 2.0 * b3 + b4) * (h / 6.0);
        for &v in sigma.iter() {
            if !v.is_finite() || v.abs() > BLOWUP_LIMIT {
                return Err(Error::BlowUp {
                    t: grid.node(k + 1),
                    entry: v,
                });
            }
        }
    }
    j1 += 0.5 * (&g1e * &sigma).trace();
    j2 += 0.5 * (&g2e * &sigma).trace();
    Ok((j1, j2))
}

/// Which adjoint feeds the stationarity residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjointSource {
    /// `p1` from the Riccati representation along the path; zero to
    /// round-off by construction of the law.
    Riccati,
    /// `p1` re-integrated backward from the simulated `(x, y)` path,
    /// independent of `K`. Deterministic dynamics only.
    IndependentBackward,
}

/// L2-in-`(t, omega)` estimate of the first-order condition defect
/// `R1 u + B1' p1` along the ensemble.
pub fn gradient_residual(
    ens: &TrajectoryEnsemble,
    spec: &GameSpec,
    source: AdjointSource,
) -> Result<f64> {
    match source {
        AdjointSource::Riccati => {
            let mut acc = 0.0;
            for p in 0..ens.n_paths() {
                let mut path_acc = 0.0;
                for k in 0..=ens.grid.n_steps() {
                    let u = ens.control_u(p, k);
                    let p1 = ens.phat(p, k).rows(0, spec.n()).into_owned();
                    let defect = &spec.r1 * u + spec.b1.transpose() * p1;
                    path_acc += ens.grid.trapezoid_weight(k) * defect.norm_squared();
                }
                acc += path_acc;
            }
            Ok((acc / ens.n_paths() as f64).sqrt())
        }
        AdjointSource::IndependentBackward => {
            if !spec.is_deterministic() {
                return Err(Error::RequiresDeterministic);
            }
            // All paths coincide when C = 0; use the first.
            let n = spec.n();
            let n_steps = ens.grid.n_steps();
            let h = ens.grid.h();
            let x = |k: usize| ens.x(0, k);
            let y = |k: usize| ens.y(0, k);
            let mut p1 = vec![DVector::zeros(n); n_steps + 1];
            p1[n_steps] = -&spec.g2 * y(n_steps) + &spec.g1 * x(n_steps);
            for k in (0..n_steps).rev() {
                let ahead = &p1[k + 1];
                p1[k] = ahead
                    + (spec.a.transpose() * ahead - &spec.q2 * y(k + 1) + &spec.q1 * x(k + 1)) * h;
            }
            let mut acc = 0.0;
            for k in 0..=n_steps {
                let u = ens.control_u(0, k);
                let defect = &spec.r1 * u + spec.b1.transpose() * &p1[k];
                acc += ens.grid.trapezoid_weight(k) * defect.norm_squared();
            }
            Ok(acc.sqrt())
        }
    }
}

/// L2-in-`t` norm of `R1 u + B1' p1` for explicitly supplied paths.
/// Shared core of [`gradient_residual`], usable with forced controls.
pub fn control_residual(
    u_path: &[DVector<f64>],
    p1_path: &[DVector<f64>],
    spec: &GameSpec,
    grid: &TimeGrid,
) -> f64 {
    assert_eq!(u_path.len(), grid.n_nodes());
    assert_eq!(p1_path.len(), grid.n_nodes());
    let mut acc = 0.0;
    for k in 0..grid.n_nodes() {
        let defect = &spec.r1 * &u_path[k] + spec.b1.transpose() * &p1_path[k];
        acc += grid.trapezoid_weight(k) * defect.norm_squared();
    }
    acc.sqrt()
}

/// RMS over paths of the integrated backward-equation defect
///
/// ```text
/// phat(T) - phat(0) - sum_k [ -(Ahat' phat + Chat' qhat + Qhat xhat) h
///                             + qhat dW ]_k
/// ```
///
/// which is `O(h)` for the Riccati-represented adjoints.
pub fn backward_defect_rms(ens: &TrajectoryEnsemble, spec: &GameSpec) -> f64 {
    let hat = assemble_hat(spec);
    let n_steps = ens.grid.n_steps();
    let h = ens.grid.h();
    let mut acc = 0.0;
    for p in 0..ens.n_paths() {
        let mut delta = DVector::zeros(2 * spec.n());
        for k in 0..n_steps {
            let phat = ens.phat(p, k);
            let qhat = ens.qhat(p, k);
            let xhat = ens.xhat(p, k);
            let drift =
                hat.a_hat.transpose() * &phat + hat.c_hat.transpose() * &qhat + &hat.q_hat * xhat;
            delta += ens.phat(p, k + 1) - &phat + drift * h - qhat * ens.paths[p].dw[k];
        }
        acc += delta.norm_squared();
    }
    (acc / ens.n_paths() as f64).sqrt()
}
