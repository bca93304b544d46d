//! Maximum-principle verification probes for the open-loop solution.
//!
//! Two independent reconstructions back the synthesized law:
//!
//! - the follower's best response to a frozen leader control, computed by
//!   damped backward-forward sweeps on his two-point system (deterministic
//!   dynamics), and
//! - convexity probes `J1(u* + eps w) - J1(u*)` along random adapted
//!   directions with common random numbers, where the follower re-responds
//!   to every perturbed control.
//!
//! In the stochastic case the follower's exact best response to the
//! perturbed control is represented through an auxiliary Riccati equation
//! on the joint state (unperturbed equilibrium state, perturbed physical
//! state): the perturbed leader control is linear in that joint state plus
//! a deterministic offset, so the response reduces to deterministic `S`
//! and `phi` ODEs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::game::{max_abs, GameSpec};
use crate::grid::TimeGrid;
use crate::noise;
use crate::riccati::BLOWUP_LIMIT;

use super::{simulate, FeedbackLaw};

/// Follower's exact (to sweep tolerance) discrete best response.
#[derive(Debug, Clone)]
pub struct FollowerResponse {
    pub x: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
    pub p2: Vec<DVector<f64>>,
    pub sweeps: usize,
}

const SWEEP_DAMPING: f64 = 0.5;
const SWEEP_DAMPING_MIN: f64 = 1.0 / 1024.0;
const SWEEP_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 500;

/// Damped backward-forward sweeps for the follower's two-point system
/// under a frozen leader control (deterministic dynamics, C = 0).
///
/// Damping starts at 0.5 and is halved whenever the update norm grows,
/// since the undamped sweep map can have spectral radius above one for
/// strongly weighted followers.
pub fn follower_best_response(
    u_path: &[DVector<f64>],
    spec: &GameSpec,
    grid: &TimeGrid,
) -> Result<FollowerResponse> {
    if !spec.is_deterministic() {
        return Err(Error::RequiresDeterministic);
    }
    assert_eq!(u_path.len(), grid.n_nodes());
    let n_steps = grid.n_steps();
    let h = grid.h();
    let m2 = spec.m2();
    let n = spec.n();
    let r2_inv = spec.r2.clone().try_inverse().expect("R2 positive definite");
    let neg_r2inv_b2t = -(r2_inv * spec.b2.transpose());

    let mut v = vec![DVector::zeros(m2); n_steps + 1];
    let mut x = vec![DVector::zeros(n); n_steps + 1];
    let mut p2 = vec![DVector::zeros(n); n_steps + 1];
    let mut damping = SWEEP_DAMPING;
    let mut last_update = f64::INFINITY;
    for sweep in 1..=MAX_SWEEPS {
        x[0] = spec.x0.clone();
        for k in 0..n_steps {
            let drift = &spec.a * &x[k] + &spec.b1 * &u_path[k] + &spec.b2 * &v[k];
            x[k + 1] = &x[k] + drift * h;
        }
        p2[n_steps] = &spec.g2 * &x[n_steps];
        for k in (0..n_steps).rev() {
            let ahead = &p2[k + 1];
            p2[k] = ahead + (spec.a.transpose() * ahead + &spec.q2 * &x[k + 1]) * h;
        }
        let mut update = 0.0_f64;
        for k in 0..=n_steps {
            let target = &neg_r2inv_b2t * &p2[k];
            let step = (target - &v[k]) * damping;
            update = update.max(step.amax());
            v[k] += step;
        }
        if update < SWEEP_TOL {
            return Ok(FollowerResponse {
                x,
                v,
                p2,
                sweeps: sweep,
            });
        }
        if !update.is_finite() {
            // Restart from rest with gentler damping.
            for vk in v.iter_mut() {
                vk.fill(0.0);
            }
            damping = (damping * 0.5).max(SWEEP_DAMPING_MIN);
            last_update = f64::INFINITY;
            continue;
        }
        if update > last_update {
            damping = (damping * 0.5).max(SWEEP_DAMPING_MIN);
        }
        last_update = update;
    }
    Err(Error::FollowerIterationDiverged {
        sweeps: MAX_SWEEPS,
        update: last_update,
    })
}

/// Consistency gap between the sweep-based best response to the law's own
/// optimal `u` and the `v` the law produces directly. Both discretize the
/// same continuous object, so the gap is `O(h)`.
pub fn follower_response_check(
    law: &FeedbackLaw,
    spec: &GameSpec,
    grid: &TimeGrid,
) -> Result<f64> {
    if !spec.is_deterministic() {
        return Err(Error::RequiresDeterministic);
    }
    let ens = simulate(law, spec, grid, 1, 0)?;
    let u_path: Vec<DVector<f64>> = (0..grid.n_nodes()).map(|k| ens.control_u(0, k)).collect();
    let v_law: Vec<DVector<f64>> = (0..grid.n_nodes()).map(|k| ens.control_v(0, k)).collect();
    let br = follower_best_response(&u_path, spec, grid)?;
    let mut gap = 0.0_f64;
    for k in 0..grid.n_nodes() {
        gap = gap.max((&br.v[k] - &v_law[k]).amax());
    }
    Ok(gap)
}

/// One perturbation outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub direction: usize,
    pub eps: f64,
    /// `J1(u* + eps w) - J1(u*)`, follower best-responding on both sides.
    pub delta_j1: f64,
    /// Standard error of the paired difference (zero for deterministic
    /// dynamics).
    pub se_delta: f64,
}

#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub j_base: f64,
    pub probes: Vec<Probe>,
}

impl ProbeReport {
    pub fn min_delta(&self) -> f64 {
        self.probes
            .iter()
            .fold(f64::INFINITY, |acc, p| acc.min(p.delta_j1))
    }
}

fn draw_direction(seed: u64, direction: usize, n_nodes: usize, m1: usize) -> Vec<DVector<f64>> {
    let mut rng = noise::aux_rng(seed, direction as u64);
    (0..n_nodes)
        .map(|_| DVector::from_fn(m1, |_, _| rng.sample(StandardNormal)))
        .collect()
}

/// Convexity probe around the synthesized optimum.
///
/// Each direction is a piecewise-constant control perturbation with i.i.d.
/// standard-normal components per node, shared across every `eps`. The
/// follower re-responds to each perturbed control. `n_paths` only matters
/// for stochastic dynamics.
pub fn perturbation_probe(
    law: &FeedbackLaw,
    spec: &GameSpec,
    grid: &TimeGrid,
    seed: u64,
    n_directions: usize,
    eps: &[f64],
    n_paths: usize,
) -> Result<ProbeReport> {
    if spec.is_deterministic() {
        probe_deterministic(law, spec, grid, seed, n_directions, eps)
    } else {
        probe_stochastic(law, spec, grid, seed, n_directions, eps, n_paths)
    }
}

/// Leader cost along explicit state and control paths.
fn leader_cost(
    x_path: &[DVector<f64>],
    u_path: &[DVector<f64>],
    spec: &GameSpec,
    grid: &TimeGrid,
) -> f64 {
    let n_steps = grid.n_steps();
    let mut j = 0.0;
    for k in 0..=n_steps {
        let w = grid.trapezoid_weight(k);
        j += w * 0.5
            * ((&spec.q1 * &x_path[k]).dot(&x_path[k]) + (&spec.r1 * &u_path[k]).dot(&u_path[k]));
    }
    j + 0.5 * (&spec.g1 * &x_path[n_steps]).dot(&x_path[n_steps])
}

fn probe_deterministic(
    law: &FeedbackLaw,
    spec: &GameSpec,
    grid: &TimeGrid,
    seed: u64,
    n_directions: usize,
    eps: &[f64],
) -> Result<ProbeReport> {
    let ens = simulate(law, spec, grid, 1, 0)?;
    let base_u: Vec<DVector<f64>> = (0..grid.n_nodes()).map(|k| ens.control_u(0, k)).collect();
    let eval = |u: &[DVector<f64>]| -> Result<f64> {
        let br = follower_best_response(u, spec, grid)?;
        Ok(leader_cost(&br.x, u, spec, grid))
    };
    let j_base = eval(&base_u)?;
    let mut probes = Vec::with_capacity(n_directions * eps.len());
    for d in 0..n_directions {
        let w = draw_direction(seed, d, grid.n_nodes(), spec.m1());
        for &e in eps {
            let u: Vec<DVector<f64>> = base_u
                .iter()
                .zip(&w)
                .map(|(u0, wk)| u0 + wk * e)
                .collect();
            let j = eval(&u)?;
            probes.push(Probe {
                direction: d,
                eps: e,
                delta_j1: j - j_base,
                se_delta: 0.0,
            });
        }
    }
    Ok(ProbeReport { j_base, probes })
}

/// Joint-state machinery for the stochastic probe.
struct JointSystem {
    /// `F_k` per node: block drift of `z = (xhat*, x')`.
    f_nodes: Vec<DMatrix<f64>>,
    /// `Sigma-bar = diag(Chat, C)`.
    sig: DMatrix<f64>,
    /// `B-bar`: follower input map into `z`.
    b_bar: DMatrix<f64>,
    /// `B-bar R2^-1 B-bar'`.
    b_eff: DMatrix<f64>,
    /// Follower gain prefix `-R2^-1 B-bar'`.
    neg_r2inv_bbart: DMatrix<f64>,
    /// Value matrices `S_k` of the follower's joint-state response.
    s_nodes: Vec<DMatrix<f64>>,
    zn: usize,
    nn: usize,
}

impl JointSystem {
    fn build(law: &FeedbackLaw, spec: &GameSpec, grid: &TimeGrid) -> Result<Self> {
        let n = spec.n();
        let nn = 2 * n;
        let zn = 3 * n;
        let f_at = |k_mat: &DMatrix<f64>, u_gain: &DMatrix<f64>| -> DMatrix<f64> {
            let mut f = DMatrix::zeros(zn, zn);
            f.view_mut((0, 0), (nn, nn))
                .copy_from(&(&law.hat.a_hat - &law.hat.b_hat * k_mat));
            f.view_mut((nn, 0), (n, nn)).copy_from(&(&spec.b1 * u_gain));
            f.view_mut((nn, nn), (n, n)).copy_from(&spec.a);
            f
        };
        let f_nodes: Vec<DMatrix<f64>> = (0..grid.n_nodes())
            .map(|k| f_at(law.riccati.node(k), &law.u_gain[k]))
            .collect();
        let mut sig = DMatrix::zeros(zn, zn);
        sig.view_mut((0, 0), (nn, nn)).copy_from(&law.hat.c_hat);
        sig.view_mut((nn, nn), (n, n)).copy_from(&spec.c);
        let mut b_bar = DMatrix::zeros(zn, spec.m2());
        b_bar.view_mut((nn, 0), (n, spec.m2())).copy_from(&spec.b2);
        let r2_inv = spec.r2.clone().try_inverse().expect("R2 positive definite");
        let b_eff = &b_bar * &r2_inv * b_bar.transpose();
        let neg_r2inv_bbart = -(&r2_inv * b_bar.transpose());

        let mut q_bar = DMatrix::zeros(zn, zn);
        q_bar.view_mut((nn, nn), (n, n)).copy_from(&spec.q2);
        let mut g_bar = DMatrix::zeros(zn, zn);
        g_bar.view_mut((nn, nn), (n, n)).copy_from(&spec.g2);

        // Backward Riccati for S with time-varying F (linear interpolation
        // of the node values at half steps).
        let h = grid.h();
        let f_interp = |k: usize, w: f64| -> DMatrix<f64> {
            if w == 0.0 {
                f_nodes[k].clone()
            } else {
                &f_nodes[k] * (1.0 - w) + &f_nodes[k + 1] * w
            }
        };
        let rhs = |f: &DMatrix<f64>, s: &DMatrix<f64>| -> DMatrix<f64> {
            let sf = s * f;
            -(&sf + sf.transpose() - s * &b_eff * s + sig.transpose() * s * &sig + &q_bar)
        };
        let mut s_nodes = vec![DMatrix::zeros(zn, zn); grid.n_nodes()];
        s_nodes[grid.n_steps()] = g_bar;
        for k in (0..grid.n_steps()).rev() {
            let cur = s_nodes[k + 1].clone();
            let k1 = rhs(&f_nodes[k + 1], &cur);
            let fmid = f_interp(k, 0.5);
            let k2 = rhs(&fmid, &(&cur - &k1 * (0.5 * h)));
            let k3 = rhs(&fmid, &(&cur - &k2 * (0.5 * h)));
            let k4 = rhs(&f_nodes[k], &(&cur - &k3 * h));
            let next = cur - (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            if max_abs(&next) > BLOWUP_LIMIT || next.iter().any(|v| !v.is_finite()) {
                return Err(Error::BlowUp {
                    t: grid.node(k),
                    entry: max_abs(&next),
                });
            }
            s_nodes[k] = next;
        }
        Ok(JointSystem {
            f_nodes,
            sig,
            b_bar,
            b_eff,
            neg_r2inv_bbart,
            s_nodes,
            zn,
            nn,
        })
    }

    /// Offset path `phi` for a unit perturbation direction `w` (linear in
    /// `w`; scale by `eps` at use sites).
    fn phi_for(
        &self,
        spec: &GameSpec,
        grid: &TimeGrid,
        w: &[DVector<f64>],
    ) -> Result<Vec<DVector<f64>>> {
        let h = grid.h();
        let zn = self.zn;
        let nn = self.nn;
        let n = spec.n();
        let forcing = |k: usize| -> DVector<f64> {
            let mut b = DVector::zeros(zn);
            b.rows_mut(nn, n).copy_from(&(&spec.b1 * &w[k]));
            b
        };
        let rhs = |f: &DMatrix<f64>, s: &DMatrix<f64>, b: &DVector<f64>, phi: &DVector<f64>| {
            -((f - s * &self.b_eff).transpose() * phi + s * b)
        };
        let mut phi = vec![DVector::zeros(zn); grid.n_nodes()];
        for k in (0..grid.n_steps()).rev() {
            let cur = phi[k + 1].clone();
            // Piecewise-constant w: the left node value rules the interval.
            let b = forcing(k);
            let s_hi = &self.s_nodes[k + 1];
            let s_mid = (&self.s_nodes[k] + &self.s_nodes[k + 1]) * 0.5;
            let s_lo = &self.s_nodes[k];
            let f_hi = &self.f_nodes[k + 1];
            let f_mid = (&self.f_nodes[k] + &self.f_nodes[k + 1]) * 0.5;
            let f_lo = &self.f_nodes[k];
            let k1 = rhs(f_hi, s_hi, &b, &cur);
            let k2 = rhs(&f_mid, &s_mid, &b, &(&cur - &k1 * (0.5 * h)));
            let k3 = rhs(&f_mid, &s_mid, &b, &(&cur - &k2 * (0.5 * h)));
            let k4 = rhs(f_lo, s_lo, &b, &(&cur - &k3 * h));
            let next = cur - (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            if next.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP_LIMIT) {
                return Err(Error::BlowUp {
                    t: grid.node(k),
                    entry: next.amax(),
                });
            }
            phi[k] = next;
        }
        Ok(phi)
    }
}

#[allow(clippy::too_many_arguments)]
fn probe_stochastic(
    law: &FeedbackLaw,
    spec: &GameSpec,
    grid: &TimeGrid,
    seed: u64,
    n_directions: usize,
    eps: &[f64],
    n_paths: usize,
) -> Result<ProbeReport> {
    let joint = JointSystem::build(law, spec, grid)?;
    let n = spec.n();
    let nn = 2 * n;
    let n_steps = grid.n_steps();
    let h = grid.h();

    let mut z0 = DVector::zeros(joint.zn);
    z0.rows_mut(0, n).copy_from(&spec.x0);
    z0.rows_mut(nn, n).copy_from(&spec.x0);

    // One path of the joint system; returns the leader cost.
    let run_path = |path: usize, eps_val: f64, w: &[DVector<f64>], phi: &[DVector<f64>]| -> Result<f64> {
        let mut z = z0.clone();
        let mut j = 0.0;
        let mut terminal = 0.0;
        for k in 0..=n_steps {
            let x_pert = z.rows(nn, n).into_owned();
            let u = &law.u_gain[k] * z.rows(0, nn) + &w[k] * eps_val;
            let wq = grid.trapezoid_weight(k);
            j += wq * 0.5
                * ((&spec.q1 * &x_pert).dot(&x_pert) + (&spec.r1 * &u).dot(&u));
            if k == n_steps {
                terminal = 0.5 * (&spec.g1 * &x_pert).dot(&x_pert);
                break;
            }
            let v = &joint.neg_r2inv_bbart * (&joint.s_nodes[k] * &z + &phi[k] * eps_val);
            let mut forcing = DVector::zeros(joint.zn);
            forcing
                .rows_mut(nn, n)
                .copy_from(&(&spec.b1 * (&w[k] * eps_val)));
            let dw = noise::brownian_increment(seed, path as u64, k as u64, h);
            let drift = &joint.f_nodes[k] * &z + &joint.b_bar * v + forcing;
            z += drift * h + (&joint.sig * &z) * dw;
            if z.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP_LIMIT) {
                return Err(Error::BlowUp {
                    t: grid.node(k + 1),
                    entry: z.amax(),
                });
            }
        }
        Ok(j + terminal)
    };

    let zero_w = vec![DVector::zeros(spec.m1()); grid.n_nodes()];
    let zero_phi = vec![DVector::zeros(joint.zn); grid.n_nodes()];
    let mut base = Vec::with_capacity(n_paths);
    for p in 0..n_paths {
        base.push(run_path(p, 0.0, &zero_w, &zero_phi)?);
    }
    let j_base = base.iter().sum::<f64>() / n_paths as f64;

    let mut probes = Vec::with_capacity(n_directions * eps.len());
    for d in 0..n_directions {
        let w = draw_direction(seed, d, grid.n_nodes(), spec.m1());
        let phi = joint.phi_for(spec, grid, &w)?;
        for &e in eps {
            let mut mean = 0.0;
            let mut diffs = Vec::with_capacity(n_paths);
            for p in 0..n_paths {
                let j = run_path(p, e, &w, &phi)?;
                diffs.push(j - base[p]);
                mean += j - base[p];
            }
            mean /= n_paths as f64;
            let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>();
            let se = if n_paths > 1 {
                (var / ((n_paths - 1) as f64 * n_paths as f64)).sqrt()
            } else {
                0.0
            };
            probes.push(Probe {
                direction: d,
                eps: e,
                delta_j1: mean,
                se_delta: se,
            });
        }
    }
    Ok(ProbeReport { j_base, probes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::assemble_hat;
    use crate::riccati::{solve_riccati, RiccatiSystem};
    use crate::samples;

    fn law_for(spec: &GameSpec, n_steps: usize) -> (FeedbackLaw, TimeGrid) {
        let grid = TimeGrid::new(n_steps, spec.horizon).unwrap();
        let sys = RiccatiSystem::from_hat(&assemble_hat(spec));
        let sol = solve_riccati(&sys, &grid).unwrap();
        (super::super::synthesize(sol, spec), grid)
    }

    #[test]
    fn best_response_vanishes_without_follower_stakes() {
        // Q2 = 0, G2 = 0: homogeneous backward equation, p2 = 0, v = 0.
        let spec = GameSpec::scalar(0.1, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0)
            .validate()
            .unwrap();
        let grid = TimeGrid::new(100, 1.0).unwrap();
        let u = vec![DVector::from_element(1, 0.3); 101];
        let br = follower_best_response(&u, &spec, &grid).unwrap();
        for k in 0..=100 {
            assert_eq!(br.v[k][0], 0.0);
            assert_eq!(br.p2[k][0], 0.0);
        }
    }

    #[test]
    fn best_response_without_b2_is_zero() {
        let spec = samples::follower_free().validate().unwrap();
        let grid = TimeGrid::new(100, 1.0).unwrap();
        let u = vec![DVector::from_element(1, -0.2); 101];
        let br = follower_best_response(&u, &spec, &grid).unwrap();
        for k in 0..=100 {
            assert_eq!(br.v[k][0], 0.0);
        }
    }

    #[test]
    fn response_check_gap_is_first_order() {
        let spec = samples::reference_deterministic().validate().unwrap();
        let gap_at = |n: usize| {
            let (law, grid) = law_for(&spec, n);
            follower_response_check(&law, &spec, &grid).unwrap()
        };
        let coarse = gap_at(1000);
        let fine = gap_at(2000);
        assert!(fine <= 5e-3, "gap at N=2000: {fine}");
        assert!(coarse / fine >= 1.5, "no O(h) decay: {coarse} vs {fine}");
    }

    #[test]
    fn zero_eps_probe_is_exactly_zero() {
        let spec = samples::reference_deterministic().validate().unwrap();
        let (law, grid) = law_for(&spec, 400);
        let report = perturbation_probe(&law, &spec, &grid, 9, 2, &[0.0], 1).unwrap();
        for p in &report.probes {
            assert_eq!(p.delta_j1, 0.0);
        }
    }

    #[test]
    fn deterministic_probes_are_nonnegative() {
        let spec = samples::reference_deterministic().validate().unwrap();
        let (law, grid) = law_for(&spec, 1000);
        let report =
            perturbation_probe(&law, &spec, &grid, 5, 6, &[1e-2, 1e-1], 1).unwrap();
        assert!(
            report.min_delta() >= -1e-8,
            "min probe = {}",
            report.min_delta()
        );
    }

    #[test]
    fn probe_scales_quadratically_near_the_optimum() {
        let spec = samples::reference_deterministic().validate().unwrap();
        let (law, grid) = law_for(&spec, 1000);
        let report = perturbation_probe(&law, &spec, &grid, 21, 1, &[0.05, 0.1], 1).unwrap();
        let small = report.probes[0].delta_j1;
        let large = report.probes[1].delta_j1;
        let ratio = large / small;
        assert!(
            (3.4..=4.6).contains(&ratio),
            "expected ~4, got {ratio} ({small} vs {large})"
        );
    }

    #[test]
    fn stochastic_probe_zero_eps_and_nonnegativity() {
        let spec = samples::reference_stochastic().validate().unwrap();
        let (law, grid) = law_for(&spec, 200);
        let report =
            perturbation_probe(&law, &spec, &grid, 17, 3, &[0.0, 0.1], 400).unwrap();
        for p in &report.probes {
            if p.eps == 0.0 {
                assert_eq!(p.delta_j1, 0.0);
            } else {
                assert!(
                    p.delta_j1 >= -(1e-8 + 3.0 * p.se_delta),
                    "probe {p:?} below tolerance"
                );
            }
        }
    }
}
