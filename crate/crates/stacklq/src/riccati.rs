//! Backward matrix Riccati integration.
//!
//! For constant coefficients the quadratic backward equation reads
//!
//! ```text
//! dK/dt = -(K A + A' K - K B K + C' K C + Q),    K(T) = G,
//! ```
//!
//! integrated on the shared uniform grid with the classical fixed-step
//! 4th-order one-step method (no adaptivity, so node placement matches the
//! SDE simulator). Under deterministic coefficients the martingale term of
//! the stochastic Riccati equation vanishes identically and is omitted.
//!
//! The augmented (`hat`) system has non-symmetric `B`, `Q`, `G` and no
//! general existence guarantee: the integrator reports `BlowUp` with the
//! first offending node instead of returning garbage. The transformed
//! (`tilde`) system is a standard symmetric Riccati equation; its solution
//! maps back through `K = Phi Ktilde`.

use nalgebra::DMatrix;

use crate::augment::{HatSystem, SymmetrizedSystem};
use crate::error::{Error, Result};
use crate::game::max_abs;
use crate::grid::TimeGrid;

/// Any entry beyond this magnitude is treated as blow-up.
pub const BLOWUP_LIMIT: f64 = 1e12;

/// Which backward system a solution path belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SystemTag {
    Hat,
    Tilde,
}

/// Coefficient bundle `(A, B, C, Q, G)` for one backward Riccati equation.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub tag: SystemTag,
}

impl RiccatiSystem {
    pub fn from_hat(hat: &HatSystem) -> Self {
        RiccatiSystem {
            a: hat.a_hat.clone(),
            b: hat.b_hat.clone(),
            c: hat.c_hat.clone(),
            q: hat.q_hat.clone(),
            g: hat.g_hat.clone(),
            tag: SystemTag::Hat,
        }
    }

    pub fn from_tilde(sym: &SymmetrizedSystem) -> Self {
        RiccatiSystem {
            a: sym.a_tilde.clone(),
            b: sym.b_tilde.clone(),
            c: sym.c_tilde.clone(),
            q: sym.q_tilde.clone(),
            g: sym.g_tilde.clone(),
            tag: SystemTag::Tilde,
        }
    }

    /// Right-hand side `dK/dt = -(KA + A'K - KBK + C'KC + Q)`.
    ///
    /// `K` is not assumed symmetric (the hat system's is not), so `A'K`
    /// is formed explicitly rather than as `(KA)'`.
    fn rhs(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        let ka = k * &self.a;
        let atk = self.a.transpose() * k;
        let kbk = k * &self.b * k;
        let ckc = self.c.transpose() * k * &self.c;
        -(ka + atk - kbk + ckc + &self.q)
    }
}

/// Matrix path on a time grid, anchored at the terminal node.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub grid: TimeGrid,
    /// One matrix per node; `k[N]` is a bit-for-bit copy of the terminal
    /// weight.
    pub k: Vec<DMatrix<f64>>,
    pub tag: SystemTag,
}

impl RiccatiSolution {
    pub fn node(&self, k: usize) -> &DMatrix<f64> {
        &self.k[k]
    }

    /// Linear-in-`t` interpolation between nodes (exact at nodes).
    pub fn at(&self, t: f64) -> DMatrix<f64> {
        let (k, w) = self.grid.locate(t);
        if w == 0.0 {
            self.k[k].clone()
        } else if w == 1.0 {
            self.k[k + 1].clone()
        } else {
            &self.k[k] * (1.0 - w) + &self.k[k + 1] * w
        }
    }

    pub fn dim(&self) -> usize {
        self.k[0].nrows()
    }
}

fn check_finite(m: &DMatrix<f64>, t: f64) -> Result<()> {
    for &v in m.iter() {
        if !v.is_finite() || v.abs() > BLOWUP_LIMIT {
            return Err(Error::BlowUp { t, entry: v });
        }
    }
    Ok(())
}

/// Integrates the Riccati equation backward from `K(T) = G`.
pub fn solve_riccati(sys: &RiccatiSystem, grid: &TimeGrid) -> Result<RiccatiSolution> {
    let n = grid.n_steps();
    let h = grid.h();
    let mut path = vec![DMatrix::zeros(sys.g.nrows(), sys.g.ncols()); n + 1];
    path[n] = sys.g.clone();
    check_finite(&path[n], grid.node(n))?;
    for k in (0..n).rev() {
        let current = &path[k + 1];
        let k1 = sys.rhs(current);
        let k2 = sys.rhs(&(current - &k1 * (0.5 * h)));
        let k3 = sys.rhs(&(current - &k2 * (0.5 * h)));
        let k4 = sys.rhs(&(current - &k3 * h));
        let next = current - (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        check_finite(&next, grid.node(k))?;
        path[k] = next;
    }
    Ok(RiccatiSolution {
        grid: grid.clone(),
        k: path,
        tag: sys.tag,
    })
}

/// Maps a tilde-system solution back to the hat system node-by-node via
/// `K = Phi Ktilde`.
pub fn recover_from_tilde(sym: &SymmetrizedSystem, ktilde: &RiccatiSolution) -> RiccatiSolution {
    RiccatiSolution {
        grid: ktilde.grid.clone(),
        k: ktilde.k.iter().map(|m| &sym.phi * m).collect(),
        tag: SystemTag::Hat,
    }
}

/// A-posteriori defect: max over interior nodes of
/// `‖(K_{k+1} - K_{k-1})/(2h) + (KA + A'K - KBK + C'KC + Q)‖∞`.
///
/// Second order in `h` for smooth solutions.
pub fn riccati_residual(sol: &RiccatiSolution, sys: &RiccatiSystem) -> Result<f64> {
    let n = sol.grid.n_steps();
    if n < 4 {
        return Err(Error::GridTooCoarse(n));
    }
    let h = sol.grid.h();
    let mut worst = 0.0_f64;
    for k in 1..n {
        let deriv = (&sol.k[k + 1] - &sol.k[k - 1]) / (2.0 * h);
        let defect = deriv - sys.rhs(&sol.k[k]);
        worst = worst.max(max_abs(&defect));
    }
    Ok(worst)
}
