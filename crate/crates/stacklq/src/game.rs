//! Game data: coefficients of the two-player linear-quadratic problem.
//!
//! The state follows
//!
//! ```text
//! dx = (A x + B1 u + B2 v) dt + C x dW,    x(0) = x0,
//! ```
//!
//! with leader control `u` (dimension m1) and follower control `v`
//! (dimension m2), and quadratic costs
//!
//! ```text
//! J_i = 1/2 E[ ∫ (x' Q_i x + ctrl' R_i ctrl) dt + x(T)' G_i x(T) ].
//! ```
//!
//! All coefficients are constant matrices. `Q_i`, `G_i` must be symmetric
//! positive semidefinite and `R_i` symmetric positive definite; inputs whose
//! asymmetry is below round-off (`1e-12`) are symmetrized on validation.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Entrywise max-abs norm (the `‖·‖∞` used in all tolerance checks).
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Asymmetry below this is treated as round-off and symmetrized away.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Smallest admissible eigenvalue for the semidefinite weights.
pub const PSD_TOL: f64 = -1e-10;
/// Smallest admissible eigenvalue for the control weights `R1`, `R2`.
pub const PD_TOL: f64 = 1e-8;

/// Validated problem data. Construct via [`GameSpec::new`] followed by
/// [`GameSpec::validate`], or use [`GameSpec::scalar`] for one-dimensional
/// games. Immutable after validation; safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct GameSpec {
    pub a: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q1: DMatrix<f64>,
    pub q2: DMatrix<f64>,
    pub r1: DMatrix<f64>,
    pub r2: DMatrix<f64>,
    pub g1: DMatrix<f64>,
    pub g2: DMatrix<f64>,
    pub horizon: f64,
    pub x0: DVector<f64>,
}

impl GameSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: DMatrix<f64>,
        b1: DMatrix<f64>,
        b2: DMatrix<f64>,
        c: DMatrix<f64>,
        q1: DMatrix<f64>,
        q2: DMatrix<f64>,
        r1: DMatrix<f64>,
        r2: DMatrix<f64>,
        g1: DMatrix<f64>,
        g2: DMatrix<f64>,
        horizon: f64,
        x0: DVector<f64>,
    ) -> Self {
        GameSpec {
            a,
            b1,
            b2,
            c,
            q1,
            q2,
            r1,
            r2,
            g1,
            g2,
            horizon,
            x0,
        }
    }

    /// Scalar (n = m1 = m2 = 1) game from plain coefficients.
    #[allow(clippy::too_many_arguments)]
    pub fn scalar(
        a: f64,
        b1: f64,
        b2: f64,
        c: f64,
        q1: f64,
        q2: f64,
        r1: f64,
        r2: f64,
        g1: f64,
        g2: f64,
        horizon: f64,
        x0: f64,
    ) -> Self {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        GameSpec::new(
            m(a),
            m(b1),
            m(b2),
            m(c),
            m(q1),
            m(q2),
            m(r1),
            m(r2),
            m(g1),
            m(g2),
            horizon,
            DVector::from_element(1, x0),
        )
    }

    /// State dimension n.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Leader control dimension m1.
    pub fn m1(&self) -> usize {
        self.b1.ncols()
    }

    /// Follower control dimension m2.
    pub fn m2(&self) -> usize {
        self.b2.ncols()
    }

    /// True when the diffusion matrix vanishes (deterministic dynamics).
    pub fn is_deterministic(&self) -> bool {
        max_abs(&self.c) == 0.0
    }

    /// Scalar coefficient view; errors with `NotScalar` unless
    /// n = m1 = m2 = 1.
    pub fn as_scalar(&self) -> Result<ScalarGame> {
        if self.n() != 1 || self.m1() != 1 || self.m2() != 1 {
            return Err(Error::NotScalar {
                n: self.n(),
                m1: self.m1(),
                m2: self.m2(),
            });
        }
        Ok(ScalarGame {
            a: self.a[(0, 0)],
            b1: self.b1[(0, 0)],
            b2: self.b2[(0, 0)],
            c: self.c[(0, 0)],
            q1: self.q1[(0, 0)],
            q2: self.q2[(0, 0)],
            r1: self.r1[(0, 0)],
            r2: self.r2[(0, 0)],
            g1: self.g1[(0, 0)],
            g2: self.g2[(0, 0)],
            horizon: self.horizon,
            x0: self.x0[0],
        })
    }

    /// Checks all invariants and returns the spec with the weight matrices
    /// symmetrized.
    ///
    /// Idempotent, and rejection is total: the first violated invariant is
    /// reported as one typed error, never a partial result.
    pub fn validate(mut self) -> Result<Self> {
        self.check_dimensions()?;
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::NonpositiveHorizon(self.horizon));
        }
        for (name, m) in [
            ("Q1", &mut self.q1),
            ("Q2", &mut self.q2),
            ("G1", &mut self.g1),
            ("G2", &mut self.g2),
        ] {
            symmetrize_in_place(name, m)?;
            let min = min_symmetric_eigenvalue(m);
            if min < PSD_TOL {
                return Err(Error::NotPsd {
                    name,
                    eigenvalue: min,
                });
            }
        }
        for (name, m) in [("R1", &mut self.r1), ("R2", &mut self.r2)] {
            symmetrize_in_place(name, m)?;
            let min = min_symmetric_eigenvalue(m);
            if min < PD_TOL {
                return Err(Error::NotPd {
                    name,
                    eigenvalue: min,
                });
            }
        }
        Ok(self)
    }

    fn check_dimensions(&self) -> Result<()> {
        let n = self.n();
        let m1 = self.m1();
        let m2 = self.m2();
        let square = [
            ("A", &self.a, n),
            ("C", &self.c, n),
            ("Q1", &self.q1, n),
            ("Q2", &self.q2, n),
            ("G1", &self.g1, n),
            ("G2", &self.g2, n),
            ("R1", &self.r1, m1),
            ("R2", &self.r2, m2),
        ];
        for (name, m, dim) in square {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "{name} is {}x{}, expected {dim}x{dim}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        if self.b1.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "B1 has {} rows, expected {n}",
                self.b1.nrows()
            )));
        }
        if self.b2.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "B2 has {} rows, expected {n}",
                self.b2.nrows()
            )));
        }
        if m1 == 0 || m2 == 0 || n == 0 {
            return Err(Error::DimensionMismatch(format!(
                "empty dimension (n = {n}, m1 = {m1}, m2 = {m2})"
            )));
        }
        if self.x0.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "x0 has length {}, expected {n}",
                self.x0.len()
            )));
        }
        Ok(())
    }
}

/// Plain-f64 view of a scalar game.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarGame {
    pub a: f64,
    pub b1: f64,
    pub b2: f64,
    pub c: f64,
    pub q1: f64,
    pub q2: f64,
    pub r1: f64,
    pub r2: f64,
    pub g1: f64,
    pub g2: f64,
    pub horizon: f64,
    pub x0: f64,
}

impl ScalarGame {
    /// `B1^2 / R1`, the leader's control-effectiveness coefficient.
    pub fn r1_eff(&self) -> f64 {
        self.b1 * self.b1 / self.r1
    }

    /// `B2^2 / R2`, the follower's control-effectiveness coefficient.
    pub fn r2_eff(&self) -> f64 {
        self.b2 * self.b2 / self.r2
    }
}

fn symmetrize_in_place(name: &'static str, m: &mut DMatrix<f64>) -> Result<()> {
    let asym = max_abs(&(&*m - m.transpose()));
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric {
            name,
            asymmetry: asym,
        });
    }
    if asym > 0.0 {
        let sym = (&*m + m.transpose()) * 0.5;
        *m = sym;
    }
    Ok(())
}

/// Smallest eigenvalue of a symmetric matrix.
pub(crate) fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |acc, v| acc.min(*v))
}
