//! Augmented block system for the leader's open-loop problem.
//!
//! Stacking the state with the leader's extra forward variable,
//! `xhat = (x, y)` and `phat = (p1, p2)`, the coupled optimality system
//! becomes a linear FBSDE with block coefficients
//!
//! ```text
//! Ahat = diag(A, A),   Chat = diag(C, C),
//! Bhat = [ B1 R1^-1 B1'   B2 R2^-1 B2' ]    Qhat = [ Q1  -Q2 ]
//!        [-B2 R2^-1 B2'   0            ],          [ Q2   0  ],
//! Ghat = [ G1  -G2 ]
//!        [ G2   0  ].
//! ```
//!
//! `Bhat`, `Qhat`, `Ghat` are not symmetric. For scalar games whose weight
//! ratios satisfy `Q2/Q1 = G2/G1 = alpha` and
//! `(B2^2/R2)/(B1^2/R1) = beta` (both positive), the change of variables
//! `phat = Phi * ptilde` with `Phi = [[1, -2 beta], [2 alpha, 1]]` turns the
//! system into one with symmetric PSD coefficients:
//!
//! ```text
//! Btilde = Bhat Phi,   Qtilde = Phi^-1 Qhat,   Gtilde = Phi^-1 Ghat.
//! ```
//!
//! Note the `Phi^-1` carries the prefactor `1/(1 + 4 alpha beta)`
//! (`det Phi = 1 + 4 alpha beta`); the downstream consistency check
//! `K = Phi Ktilde` in the `riccati` module pins this normalization.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::game::{max_abs, min_symmetric_eigenvalue, GameSpec};

/// Relative tolerance on the ratio conditions.
pub const RATIO_TOL: f64 = 1e-10;
/// Symmetry / PSD tolerance on the transformed matrices.
pub const SYMMETRIZED_TOL: f64 = 1e-10;

/// The five block matrices of the augmented system, each `2n x 2n`.
#[derive(Debug, Clone, PartialEq)]
pub struct HatSystem {
    pub a_hat: DMatrix<f64>,
    pub b_hat: DMatrix<f64>,
    pub c_hat: DMatrix<f64>,
    pub q_hat: DMatrix<f64>,
    pub g_hat: DMatrix<f64>,
}

/// `[[tl, tr], [bl, br]]` with equally sized `n x n` blocks.
fn from_blocks(
    tl: &DMatrix<f64>,
    tr: &DMatrix<f64>,
    bl: &DMatrix<f64>,
    br: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = tl.nrows();
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    out.view_mut((0, 0), (n, n)).copy_from(tl);
    out.view_mut((0, n), (n, n)).copy_from(tr);
    out.view_mut((n, 0), (n, n)).copy_from(bl);
    out.view_mut((n, n), (n, n)).copy_from(br);
    out
}

/// Assembles the block system from a validated spec. Total: every validated
/// spec yields a `HatSystem` (the `R_i` are invertible by validation).
pub fn assemble_hat(spec: &GameSpec) -> HatSystem {
    let n = spec.n();
    let zero = DMatrix::zeros(n, n);
    let r1_inv = spec
        .r1
        .clone()
        .try_inverse()
        .expect("validated R1 is positive definite");
    let r2_inv = spec
        .r2
        .clone()
        .try_inverse()
        .expect("validated R2 is positive definite");
    // Control-effectiveness blocks b_i = B_i R_i^-1 B_i'.
    let s1 = &spec.b1 * r1_inv * spec.b1.transpose();
    let s2 = &spec.b2 * r2_inv * spec.b2.transpose();

    HatSystem {
        a_hat: from_blocks(&spec.a, &zero, &zero, &spec.a),
        b_hat: from_blocks(&s1, &s2, &(-&s2), &zero),
        c_hat: from_blocks(&spec.c, &zero, &zero, &spec.c),
        q_hat: from_blocks(&spec.q1, &(-&spec.q2), &spec.q2, &zero),
        g_hat: from_blocks(&spec.g1, &(-&spec.g2), &spec.g2, &zero),
    }
}

/// Checks the scalar ratio conditions and returns `(alpha, beta)`.
pub fn check_symmetrizable(spec: &GameSpec) -> Result<(f64, f64)> {
    let s = spec.as_scalar().map_err(|_| Error::NotScalar {
        n: spec.n(),
        m1: spec.m1(),
        m2: spec.m2(),
    })?;
    if s.q1 == 0.0 {
        return Err(Error::DegenerateRatio("Q1 is zero"));
    }
    if s.g1 == 0.0 {
        return Err(Error::DegenerateRatio("G1 is zero"));
    }
    if s.r1_eff() == 0.0 {
        return Err(Error::DegenerateRatio("B1^2/R1 is zero"));
    }
    let q_ratio = s.q2 / s.q1;
    let g_ratio = s.g2 / s.g1;
    let beta = s.r2_eff() / s.r1_eff();
    let scale = q_ratio.abs().max(g_ratio.abs());
    if (q_ratio - g_ratio).abs() > RATIO_TOL * scale.max(1.0) {
        return Err(Error::RatioMismatch { q_ratio, g_ratio });
    }
    let alpha = q_ratio;
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::DegenerateRatio("alpha = Q2/Q1 is not positive"));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::DegenerateRatio(
            "beta = (B2^2/R2)/(B1^2/R1) is not positive",
        ));
    }
    Ok((alpha, beta))
}

/// The transformed system with symmetric coefficient matrices (scalar
/// games only, so every matrix here is `2 x 2`).
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetrizedSystem {
    pub alpha: f64,
    pub beta: f64,
    pub phi: DMatrix<f64>,
    pub phi_inv: DMatrix<f64>,
    pub a_tilde: DMatrix<f64>,
    pub b_tilde: DMatrix<f64>,
    pub c_tilde: DMatrix<f64>,
    pub q_tilde: DMatrix<f64>,
    pub g_tilde: DMatrix<f64>,
}

/// Applies the transformation `Phi` and verifies the results are symmetric
/// and PSD before returning. A failure here signals that `(alpha, beta)`
/// did not actually come from [`check_symmetrizable`].
pub fn symmetrize(hat: &HatSystem, alpha: f64, beta: f64) -> Result<SymmetrizedSystem> {
    if hat.a_hat.nrows() != 2 {
        return Err(Error::NotScalar {
            n: hat.a_hat.nrows() / 2,
            m1: 1,
            m2: 1,
        });
    }
    let phi = DMatrix::from_row_slice(2, 2, &[1.0, -2.0 * beta, 2.0 * alpha, 1.0]);
    let det = 1.0 + 4.0 * alpha * beta;
    let phi_inv = DMatrix::from_row_slice(2, 2, &[1.0, 2.0 * beta, -2.0 * alpha, 1.0]) / det;

    let b_tilde = &hat.b_hat * &phi;
    let q_tilde = &phi_inv * &hat.q_hat;
    let g_tilde = &phi_inv * &hat.g_hat;

    for (name, m) in [("Btilde", &b_tilde), ("Qtilde", &q_tilde), ("Gtilde", &g_tilde)] {
        let asym = max_abs(&(m - m.transpose()));
        if asym > SYMMETRIZED_TOL {
            return Err(Error::SymmetrizationFailed(format!(
                "{name} asymmetric ({asym})"
            )));
        }
        let sym = (m + m.transpose()) * 0.5;
        let min = min_symmetric_eigenvalue(&sym);
        if min < -SYMMETRIZED_TOL {
            return Err(Error::SymmetrizationFailed(format!(
                "{name} not PSD (eigenvalue {min})"
            )));
        }
    }

    Ok(SymmetrizedSystem {
        alpha,
        beta,
        a_tilde: hat.a_hat.clone(),
        c_tilde: hat.c_hat.clone(),
        phi,
        phi_inv,
        b_tilde,
        q_tilde,
        g_tilde,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::GameSpec;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hat_blocks_for_the_unit_scalar_game() {
        // A = 0, B1 = B2 = 1, R1 = R2 = 1, Q = G = 0, C = 0:
        // only Bhat is nonzero.
        let spec = GameSpec::scalar(0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0)
            .validate()
            .unwrap();
        let hat = assemble_hat(&spec);
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, -1.0, 0.0]);
        assert_eq!(hat.b_hat, expected);
        assert_eq!(max_abs(&hat.a_hat), 0.0);
        assert_eq!(max_abs(&hat.c_hat), 0.0);
        assert_eq!(max_abs(&hat.q_hat), 0.0);
        assert_eq!(max_abs(&hat.g_hat), 0.0);
    }

    #[test]
    fn hat_blocks_with_follower_terms_removed() {
        let (q, g) = (0.7, 1.3);
        let spec = GameSpec::scalar(0.0, 1.0, 0.0, 0.0, q, 0.0, 1.0, 1.0, g, 0.0, 1.0, 1.0)
            .validate()
            .unwrap();
        let hat = assemble_hat(&spec);
        assert_eq!(
            hat.b_hat,
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])
        );
        assert_eq!(hat.q_hat, DMatrix::from_row_slice(2, 2, &[q, 0.0, 0.0, 0.0]));
        assert_eq!(hat.g_hat, DMatrix::from_row_slice(2, 2, &[g, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn hat_diagonal_blocks_replicate_a_and_c() {
        let spec = GameSpec::scalar(1.0, 1.0, 1.0, 2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
            .validate()
            .unwrap();
        let hat = assemble_hat(&spec);
        assert_eq!(hat.a_hat, DMatrix::from_diagonal_element(2, 2, 1.0));
        assert_eq!(hat.c_hat, DMatrix::from_diagonal_element(2, 2, 2.0));
    }

    #[test]
    fn ratios_on_a_conforming_instance() {
        let spec = GameSpec::scalar(0.0, 1.0, 2.0, 0.0, 2.0, 1.0, 1.0, 2.0, 4.0, 2.0, 1.0, 1.0)
            .validate()
            .unwrap();
        let (alpha, beta) = check_symmetrizable(&spec).unwrap();
        assert_abs_diff_eq!(alpha, 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(beta, 2.0, epsilon = 1e-14);
    }

    #[test]
    fn mismatched_ratios_are_rejected() {
        let spec = GameSpec::scalar(0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 1.0, 1.0)
            .validate()
            .unwrap();
        assert!(matches!(
            check_symmetrizable(&spec),
            Err(Error::RatioMismatch { .. })
        ));
    }

    #[test]
    fn zero_q1_is_degenerate() {
        let spec = GameSpec::scalar(0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
            .validate()
            .unwrap();
        assert!(matches!(
            check_symmetrizable(&spec),
            Err(Error::DegenerateRatio(_))
        ));
    }

    #[test]
    fn nonscalar_games_are_rejected() {
        let n = 2;
        let eye = DMatrix::<f64>::identity(n, n);
        let spec = GameSpec::new(
            DMatrix::zeros(n, n),
            eye.clone(),
            eye.clone(),
            DMatrix::zeros(n, n),
            eye.clone(),
            eye.clone(),
            eye.clone(),
            eye.clone(),
            eye.clone(),
            eye,
            1.0,
            nalgebra::DVector::from_element(n, 1.0),
        )
        .validate()
        .unwrap();
        assert!(matches!(
            check_symmetrizable(&spec),
            Err(Error::NotScalar { .. })
        ));
    }

    /// alpha = beta = 1/2 with B1 = R1 = 1 gives b2 = 1/2 and
    /// Btilde = [[1.5, -0.5], [-0.5, 0.5]].
    #[test]
    fn symmetrized_b_matches_hand_calculation() {
        // b2 = beta * b1 = 0.5 realized as B2 = 1, R2 = 2.
        let spec = GameSpec::scalar(0.0, 1.0, 1.0, 0.0, 1.0, 0.5, 1.0, 2.0, 1.0, 0.5, 1.0, 1.0)
            .validate()
            .unwrap();
        let (alpha, beta) = check_symmetrizable(&spec).unwrap();
        assert_abs_diff_eq!(alpha, 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(beta, 0.5, epsilon = 1e-14);
        let hat = assemble_hat(&spec);
        let sym = symmetrize(&hat, alpha, beta).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.5, -0.5, -0.5, 0.5]);
        assert!(max_abs(&(&sym.b_tilde - &expected)) <= 1e-14);
        // Entrywise check of the defining product Bhat * Phi.
        assert!(max_abs(&(&sym.b_tilde - &hat.b_hat * &sym.phi)) <= 1e-14);
    }

    /// With Q1 = 1, Q2 = alpha = 1/2, beta = 1/2: det Phi = 2 and
    /// Qtilde = 0.5 * [[1.5, -0.5], [-0.5, 0.5]] (explicit 2x2 inverse).
    #[test]
    fn symmetrized_q_carries_the_derived_prefactor() {
        let spec = GameSpec::scalar(0.0, 1.0, 1.0, 0.0, 1.0, 0.5, 1.0, 2.0, 1.0, 0.5, 1.0, 1.0)
            .validate()
            .unwrap();
        let hat = assemble_hat(&spec);
        let sym = symmetrize(&hat, 0.5, 0.5).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.5, -0.5, -0.5, 0.5]) * 0.5;
        assert!(max_abs(&(&sym.q_tilde - &expected)) <= 1e-14);
    }

    #[test]
    fn exact_symmetry_identities_under_the_ratio_conditions() {
        // -2 beta b1 + b2 = -b2 and -2 alpha Q1 + Q2 = -Q2 when the ratios
        // hold; assert entrywise symmetry to 1e-12.
        let spec = GameSpec::scalar(0.3, 1.0, 2.0, 0.4, 2.0, 1.0, 1.0, 2.0, 4.0, 2.0, 1.0, 1.0)
            .validate()
            .unwrap();
        let (alpha, beta) = check_symmetrizable(&spec).unwrap();
        let hat = assemble_hat(&spec);
        let sym = symmetrize(&hat, alpha, beta).unwrap();
        for m in [&sym.b_tilde, &sym.q_tilde, &sym.g_tilde] {
            assert!(max_abs(&(m - m.transpose())) <= 1e-12);
        }
    }

    #[test]
    fn phi_is_invertible_for_positive_ratios() {
        for &(alpha, beta) in &[(0.1, 0.1), (0.5, 2.0), (3.0, 0.25), (10.0, 10.0)] {
            let phi = DMatrix::from_row_slice(2, 2, &[1.0, -2.0 * beta, 2.0 * alpha, 1.0]);
            let det: f64 = phi[(0, 0)] * phi[(1, 1)] - phi[(0, 1)] * phi[(1, 0)];
            assert!((det - (1.0 + 4.0 * alpha * beta)).abs() < 1e-14);
            assert!(det > 0.0);
        }
    }
}
