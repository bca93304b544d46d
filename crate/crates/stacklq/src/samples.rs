//! Canonical game instances used across the test suites, examples, and
//! bundled configs.

use crate::game::GameSpec;

/// Follower-free scalar game (B2 = Q2 = G2 = 0, A = C = 0, B1 = R1 = 1,
/// Q1 = 0, G1 = 1, T = 1, x0 = 1).
///
/// The augmented backward equation decouples and its (1,1) entry has the
/// closed form `K11(t) = 1/(2 - t)`, which makes this the main analytic
/// anchor: optimal cost `K11(0) x0^2 / 2 = 1/4`.
pub fn follower_free() -> GameSpec {
    GameSpec::scalar(0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0)
}

/// Deterministic scalar reference game with an active follower.
///
/// The weight ratios satisfy `Q2/Q1 = G2/G1 = 1/2` and
/// `(B2^2/R2)/(B1^2/R1) = 2`, so the symmetrizing transformation applies
/// and the augmented backward equation is guaranteed solvable on `[0, T]`.
pub fn reference_deterministic() -> GameSpec {
    GameSpec::scalar(0.2, 1.0, 2.0, 0.0, 2.0, 1.0, 1.0, 2.0, 4.0, 2.0, 1.0, 1.0)
}

/// The reference game with multiplicative noise `C = 0.3`.
pub fn reference_stochastic() -> GameSpec {
    GameSpec::scalar(0.2, 1.0, 2.0, 0.3, 2.0, 1.0, 1.0, 2.0, 4.0, 2.0, 1.0, 1.0)
}

/// Degenerate game with zero dynamics and unit leader state weight:
/// the state stays at `x0` and `J1 = x0^2 T / 2` exactly.
pub fn zero_dynamics() -> GameSpec {
    GameSpec::scalar(0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_samples_validate() {
        for spec in [
            follower_free(),
            reference_deterministic(),
            reference_stochastic(),
            zero_dynamics(),
        ] {
            spec.validate().unwrap();
        }
    }

    #[test]
    fn reference_is_symmetrizable() {
        let spec = reference_deterministic().validate().unwrap();
        let (alpha, beta) = crate::augment::check_symmetrizable(&spec).unwrap();
        assert!((alpha - 0.5).abs() < 1e-14);
        assert!((beta - 2.0).abs() < 1e-14);
    }
}
