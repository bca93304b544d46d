//! Typed failures shared by every solver module.
//!
//! Each variant's `Display` form starts with a stable machine-parsable tag
//! (`NotPD R2 ...`, `BlowUp ...`) that the CLI forwards verbatim on stderr.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("DimensionMismatch {0}")]
    DimensionMismatch(String),

    /// A weight matrix is asymmetric beyond the symmetrization tolerance.
    #[error("NotSymmetric {name} (asymmetry {asymmetry})")]
    NotSymmetric { name: &'static str, asymmetry: f64 },

    #[error("NotPSD {name} (eigenvalue {eigenvalue})")]
    NotPsd { name: &'static str, eigenvalue: f64 },

    #[error("NotPD {name} (eigenvalue {eigenvalue})")]
    NotPd { name: &'static str, eigenvalue: f64 },

    #[error("NonpositiveHorizon (T = {0})")]
    NonpositiveHorizon(f64),

    #[error("NotScalar (n = {n}, m1 = {m1}, m2 = {m2})")]
    NotScalar { n: usize, m1: usize, m2: usize },

    #[error("RatioMismatch (Q2/Q1 = {q_ratio}, G2/G1 = {g_ratio})")]
    RatioMismatch { q_ratio: f64, g_ratio: f64 },

    #[error("DegenerateRatio {0}")]
    DegenerateRatio(&'static str),

    #[error("SymmetrizationFailed {0}")]
    SymmetrizationFailed(String),

    /// A matrix path left the trust region (entry above 1e12 or non-finite),
    /// reported with the first offending time node.
    #[error("BlowUp (t = {t}, entry = {entry})")]
    BlowUp { t: f64, entry: f64 },

    #[error("GridTooCoarse (N = {0}, need N >= 4)")]
    GridTooCoarse(usize),

    #[error("RequiresDeterministic (C must be zero for this check)")]
    RequiresDeterministic,

    #[error("FollowerIterationDiverged (sweeps = {sweeps}, update = {update})")]
    FollowerIterationDiverged { sweeps: usize, update: f64 },

    #[error("NoConvergence (iterations = {iterations}, update = {update})")]
    NoConvergence { iterations: usize, update: f64 },

    #[error("SingularKKT {0}")]
    SingularKkt(&'static str),

    #[error("MaxIterations (limit = {limit}, gradient norm = {gradient_norm})")]
    MaxIterations { limit: usize, gradient_norm: f64 },
}

impl Error {
    /// True for failures caused by invalid user input rather than by a
    /// solver running out of road. The CLI maps input errors to exit code 2
    /// and solver failures to exit code 3.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::DimensionMismatch(_)
                | Error::NotSymmetric { .. }
                | Error::NotPsd { .. }
                | Error::NotPd { .. }
                | Error::NonpositiveHorizon(_)
                | Error::NotScalar { .. }
                | Error::RatioMismatch { .. }
                | Error::DegenerateRatio(_)
                | Error::GridTooCoarse(_)
                | Error::RequiresDeterministic
        )
    }
}
