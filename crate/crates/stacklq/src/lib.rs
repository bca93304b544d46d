//! Solvers for global open-loop and closed-loop Stackelberg equilibria of
//! stochastic linear-quadratic differential games.
//!
//! The leader announces a strategy over the whole horizon; the follower
//! best-responds; the leader optimizes against that response. Both
//! hierarchy levels collapse to coupled forward-backward equations:
//!
//! - **Open loop** ([`augment`], [`riccati`], [`openloop`]): the follower's
//!   optimality system becomes the leader's state equation. Stacking
//!   `(x, y)` and the two costates yields a linear FBSDE whose feedback
//!   representation `phat = K xhat` satisfies a non-symmetric matrix
//!   Riccati equation; for scalar games with proportional weights a linear
//!   transformation reduces it to a standard symmetric one.
//! - **Closed loop** ([`closedloop`]): the leader's strategy is a field
//!   `u(t, x)` with bounded slope. Affine strategies suffice, the optimal
//!   slope is bang-bang in a switching quantity, and the scalar profile
//!   `(xi, eta, zeta)` solves a two-point boundary-value system.
//! - **Verification** ([`openloop`] probes and [`oracle`]):
//!   maximum-principle residuals, convexity probes with common random
//!   numbers, and an independent discrete-time brute-force Stackelberg
//!   solver for the deterministic case.
//!
//! See the crate examples for runnable walkthroughs of each capability;
//! the `stacklq` binary drives the same pipeline from config files.

pub mod augment;
pub mod cli;
pub mod closedloop;
pub mod error;
pub mod game;
pub mod grid;
pub mod noise;
pub mod openloop;
pub mod oracle;
pub mod riccati;
pub mod samples;

pub use error::{Error, Result};
pub use game::GameSpec;
pub use grid::TimeGrid;
