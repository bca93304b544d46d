//! Backward Riccati integration checked against two closed forms.
//!
//! ```sh
//! cargo run --example riccati_closed_form
//! ```

use nalgebra::DMatrix;
use stacklq::augment::assemble_hat;
use stacklq::game::max_abs;
use stacklq::riccati::{riccati_residual, solve_riccati, RiccatiSystem, SystemTag};
use stacklq::{samples, TimeGrid};

fn main() -> stacklq::Result<()> {
    // With A = B = C = 0 the backward equation is dK/dt = -Q, so the
    // path is the straight line K(t) = G + (T - t) Q.
    let q = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 1.0, 0.0]);
    let g = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, 1.0, 0.0]);
    let sys = RiccatiSystem {
        a: DMatrix::zeros(2, 2),
        b: DMatrix::zeros(2, 2),
        c: DMatrix::zeros(2, 2),
        q: q.clone(),
        g: g.clone(),
        tag: SystemTag::Hat,
    };
    let grid = TimeGrid::new(1000, 1.0)?;
    let sol = solve_riccati(&sys, &grid)?;
    let mut err = 0.0_f64;
    for k in 0..=1000 {
        let expected = &g + &q * (1.0 - grid.node(k));
        err = err.max(max_abs(&(sol.node(k) - expected)));
    }
    println!("linear case:      max |K - (G + (T-t) Q)| = {err:.3e}");

    // Follower-free scalar game: the (1,1) entry solves k' = k^2 with
    // k(1) = 1, i.e. k(t) = 1/(2 - t).
    let spec = samples::follower_free().validate()?;
    let sys = RiccatiSystem::from_hat(&assemble_hat(&spec));
    let grid = TimeGrid::new(2000, 1.0)?;
    let sol = solve_riccati(&sys, &grid)?;
    let mut err = 0.0_f64;
    for k in 0..=2000 {
        err = err.max((sol.node(k)[(0, 0)] - 1.0 / (2.0 - grid.node(k))).abs());
    }
    println!("follower-free:    max |K11 - 1/(2-t)|     = {err:.3e}");
    println!("                  K11(0) = {:.12} (exact 0.5)", sol.node(0)[(0, 0)]);

    // A-posteriori defect of the integrated path, second order in h.
    let res = riccati_residual(&sol, &sys)?;
    let fine = solve_riccati(&sys, &TimeGrid::new(4000, 1.0)?)?;
    let res_fine = riccati_residual(&fine, &sys)?;
    println!("residual:         {res:.3e} at N = 2000, {res_fine:.3e} at N = 4000 (ratio {:.2})", res / res_fine);
    Ok(())
}
