//! Full open-loop pipeline: backward Riccati pass, feedback synthesis,
//! Monte Carlo simulation, and the two independent cost routes.
//!
//! ```sh
//! cargo run --example open_loop_equilibrium
//! ```

use stacklq::augment::assemble_hat;
use stacklq::openloop::{
    backward_defect_rms, costs_mc_streaming, costs_moment, simulate, synthesize,
};
use stacklq::riccati::{solve_riccati, RiccatiSystem};
use stacklq::{samples, TimeGrid};

fn main() -> stacklq::Result<()> {
    let spec = samples::reference_stochastic().validate()?;
    let grid = TimeGrid::new(2000, spec.horizon)?;

    let sol = solve_riccati(&RiccatiSystem::from_hat(&assemble_hat(&spec)), &grid)?;
    let law = synthesize(sol, &spec);
    println!(
        "leader gain at t=0 (on (x, y)):   [{:.6}, {:.6}]",
        law.u_gain[0][(0, 0)],
        law.u_gain[0][(0, 1)]
    );
    println!(
        "follower gain at t=0 (on (x, y)): [{:.6}, {:.6}]",
        law.v_gain[0][(0, 0)],
        law.v_gain[0][(0, 1)]
    );

    // Monte Carlo costs with standard errors (streaming; paths are
    // reproducible from (seed, path, step)).
    let est = costs_mc_streaming(&law, &spec, &grid, 10_000, 42)?;
    println!(
        "Monte Carlo:   J1 = {:.6} +- {:.1e},  J2 = {:.6} +- {:.1e}",
        est.j1, est.se1, est.j2, est.se2
    );

    // Exact-expectation route through the second-moment Lyapunov ODE.
    let (j1, j2) = costs_moment(&law.riccati, &spec, &grid)?;
    println!("moment ODE:    J1 = {j1:.6},             J2 = {j2:.6}");
    println!(
        "gaps: {:.2e} ({:.1} se), {:.2e} ({:.1} se)",
        (est.j1 - j1).abs(),
        (est.j1 - j1).abs() / est.se1,
        (est.j2 - j2).abs(),
        (est.j2 - j2).abs() / est.se2
    );

    // A small stored ensemble for the representation checks.
    let ens = simulate(&law, &spec, &grid, 500, 42)?;
    println!(
        "backward-equation defect (RMS over 500 paths): {:.3e}",
        backward_defect_rms(&ens, &spec)
    );
    let last = grid.n_steps();
    let phat = ens.phat(0, last);
    println!(
        "terminal coupling on path 0: p1(T) = {:.6}, -G2 y(T) + G1 x(T) = {:.6}",
        phat[0],
        -spec.g2[(0, 0)] * ens.y(0, last)[0] + spec.g1[(0, 0)] * ens.x(0, last)[0]
    );
    Ok(())
}
