//! Closed-loop leader problem: the (xi, eta, zeta) boundary-value system
//! with its bang-bang slope, the candidate strategy, and the cost
//! comparison against the open loop.
//!
//! ```sh
//! cargo run --example closed_loop_bang
//! ```

use stacklq::augment::assemble_hat;
use stacklq::closedloop::{
    costs_closed_moment, hamiltonian_scan, nominal_samples, solve_profile, synthesize_closed,
    ProfileMethod,
};
use stacklq::openloop::costs_moment;
use stacklq::riccati::{solve_riccati, RiccatiSystem};
use stacklq::{samples, TimeGrid};

fn main() -> stacklq::Result<()> {
    let spec = samples::reference_deterministic().validate()?;
    let grid = TimeGrid::new(8000, spec.horizon)?;

    // Open-loop anchor.
    let sol = solve_riccati(&RiccatiSystem::from_hat(&assemble_hat(&spec)), &grid)?;
    let (j1_open, _) = costs_moment(&sol, &spec, &grid)?;
    println!("open-loop leader cost:          J1 = {j1_open:.8}");

    // Zero slope bound: the closed loop collapses onto the open loop.
    let profile0 = solve_profile(&spec, &grid, 0.0, ProfileMethod::FixedPoint)?;
    let (j1_closed0, _) = costs_closed_moment(&profile0, &spec, &grid)?;
    println!(
        "closed loop, K_b = 0:           J1 = {j1_closed0:.8}  (gap {:.1e})",
        (j1_closed0 - j1_open).abs()
    );

    // Positive bound: the bang slope strictly helps the leader here.
    for bound in [0.5, 1.0, 2.0] {
        let profile = solve_profile(&spec, &grid, bound, ProfileMethod::FixedPoint)?;
        let (j1, _) = costs_closed_moment(&profile, &spec, &grid)?;
        let n = grid.n_steps();
        println!(
            "closed loop, K_b = {bound}:         J1 = {j1:.8}  (improvement {:.4}); \
             profile ends (xi, eta, zeta)(T) = ({:.4}, {:.4}, {:.4})",
            j1_open - j1,
            profile.xi[n],
            profile.eta[n],
            profile.zeta[n]
        );
    }

    // Both boundary-value methods agree.
    let fp = solve_profile(&spec, &grid, 1.0, ProfileMethod::FixedPoint)?;
    let sh = solve_profile(&spec, &grid, 1.0, ProfileMethod::Shooting)?;
    let gap = (fp.eta[0] - sh.eta[0]).abs().max((fp.zeta[0] - sh.zeta[0]).abs());
    println!(
        "fixed point ({} sweeps) vs shooting ({} iterations): initial costate gap {gap:.2e}",
        fp.iterations, sh.iterations
    );

    // Pointwise Hamiltonian minimality along the nominal path.
    let law = synthesize_closed(fp.clone(), &spec, &grid)?;
    let scan = hamiltonian_scan(&fp, &spec, &nominal_samples(&law, 100))?;
    println!(
        "hamiltonian scan: {} samples, {} degenerate, {} sign violations, \
         curvature error {:.1e}",
        scan.samples, scan.degenerate, scan.sign_violations, scan.max_curvature_error
    );
    println!(
        "bang field: u2*(0+) = {:.1}, u2*(T) = {:.1}, switching quantity \
         delta(T) = {:.4}",
        law.slope(1),
        law.slope(grid.n_steps()),
        fp.delta(grid.n_steps(), spec.b1[(0, 0)])
    );
    Ok(())
}
