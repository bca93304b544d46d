//! Discrete-time brute-force oracle vs the continuous Riccati pipeline:
//! first-order convergence of the leader optimum and of the follower's
//! exact best response.
//!
//! ```sh
//! cargo run --example discrete_oracle
//! ```

use stacklq::oracle::{convergence_report, sampled_continuous_controls, DiscreteGame};
use stacklq::{samples, TimeGrid};

fn main() -> stacklq::Result<()> {
    let spec = samples::reference_deterministic().validate()?;

    let report = convergence_report(&spec, &[250, 500, 1000, 2000])?;
    println!("continuous leader cost (fine-grid anchor): {:.10}", report.j1_cont);
    println!("{:>6} {:>16} {:>12} {:>8}", "N", "J1_disc", "abs_err", "order");
    for row in &report.rows {
        match row.order {
            Some(order) => println!(
                "{:>6} {:>16.10} {:>12.3e} {:>8.3}",
                row.n, row.j1_disc, row.abs_err, order
            ),
            None => println!("{:>6} {:>16.10} {:>12.3e} {:>8}", row.n, row.j1_disc, row.abs_err, "-"),
        }
    }

    // The oracle's exact follower response tracks the continuous one.
    let grid = TimeGrid::new(2000, spec.horizon)?;
    let game = DiscreteGame::new(&spec, &grid)?;
    let (u_cont, v_cont) = sampled_continuous_controls(&spec, &grid)?;
    let br = game.follower_br(&u_cont)?;
    let mut gap = 0.0_f64;
    for k in 0..2000 {
        gap = gap.max((&br.v[k] - &v_cont[k]).amax());
    }
    println!("sup-norm follower-response gap at N = 2000: {gap:.3e}");

    // And the reduced minimization is stationary to round-off.
    let solution = game.leader_solve()?;
    println!(
        "leader CG: {} iterations, gradient norm {:.2e}, J1 = {:.10}",
        solution.cg_iterations, solution.gradient_norm, solution.j1
    );
    Ok(())
}
