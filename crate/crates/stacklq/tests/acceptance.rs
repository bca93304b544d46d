//! Acceptance suite: one test per criterion, each printing a PASS line
//! with the measured values (run with `--nocapture` to see them all).
//!
//! Every tolerance is pinned here; the reference instances live in
//! `stacklq::samples`.

use nalgebra::DMatrix;

use stacklq::augment::{assemble_hat, check_symmetrizable, symmetrize};
use stacklq::closedloop::{
    costs_closed_moment, hamiltonian_scan, nominal_samples, simulate_closed, solve_profile,
    synthesize_closed, ProfileMethod,
};
use stacklq::game::{max_abs, GameSpec};
use stacklq::openloop::{
    backward_defect_rms, costs_mc_streaming, costs_moment, gradient_residual, perturbation_probe,
    simulate, synthesize, AdjointSource, FeedbackLaw,
};
use stacklq::oracle::{convergence_report, sampled_continuous_controls, DiscreteGame};
use stacklq::riccati::{
    recover_from_tilde, riccati_residual, solve_riccati, RiccatiSystem, SystemTag,
};
use stacklq::{samples, TimeGrid};

fn min_symmetric_eig(m: &DMatrix<f64>) -> f64 {
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |acc, v| acc.min(*v))
}

fn hat_law(spec: &GameSpec, n: usize) -> (FeedbackLaw, TimeGrid) {
    let grid = TimeGrid::new(n, spec.horizon).unwrap();
    let sol = solve_riccati(&RiccatiSystem::from_hat(&assemble_hat(spec)), &grid).unwrap();
    (synthesize(sol, spec), grid)
}

/// Criterion 1: analytic Riccati anchors and the a-posteriori residual.
#[test]
fn criterion_1_riccati_analytic_cases() {
    // Linear-quadrature case: with A = B = C = 0 the path is
    // K(t) = G + (T - t) Q, reproduced to 1e-10 at N = 1000.
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
    let grid = TimeGrid::new(1000, 1.0).unwrap();
    let sol = solve_riccati(&sys, &grid).unwrap();
    let mut linear_err = 0.0_f64;
    for k in 0..=1000 {
        let expected = &g + &q * (1.0 - grid.node(k));
        linear_err = linear_err.max(max_abs(&(sol.node(k) - expected)));
    }
    assert!(linear_err <= 1e-10, "linear case error {linear_err}");

    // Follower-free scalar case: K11(t) = 1/(2 - t) to 1e-6 at N = 2000.
    let spec = samples::follower_free().validate().unwrap();
    let ff_sys = RiccatiSystem::from_hat(&assemble_hat(&spec));
    let ff_grid = TimeGrid::new(2000, 1.0).unwrap();
    let ff_sol = solve_riccati(&ff_sys, &ff_grid).unwrap();
    let mut ff_err = 0.0_f64;
    for k in 0..=2000 {
        ff_err = ff_err.max((ff_sol.node(k)[(0, 0)] - 1.0 / (2.0 - ff_grid.node(k))).abs());
    }
    assert!(ff_err <= 1e-6, "follower-free error {ff_err}");

    // Residual <= 1e-5 at N = 2000, quartering when h halves.
    let res_coarse = riccati_residual(&ff_sol, &ff_sys).unwrap();
    let fine = solve_riccati(&ff_sys, &TimeGrid::new(4000, 1.0).unwrap()).unwrap();
    let res_fine = riccati_residual(&fine, &ff_sys).unwrap();
    let ratio = res_coarse / res_fine;
    assert!(res_coarse <= 1e-5, "residual {res_coarse}");
    assert!(
        (3.4..=4.6).contains(&ratio),
        "residual ratio {ratio} not ~4"
    );

    println!(
        "criterion 1: PASS - linear {linear_err:.2e}, follower-free {ff_err:.2e}, \
         residual {res_coarse:.2e} (ratio {ratio:.2})"
    );
}

/// Criterion 2: symmetrized solution stays symmetric and PSD, and the
/// transformation maps back onto the directly integrated path.
#[test]
fn criterion_2_symmetrization() {
    let spec = samples::reference_stochastic().validate().unwrap();
    let hat = assemble_hat(&spec);
    let (alpha, beta) = check_symmetrizable(&spec).unwrap();
    let sym = symmetrize(&hat, alpha, beta).unwrap();
    let grid = TimeGrid::new(2000, spec.horizon).unwrap();
    let direct = solve_riccati(&RiccatiSystem::from_hat(&hat), &grid).unwrap();
    let ktilde = solve_riccati(&RiccatiSystem::from_tilde(&sym), &grid).unwrap();

    let mut asym = 0.0_f64;
    let mut min_eig = f64::INFINITY;
    for m in &ktilde.k {
        asym = asym.max(max_abs(&(m - m.transpose())));
        min_eig = min_eig.min(min_symmetric_eig(m));
    }
    assert!(asym <= 1e-10, "tilde asymmetry {asym}");
    assert!(min_eig >= -1e-10, "tilde min eigenvalue {min_eig}");

    let recovered = recover_from_tilde(&sym, &ktilde);
    let mut gap = 0.0_f64;
    for k in 0..=2000 {
        gap = gap.max(max_abs(&(recovered.node(k) - direct.node(k))));
    }
    assert!(gap <= 1e-6, "max |Phi Ktilde - K| = {gap}");

    println!(
        "criterion 2: PASS - asymmetry {asym:.2e}, min eig {min_eig:.2e}, \
         recovery gap {gap:.2e}"
    );
}

/// Criterion 3: exact terminal coupling of the represented adjoints and
/// O(h) integrated backward defect.
#[test]
fn criterion_3_fbsde_representation() {
    let spec = samples::reference_stochastic().validate().unwrap();
    let hat = assemble_hat(&spec);
    let n_paths = 2000;

    let defect_at = |n: usize| {
        let (law, grid) = hat_law(&spec, n);
        let ens = simulate(&law, &spec, &grid, n_paths, 17).unwrap();
        // Terminal conditions p1(T) = -G2 y(T) + G1 x(T),
        // p2(T) = G2 x(T), exactly.
        let last = grid.n_steps();
        for p in 0..n_paths {
            let phat = ens.phat(p, last);
            let expected = &hat.g_hat * ens.xhat(p, last);
            assert_eq!(phat, expected, "terminal coupling broken on path {p}");
        }
        backward_defect_rms(&ens, &spec)
    };

    let coarse = defect_at(1000);
    let fine = defect_at(2000);
    let ratio = coarse / fine;
    assert!(
        (1.7..=2.3).contains(&ratio),
        "defect ratio {ratio} outside [1.7, 2.3] ({coarse} vs {fine})"
    );
    println!(
        "criterion 3: PASS - terminal coupling exact on {n_paths} paths, \
         defect {coarse:.3e} -> {fine:.3e} (ratio {ratio:.2})"
    );
}

/// Criterion 4: independent-adjoint stationarity residual and convexity
/// probes on the deterministic reference instance.
#[test]
fn criterion_4_maximum_principle() {
    let spec = samples::reference_deterministic().validate().unwrap();

    let residual_at = |n: usize| {
        let (law, grid) = hat_law(&spec, n);
        let ens = simulate(&law, &spec, &grid, 1, 0).unwrap();
        gradient_residual(&ens, &spec, AdjointSource::IndependentBackward).unwrap()
    };
    let res = residual_at(2000);
    let res_fine = residual_at(4000);
    let ratio = res / res_fine;
    assert!(res <= 5e-3, "stationarity residual {res}");
    assert!(
        (1.5..=2.5).contains(&ratio),
        "residual ratio {ratio}, expected halving with h"
    );

    let (law, grid) = hat_law(&spec, 2000);
    let report = perturbation_probe(&law, &spec, &grid, 2024, 20, &[1e-2, 1e-1], 1).unwrap();
    assert_eq!(report.probes.len(), 40);
    let min_delta = report.min_delta();
    assert!(
        min_delta >= -1e-8,
        "convexity probe went negative: {min_delta}"
    );

    println!(
        "criterion 4: PASS - residual {res:.3e} (ratio {ratio:.2}), \
         min probe delta {min_delta:.3e} over 40 probes"
    );
}

/// Criterion 5: Monte Carlo vs moment-transport costs; statistical
/// agreement with noise, near-exact agreement without it.
#[test]
fn criterion_5_cost_cross_validation() {
    // Stochastic instance at 1e4 paths: within 3 standard errors.
    let spec = samples::reference_stochastic().validate().unwrap();
    let (law, grid) = hat_law(&spec, 2000);
    let est = costs_mc_streaming(&law, &spec, &grid, 10_000, 42).unwrap();
    let (j1m, j2m) = costs_moment(&law.riccati, &spec, &grid).unwrap();
    let gap1 = (est.j1 - j1m).abs();
    let gap2 = (est.j2 - j2m).abs();
    assert!(
        gap1 <= 3.0 * est.se1,
        "J1 gap {gap1} vs 3 se {}",
        3.0 * est.se1
    );
    assert!(
        gap2 <= 3.0 * est.se2,
        "J2 gap {gap2} vs 3 se {}",
        3.0 * est.se2
    );

    // Deterministic instance: SE = 0 and agreement to 1e-6; the Euler
    // transcription bias is ~0.28/N on this instance, so N = 1e6 leaves
    // a 3x margin.
    let det = samples::reference_deterministic().validate().unwrap();
    let (law_d, grid_d) = hat_law(&det, 1_000_000);
    let est_d = costs_mc_streaming(&law_d, &det, &grid_d, 4, 42).unwrap();
    let (j1d, j2d) = costs_moment(&law_d.riccati, &det, &grid_d).unwrap();
    assert_eq!(est_d.se1, 0.0);
    assert_eq!(est_d.se2, 0.0);
    let gap_det = (est_d.j1 - j1d).abs().max((est_d.j2 - j2d).abs());
    assert!(gap_det <= 1e-6, "deterministic gap {gap_det}");

    println!(
        "criterion 5: PASS - stochastic gaps ({gap1:.3e}, {gap2:.3e}) within 3 se \
         ({:.3e}, {:.3e}); deterministic gap {gap_det:.3e} with SE = 0",
        3.0 * est.se1,
        3.0 * est.se2
    );
}

/// Criterion 6: the discrete-time oracle converges to the continuous
/// value at first order and its follower response tracks the continuous
/// one.
#[test]
fn criterion_6_oracle_equivalence() {
    let spec = samples::reference_deterministic().validate().unwrap();
    let report = convergence_report(&spec, &[250, 500, 1000, 2000]).unwrap();
    for row in &report.rows[..3] {
        let order = row.order.expect("order defined");
        assert!(
            (0.7..=1.3).contains(&order),
            "observed order {order} at N = {}",
            row.n
        );
    }
    let final_err = report.rows[3].abs_err;
    assert!(final_err <= 5e-3, "oracle gap {final_err} at N = 2000");

    let grid = TimeGrid::new(2000, spec.horizon).unwrap();
    let game = DiscreteGame::new(&spec, &grid).unwrap();
    let (u_cont, v_cont) = sampled_continuous_controls(&spec, &grid).unwrap();
    let br = game.follower_br(&u_cont).unwrap();
    let mut v_gap = 0.0_f64;
    for k in 0..2000 {
        v_gap = v_gap.max((&br.v[k] - &v_cont[k]).amax());
    }
    assert!(v_gap <= 5e-3, "follower response gap {v_gap}");

    let orders: Vec<f64> = report.rows[..3].iter().map(|r| r.order.unwrap()).collect();
    println!(
        "criterion 6: PASS - orders {orders:.2?}, |J1_disc - J1_cont| = {final_err:.3e}, \
         follower gap {v_gap:.3e}"
    );
}

/// Criterion 7: closed-loop profile boundary conditions, cost reduction
/// to the open loop at zero bound, improvement at positive bound, and
/// Hamiltonian pointwise minimality.
#[test]
fn criterion_7_closed_loop() {
    let spec = samples::reference_deterministic().validate().unwrap();
    let fine = TimeGrid::new(8000, spec.horizon).unwrap();

    // Open-loop anchor (moment route on the same fine grid).
    let sol = solve_riccati(&RiccatiSystem::from_hat(&assemble_hat(&spec)), &fine).unwrap();
    let (j1_open, _) = costs_moment(&sol, &spec, &fine).unwrap();

    // Boundary conditions at both bounds.
    let profile0 = solve_profile(&spec, &fine, 0.0, ProfileMethod::FixedPoint).unwrap();
    let profile1 = solve_profile(&spec, &fine, 1.0, ProfileMethod::FixedPoint).unwrap();
    for (name, profile) in [("K_b=0", &profile0), ("K_b=1", &profile1)] {
        assert_eq!(profile.xi[0], 0.0, "{name}: xi(0) not exactly zero");
        assert!(
            profile.terminal_mismatch_eta <= 1e-6 && profile.terminal_mismatch_zeta <= 1e-6,
            "{name}: terminal mismatches ({}, {})",
            profile.terminal_mismatch_eta,
            profile.terminal_mismatch_zeta
        );
    }

    // Zero bound reproduces the open-loop cost (deterministic, 1e-6).
    let (j1_closed0, _) = costs_closed_moment(&profile0, &spec, &fine).unwrap();
    let det_gap = (j1_closed0 - j1_open).abs();
    assert!(det_gap <= 1e-6, "deterministic K_b=0 gap {det_gap}");

    // Stochastic variant: zero-bound closed-loop Monte Carlo cost matches
    // the open-loop Monte Carlo cost within 3 combined standard errors
    // (independent seeds).
    let sto = samples::reference_stochastic().validate().unwrap();
    let grid = TimeGrid::new(2000, sto.horizon).unwrap();
    let profile0_sto = solve_profile(&sto, &grid, 0.0, ProfileMethod::FixedPoint).unwrap();
    let law0_sto = synthesize_closed(profile0_sto, &sto, &grid).unwrap();
    let (_, est_closed) = simulate_closed(&law0_sto, &sto, &grid, 4000, 1).unwrap();
    let (law_open, _) = hat_law(&sto, 2000);
    let est_open = costs_mc_streaming(&law_open, &sto, &grid, 4000, 2).unwrap();
    let sto_gap = (est_closed.j1 - est_open.j1).abs();
    let sto_budget = 3.0 * (est_closed.se1 * est_closed.se1 + est_open.se1 * est_open.se1).sqrt();
    assert!(
        sto_gap <= sto_budget,
        "stochastic K_b=0 gap {sto_gap} vs budget {sto_budget}"
    );

    // Positive bound can only help the leader.
    let (j1_closed1, _) = costs_closed_moment(&profile1, &spec, &fine).unwrap();
    assert!(
        j1_closed1 <= j1_open + 1e-8,
        "J1_closed(K_b=1) = {j1_closed1} vs J1_open = {j1_open}"
    );

    // Hamiltonian scan: exact curvature in u1, no sign violations at
    // non-degenerate nodes.
    let law1 = synthesize_closed(profile1.clone(), &spec, &fine).unwrap();
    let scan = hamiltonian_scan(&profile1, &spec, &nominal_samples(&law1, 100)).unwrap();
    assert_eq!(scan.sign_violations, 0, "{scan:?}");
    assert!(
        scan.max_curvature_error <= 1e-12,
        "curvature error {}",
        scan.max_curvature_error
    );
    assert!(scan.degenerate < scan.samples);

    println!(
        "criterion 7: PASS - K_b=0 gap {det_gap:.3e} (det) / {sto_gap:.3e} vs {sto_budget:.3e} (sto), \
         improvement {:.3e}, scan {} samples / {} degenerate / 0 violations",
        j1_open - j1_closed1,
        scan.samples,
        scan.degenerate
    );
}

/// Criterion 8: identical config and seed produce byte-identical CSVs.
#[test]
fn criterion_8_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("game.toml");
    std::fs::write(
        &config_path,
        r#"
game.A  = [[0.2]]
game.B1 = [[1.0]]
game.B2 = [[2.0]]
game.C  = [[0.3]]
game.Q1 = [[2.0]]
game.Q2 = [[1.0]]
game.R1 = [[1.0]]
game.R2 = [[2.0]]
game.G1 = [[4.0]]
game.G2 = [[2.0]]
game.T  = 1.0
game.x0 = [1.0]
grid_N = 400
mc_paths = 200
seed = 9
closed_loop_bound = 1.0
"#,
    )
    .unwrap();
    let config = config_path.to_str().unwrap();

    let run_all = |out: &std::path::Path| {
        let out_s = out.to_str().unwrap();
        for cmd in ["solve-open", "solve-closed", "simulate", "oracle"] {
            let mut args = vec!["stacklq", cmd, "--config", config, "--out", out_s];
            let det_config = config_path.with_file_name("det.toml");
            if cmd == "oracle" {
                // The oracle needs C = 0; reuse the config with C zeroed.
                let text = std::fs::read_to_string(config)
                    .unwrap()
                    .replace("game.C  = [[0.3]]", "game.C  = [[0.0]]");
                std::fs::write(&det_config, text).unwrap();
                args[3] = det_config.to_str().unwrap();
                let code = stacklq::cli::run(args);
                assert_eq!(code, 0, "{cmd} failed");
                continue;
            }
            let code = stacklq::cli::run(args);
            assert_eq!(code, 0, "{cmd} failed");
        }
    };

    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    run_all(&out_a);
    run_all(&out_b);

    for name in [
        "riccati.csv",
        "costs.txt",
        "profile.csv",
        "closed_costs.txt",
        "trajectories.csv",
        "convergence.csv",
    ] {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    println!("criterion 8: PASS - six artifacts byte-identical across reruns");
}
