//! End-to-end checks of the command-line surface: exit codes, diagnostic
//! lines, artifact schemas, and the verification suite on the bundled
//! configs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("configs")
        .join(name)
}

fn run_cli(args: &[&str]) -> i32 {
    let mut full = vec!["stacklq"];
    full.extend_from_slice(args);
    stacklq::cli::run(full)
}

#[test]
fn validate_accepts_the_bundled_configs() {
    for name in [
        "reference.toml",
        "reference_deterministic.toml",
        "follower_free.toml",
    ] {
        let path = config_path(name);
        let code = run_cli(&["validate", "--config", path.to_str().unwrap()]);
        assert_eq!(code, 0, "{name} failed validation");
    }
}

#[test]
fn validate_rejects_bad_weights_with_exit_2_and_reason() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    let text = fs::read_to_string(config_path("reference.toml"))
        .unwrap()
        .replace("game.R2 = [[2.0]]", "game.R2 = [[0.0]]");
    fs::write(&path, text).unwrap();

    // Spawn the real binary to check the diagnostic stream as well.
    let output = Command::new(env!("CARGO_BIN_EXE_stacklq"))
        .args(["validate", "--config", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.contains("NotPD R2"),
        "diagnostic line missing: {stderr}"
    );
}

#[test]
fn unknown_flags_exit_2() {
    assert_eq!(run_cli(&["validate", "--bogus"]), 2);
}

#[test]
fn missing_config_exits_2() {
    assert_eq!(run_cli(&["validate", "--config", "/nonexistent.toml"]), 2);
}

#[test]
fn artifacts_have_the_pinned_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("artifacts");
    let out_s = out.to_str().unwrap();
    let sto = config_path("reference.toml");
    let det = config_path("reference_deterministic.toml");

    for (cmd, config) in [
        ("solve-open", &sto),
        ("solve-closed", &sto),
        ("simulate", &sto),
        ("oracle", &det),
    ] {
        let code = run_cli(&[
            cmd,
            "--config",
            config.to_str().unwrap(),
            "--out",
            out_s,
            "--paths",
            "50",
            "--grid",
            "200",
        ]);
        assert_eq!(code, 0, "{cmd} failed");
    }

    let header = |name: &str| -> String {
        fs::read_to_string(out.join(name))
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string()
    };
    assert_eq!(header("riccati.csv"), "t,K_0_0,K_0_1,K_1_0,K_1_1");
    assert_eq!(
        header("trajectories.csv"),
        "path,t,x_1,y_1,p1_1,p2_1,u_1,v_1"
    );
    assert_eq!(header("profile.csv"), "t,xi,eta,zeta,bang");
    assert_eq!(header("convergence.csv"), "N,J1_disc,J1_cont,abs_err,order");

    // trajectories.csv: 50 paths x 201 nodes + header.
    let rows = fs::read_to_string(out.join("trajectories.csv"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(rows, 1 + 50 * 201);

    // report summarizes what is present and exits 0.
    let code = run_cli(&[
        "report",
        "--config",
        sto.to_str().unwrap(),
        "--out",
        out_s,
    ]);
    assert_eq!(code, 0);
}

#[test]
fn verify_passes_on_the_follower_free_config() {
    let path = config_path("follower_free.toml");
    // Reduced sizes keep the suite quick; the full-size run happens in
    // the acceptance suite.
    let code = run_cli(&[
        "verify",
        "--config",
        path.to_str().unwrap(),
        "--grid",
        "2000",
        "--paths",
        "1000",
    ]);
    assert_eq!(code, 0);
}

#[test]
fn verify_passes_on_the_stochastic_reference() {
    let path = config_path("reference.toml");
    let code = run_cli(&[
        "verify",
        "--config",
        path.to_str().unwrap(),
        "--paths",
        "4000",
    ]);
    assert_eq!(code, 0);
}

#[test]
fn verify_fails_with_exit_1_on_an_unreachable_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("strict.toml");
    let text = fs::read_to_string(config_path("reference_deterministic.toml"))
        .unwrap()
        .replace(
            "tolerances.riccati_residual = 5e-3",
            "tolerances.riccati_residual = 1e-18",
        );
    fs::write(&path, text).unwrap();
    let code = run_cli(&[
        "verify",
        "--config",
        path.to_str().unwrap(),
        "--grid",
        "500",
        "--paths",
        "200",
    ]);
    assert_eq!(code, 1);
}
