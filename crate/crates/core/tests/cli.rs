//! End-to-end checks of the command-line pipeline: simulate, pretrain,
//! sweep, and plot against a small, fast experiment configuration.

use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_ivff");

/// Small geometry and network so the whole pipeline runs in seconds.
const TINY_CONFIG: &str = r#"
[reference]
stroke = 0.05
lead_in = 0.05
total_duration = 1.2

[network]
layer_sizes = [3, 3, 1]

[pretrain]
max_iters = 2000
cost_tol = 1e-2
restarts = 2
init_seed = 5

[sweep]
sigma_levels = [0.0, 0.002]
realizations = 2
max_iters = 40
cost_tol = 1e-2
"#;

fn run(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove("IVFF_OUT");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn ivff")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn pipeline_writes_every_artifact_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let out = dir.path().join("out");
    let cfg = cfg.to_str().unwrap();
    let out_s = out.to_str().unwrap();

    assert_success(&run(&["--config", cfg, "--out", out_s, "simulate", "--sigma", "0"], &[]));
    let dataset = read(&out.join("dataset.csv"));
    let mut lines = dataset.lines();
    assert_eq!(lines.next().unwrap(), "time_s,r,u,y,d,f");
    assert_eq!(dataset.lines().count(), 1201, "header plus one row per sample");
    for line in lines {
        let d: f64 = line.split(',').nth(4).unwrap().parse().unwrap();
        assert_eq!(d, 0.0, "noiseless run must record a zero disturbance");
    }
    assert!(read(&out.join("dataset.meta.toml")).contains("sigma_nu = 0"));
    assert!(read(&out.join("config.resolved.toml")).contains("stroke = 0.05"));

    assert_success(&run(&["--config", cfg, "--out", out_s, "pretrain"], &[]));
    let report = read(&out.join("pretrain.report.toml"));
    assert!(report.contains("converged = true"), "{report}");
    ivff::nn::MlpParams::load(out.join("phi0.txt")).expect("saved parameters load back");

    assert_success(&run(&["--config", cfg, "--out", out_s, "sweep"], &[]));
    let rows = ivff::analysis::read_sweep_csv(&out.join("sweep.csv")).unwrap();
    assert_eq!(rows.len(), 2 * 2 * 2, "levels x realizations x criteria");
    assert!(rows.iter().all(|r| r.monitored_coeff.is_finite()));
    let param_files = std::fs::read_dir(out.join("params")).unwrap().count();
    assert_eq!(param_files, rows.len());

    // same seed, same bytes: rerunning adds nothing and changes nothing
    let first = read(&out.join("sweep.csv"));
    assert_success(&run(&["--config", cfg, "--out", out_s, "sweep"], &[]));
    assert_eq!(read(&out.join("sweep.csv")), first);

    for kind in ["fig4", "fig5", "fig6"] {
        assert_success(&run(
            &["--config", cfg, "--out", out_s, "plot", "--kind", kind, "--sigma", "0.002"],
            &[],
        ));
        let svg = read(&out.join(format!("{kind}.svg")));
        assert!(svg.starts_with("<svg "), "{kind} is not an SVG");
        assert!(svg.ends_with("</svg>\n"));
    }
}

#[test]
fn output_root_comes_from_flag_then_env_then_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let cfg = cfg.to_str().unwrap();
    let env_dir = dir.path().join("from-env");
    let flag_dir = dir.path().join("from-flag");

    assert_success(&run(
        &["--config", cfg, "simulate"],
        &[("IVFF_OUT", env_dir.to_str().unwrap())],
    ));
    assert!(env_dir.join("dataset.csv").exists());

    assert_success(&run(
        &["--config", cfg, "--out", flag_dir.to_str().unwrap(), "simulate"],
        &[("IVFF_OUT", env_dir.join("ignored").to_str().unwrap())],
    ));
    assert!(flag_dir.join("dataset.csv").exists());
    assert!(!env_dir.join("ignored").exists(), "--out must win over the environment");
}

#[test]
fn seeded_noise_is_reproducible_and_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("out");
    let args =
        ["--config", cfg, "--out", out.to_str().unwrap(), "simulate", "--sigma", "0.01", "--seed", "7"];

    assert_success(&run(&args, &[]));
    let first = read(&out.join("dataset.csv"));
    let nonzero = first.lines().skip(1).any(|l| l.split(',').nth(4).unwrap() != "0");
    assert!(nonzero, "noisy run must record a nonzero disturbance");
    assert!(read(&out.join("dataset.meta.toml")).contains("seed = 7"));

    assert_success(&run(&args, &[]));
    assert_eq!(read(&out.join("dataset.csv")), first);
}

#[test]
fn validation_and_missing_input_failures_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[plant]\nmass = -5.0\n").unwrap();
    let out = run(&["--config", bad.to_str().unwrap(), "simulate"], &[]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("plant"), "error should name the field: {stderr}");

    let empty = dir.path().join("empty-out");
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let out = run(&["--config", cfg.to_str().unwrap(), "--out", empty.to_str().unwrap(), "sweep"], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pretrain first"));

    let out = run(&["--no-such-flag"], &[]);
    assert_eq!(out.status.code(), Some(1));

    let out = run(&["--help"], &[]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("simulate"));
}
