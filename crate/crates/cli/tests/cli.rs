use std::path::Path;
use std::process::{Command, Output};

use atomsense::config::{ExperimentConfig, VariantName, WaveformConfig};
use atomsense::io::{self, FilterRow, TRAJECTORY_HEADER};
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_kalman-atomsense");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn bundled_config_parses() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/lab.toml")).unwrap();
    let cfg = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.run.n_runs, 10);
    assert_eq!(cfg.model.variant, VariantName::RotatingFrame);
    assert!(matches!(cfg.waveform, WaveformConfig::Ou { .. }));
    assert_eq!(cfg.transient_samples().unwrap(), 875);
    let p = cfg.sensor.params().unwrap();
    assert!((p.g_d - 1.766_564_532_822_25e-15).abs() < 1e-26);
}

#[test]
fn sensor_accepts_alternate_key_names() {
    let cfg = ExperimentConfig::from_toml(
        "[sensor]\nomega_L_hz = 9000.0\nomega_p_hz = 9000.0\nr_psd = 1e-22\ndelta_s = 1e-5\nt2_s = 0.002\nq_y = 5.0\nq_z = 5.0\n",
    )
    .unwrap();
    let p = cfg.sensor.params().unwrap();
    assert!((p.omega_l - 2.0 * std::f64::consts::PI * 9000.0).abs() < 1e-9);
    assert_eq!(p.r, 1e-22);
    assert_eq!(p.delta, 1e-5);
    assert_eq!(p.t2, 0.002);
    assert_eq!((p.q_y, p.q_z), (5.0, 5.0));
}

#[test]
fn unknown_fields_and_bad_ranges_are_rejected() {
    assert!(ExperimentConfig::from_toml("[sensor]\nlarmor = 1.0\n").is_err());
    assert!(ExperimentConfig::from_toml("[bogus]\n").is_err());
    assert!(ExperimentConfig::from_toml("[thresholds]\ncoverage = [0.99, 0.9]\n").is_err());
    assert!(ExperimentConfig::from_toml("[run]\nn_runs = 0\n").is_err());
    assert!(ExperimentConfig::from_toml("[sensor]\ndelta = -1.0\n").is_err());
}

#[test]
fn filter_csv_round_trips() {
    let dir = TempDir::new().unwrap();
    let rows = vec![
        FilterRow {
            t: 0.0,
            x_hat: vec![1.0, 2.0],
            sigma: vec![0.5, 0.25],
            innovation: f64::NAN,
            s: f64::NAN,
            nis: f64::NAN,
            e_hat: 3.0,
            e_var: 0.1,
        },
        FilterRow {
            t: 5e-6,
            x_hat: vec![1.1, -2.2e-17],
            sigma: vec![0.4, 0.2],
            innovation: 0.3,
            s: 1.7,
            nis: 0.3 * 0.3 / 1.7,
            e_hat: -3.0,
            e_var: 0.2,
        },
    ];
    let path = dir.path().join("f.csv");
    io::write_filter_csv(&path, &rows).unwrap();
    let back = io::read_filter_csv(&path).unwrap();
    assert!(back[0].innovation.is_nan());
    assert_eq!(back[1], rows[1]);
    assert_eq!(
        io::filter_header(2).join(","),
        "t,x_hat_0,x_hat_1,sigma_0,sigma_1,innovation,S,nis,E_hat,E_var"
    );
}

#[test]
fn simulate_writes_expected_header_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "c.toml", "[run]\nn_steps = 300\nn_runs = 1\n");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&["simulate", "--config", &cfg, "--seed", "9", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ta = std::fs::read(a.join("trajectory.csv")).unwrap();
    assert_eq!(ta, std::fs::read(b.join("trajectory.csv")).unwrap());
    let text = String::from_utf8(ta).unwrap();
    assert_eq!(text.lines().next().unwrap(), TRAJECTORY_HEADER.join(","));
    assert_eq!(text.lines().count(), 301);
    let table = io::read_trajectory_csv(&a.join("trajectory.csv")).unwrap();
    assert_eq!(table.z.len(), 300);
}

#[test]
fn simulate_filter_validate_pipeline() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "c.toml", "[run]\nn_steps = 3000\nn_runs = 1\n");
    let out = dir.path().to_str().unwrap();
    assert!(run(&["simulate", "--config", &cfg, "--out", out]).status.success());
    let traj = dir.path().join("trajectory.csv");
    let o = run(&["filter", "--config", &cfg, "--out", out, "--input", traj.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let filt = dir.path().join("filter.csv");
    let rows = io::read_filter_csv(&filt).unwrap();
    assert_eq!(rows.len(), 3000);
    assert_eq!(rows[0].x_hat.len(), 4);
    let o = run(&[
        "validate", "--config", &cfg, "--out", out, "--json", "--input",
        filt.to_str().unwrap(), "--truth", traj.to_str().unwrap(),
    ]);
    assert!(matches!(o.status.code(), Some(0) | Some(1)));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["checks"].is_array());
    assert!(dir.path().join("validation.json").exists());
}

#[test]
fn steady_state_of_discrete_scalar_model() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        "[discrete]\nphi = [[1.0]]\nh = [[1.0]]\nq = [[1.0]]\nr = [[1.0]]\n",
    );
    let o = run(&["steady-state", "--config", &cfg, "--out", dir.path().to_str().unwrap(), "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let sigma = v["sigma_pred"][0][0].as_f64().unwrap();
    assert!((sigma - 1.618_034).abs() < 1e-6, "{sigma}");
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();

    let missing = dir.path().join("missing.toml");
    assert_eq!(run(&["simulate", "--config", missing.to_str().unwrap()]).status.code(), Some(2));
    let bad = write(dir.path(), "bad.toml", "[sensor]\nnope = 1\n");
    assert_eq!(run(&["steady-state", "--config", &bad]).status.code(), Some(2));

    let base = "[run]\nn_steps = 3000\nn_runs = 2\n";
    let ok = write(dir.path(), "ok.toml", base);
    let o = run(&["experiment-ou", "--config", &ok, "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));

    let strict = write(dir.path(), "strict.toml", &format!("{base}[thresholds]\nnis_mean = [5.0, 6.0]\n"));
    assert_eq!(run(&["experiment-ou", "--config", &strict, "--out", out]).status.code(), Some(1));
}
