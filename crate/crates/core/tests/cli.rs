mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::scenario;
use tempfile::TempDir;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdde-morse")).args(args).output().unwrap()
}

fn write_cfg(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

const SHORT: &str = "
feedback.b = 1.6
space.M = 2
space.K = 1
delay.kind = constant
delay.r0 = 1
integrator.step = 0.01
integrator.horizon = 30
ensemble.count = 3
ensemble.seed = 5
analysis.h_infinity = true
analysis.plots = true
validation.waive = H3
output.trajectories = 2
";

#[test]
fn invalid_id4_fails_fast() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let o = bin(&["run", scenario("invalid_id4").to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("(ID4) violated"));
    assert!(!out.exists());
    let o = bin(&["validate", scenario("invalid_id4").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn validate_passes_bundled_scenarios() {
    for name in ["wright_supercritical", "wright_subcritical", "threshold_affine", "implicit_mill", "implicit_echo"] {
        let o = bin(&["validate", scenario(name).to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{name}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).ends_with("ok\n"));
    }
}

#[test]
fn config_errors_name_line_and_key() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_cfg(tmp.path(), "bad.cfg", &SHORT.replace("space.K = 1", "space.K = one"));
    let o = bin(&["run", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 4") && err.contains("space.K"), "{err}");

    let cfg = write_cfg(tmp.path(), "typo.cfg", &format!("{SHORT}\nensemble.cuont = 4\n"));
    let o = bin(&["run", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key"));

    let o = bin(&["run", "/does/not/exist.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(bin(&["explode"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_four() {
    let tmp = TempDir::new().unwrap();
    // a step above tau0 / 20 is rejected by the integrator
    let cfg = write_cfg(tmp.path(), "coarse.cfg", &SHORT.replace("integrator.step = 0.01", "integrator.step = 0.1"));
    let o = bin(&["run", &cfg, "--out-dir", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn run_writes_all_artifacts_deterministically() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_cfg(tmp.path(), "short.cfg", SHORT);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(bin(&["run", &cfg, "--out-dir", a.to_str().unwrap()]).status.code(), Some(0));
    assert_eq!(bin(&["--threads", "1", "run", &cfg, "--out-dir", b.to_str().unwrap()]).status.code(), Some(0));
    let mut names: Vec<String> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    assert_eq!(
        names,
        [
            "morse.json",
            "spectrum.json",
            "trajectory_000.csv",
            "trajectory_001.csv",
            "v_000.svg",
            "v_001.svg",
            "v_trace_000.csv",
            "v_trace_001.csv",
            "x_000.svg",
            "x_001.svg"
        ]
    );
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n} differs");
    }
    let traj = fs::read_to_string(a.join("trajectory_000.csv")).unwrap();
    assert_eq!(traj.lines().next(), Some("t,x,dx,r,eta"));
    let last = traj.lines().last().unwrap();
    let cols: Vec<&str> = last.split(',').collect();
    assert_eq!(cols.len(), 5);
    assert_eq!(cols[3].parse::<f64>().unwrap(), 1.0);
    let trace = fs::read_to_string(a.join("v_trace_000.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("t,eta_t,sc,V,regular_flag"));

    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("morse.json")).unwrap()).unwrap();
    assert_eq!(json["spectrum"]["n_star"], 2);
    assert_eq!(json["runs"].as_array().unwrap().len(), 3);
    assert_eq!(json["ordering_violations"].as_array().unwrap().len(), 0);
    assert_eq!(json["h_infinity"]["nontrivial_with_findings"], 0);
    let spectrum: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("spectrum.json")).unwrap()).unwrap();
    assert_eq!(spectrum["m_star"], 2);
}

#[test]
fn seed_override_changes_ensemble() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_cfg(tmp.path(), "short.cfg", SHORT);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(bin(&["run", &cfg, "--out-dir", a.to_str().unwrap()]).status.code(), Some(0));
    assert_eq!(bin(&["run", &cfg, "--seed-override", "6", "--out-dir", b.to_str().unwrap()]).status.code(), Some(0));
    assert_ne!(fs::read(a.join("trajectory_000.csv")).unwrap(), fs::read(b.join("trajectory_000.csv")).unwrap());
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(b.join("morse.json")).unwrap()).unwrap();
    assert_eq!(json["seed"], 6);
}

#[test]
fn integrator_flags_override_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_cfg(tmp.path(), "short.cfg", SHORT);
    let out = tmp.path().join("o");
    let o = bin(&["run", &cfg, "--horizon", "25", "--step", "0.005", "--burn-in", "3", "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let traj = fs::read_to_string(out.join("trajectory_000.csv")).unwrap();
    let last_t: f64 = traj.lines().last().unwrap().split(',').next().unwrap().parse().unwrap();
    assert_eq!(last_t, 25.0);
    // header, nine history knots, 5000 steps
    assert_eq!(traj.lines().count(), 1 + 9 + 5000);
}

#[test]
fn hayes_sweep_has_one_transition() {
    let tmp = TempDir::new().unwrap();
    let o = bin(&["sweep", scenario("hayes_sweep").to_str().unwrap(), "--out-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let csv = fs::read_to_string(tmp.path().join("stability.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("A,B,tau,m_star,hyperbolic,n_star"));
    let rows: Vec<(f64, u32)> = lines
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            (c[1].parse().unwrap(), c[3].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 291);
    let jumps: Vec<usize> = (1..rows.len()).filter(|&i| rows[i].1 != rows[i - 1].1).collect();
    assert_eq!(jumps.len(), 1);
    let (b_hi, b_lo) = (rows[jumps[0] - 1], rows[jumps[0]]);
    assert_eq!((b_hi.1, b_lo.1), (2, 0));
    assert!(b_hi.0 < -std::f64::consts::FRAC_PI_2 && -std::f64::consts::FRAC_PI_2 < b_lo.0);
    assert!(tmp.path().join("stability.svg").exists());
}

#[test]
fn sweep_config_errors() {
    let tmp = TempDir::new().unwrap();
    let empty = write_cfg(tmp.path(), "empty.cfg", "sweep.A = 0\nsweep.B = -0.1:-3:0.01\nsweep.tau = 1\n");
    let o = bin(&["sweep", &empty, "--out-dir", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("empty grid"));
    assert!(!tmp.path().join("o").exists());
    let huge = write_cfg(tmp.path(), "huge.cfg", "sweep.A = -1:1:0.001\nsweep.B = -3:-0.1:0.01\nsweep.tau = 1\n");
    assert_eq!(bin(&["sweep", &huge]).status.code(), Some(2));
}

#[test]
fn stable_side_sweep_rows_are_even() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_cfg(tmp.path(), "stable.cfg", "sweep.A = -2:0.5:0.25\nsweep.B = -2.5:-0.5:0.25\nsweep.tau = 0.5, 1, 2\nsweep.roots = true\n");
    assert_eq!(bin(&["sweep", &cfg, "--out-dir", tmp.path().to_str().unwrap()]).status.code(), Some(0));
    let csv = fs::read_to_string(tmp.path().join("stability.csv")).unwrap();
    let mut checked = 0;
    for l in csv.lines().skip(1) {
        let c: Vec<&str> = l.split(',').collect();
        let (a, b): (f64, f64) = (c[0].parse().unwrap(), c[1].parse().unwrap());
        if a + b < 0.0 && c[4] == "true" {
            assert_eq!(c[3].parse::<u32>().unwrap() % 2, 0, "{l}");
            checked += 1;
        }
    }
    assert!(checked > 100);
    assert!(fs::read_to_string(tmp.path().join("roots.csv")).unwrap().starts_with("A,B,tau,re,im\n"));
}
