use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"case = "advection"
methods = ["ldo", "s-ldo"]

[data]
dt_seconds = 0.04
snapshots = 40
rhs_source = "finite-difference"

[grid]
points = 41
length = 10.0

[stencils]
sizes = [[3, 5]]

[ridge]
beta1 = [1e-3]
scaling = "stencil"
"#;

fn stencilreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stencilreg")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("exp.cfg");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn even_stencil_exits_with_config_status() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("[[3, 5]]", "[[3, 4]]"));
    let out = stencilreg(&["run", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stencils.sizes") && err.contains("line 14"), "{err}");
}

#[test]
fn unknown_repro_name_exits_with_config_status() {
    let out = stencilreg(&["repro", "heat"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("advection2d"));
}

#[test]
fn missing_config_is_io_failure() {
    let out = stencilreg(&["run", "--config", "/nonexistent/exp.cfg"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let mut summaries = Vec::new();
    for (name, threads) in [("a", "1"), ("b", "1")] {
        let out_dir = dir.path().join(name);
        let out = stencilreg(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap(), "--threads", threads]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        summaries.push((
            fs::read(out_dir.join("summary.csv")).unwrap(),
            fs::read(out_dir.join("manifest.csv")).unwrap(),
        ));
    }
    assert_eq!(summaries[0], summaries[1]);
    let text = String::from_utf8(summaries[0].0.clone()).unwrap();
    assert_eq!(text.lines().count(), 1 + 4);
}

#[test]
fn stages_run_separately_match_a_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let full = dir.path().join("full");
    let staged = dir.path().join("staged");
    assert!(stencilreg(&["run", "-c", &cfg, "-o", full.to_str().unwrap()]).status.success());
    for stage in ["generate", "learn", "analyze", "forecast", "report"] {
        let out = stencilreg(&[stage, "-c", &cfg, "-o", staged.to_str().unwrap()]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(
        fs::read(full.join("manifest.csv")).unwrap(),
        fs::read(staged.join("manifest.csv")).unwrap()
    );
}

#[test]
fn seed_flag_changes_burgers_data() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"case = "burgers"
methods = ["s-ldo"]

[data]
snapshots = 20

[grid]
points = 33

[stencils]
sizes = [[3], [3]]
"#;
    let cfg = write_config(dir.path(), text);
    let mut states = Vec::new();
    for seed in ["1", "2"] {
        let out_dir = dir.path().join(seed);
        let out = stencilreg(&["generate", "-c", &cfg, "-o", out_dir.to_str().unwrap(), "--seed", seed]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        states.push(fs::read(out_dir.join("snapshots/states.csv")).unwrap());
    }
    assert_ne!(states[0], states[1]);
}
