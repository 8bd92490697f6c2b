use std::path::Path;
use std::process::{Command, Output};

use jzig::config::RunConfig;

fn jzig(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jzig"))
        .args(args)
        .env("JZIG_THREADS", "1")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn config_prints_a_parseable_default() {
    let o = jzig(&["config"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(RunConfig::parse(&text).unwrap(), RunConfig::default());
}

#[test]
fn failures_exit_nonzero_with_one_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.conf");
    let o = jzig(&["fit", "--config", &missing.to_string_lossy()]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error[io]"), "{err}");

    let o = jzig(&["fit", "--set", "thin"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error[config]"), "{}", stderr(&o));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "id,x,y,agbd\np1,1,2,-3\n").unwrap();
    let o = jzig(&["fit", "--set", &format!("plots={}", bad.display())]);
    assert!(stderr(&o).starts_with("error[parse]"), "{}", stderr(&o));
}

#[test]
fn simulate_writes_a_runnable_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let o = jzig(&["simulate", "--out", &out.to_string_lossy(), "--plots", "30", "--nx", "12", "--ny", "12"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["plots.csv", "cells.csv", "mesh_x.txt", "mesh_yz.txt", "truth.csv", "truth_latent.bin", "run.conf"] {
        assert!(Path::new(&out.join(f)).exists(), "{f}");
    }
    let conf = RunConfig::read(&out.join("run.conf")).unwrap();
    assert_eq!(conf.sampler.seed, 1);
    assert_eq!(conf.prior_range_scale, 0.5);
}
