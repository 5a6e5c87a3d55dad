use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stochknap"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn exec(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn stderr_json(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("{e}: {text}"))
}

#[test]
fn empty_instance_has_zero_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "empty.toml",
        "kind = \"dp-check\"\n[instance]\nno_arrival = 1\ncapacity = 4\nhorizon = 5\n",
    );
    let out = dir.path().join("run");
    let o = exec(&["solve", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("value_table.csv")).unwrap();
    let mut lines = table.lines();
    lines.next();
    let mut rows = 0;
    for line in lines {
        let value: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(value, 0.0, "{line}");
        rows += 1;
    }
    assert_eq!(rows, 6 * 5);
}

#[test]
fn bernoulli_fluid_ladder_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fluid");
    let cfg = configs().join("fluid_bernoulli.toml");
    let o = exec(&["fluid", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ladder = std::fs::read_to_string(out.join("ladder.csv")).unwrap();
    let errs: Vec<f64> = ladder.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(errs.len(), 4);
    assert!(errs.windows(2).all(|e| e[1] <= e[0]), "{errs:?}");
    for f in ["field.bin", "metrics.csv", "manifest.json", "runtime.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

#[test]
fn bad_probabilities_exit_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.toml",
        "kind = \"dp-check\"\n[instance]\nno_arrival = \"0\"\ncapacity = 3\nhorizon = 3\n\
         atoms = [{ price = 1, quantity = 1, prob = \"0.9\" }]\n",
    );
    let out = dir.path().join("run");
    let o = exec(&["solve", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr_json(&o);
    assert_eq!(err["error"], "validation");
    assert_eq!(err["exit_code"], 2);
    assert!(!out.exists());
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let out = p.join("run");
    let out = out.to_str().unwrap();

    let o = exec(&["solve", "--config", p.join("missing.toml").to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(5));
    assert_eq!(stderr_json(&o)["error"], "io");

    let huge = write(p, "huge.toml", "kind = \"dp-check\"\n[instance]\nno_arrival = 1\ncapacity = 100000000\nhorizon = 100000000\n");
    let o = exec(&["solve", "--config", huge.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(3));

    let cfl = write(
        p,
        "cfl.toml",
        "kind = \"fluid-convergence\"\n[instance]\nno_arrival = \"1/2\"\natoms = [{ price = 1, quantity = 1, prob = \"1/2\" }]\n\
         [grid]\nnx = 10\nny = 200\ny_max = 1\n",
    );
    let o = exec(&["fluid", "--config", cfl.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr_json(&o)["message"].as_str().unwrap().contains("nx >="));

    let o = exec(&["fluid", "--config", configs().join("dp_oracle.toml").to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(2));

    let o = exec(&["solve", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!Path::new(out).exists());
}

#[test]
fn cli_flags_override_the_document() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v");
    let cfg = configs().join("variance.toml");
    let o = exec(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "99",
        "--scale-ladder",
        "10,20",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 99);
    assert_eq!(manifest["config"]["scale_ladder"], serde_json::json!([10, 20]));
    let rows = std::fs::read_to_string(out.join("variance.csv")).unwrap();
    assert_eq!(rows.lines().count(), 3);
}

#[test]
fn report_is_idempotent_and_checks_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let suite = dir.path();
    for (verb, name) in [("solve", "dp_oracle"), ("multi", "multi_embedding")] {
        let cfg = configs().join(format!("{name}.toml"));
        let o = exec(&[verb, "--config", cfg.to_str().unwrap(), "--out", suite.join(name).to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let o = exec(&["report", suite.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read(suite.join("summary.csv")).unwrap();
    let txt = std::fs::read(suite.join("summary.txt")).unwrap();
    assert!(String::from_utf8_lossy(&csv).starts_with("run,kind,criterion,metric,value,threshold,pass\n"));
    assert!(exec(&["report", suite.to_str().unwrap()]).status.success());
    assert_eq!(std::fs::read(suite.join("summary.csv")).unwrap(), csv);
    assert_eq!(std::fs::read(suite.join("summary.txt")).unwrap(), txt);

    let single = exec(&["report", suite.join("dp_oracle").to_str().unwrap()]);
    assert!(single.status.success());

    std::fs::write(suite.join("dp_oracle/manifest.json"), "{ not json").unwrap();
    let o = exec(&["report", suite.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    std::fs::remove_file(suite.join("dp_oracle/manifest.json")).unwrap();
    let o = exec(&["report", suite.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_json(&o)["message"].as_str().unwrap().contains("manifest"));
}
