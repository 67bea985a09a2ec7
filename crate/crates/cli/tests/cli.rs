use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tfdw_core::{snapshot, Field, GridSpec};

fn tfdw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tfdw")).args(args).env("TFDW_THREADS", "2").output().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const SMALL: &str = r#"{
  "experiment": "minimize",
  "grid": { "points": 24, "box_size": 16.0 },
  "potential": { "sites": [ { "charge": 1.0, "position": [0.0, 0.0, 0.0] } ] },
  "solver": { "tol_residual": 1e-5 },
  "mass": 0.5
}"#;

#[test]
fn minimize_then_check_identities() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "run.json", SMALL);
    let out = d.path().join("min");
    let o = tfdw(&["minimize", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&out.join("result.json"));
    assert_eq!(r["experiment"], "minimize");
    assert!(r["record"]["mu"].as_f64().unwrap() < 0.0);
    assert!(r["record"]["breakdown"]["total"].is_number());
    assert_eq!(r["record"]["converged"], true);
    let m = json(&out.join("manifest.json"));
    assert!(m["provenance"]["regularization_width"].as_f64().unwrap() > 0.0);
    assert_eq!(m["provenance"]["kernel_padding"], serde_json::json!([48, 48, 48]));
    assert!(m["wall_time_seconds"].is_number());
    for f in m["files"].as_array().unwrap() {
        let name = f.as_str().unwrap();
        assert!(out.join(name).exists());
        assert!(name.ends_with(".json") || name.ends_with(".csv") || name.ends_with(".tfd1"), "{name}");
    }

    let field = out.join("state.tfd1");
    let chk = d.path().join("chk");
    let o = tfdw(&[
        "check-identities",
        "--config",
        &cfg,
        "--field",
        field.to_str().unwrap(),
        "--out",
        chk.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let c = json(&chk.join("result.json"));
    assert_eq!(c["experiment"], "check-identities");
    assert!((c["mu"].as_f64().unwrap() - r["record"]["mu"].as_f64().unwrap()).abs() < 1e-9);
    assert!(c["virial_residual"].is_number());
    assert!(c["mu_identity_residual"].is_number());
    // stationarity identity holds at a converged state
    assert!(c["stationarity_identity_residual"].as_f64().unwrap().abs() < 1e-3);
}

#[test]
fn same_seed_same_bytes() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "run.json", SMALL);
    let run = |name: &str| {
        let out = d.path().join(name);
        let o = tfdw(&[
            "minimize",
            "--config",
            &cfg,
            "--seed",
            "7",
            "--override",
            "solver.init={\"kind\":\"random-smooth\"}",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (fs::read(out.join("result.json")).unwrap(), fs::read(out.join("state.tfd1")).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn nu_out_of_range_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "run.json", SMALL);
    let o = tfdw(&[
        "minimize",
        "--config",
        &cfg,
        "--override",
        "potential.perturbation_strength=0.5",
        "--override",
        "potential.perturbation_exponent=1.5",
        "--out",
        d.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("(0,1)"));
    assert!(!d.path().join("x").exists());
}

#[test]
fn unknown_key_exits_2_naming_it() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "run.json", r#"{"experiment":"minimize","solver":{"tolerance":1e-6}}"#);
    let o = tfdw(&["minimize", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tolerance"));
    let o = tfdw(&["minimize", "--override", "grid.spacing=0.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("spacing"));
}

#[test]
fn zero_field_is_a_numerical_failure() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("zero.tfd1");
    snapshot::save(&p, &Field::zeros(GridSpec::centered(16, 10.0).unwrap())).unwrap();
    let o = tfdw(&["check-identities", "--field", p.to_str().unwrap(), "--out", d.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn config_min_closed_form() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(
        d.path(),
        "c.json",
        r#"{"experiment":"config-min","config_min":{"configuration":
            {"variant":"f","masses":[1.5,1.0],"total_charge":0.5,"nu":0.5,"points":[[1.0,0.0,0.0]]}}}"#,
    );
    let out = d.path().join("c");
    let o = tfdw(&["config-min", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&out.join("result.json"));
    assert!((r["value"].as_f64().unwrap() + 0.25).abs() < 1e-6);
    let p = r["points"][0].as_array().unwrap().iter().map(|x| x.as_f64().unwrap().powi(2)).sum::<f64>().sqrt();
    assert!((p - 4.0).abs() < 1e-6);
    assert_eq!(r["status"], "converged");
}

#[test]
fn scans_and_plot_bundle() {
    let d = tempfile::tempdir().unwrap();
    let root = d.path().join("runs");
    let grid = [
        "--override",
        "grid.points=20",
        "--override",
        "grid.box_size=14",
        "--override",
        "solver.tol_residual=1e-5",
        "--override",
        "model={\"c1\":64,\"c2\":32}",
    ];

    let mut args = vec!["mass-scan", "--override", "masses=[0.2,0.4,0.6]"];
    args.extend(grid);
    let out = root.join("scan");
    args.extend(["--out", out.to_str().unwrap()]);
    let o = tfdw(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&out.join("result.json"));
    assert_eq!(r["strictly_decreasing"], true);
    assert_eq!(r["binding_violations"].as_array().unwrap().len(), 0);

    let mut args = vec![
        "perturbation-scan",
        "--override",
        "potential.sites=[{\"charge\":1.0,\"position\":[0,0,0]}]",
        "--override",
        "schedule={\"mass\":0.4,\"z_values\":[0.6,0.3]}",
    ];
    args.extend(grid);
    let out = root.join("pert");
    args.extend(["--out", out.to_str().unwrap()]);
    let o = tfdw(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["runs"].as_array().unwrap().len(), 2);

    let plots = d.path().join("plots");
    let o = tfdw(&["emit-plots", root.to_str().unwrap(), "--out", plots.to_str().unwrap()]);
    assert!(o.status.success());
    let e = fs::read_to_string(plots.join("energy_vs_mass.csv")).unwrap();
    assert_eq!(e.lines().count(), 1 + 3);
    let c = fs::read_to_string(plots.join("centers_vs_Z.csv")).unwrap();
    assert!(c.lines().next().unwrap().contains("predicted_exponent"));
    assert!(plots.join("mu_vs_mass.csv").exists());

    let empty = d.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let o = tfdw(&["emit-plots", empty.to_str().unwrap()]);
    assert!(o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("0 files, 1 warnings"), "{err}");
}
