use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;
use sipml::simulation::generate_dataset;
use sipml::{Dataset, SimConfig};
use sipml_cli::FitArtifact;
use tempfile::TempDir;

fn sipml(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_sipml"))
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

fn write_dataset(dir: &Path, name: &str, data: &Dataset) -> PathBuf {
    let mut s = String::from("y");
    for k in 1..=data.d() {
        s.push_str(&format!(",z{k}"));
    }
    s.push('\n');
    for (z, y) in data.rows().zip(data.y()) {
        s.push_str(&y.to_string());
        for v in z {
            s.push_str(&format!(",{v:?}"));
        }
        s.push('\n');
    }
    let path = dir.join(name);
    std::fs::write(&path, s).unwrap();
    path
}

fn table1_file(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let data = generate_dataset(&SimConfig::table1(n, 1, seed), 0).unwrap();
    write_dataset(dir, &format!("t1_{n}_{seed}.csv"), &data)
}

fn fit_to(dir: &Path, data: &Path, extra: &[&str]) -> (i32, PathBuf) {
    let out = dir.join("fit.json");
    let mut args = vec![
        "fit",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "7",
    ];
    args.extend_from_slice(extra);
    let (code, _, err) = sipml(&args);
    assert!(code != 1, "{err}");
    (code, out)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn fit_table1_fixture() {
    let dir = TempDir::new().unwrap();
    let data = table1_file(dir.path(), 300, 7);
    let (code, out) = fit_to(dir.path(), &data, &[]);
    assert_eq!(code, 0);
    let v = json(&out);
    let th2 = v["summary"]["theta"][1].as_f64().unwrap();
    assert!((2.0..=4.2).contains(&th2), "{th2}");
    assert_eq!(v["summary"]["theta"][0].as_f64(), Some(1.0));
    assert_eq!(v["version"], sipml_cli::VERSION);
    assert_eq!(v["seed"], 7);
    assert_eq!(v["run_config"]["subcommand"], "fit");
    assert!(v["summary"]["std_errors"].as_array().unwrap().len() == 2);
    assert!(v["summary"]["bandwidth"]["h_hat_ratio"].is_number());
    assert!(!v["psi_cv_profile"].as_array().unwrap().is_empty());
}

#[test]
fn fit_with_collapsed_window() {
    let dir = TempDir::new().unwrap();
    let data = table1_file(dir.path(), 200, 3);
    let (_, out) = fit_to(dir.path(), &data, &["--h-lo", "0.7", "--h-hi", "0.7"]);
    assert_eq!(json(&out)["summary"]["h_hat"].as_f64(), Some(0.7));
    let (_, out) = fit_to(
        dir.path(),
        &data,
        &["--h-lo", "0.5", "--h-hi", "0.5", "--h-grid", "1"],
    );
    assert_eq!(json(&out)["summary"]["h_hat"].as_f64(), Some(0.5));
}

#[test]
fn input_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(sipml(&["fit", empty.to_str().unwrap()]).0, 1);

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "y,a,b\n1,2,3\n2,oops,1\n").unwrap();
    let (code, _, err) = sipml(&["fit", bad.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("line 3"), "{err}");

    let data = table1_file(dir.path(), 50, 1);
    assert_eq!(
        sipml(&["fit", data.to_str().unwrap(), "--family", "binomial"]).0,
        1
    );
    assert_eq!(
        sipml(&["fit", data.to_str().unwrap(), "--h-lo", "2", "--h-hi", "1"]).0,
        1
    );
    assert_eq!(sipml(&["fit", "/nonexistent/file.csv"]).0, 1);
}

#[test]
fn flat_surface_exits_two_with_artifact() {
    let dir = TempDir::new().unwrap();
    let gen = generate_dataset(&SimConfig::table1(200, 1, 5), 0).unwrap();
    let mut y = gen.y().to_vec();
    y.sort_by(f64::total_cmp);
    let y: Vec<f64> = (0..y.len()).map(|i| y[(i * 83) % y.len()]).collect();
    let noise = gen.with_responses(y).unwrap();
    let data = write_dataset(dir.path(), "noise.csv", &noise);
    let (code, out) = fit_to(dir.path(), &data, &["--h-grid", "5"]);
    assert_eq!(code, 2);
    let v = json(&out);
    assert_eq!(v["status"], "warning");
    assert_eq!(v["summary"]["converged"], false);
}

#[test]
fn simulate_table1_summary() {
    let (code, out, _) = sipml(&[
        "simulate", "--dgp", "table1", "--n", "200", "--r", "100", "--seed", "1",
    ]);
    assert_eq!(code, 0);
    let v: Value = serde_json::from_str(&out).unwrap();
    let rows = v["summary"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 8);
    for r in rows {
        assert!(r["mean"].is_number() && r["std"].is_number());
    }
    assert_eq!(v["run_config"]["replications"], 100);
}

#[test]
fn simulate_smoke_and_errors() {
    let (code, out, _) = sipml(&[
        "simulate",
        "--n",
        "120",
        "--r",
        "1",
        "--format",
        "csv",
        "--estimators",
        "POI-SP,GLS-P",
    ]);
    assert_eq!(code, 0);
    let lines: Vec<&str> = out.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(lines[0], "estimator,coefficient,mean,std,mse,n,R,failures");
    assert_eq!(lines.len(), 5);
    // std is absent with one replication
    assert!(lines[1..].iter().all(|l| l.split(',').nth(3) == Some("")));
    assert!(out.starts_with("# sipml "));
    assert_eq!(sipml(&["simulate", "--dgp", "table9"]).0, 1);
    assert_eq!(sipml(&["simulate", "--estimators", "OLS"]).0, 1);
    assert_eq!(sipml(&["simulate", "--r", "0"]).0, 1);
}

#[test]
fn gof_on_fit() {
    let dir = TempDir::new().unwrap();
    let data = table1_file(dir.path(), 300, 2);
    let (_, fit) = fit_to(dir.path(), &data, &["--h-grid", "5"]);
    let (code, out, err) = sipml(&["gof", "--fit", fit.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let v: Value = serde_json::from_str(&out).unwrap();
    let rep = &v["report"];
    assert!(rep["xi"].as_f64().unwrap().is_finite());
    let total: f64 = rep["cells"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["predicted"].as_f64().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-10);
    assert_eq!(v["seed"], 7);

    // no response exceeds 500, so the empty tail merges into the cell before it
    let (_, out, _) = sipml(&["gof", "--fit", fit.to_str().unwrap(), "--cells", "0,1,500"]);
    let v: Value = serde_json::from_str(&out).unwrap();
    let labels: Vec<&str> = v["report"]["cells"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["label"].as_str().unwrap())
        .collect();
    assert_eq!(labels, vec!["0", "1", ">1"]);

    let (_, csv, _) = sipml(&["gof", "--fit", fit.to_str().unwrap(), "--format", "csv"]);
    let body: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert!(body[0].contains("pearson") && body[0].contains("cells_1_label"));

    assert_eq!(
        sipml(&[
            "gof",
            "--fit",
            dir.path().join("missing.json").to_str().unwrap()
        ])
        .0,
        1
    );
    assert_eq!(sipml(&["gof", "--fit", data.to_str().unwrap()]).0, 1);
}

#[test]
fn predict_round_trip_and_support() {
    let dir = TempDir::new().unwrap();
    let data = table1_file(dir.path(), 300, 4);
    let (_, fit) = fit_to(dir.path(), &data, &["--h-grid", "5"]);
    let artifact = FitArtifact::load(&fit).unwrap();
    let train = artifact.dataset().unwrap();
    let theta = &artifact.fit.theta_hat;
    let t = train.index_values(theta);
    let sorted = sipml::kernel::SortedIndex::new(&t, train.y());

    let (code, out, err) = sipml(&[
        "predict",
        "--fit",
        fit.to_str().unwrap(),
        data.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let v: Value = serde_json::from_str(&out).unwrap();
    let preds = v["predictions"].as_array().unwrap();
    assert_eq!(preds.len(), 300);
    for (i, p) in preds.iter().enumerate() {
        let direct = sorted.smooth(t[i], artifact.fit.h_hat, None).r_hat;
        if let (Some(a), Some(b)) = (p["r_hat"].as_f64(), direct) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
    let (_, again, _) = sipml(&[
        "predict",
        "--fit",
        fit.to_str().unwrap(),
        data.to_str().unwrap(),
    ]);
    assert_eq!(out, again);

    let far = dir.path().join("far.csv");
    std::fs::write(&far, "z1,z2,z3\n100,0,0\n0.1,0.2,-0.1\n").unwrap();
    let (_, out, _) = sipml(&[
        "predict",
        "--fit",
        fit.to_str().unwrap(),
        far.to_str().unwrap(),
        "--format",
        "csv",
    ]);
    let body: Vec<&str> = out.lines().filter(|l| !l.starts_with('#')).collect();
    assert!(body[0].starts_with("row,t,r_hat"));
    assert!(body[1].ends_with(",true"));
    assert!(body[2].ends_with(",false"));

    let wrong = dir.path().join("wrong.csv");
    std::fs::write(&wrong, "a,b\n1,2\n").unwrap();
    assert_eq!(
        sipml(&[
            "predict",
            "--fit",
            fit.to_str().unwrap(),
            wrong.to_str().unwrap()
        ])
        .0,
        1
    );
}

#[test]
fn predicted_link_follows_the_design() {
    let dir = TempDir::new().unwrap();
    let data = table1_file(dir.path(), 2000, 11);
    let (_, fit) = fit_to(dir.path(), &data, &["--h-grid", "9"]);
    let grid = dir.path().join("grid.csv");
    let mut s = String::from("t\n");
    for k in 0..100 {
        s.push_str(&format!("{}\n", -6.0 + 12.0 * k as f64 / 99.0));
    }
    std::fs::write(&grid, s).unwrap();
    let (code, out, err) = sipml(&[
        "predict",
        "--fit",
        fit.to_str().unwrap(),
        grid.to_str().unwrap(),
        "--index",
    ]);
    assert_eq!(code, 0, "{err}");
    let v: Value = serde_json::from_str(&out).unwrap();
    let pts: Vec<(f64, f64)> = v["predictions"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|p| !p["outside_support"].as_bool().unwrap())
        .map(|p| (p["t"].as_f64().unwrap(), p["r_hat"].as_f64().unwrap()))
        .collect();
    assert!(pts.len() > 30);
    // r(t) = t^2 + 0.5: rising in |t| once clear of the bottom of the parabola
    let right: Vec<f64> = pts.iter().filter(|p| p.0 > 1.5).map(|p| p.1).collect();
    let left: Vec<f64> = pts.iter().filter(|p| p.0 < -1.5).map(|p| p.1).collect();
    assert!(right.windows(2).all(|w| w[1] >= w[0]), "{right:?}");
    assert!(left.windows(2).all(|w| w[1] <= w[0]), "{left:?}");
}

#[test]
fn standardized_fit_reports_both_scales() {
    let dir = TempDir::new().unwrap();
    let data = table1_file(dir.path(), 250, 6);
    let (_, fit) = fit_to(dir.path(), &data, &["--standardize", "--h-grid", "5"]);
    let v = json(&fit);
    let s = &v["standardization"]["sds"];
    let th: Vec<f64> = v["summary"]["theta"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    let orig: Vec<f64> = v["summary"]["theta_original_scale"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    let sd: Vec<f64> = s
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    assert_eq!(orig[0], 1.0);
    for k in 1..3 {
        assert!((orig[k] - th[k] * sd[0] / sd[k]).abs() < 1e-12);
    }
    assert_eq!(v["run_config"]["standardize"], true);
    // standardized fits predict from raw covariates
    let (code, _, err) = sipml(&[
        "predict",
        "--fit",
        fit.to_str().unwrap(),
        data.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
}
