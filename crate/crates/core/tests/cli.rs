mod common;

use common::{block_dataset, tmo, write_fixture};
use serde_json::Value;
use tmo::dataset_io::{load_dataset, CleaningPolicy, Schema};
use tmo::pipeline::{run_pipeline, PipelineOptions};
use tmo::simulation::CalibratedSigma;
use tmo::variance::{cluster_variance, hc_variance, HcCorrection, Method};

fn json(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

fn method<'a>(report: &'a Value, name: &str) -> &'a Value {
    report["methods"].as_array().unwrap().iter().find(|m| m["method"] == name).unwrap()
}

#[test]
fn run_matches_library_composition() {
    let dir = tempfile::tempdir().unwrap();
    let (data, schema) = write_fixture(dir.path(), &block_dataset(60, 3, 12, 0.5, 1));
    let (code, out, _) = tmo(&["run", "--data", data.to_str().unwrap(), "--schema", schema.to_str().unwrap()], None);
    assert_eq!(code, 0);
    let r = json(&out);
    let s = Schema::from_config_str(&std::fs::read_to_string(&schema).unwrap()).unwrap();
    let ds = load_dataset(&data, &s, &CleaningPolicy::no_winsorization()).unwrap();
    let opts =
        PipelineOptions { baselines: vec![Method::Hc0, Method::Hc1, Method::Cluster], ..PipelineOptions::default() };
    let lib = run_pipeline(&ds, &opts).unwrap();
    assert_eq!(r["v_tmo"].as_f64().unwrap(), lib.report.v_tmo);
    assert_eq!(r["se_tmo"].as_f64().unwrap(), lib.report.se_tmo.unwrap());
    assert_eq!(r["delta_star"].as_f64().unwrap(), lib.threshold.delta_star);
    let cl = cluster_variance(&lib.residuals, ds.clusters.as_ref().unwrap(), false).unwrap();
    let hc1 = hc_variance(&lib.residuals, HcCorrection::Hc1).unwrap();
    assert_eq!(method(&r, "cluster")["ratio"].as_f64().unwrap(), cl.sqrt() / hc1.sqrt());
}

#[test]
fn huge_threshold_gives_hc0() {
    let dir = tempfile::tempdir().unwrap();
    let (data, schema) = write_fixture(dir.path(), &block_dataset(30, 3, 8, 0.5, 2));
    let (code, out, _) = tmo(
        &["run", "--data", data.to_str().unwrap(), "--schema", schema.to_str().unwrap(), "--threshold", "999"],
        None,
    );
    assert_eq!(code, 0);
    let r = json(&out);
    assert_eq!(method(&r, "tmo")["se"], method(&r, "hc0")["se"]);
}

#[test]
fn emitted_pairs_reproduce_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let (data, schema) = write_fixture(dir.path(), &block_dataset(45, 3, 10, 0.5, 3));
    let base = ["run", "--data", data.to_str().unwrap(), "--schema", schema.to_str().unwrap()];
    for name in ["pairs.csv", "pairs.bin"] {
        let p = dir.path().join(name);
        let mut a = base.to_vec();
        a.extend(["--emit-pairs", p.to_str().unwrap()]);
        let (c1, first, _) = tmo(&a, None);
        let mut b = base.to_vec();
        b.extend(["--pairs-file", p.to_str().unwrap()]);
        let (c2, second, _) = tmo(&b, None);
        assert_eq!((c1, c2), (0, 0));
        assert_eq!(first, second, "{name}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) =
        tmo(&["run", "--data", "/nonexistent.csv", "--outcome", "y", "--treatment", "w", "--aux", "a"], None);
    assert_eq!(code, 2);
    assert!(err.contains("dataset_io"));
    let (code, _, _) = tmo(&["run", "--bogus"], None);
    assert_eq!(code, 2);
    let mut ds = block_dataset(30, 3, 5, 0.5, 4);
    ds.w = nalgebra::DVector::from_element(30, 1.0);
    let (data, schema) = write_fixture(dir.path(), &ds);
    let (code, _, err) = tmo(&["run", "--data", data.to_str().unwrap(), "--schema", schema.to_str().unwrap()], None);
    assert_eq!(code, 3, "{err}");
    let (code, _, _) = tmo(
        &["run", "--data", data.to_str().unwrap(), "--schema", schema.to_str().unwrap(), "--threshold", "-1"],
        None,
    );
    assert_eq!(code, 2);
}

#[test]
fn output_formats() {
    let dir = tempfile::tempdir().unwrap();
    let (data, schema) = write_fixture(dir.path(), &block_dataset(30, 3, 8, 0.5, 5));
    let base = ["run", "--data", data.to_str().unwrap(), "--schema", schema.to_str().unwrap()];
    let mut a = base.to_vec();
    a.extend(["--format", "csv"]);
    let (_, csv, _) = tmo(&a, None);
    let csv = String::from_utf8(csv).unwrap();
    assert!(csv.starts_with("method,variance,se,ratio\ntmo,"));
    let mut a = base.to_vec();
    let out = dir.path().join("report.txt");
    a.extend(["--format", "table", "--output", out.to_str().unwrap()]);
    let (code, stdout, _) = tmo(&a, None);
    assert_eq!(code, 0);
    assert!(stdout.is_empty());
    assert!(std::fs::read_to_string(out).unwrap().contains("delta*"));
}

#[test]
fn diagnose_reports_null_fit_and_curve() {
    let dir = tempfile::tempdir().unwrap();
    let (data, schema) = write_fixture(dir.path(), &block_dataset(60, 3, 20, 0.5, 6));
    let (code, out, _) =
        tmo(&["diagnose", "--data", data.to_str().unwrap(), "--schema", schema.to_str().unwrap()], None);
    assert_eq!(code, 0);
    let d = json(&out);
    assert_eq!(d["histogram"]["counts"].as_array().unwrap().len(), 100);
    assert!(d["null"]["df_hat"].as_f64().unwrap() > 0.0);
    assert!(d["q_curve"].as_array().unwrap().len() >= 512);
    assert_eq!(d["resampling"]["resamples"], 20);
    assert!(d["central_fit_score"].as_f64().unwrap() < 0.1);
}

#[test]
fn calibrate_then_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let (data, schema) = write_fixture(dir.path(), &block_dataset(60, 3, 30, 0.7, 7));
    let sigma_path = dir.path().join("sigma.json");
    let (code, _, _) = tmo(
        &[
            "calibrate",
            "--data",
            data.to_str().unwrap(),
            "--schema",
            schema.to_str().unwrap(),
            "--output",
            sigma_path.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code, 0);
    let text = std::fs::read_to_string(&sigma_path).unwrap();
    let sigma = CalibratedSigma::from_json(&text).unwrap();
    assert!(!sigma.blocks.is_empty());
    assert_eq!(sigma.to_json().trim_end(), text.trim_end());
    let cfg = dir.path().join("sim.toml");
    std::fs::write(
        &cfg,
        "reps = 100\nseed = 2\nd = 10\nmethods = [\"hc0\", \"tmo\"]\n[sigma]\nsource = \"file\"\npath = \"sigma.json\"\n[treatment]\nsource = \"block\"\n",
    )
    .unwrap();
    let (code, out, err) = tmo(&["simulate", "--config", cfg.to_str().unwrap(), "--format", "csv"], None);
    assert_eq!(code, 0, "{err}");
    let csv = String::from_utf8(out).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("hc0,"));
    assert!(err.contains("favorable_aux_design"));
}

#[test]
fn identity_simulation_is_near_nominal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.toml");
    std::fs::write(
        &cfg,
        "reps = 1000\nseed = 4\nmethods = [\"hc0\"]\n[sigma]\nsource = \"identity\"\nn = 300\n[treatment]\nsource = \"iid\"\n",
    )
    .unwrap();
    let (code, out, _) = tmo(&["simulate", "--config", cfg.to_str().unwrap()], None);
    assert_eq!(code, 0);
    let r = json(&out);
    let hc0 = &r["methods"][0];
    assert!((hc0["mean_ratio"].as_f64().unwrap() - 1.0).abs() < 0.03);
    assert!((hc0["rejection_rate"].as_f64().unwrap() - 0.05).abs() < 0.02);
}
