#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;

use nalgebra::{DMatrix, DVector};
use tmo::dataset_io::{write_dataset, Coord, RegressionDataset, Schema};
use tmo::simulation::{block_treatment, CalibratedSigma, FactoredSigma};

/// Outcome and `d` auxiliary outcomes share an equicorrelated block structure;
/// the treatment is shared within blocks. Clusters are the blocks and
/// coordinates put block members within a few miles of each other.
pub fn block_dataset(n: usize, block: usize, d: usize, rho: f64, seed: u64) -> RegressionDataset {
    let sigma = CalibratedSigma::equicorrelated_blocks(n, n / block, block, rho).unwrap();
    let fs = FactoredSigma::new(&sigma).unwrap();
    let y0 = fs.draw(seed, 0, 0);
    let w = block_treatment(&sigma, seed);
    let mut aux = DMatrix::zeros(n, d);
    for j in 0..d {
        aux.set_column(j, &DVector::from_vec(fs.draw(seed, 0, j as u64 + 1)));
    }
    let labels: Vec<String> = (0..n).map(|i| format!("g{}", i / block)).collect();
    let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
    let coords = (0..n)
        .map(|i| Coord { lat: 30.0 + (i / block) as f64 * 0.5, lon: -100.0 + (i % block) as f64 * 0.01 })
        .collect();
    RegressionDataset::cross_section(y0, w, aux).unwrap().with_clusters(&refs).unwrap().with_coords(coords).unwrap()
}

pub fn schema_text(s: &Schema) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "outcome = {}", s.outcome);
    let _ = writeln!(t, "treatment = {}", s.treatment);
    let _ = writeln!(t, "aux = {}", s.aux.join(","));
    if let Some(u) = &s.unit {
        let _ = writeln!(t, "unit = {u}");
    }
    if let Some(c) = &s.cluster {
        let _ = writeln!(t, "cluster = {c}");
    }
    if let Some((lat, lon)) = &s.coords {
        let _ = writeln!(t, "lat = {lat}\nlon = {lon}");
    }
    t
}

/// Write `ds` and a matching schema file into `dir`.
pub fn write_fixture(dir: &Path, ds: &RegressionDataset) -> (PathBuf, PathBuf) {
    let data = dir.join("data.csv");
    let schema = write_dataset(ds, &data).unwrap();
    let spath = dir.join("schema.cfg");
    std::fs::write(&spath, schema_text(&schema)).unwrap();
    (data, spath)
}

pub fn tmo(args: &[&str], threads: Option<usize>) -> (i32, Vec<u8>, String) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tmo"));
    cmd.args(args).env_remove("TMO_THREADS");
    if let Some(t) = threads {
        cmd.env("TMO_THREADS", t.to_string());
    }
    let out = cmd.output().unwrap();
    (out.status.code().unwrap_or(-1), out.stdout, String::from_utf8_lossy(&out.stderr).into_owned())
}
