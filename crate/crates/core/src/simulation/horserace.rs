use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use super::{CalibratedSigma, FactoredSigma};
use crate::dataset_io::{Coord, RegressionDataset};
use crate::error::{Module, Result, TmoError};
use crate::pipeline::{run_pipeline, PipelineOptions};
use crate::regression::fit_ols;
use crate::stats::norm_isf;
use crate::variance::{compare_methods, BaselineSpec, CompareConfig, DistanceSpec, KeepSet, Method};
use crate::warnings::Warning;

pub const MIN_REPS: usize = 100;

pub const AUX_DESIGN_LABEL: &str = "favorable: auxiliary outcomes drawn from the same covariance as the errors";

#[derive(Debug, Clone)]
pub struct HorseRaceConfig {
    pub methods: Vec<Method>,
    pub reps: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Auxiliary outcomes per replicate; used only when TMO is requested.
    pub d: usize,
    /// Threshold and baseline settings for the TMO pipeline.
    pub pipeline: PipelineOptions,
    pub clusters: Option<Vec<usize>>,
    pub coords: Option<Vec<Coord>>,
}

impl HorseRaceConfig {
    pub fn new(methods: Vec<Method>, reps: usize, d: usize, seed: u64) -> Self {
        HorseRaceConfig {
            methods,
            reps,
            alpha: 0.05,
            seed,
            d,
            pipeline: PipelineOptions::default(),
            clusters: None,
            coords: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimMethodResult {
    pub method: Method,
    /// Mean of SE_est / SE_true over replicates with a non-negative variance.
    pub mean_ratio: f64,
    pub median_ratio: f64,
    pub rejection_rate: f64,
    pub n_valid: usize,
    /// Replicates excluded because the variance estimate was negative.
    pub n_negative: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimResult {
    pub methods: Vec<SimMethodResult>,
    pub reps: usize,
    pub seed: u64,
    pub alpha: f64,
    pub critical_value: f64,
    pub d: usize,
    pub se_true: f64,
    pub aux_design: Option<String>,
    pub mean_kept_fraction: Option<f64>,
    pub mean_delta_star: Option<f64>,
    pub warnings: Vec<Warning>,
}

impl SimResult {
    pub fn method(&self, m: Method) -> Option<&SimMethodResult> {
        self.methods.iter().find(|r| r.method == m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,mean_se_ratio,median_se_ratio,rejection_rate,n_valid,n_negative\n");
        for r in &self.methods {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.method.name(),
                r.mean_ratio,
                r.median_ratio,
                r.rejection_rate,
                r.n_valid,
                r.n_negative
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "replicates {}  seed {}  alpha {}  true SE {:.6}",
            self.reps, self.seed, self.alpha, self.se_true
        );
        if let Some(label) = &self.aux_design {
            let _ = writeln!(s, "auxiliary design: {label} (d = {})", self.d);
        }
        let _ = writeln!(s, "{:<10} {:>22} {:>10} {:>8}", "method", "mean(est. SE/true SE)", "rej. rate", "valid");
        for r in &self.methods {
            let _ = writeln!(
                s,
                "{:<10} {:>22.4} {:>10.4} {:>8}",
                r.method.name(),
                r.mean_ratio,
                r.rejection_rate,
                r.n_valid
            );
        }
        s
    }
}

/// True standard error of the OLS slope on `[1, w]`: √(w̃ᵀΣw̃)/S with w̃ = w − w̄.
pub fn true_se(sigma: &CalibratedSigma, w: &[f64]) -> f64 {
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let wt: Vec<f64> = w.iter().map(|x| x - mean).collect();
    let s: f64 = wt.iter().map(|x| x * x).sum();
    sigma.quadratic_form(&wt).sqrt() / s
}

struct Replicate {
    tau: f64,
    se: Vec<Option<f64>>,
    kept_fraction: Option<f64>,
    delta_star: Option<f64>,
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn one_replicate(
    fs: &FactoredSigma,
    w: &[f64],
    cfg: &HorseRaceConfig,
    cluster_labels: &Option<Vec<String>>,
    r: u64,
) -> Result<Replicate> {
    let n = fs.n;
    let eps = fs.draw(cfg.seed, r, 0);
    let want_tmo = cfg.methods.contains(&Method::Tmo);
    // Without TMO the auxiliary columns are placeholders that never enter a variance.
    let mut aux = DMatrix::zeros(n, if want_tmo { cfg.d } else { 2 });
    for j in 0..if want_tmo { cfg.d } else { 0 } {
        aux.set_column(j, &nalgebra::DVector::from_vec(fs.draw(cfg.seed, r, j as u64 + 1)));
    }
    let mut ds = RegressionDataset::cross_section(eps, w.to_vec(), aux)?;
    if let Some(labels) = cluster_labels {
        let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
        ds = ds.with_clusters(&refs)?;
    }
    if let Some(c) = &cfg.coords {
        ds = ds.with_coords(c.clone())?;
    }
    let baselines: Vec<Method> = cfg.methods.iter().copied().filter(|&m| m != Method::Tmo).collect();
    let (report, kept_fraction, delta_star) = if want_tmo {
        let mut opts = cfg.pipeline.clone();
        opts.baselines = baselines;
        opts.reference = Method::Tmo;
        let out = run_pipeline(&ds, &opts)?;
        let kf = out.report.kept_fraction;
        let ds_star = out.threshold.delta_star;
        (out.report, Some(kf), Some(ds_star))
    } else {
        let rp = fit_ols(&ds)?;
        let distance = match (&cfg.coords, cfg.pipeline.bandwidth_miles) {
            (Some(c), Some(bw)) => Some(DistanceSpec::new(c.clone(), bw, cfg.pipeline.kernel)?),
            _ => None,
        };
        let cc = CompareConfig {
            baselines,
            reference: Method::Tmo,
            inputs: BaselineSpec {
                clusters: ds.clusters.clone(),
                distance,
                scpc_basis: cfg.pipeline.scpc_basis.clone(),
                cluster_small_sample: cfg.pipeline.cluster_small_sample,
            },
            tmo_hc1: false,
        };
        (compare_methods(&rp, &KeepSet::empty(n), None, None, &cc)?, None, None)
    };
    let se = cfg.methods.iter().map(|&m| report.method(m).and_then(|x| x.se)).collect();
    Ok(Replicate { tau: report.tau_hat, se, kept_fraction, delta_star })
}

/// Monte Carlo comparison of standard errors under Y = 0·W + ε, ε ~ N(0, Σ).
///
/// Replicates run in parallel; aggregation is in replicate order, so the
/// result does not depend on the number of worker threads.
pub fn run_horserace(sigma: &CalibratedSigma, w: &[f64], cfg: &HorseRaceConfig) -> Result<SimResult> {
    if cfg.reps < MIN_REPS {
        return Err(TmoError::invalid(Module::Simulation, format!("at least {MIN_REPS} replicates required")));
    }
    if w.len() != sigma.n {
        return Err(TmoError::invalid(Module::Simulation, "treatment length differs from Σ dimension"));
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) || cfg.methods.is_empty() {
        return Err(TmoError::invalid(
            Module::Simulation,
            "alpha must lie in (0, 1) and at least one method is required",
        ));
    }
    if cfg.methods.contains(&Method::Cluster) && cfg.clusters.is_none() {
        return Err(TmoError::invalid(Module::Simulation, "method `cluster` needs cluster labels"));
    }
    if cfg.methods.contains(&Method::Conley) && (cfg.coords.is_none() || cfg.pipeline.bandwidth_miles.is_none()) {
        return Err(TmoError::invalid(Module::Simulation, "method `conley` needs coordinates and a bandwidth"));
    }
    let fs = FactoredSigma::new(sigma)?;
    let se_true = true_se(sigma, w);
    let crit = norm_isf(cfg.alpha / 2.0);
    let cluster_labels = cfg.clusters.as_ref().map(|c| c.iter().map(|g| g.to_string()).collect::<Vec<_>>());
    let reps: Vec<Result<Replicate>> =
        (0..cfg.reps as u64).into_par_iter().map(|r| one_replicate(&fs, w, cfg, &cluster_labels, r)).collect();
    let reps: Vec<Replicate> = reps.into_iter().collect::<Result<_>>()?;

    let methods = cfg
        .methods
        .iter()
        .enumerate()
        .map(|(k, &method)| {
            let mut ratios = Vec::with_capacity(reps.len());
            let mut rejections = 0usize;
            for rep in &reps {
                if let Some(se) = rep.se[k] {
                    ratios.push(se / se_true);
                    rejections += (rep.tau.abs() > crit * se) as usize;
                }
            }
            let n_valid = ratios.len();
            let mean_ratio = ratios.iter().sum::<f64>() / n_valid as f64;
            SimMethodResult {
                method,
                mean_ratio,
                median_ratio: median(&mut ratios),
                rejection_rate: if n_valid == 0 { f64::NAN } else { rejections as f64 / n_valid as f64 },
                n_valid,
                n_negative: reps.len() - n_valid,
            }
        })
        .collect::<Vec<_>>();

    let mean_of = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let mut warnings = fs.warnings.clone();
    warnings.extend(sigma.warnings.iter().cloned());
    let tmo = cfg.methods.contains(&Method::Tmo);
    if tmo {
        warnings.push(Warning::new(Module::Simulation, "favorable_aux_design", AUX_DESIGN_LABEL));
    }
    Ok(SimResult {
        methods,
        reps: cfg.reps,
        seed: cfg.seed,
        alpha: cfg.alpha,
        critical_value: crit,
        d: if tmo { cfg.d } else { 0 },
        se_true,
        aux_design: tmo.then(|| AUX_DESIGN_LABEL.to_string()),
        mean_kept_fraction: mean_of(reps.iter().filter_map(|r| r.kept_fraction).collect()),
        mean_delta_star: mean_of(reps.iter().filter_map(|r| r.delta_star).collect()),
        warnings,
    })
}
