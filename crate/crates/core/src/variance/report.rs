use std::fmt::Write as _;

use serde::Serialize;

use super::{
    cluster_variance, distance_kernel_variance, hc1_factor, hc_variance, sandwich_variance, scpc_augmented_variance,
    scpc_variance, DistanceSpec, HcCorrection, KeepSet,
};
use crate::correlation::Scale;
use crate::error::{Module, Result, TmoError};
use crate::null_threshold::{NullModel, ThresholdChoice, ThresholdStatus};
use crate::regression::{Estimator, ResidualPanel};
use crate::warnings::Warning;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Tmo,
    Hc0,
    Hc1,
    Cluster,
    Conley,
    Scpc,
    ScpcTmo,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Tmo => "tmo",
            Method::Hc0 => "hc0",
            Method::Hc1 => "hc1",
            Method::Cluster => "cluster",
            Method::Conley => "conley",
            Method::Scpc => "scpc",
            Method::ScpcTmo => "scpc_tmo",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        [Method::Tmo, Method::Hc0, Method::Hc1, Method::Cluster, Method::Conley, Method::Scpc, Method::ScpcTmo]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

/// Inputs for the baseline estimators.
#[derive(Debug, Clone, Default)]
pub struct BaselineSpec {
    pub clusters: Option<Vec<usize>>,
    pub distance: Option<DistanceSpec>,
    /// Basis vectors over units for the projection hook.
    pub scpc_basis: Option<Vec<Vec<f64>>>,
    pub cluster_small_sample: bool,
}

#[derive(Debug, Clone)]
pub struct CompareConfig {
    pub baselines: Vec<Method>,
    /// Method whose SE is the denominator of every ratio.
    pub reference: Method,
    pub inputs: BaselineSpec,
    /// Scale the TMO variance by N/(N − k − 2).
    pub tmo_hc1: bool,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            baselines: vec![Method::Hc0, Method::Hc1],
            reference: Method::Hc1,
            inputs: BaselineSpec::default(),
            tmo_hc1: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodResult {
    pub method: Method,
    pub variance: f64,
    /// Absent when the variance is negative.
    pub se: Option<f64>,
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceReport {
    pub estimator: Estimator,
    pub tau_hat: f64,
    pub v_tmo: f64,
    pub se_tmo: Option<f64>,
    pub negative_variance_flag: bool,
    pub reference: Method,
    pub methods: Vec<MethodResult>,
    pub kept_fraction: f64,
    pub n_threshold_pairs: usize,
    pub n_never_threshold_pairs: usize,
    pub n_candidate_pairs: usize,
    pub scale: Option<Scale>,
    pub delta_star: Option<f64>,
    pub delta_star_rho: Option<f64>,
    pub bonferroni_delta: Option<f64>,
    pub threshold_status: Option<ThresholdStatus>,
    pub v_hat: Option<f64>,
    pub df_hat: Option<f64>,
    pub first_stage_f: Option<f64>,
    pub critical_value: f64,
    pub n_units: usize,
    pub n_periods: usize,
    pub warnings: Vec<Warning>,
}

fn se_of(v: f64) -> Option<f64> {
    (v >= 0.0).then(|| v.sqrt())
}

fn baseline(rp: &ResidualPanel, ks: &KeepSet, m: Method, inp: &BaselineSpec) -> Result<f64> {
    let missing = |what: &str| TmoError::invalid(Module::Variance, format!("method `{}` needs {what}", m.name()));
    match m {
        Method::Tmo => sandwich_variance(rp, ks),
        Method::Hc0 => hc_variance(rp, HcCorrection::Hc0),
        Method::Hc1 => hc_variance(rp, HcCorrection::Hc1),
        Method::Cluster => cluster_variance(
            rp,
            inp.clusters.as_deref().ok_or_else(|| missing("cluster labels"))?,
            inp.cluster_small_sample,
        ),
        Method::Conley => distance_kernel_variance(rp, inp.distance.as_ref().ok_or_else(|| missing("coordinates"))?),
        Method::Scpc => scpc_variance(rp, inp.scpc_basis.as_deref().ok_or_else(|| missing("basis vectors"))?),
        Method::ScpcTmo => {
            scpc_augmented_variance(rp, inp.scpc_basis.as_deref().ok_or_else(|| missing("basis vectors"))?, ks)
        }
    }
}

/// TMO variance for `ks` alongside the requested baselines, each computed by
/// its standalone function, with SE ratios against the reference method.
pub fn compare_methods(
    rp: &ResidualPanel,
    ks: &KeepSet,
    tc: Option<&ThresholdChoice>,
    null: Option<&NullModel>,
    cfg: &CompareConfig,
) -> Result<VarianceReport> {
    let mut v_tmo = sandwich_variance(rp, ks)?;
    if cfg.tmo_hc1 {
        v_tmo *= hc1_factor(rp)?;
    }
    let mut rows = vec![(Method::Tmo, v_tmo)];
    let mut wanted = cfg.baselines.clone();
    if cfg.reference != Method::Tmo && !wanted.contains(&cfg.reference) {
        wanted.push(cfg.reference);
    }
    for m in wanted {
        if m != Method::Tmo && !rows.iter().any(|r| r.0 == m) {
            rows.push((m, baseline(rp, ks, m, &cfg.inputs)?));
        }
    }
    let ref_se = rows.iter().find(|r| r.0 == cfg.reference).and_then(|r| se_of(r.1));
    let methods = rows
        .iter()
        .map(|&(method, variance)| {
            let se = se_of(variance);
            let ratio = match (se, ref_se) {
                (Some(a), Some(b)) if b > 0.0 => Some(a / b),
                _ => None,
            };
            MethodResult { method, variance, se, ratio }
        })
        .collect();
    let mut warnings = rp.warnings.clone();
    if v_tmo < 0.0 {
        warnings.push(Warning::new(
            Module::Variance,
            "negative_variance",
            "TMO variance is negative; the thresholded covariance is not positive semi-definite",
        ));
    }
    Ok(VarianceReport {
        estimator: rp.estimator,
        tau_hat: rp.tau_hat,
        v_tmo,
        se_tmo: se_of(v_tmo),
        negative_variance_flag: v_tmo < 0.0,
        reference: cfg.reference,
        methods,
        kept_fraction: ks.kept_fraction(),
        n_threshold_pairs: ks.n_threshold,
        n_never_threshold_pairs: ks.n_never,
        n_candidate_pairs: ks.n_candidates,
        scale: tc.map(|t| t.scale),
        delta_star: tc.map(|t| t.delta_star),
        delta_star_rho: tc.map(|t| t.delta_star_rho),
        bonferroni_delta: tc.map(|t| t.bonferroni_delta),
        threshold_status: tc.map(|t| t.status),
        v_hat: null.map(|m| m.v_hat),
        df_hat: null.map(|m| m.df_hat),
        first_stage_f: rp.first_stage_f,
        critical_value: crate::stats::Z_CRIT_05,
        n_units: rp.n,
        n_periods: rp.t,
        warnings,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x}"))
}

impl VarianceReport {
    pub fn method(&self, m: Method) -> Option<&MethodResult> {
        self.methods.iter().find(|r| r.method == m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per method: `method,variance,se,ratio`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,variance,se,ratio\n");
        for r in &self.methods {
            let _ = writeln!(s, "{},{},{},{}", r.method.name(), r.variance, opt(r.se), opt(r.ratio));
        }
        s
    }

    /// Aligned text: coefficient and threshold summary, then one line per method.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "coefficient      {:>14.6}", self.tau_hat);
        if let (Some(d), Some(r)) = (self.delta_star, self.delta_star_rho) {
            let _ = writeln!(s, "delta*           {d:>14.6}  (correlation {r:.6})");
        }
        if let Some(df) = self.df_hat {
            let _ = writeln!(s, "df_hat           {df:>14.3}");
        }
        let _ = writeln!(
            s,
            "kept pairs       {:>13.3}%  ({} of {})",
            100.0 * self.kept_fraction,
            self.n_threshold_pairs,
            self.n_candidate_pairs
        );
        if self.n_never_threshold_pairs > 0 {
            let _ = writeln!(s, "never-threshold  {:>14}", self.n_never_threshold_pairs);
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<10} {:>14} {:>14} {:>10}",
            "method",
            "variance",
            "se",
            format!("ratio/{}", self.reference.name())
        );
        for r in &self.methods {
            let se = r.se.map_or("NA".to_string(), |v| format!("{v:.6}"));
            let ratio = r.ratio.map_or("NA".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(s, "{:<10} {:>14.6e} {:>14} {:>10}", r.method.name(), r.variance, se, ratio);
        }
        if self.negative_variance_flag {
            let _ = writeln!(s, "warning: TMO variance is negative");
        }
        s
    }
}
