//! End-to-end TMO: residualize, correlate, fit the null, choose δ*, keep
//! pairs, and compare variances.

use nalgebra::DVector;

use crate::correlation::{normalize_residuals, pairwise_correlations, PairCorrelations, Pooling, Scale};
use crate::dataset_io::RegressionDataset;
use crate::error::{Module, Result, TmoError};
use crate::null_threshold::{
    choose_threshold, estimate_null_binned, estimate_null_iqr, BinDistance, BinFit, NullModel, ThresholdChoice,
};
use crate::regression::{fit_iv_with, fit_ols_with, fit_wls_with, FitOptions, FixedEffectMode, ResidualPanel};
use crate::variance::{
    build_keep_set, compare_methods, BaselineSpec, CompareConfig, DistanceSpec, KeepSet, Kernel, Method,
    NeverThreshold, VarianceReport,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NullSpec {
    Iqr,
    Binned { trim_q: f64, distance: BinDistance, fit: BinFit },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Augment {
    #[default]
    None,
    Cluster,
    Distance,
    Both,
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub scale: Scale,
    pub null: NullSpec,
    pub threshold_override: Option<f64>,
    pub fixed_effects: FixedEffectMode,
    /// Pairs never thresholded.
    pub augment: Augment,
    pub bandwidth_miles: Option<f64>,
    pub kernel: Kernel,
    pub baselines: Vec<Method>,
    pub reference: Method,
    pub tmo_hc1: bool,
    pub cluster_small_sample: bool,
    pub scpc_basis: Option<Vec<Vec<f64>>>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            scale: Scale::Fisher,
            null: NullSpec::Iqr,
            threshold_override: None,
            fixed_effects: FixedEffectMode::Indicators,
            augment: Augment::None,
            bandwidth_miles: None,
            kernel: Kernel::Uniform,
            baselines: vec![Method::Hc0, Method::Hc1],
            reference: Method::Hc1,
            tmo_hc1: false,
            cluster_small_sample: false,
            scpc_basis: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub residuals: ResidualPanel,
    pub pairs: PairCorrelations,
    /// Statistics of pairs outside the never-threshold set.
    pub candidate_stats: Vec<f64>,
    pub null: NullModel,
    pub threshold: ThresholdChoice,
    pub keep: KeepSet,
    pub report: VarianceReport,
}

/// Fit by OLS, WLS or 2SLS according to the dataset's weights and instrument.
pub fn fit(ds: &RegressionDataset, fixed_effects: FixedEffectMode) -> Result<ResidualPanel> {
    let opts = FitOptions { fixed_effects };
    match &ds.instrument {
        Some(z) => fit_iv_with(ds, z, opts),
        None if ds.weights.is_some() => fit_wls_with(ds, opts),
        None => fit_ols_with(ds, opts),
    }
}

pub fn correlations(rp: &ResidualPanel, scale: Scale) -> Result<PairCorrelations> {
    let pooling = if rp.t > 1 { Pooling::PanelPooled } else { Pooling::CrossSection };
    pairwise_correlations(&normalize_residuals(rp)?, pooling, scale)
}

pub fn fit_null(stats: &[f64], spec: NullSpec, scale: Scale) -> Result<NullModel> {
    match spec {
        NullSpec::Iqr => estimate_null_iqr(stats, scale),
        NullSpec::Binned { trim_q, distance, fit } => estimate_null_binned(stats, scale, trim_q, distance, fit),
    }
}

fn distance_spec(ds: &RegressionDataset, opts: &PipelineOptions) -> Result<Option<DistanceSpec>> {
    let Some(bw) = opts.bandwidth_miles else { return Ok(None) };
    let coords = ds.coords.clone().ok_or_else(|| {
        TmoError::invalid(Module::Variance, "a bandwidth was given but the dataset has no coordinates")
    })?;
    DistanceSpec::new(coords, bw, opts.kernel).map(Some)
}

fn never_threshold(
    ds: &RegressionDataset,
    opts: &PipelineOptions,
    dist: &Option<DistanceSpec>,
) -> Result<NeverThreshold> {
    let want_cluster = matches!(opts.augment, Augment::Cluster | Augment::Both);
    let want_distance = matches!(opts.augment, Augment::Distance | Augment::Both);
    let clusters = if want_cluster {
        Some(
            ds.clusters
                .clone()
                .ok_or_else(|| TmoError::invalid(Module::Variance, "cluster augmentation needs a cluster column"))?,
        )
    } else {
        None
    };
    let distance = if want_distance {
        Some(dist.clone().ok_or_else(|| {
            TmoError::invalid(Module::Variance, "distance augmentation needs coordinates and a bandwidth")
        })?)
    } else {
        None
    };
    Ok(NeverThreshold { clusters, distance })
}

/// Run every step on `ds`.
pub fn run_pipeline(ds: &RegressionDataset, opts: &PipelineOptions) -> Result<PipelineOutput> {
    ds.validate()?;
    let rp = fit(ds, opts.fixed_effects)?;
    let pc = correlations(&rp, opts.scale)?;
    finish(ds, rp, pc, opts)
}

/// As [`run_pipeline`], with pair statistics supplied instead of computed.
pub fn run_with_pairs(
    ds: &RegressionDataset,
    pairs: PairCorrelations,
    opts: &PipelineOptions,
) -> Result<PipelineOutput> {
    ds.validate()?;
    if pairs.n != ds.n_units() {
        return Err(TmoError::invalid(
            Module::Correlation,
            format!("pair table covers {} units but the dataset has {}", pairs.n, ds.n_units()),
        ));
    }
    let rp = fit(ds, opts.fixed_effects)?;
    finish(ds, rp, pairs.with_scale(opts.scale), opts)
}

fn finish(
    ds: &RegressionDataset,
    rp: ResidualPanel,
    pc: PairCorrelations,
    opts: &PipelineOptions,
) -> Result<PipelineOutput> {
    let dist = distance_spec(ds, opts)?;
    let never = never_threshold(ds, opts, &dist)?;
    let candidate_stats = never.candidate_stats(&pc)?;
    let null = fit_null(&candidate_stats, opts.null, opts.scale)?;
    let mut tc = choose_threshold(&candidate_stats, &null, rp.n)?;
    if let Some(delta) = opts.threshold_override {
        tc = tc.with_override(&candidate_stats, delta)?;
    }
    let keep = build_keep_set(&pc, tc.delta_star, &never)?;
    let cfg = CompareConfig {
        baselines: opts.baselines.clone(),
        reference: opts.reference,
        inputs: BaselineSpec {
            clusters: ds.clusters.clone(),
            distance: dist,
            scpc_basis: opts.scpc_basis.clone(),
            cluster_small_sample: opts.cluster_small_sample,
        },
        tmo_hc1: opts.tmo_hc1,
    };
    let mut report = compare_methods(&rp, &keep, Some(&tc), Some(&null), &cfg)?;
    report.warnings.extend(pc.warnings.iter().cloned());
    Ok(PipelineOutput { residuals: rp, pairs: pc, candidate_stats, null, threshold: tc, keep, report })
}

/// Rerun the correlation, null and threshold steps using only the listed
/// auxiliary outcomes.
pub fn threshold_without_outcomes(
    rp: &ResidualPanel,
    keep_outcomes: &[usize],
    opts: &PipelineOptions,
    never: &NeverThreshold,
) -> Result<ThresholdChoice> {
    let mut sub = rp.clone();
    let cols: Vec<DVector<f64>> = keep_outcomes.iter().map(|&j| rp.eps_aux.column(j).into_owned()).collect();
    sub.eps_aux = nalgebra::DMatrix::from_columns(&cols);
    sub.aux_names = keep_outcomes.iter().map(|&j| rp.aux_names[j].clone()).collect();
    let pc = correlations(&sub, opts.scale)?;
    let stats = never.candidate_stats(&pc)?;
    let null = fit_null(&stats, opts.null, opts.scale)?;
    choose_threshold(&stats, &null, rp.n)
}

/// The never-threshold set implied by `opts` for `ds`.
pub fn never_threshold_for(ds: &RegressionDataset, opts: &PipelineOptions) -> Result<NeverThreshold> {
    let dist = distance_spec(ds, opts)?;
    never_threshold(ds, opts, &dist)
}
