//! Least squares with covariate partialling.
//!
//! Every fit works in the √h-scaled space (h = 1 for OLS): the treatment and
//! each outcome are residualized on the covariate block `[1, X, FE]` with a
//! Householder QR basis, and the treatment coefficient is read off the
//! partialled treatment (Frisch–Waugh–Lovell). One fixed-effect factor can
//! instead be absorbed by weighted group demeaning.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dataset_io::RegressionDataset;
use crate::error::{Module, Result, TmoError};
use crate::warnings::Warning;

const RANK_TOL: f64 = 1e-10;
const WEAK_INSTRUMENT_F: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Ols,
    Wls,
    Iv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FixedEffectMode {
    /// Expand every factor into indicator columns (first level dropped).
    #[default]
    Indicators,
    /// Absorb the first factor by group demeaning; remaining factors become indicators.
    Within,
}

/// Residuals and score weights of a fitted regression.
#[derive(Debug, Clone)]
pub struct ResidualPanel {
    pub n: usize,
    pub t: usize,
    /// Residuals of the outcome of interest, one per observation.
    pub eps0: DVector<f64>,
    /// Residuals of each auxiliary outcome, `(n·t) × d`.
    pub eps_aux: DMatrix<f64>,
    /// Score weights: the partialled treatment, multiplied by h under WLS.
    pub w_tilde: DVector<f64>,
    pub tau_hat: f64,
    /// Σ h·w̃² over observations.
    pub s_n: f64,
    pub aux_tau: Vec<f64>,
    /// Covariate columns besides intercept and treatment (fixed-effect indicators included).
    pub n_covariates: usize,
    pub estimator: Estimator,
    pub first_stage_f: Option<f64>,
    pub aux_names: Vec<String>,
    pub warnings: Vec<Warning>,
}

impl ResidualPanel {
    pub fn n_obs(&self) -> usize {
        self.eps0.len()
    }

    pub fn n_aux(&self) -> usize {
        self.eps_aux.ncols()
    }

    /// Unit scores g_i = Σ_s w̃_{i,s} ε̂_{i,s}.
    pub fn unit_scores(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let mut g = 0.0;
                for s in 0..self.t {
                    let o = i * self.t + s;
                    g += self.w_tilde[o] * self.eps0[o];
                }
                g
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FitOptions {
    pub fixed_effects: FixedEffectMode,
}

struct WithinGroups {
    codes: Vec<usize>,
    weight_sums: Vec<f64>,
}

/// Projection onto the orthogonal complement of the (scaled) covariate block.
struct Residualizer {
    within: Option<WithinGroups>,
    q: DMatrix<f64>,
}

impl Residualizer {
    fn apply(&self, v: &DVector<f64>, scale: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        if let Some(g) = &self.within {
            let mut sums = vec![0.0; g.weight_sums.len()];
            for (o, &c) in g.codes.iter().enumerate() {
                sums[c] += scale[o] * out[o];
            }
            for (o, &c) in g.codes.iter().enumerate() {
                out[o] -= scale[o] * sums[c] / g.weight_sums[c];
            }
        }
        if self.q.ncols() > 0 {
            let coef = self.q.tr_mul(&out);
            out -= &self.q * coef;
        }
        out
    }
}

struct Design {
    scale: DVector<f64>,
    residualizer: Residualizer,
    /// Names and scaled, within-transformed columns of the covariate block.
    names: Vec<String>,
    columns: DMatrix<f64>,
    n_covariates: usize,
}

fn build_design(ds: &RegressionDataset, weights: Option<&DVector<f64>>, opts: FitOptions) -> Result<Design> {
    let nt = ds.n_obs();
    let scale = match weights {
        Some(h) => h.map(f64::sqrt),
        None => DVector::from_element(nt, 1.0),
    };
    let absorb = opts.fixed_effects == FixedEffectMode::Within && !ds.fixed_effects.is_empty();
    let mut names = Vec::new();
    let mut cols: Vec<DVector<f64>> = Vec::new();
    if !absorb {
        names.push("(intercept)".to_string());
        cols.push(scale.clone());
    }
    for (k, name) in ds.covariate_names.iter().enumerate() {
        names.push(name.clone());
        cols.push(ds.x.column(k).component_mul(&scale));
    }
    let mut n_covariates = ds.x.ncols();
    for (f_idx, f) in ds.fixed_effects.iter().enumerate() {
        n_covariates += f.levels.len().saturating_sub(1);
        if absorb && f_idx == 0 {
            continue;
        }
        for level in 1..f.levels.len() {
            names.push(format!("{}={}", f.name, f.levels[level]));
            cols.push(DVector::from_fn(nt, |o, _| if f.codes[o] == level { scale[o] } else { 0.0 }));
        }
    }
    let within = if absorb {
        let f = &ds.fixed_effects[0];
        let mut weight_sums = vec![0.0; f.levels.len()];
        for (o, &c) in f.codes.iter().enumerate() {
            weight_sums[c] += scale[o] * scale[o];
        }
        Some(WithinGroups { codes: f.codes.clone(), weight_sums })
    } else {
        None
    };
    let pre = Residualizer { within, q: DMatrix::zeros(nt, 0) };
    let cols: Vec<DVector<f64>> = cols.iter().map(|c| pre.apply(c, &scale)).collect();
    let columns = if cols.is_empty() { DMatrix::zeros(nt, 0) } else { DMatrix::from_columns(&cols) };
    if nt <= n_covariates + 2 {
        return Err(TmoError::invalid(
            Module::Regression,
            format!("{nt} observations cannot identify {} coefficients", n_covariates + 2),
        ));
    }
    check_rank(&columns, &names)?;
    let q = if columns.ncols() > 0 { columns.clone().qr().q() } else { DMatrix::zeros(nt, 0) };
    Ok(Design { scale, residualizer: Residualizer { within: pre.within, q }, names, columns, n_covariates })
}

/// Fails with the offending column names when `columns` is numerically rank deficient.
fn check_rank(columns: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let p = columns.ncols();
    if p == 0 {
        return Ok(());
    }
    let sv = columns.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let tol = RANK_TOL * smax;
    let rank = sv.iter().filter(|&&s| s > tol).count();
    if rank == p {
        return Ok(());
    }
    // modified Gram–Schmidt: a column is offending if nothing survives projection on its predecessors
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut offending = Vec::new();
    for k in 0..p {
        let mut v = columns.column(k).into_owned();
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&v);
                v -= b * c;
            }
        }
        let norm = v.norm();
        if norm <= tol.max(f64::MIN_POSITIVE) {
            offending.push(names[k].clone());
        } else {
            basis.push(v / norm);
        }
    }
    if offending.is_empty() {
        offending.push(names[p - 1].clone());
    }
    Err(TmoError::RankDeficient { columns: offending })
}

fn check_treatment(design: &Design, wt: &DVector<f64>, raw: &DVector<f64>, label: &str) -> Result<()> {
    let mut all = design.columns.clone().insert_column(design.columns.ncols(), 0.0);
    let last = all.ncols() - 1;
    all.set_column(last, &(raw.component_mul(&design.scale)));
    let mut names = design.names.clone();
    names.push(label.to_string());
    check_rank(&all, &names)?;
    if !(wt.norm_squared() > 0.0) {
        return Err(TmoError::RankDeficient { columns: vec![label.to_string()] });
    }
    Ok(())
}

/// Partial outcomes given the partialled regressor used for the coefficient
/// (`w_hat`) and the partialled treatment used for residuals (`w_res`).
fn partial_outcome(
    design: &Design,
    w_hat: &DVector<f64>,
    w_res: &DVector<f64>,
    s_n: f64,
    y: &DVector<f64>,
) -> (f64, DVector<f64>) {
    let ys = y.component_mul(&design.scale);
    let yt = design.residualizer.apply(&ys, &design.scale);
    let tau = w_hat.dot(&yt) / s_n;
    let eps_scaled = yt - w_res * tau;
    (tau, eps_scaled.component_div(&design.scale))
}

fn assemble(
    ds: &RegressionDataset,
    design: &Design,
    w_hat: DVector<f64>,
    w_res: DVector<f64>,
    estimator: Estimator,
    first_stage_f: Option<f64>,
    mut warnings: Vec<Warning>,
) -> ResidualPanel {
    let s_n = w_hat.norm_squared();
    let (tau_hat, eps0) = partial_outcome(design, &w_hat, &w_res, s_n, &ds.y0);
    let aux_fits: Vec<(f64, DVector<f64>)> = (0..ds.n_aux())
        .into_par_iter()
        .map(|j| partial_outcome(design, &w_hat, &w_res, s_n, &ds.aux.column(j).into_owned()))
        .collect();
    let nt = ds.n_obs();
    let mut eps_aux = DMatrix::zeros(nt, aux_fits.len());
    let mut aux_tau = Vec::with_capacity(aux_fits.len());
    for (j, (tau, e)) in aux_fits.into_iter().enumerate() {
        eps_aux.set_column(j, &e);
        aux_tau.push(tau);
    }
    warnings.extend(ds.warnings.iter().cloned());
    ResidualPanel {
        n: ds.n_units(),
        t: ds.n_periods(),
        eps0,
        eps_aux,
        w_tilde: w_hat.component_mul(&design.scale),
        tau_hat,
        s_n,
        aux_tau,
        n_covariates: design.n_covariates,
        estimator,
        first_stage_f,
        aux_names: ds.aux_names.clone(),
        warnings,
    }
}

/// Ordinary least squares of the outcome and every auxiliary outcome on `[1, W, X]`.
pub fn fit_ols(ds: &RegressionDataset) -> Result<ResidualPanel> {
    fit_ols_with(ds, FitOptions::default())
}

pub fn fit_ols_with(ds: &RegressionDataset, opts: FitOptions) -> Result<ResidualPanel> {
    let design = build_design(ds, None, opts)?;
    let wt = design.residualizer.apply(&ds.w, &design.scale);
    check_treatment(&design, &wt, &ds.w, &ds.treatment_name)?;
    Ok(assemble(ds, &design, wt.clone(), wt, Estimator::Ols, None, Vec::new()))
}

/// Weighted least squares with the dataset's weights.
///
/// The stored score weights are h·w̃ and `s_n` = Σ h w̃², so the generic
/// sandwich S⁻² Σ a_i a_i' σ_ii' reproduces S(h)⁻² WᵀHΣHW.
pub fn fit_wls(ds: &RegressionDataset) -> Result<ResidualPanel> {
    fit_wls_with(ds, FitOptions::default())
}

pub fn fit_wls_with(ds: &RegressionDataset, opts: FitOptions) -> Result<ResidualPanel> {
    let h = ds
        .weights
        .as_ref()
        .ok_or_else(|| TmoError::invalid(Module::Regression, "weighted fit requested but dataset has no weights"))?;
    if h.iter().any(|&v| !(v > 0.0)) {
        return Err(TmoError::invalid(Module::Regression, "weights must be strictly positive"));
    }
    let design = build_design(ds, Some(h), opts)?;
    let ws = ds.w.component_mul(&design.scale);
    let wt = design.residualizer.apply(&ws, &design.scale);
    check_treatment(&design, &wt, &ds.w, &ds.treatment_name)?;
    Ok(assemble(ds, &design, wt.clone(), wt, Estimator::Wls, None, Vec::new()))
}

/// Two-stage least squares with a single excluded instrument; the variance
/// machinery is applied to the second stage.
///
/// The treatment is replaced by its first-stage fitted values for the
/// coefficient and score weights, while residuals use the original treatment.
/// The first-stage F statistic is reported, with a warning below 10.
pub fn fit_iv_second_stage(ds: &RegressionDataset, instrument: &DVector<f64>) -> Result<ResidualPanel> {
    fit_iv_with(ds, instrument, FitOptions::default())
}

pub fn fit_iv_with(ds: &RegressionDataset, instrument: &DVector<f64>, opts: FitOptions) -> Result<ResidualPanel> {
    if instrument.len() != ds.n_obs() {
        return Err(TmoError::invalid(Module::Regression, "instrument length differs from observation count"));
    }
    let design = build_design(ds, ds.weights.as_ref(), opts)?;
    let ws = ds.w.component_mul(&design.scale);
    let wt = design.residualizer.apply(&ws, &design.scale);
    check_treatment(&design, &wt, &ds.w, &ds.treatment_name)?;
    let zs = instrument.component_mul(&design.scale);
    let zt = design.residualizer.apply(&zs, &design.scale);
    check_treatment(&design, &zt, instrument, "instrument")?;

    let zz = zt.norm_squared();
    let pi = zt.dot(&wt) / zz;
    let w_hat = &zt * pi;
    if !(w_hat.norm_squared() > 0.0) {
        return Err(TmoError::RankDeficient { columns: vec!["first-stage fitted treatment".into()] });
    }
    let u = &wt - &w_hat;
    let dof = ds.n_obs() as f64 - design.n_covariates as f64 - 2.0;
    let sigma2 = u.norm_squared() / dof;
    let f_stat = pi * pi * zz / sigma2;
    let mut warnings = Vec::new();
    if !(f_stat >= WEAK_INSTRUMENT_F) {
        warnings.push(Warning::new(
            Module::Regression,
            "weak_instrument",
            format!("first-stage F statistic {f_stat:.3} is below {WEAK_INSTRUMENT_F}"),
        ));
    }
    Ok(assemble(ds, &design, w_hat, wt, Estimator::Iv, Some(f_stat), warnings))
}
