//! Gaussian null fit for pair statistics and selection of the threshold δ*.

mod mixture;

pub use mixture::MixtureOracle;

use rayon::prelude::*;
use serde::Serialize;

use crate::correlation::Scale;
use crate::error::{Module, Result, TmoError};
use crate::stats::{norm_cdf, norm_isf, norm_sf, quantile_sorted, sorted_copy, Z75};

const MIN_IQR_STATS: usize = 20;
const MIN_BINNED_STATS: usize = 200;
const GRID_POINTS: usize = 512;
const V_LO: f64 = 1e-8;
const V_HI: f64 = 10.0;
const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NullMethod {
    #[default]
    Iqr,
    Binned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NullModel {
    pub v_hat: f64,
    pub df_hat: f64,
    pub method: NullMethod,
    pub scale: Scale,
}

impl NullModel {
    pub fn new(v_hat: f64, method: NullMethod, scale: Scale) -> Self {
        NullModel { v_hat, df_hat: 1.0 / v_hat, method, scale }
    }

    pub fn sd(&self) -> f64 {
        self.v_hat.sqrt()
    }

    /// P(|X| ≥ δ) under N(0, v̂).
    pub fn right_cdf(&self, delta: f64) -> f64 {
        2.0 * norm_sf(delta / self.sd())
    }
}

/// Match the interquartile range of N(0, v) to the empirical one.
pub fn estimate_null_iqr(stats: &[f64], scale: Scale) -> Result<NullModel> {
    let finite: Vec<f64> = stats.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.len() < MIN_IQR_STATS {
        return Err(TmoError::invalid(
            Module::NullThreshold,
            format!("need at least {MIN_IQR_STATS} pair statistics, got {}", finite.len()),
        ));
    }
    let sorted = sorted_copy(&finite);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    if !(iqr > 0.0) {
        return Err(TmoError::Degenerate("interquartile range of pair statistics is zero".into()));
    }
    let sd = iqr / (2.0 * Z75);
    Ok(NullModel::new(sd * sd, NullMethod::Iqr, scale))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinDistance {
    L1,
    L2,
    Linf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinFit {
    Density,
    Mass,
}

/// Fit v by matching binned N(0, v) to the binned statistics inside the
/// central `[trim_q, 1 − trim_q]` quantile range.
///
/// Bin masses are fractions of all statistics, so non-null mass outside the
/// centre does not inflate the fit. The distance is minimized on log v by a
/// coarse grid followed by golden-section refinement.
pub fn estimate_null_binned(
    stats: &[f64],
    scale: Scale,
    trim_q: f64,
    distance: BinDistance,
    fit: BinFit,
) -> Result<NullModel> {
    if ![0.1, 0.2, 0.25].contains(&trim_q) {
        return Err(TmoError::invalid(Module::NullThreshold, "trim quantile must be 0.1, 0.2 or 0.25"));
    }
    let finite: Vec<f64> = stats.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return Err(TmoError::invalid(Module::NullThreshold, "no finite pair statistics"));
    }
    let sorted = sorted_copy(&finite);
    let lo = quantile_sorted(&sorted, trim_q);
    let hi = quantile_sorted(&sorted, 1.0 - trim_q);
    if !(hi > lo) {
        return Err(TmoError::Degenerate("central range of pair statistics is empty".into()));
    }
    let inside = sorted.iter().filter(|&&v| v >= lo && v <= hi).count();
    if inside < MIN_BINNED_STATS {
        return Err(TmoError::invalid(
            Module::NullThreshold,
            format!("need at least {MIN_BINNED_STATS} statistics in the central range, got {inside}"),
        ));
    }
    let bins = (inside / 20).clamp(10, 20);
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|b| lo + width * b as f64).collect();
    let total = finite.len() as f64;
    let mut counts = vec![0usize; bins];
    for &v in sorted.iter().filter(|&&v| v >= lo && v <= hi) {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let per_unit = match fit {
        BinFit::Mass => 1.0,
        BinFit::Density => 1.0 / width,
    };
    let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / total * per_unit).collect();
    let objective = |log_v: f64| -> f64 {
        let sd = log_v.exp().sqrt();
        let diffs = (0..bins).map(|b| {
            let model = (norm_cdf(edges[b + 1] / sd) - norm_cdf(edges[b] / sd)) * per_unit;
            (model - empirical[b]).abs()
        });
        match distance {
            BinDistance::L1 => diffs.sum(),
            BinDistance::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
            BinDistance::Linf => diffs.fold(0.0, f64::max),
        }
    };
    let (a, b) = (V_LO.ln(), V_HI.ln());
    let coarse = 2000;
    let step = (b - a) / coarse as f64;
    let mut best = 0;
    let mut best_val = f64::INFINITY;
    for k in 0..=coarse {
        let val = objective(a + step * k as f64);
        if val < best_val {
            best_val = val;
            best = k;
        }
    }
    if best == 0 || best == coarse {
        return Err(TmoError::SearchBound(if best == 0 { V_LO } else { V_HI }));
    }
    let log_v = golden_section(&objective, a + step * (best - 1) as f64, a + step * (best + 1) as f64, 1e-6);
    Ok(NullModel::new(log_v.exp(), NullMethod::Binned, scale))
}

fn golden_section(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Fraction of finite statistics with |stat| ≥ δ.
pub fn empirical_right_cdf(stats: &[f64], delta: f64) -> f64 {
    let mut total = 0usize;
    let mut hit = 0usize;
    for v in stats.iter().filter(|v| v.is_finite()) {
        total += 1;
        hit += (v.abs() >= delta) as usize;
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdStatus {
    Selected,
    /// Q̂ never exceeds zero; δ* sits above every statistic.
    NoneRetained,
    Override,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdChoice {
    /// On the statistic's own scale.
    pub delta_star: f64,
    /// δ* expressed as a correlation.
    pub delta_star_rho: f64,
    pub q_max: f64,
    pub q_curve: Vec<(f64, f64)>,
    pub bonferroni_delta: f64,
    pub bonferroni_rho: f64,
    pub kept_fraction: f64,
    pub p0: f64,
    pub status: ThresholdStatus,
    pub scale: Scale,
}

fn to_rho(x: f64, scale: Scale) -> f64 {
    match scale {
        Scale::Raw => x,
        Scale::Fisher => x.tanh(),
    }
}

/// Sorted absolute values of the finite statistics.
fn sorted_abs(stats: &[f64]) -> Vec<f64> {
    let mut a: Vec<f64> = stats.iter().filter(|v| v.is_finite()).map(|v| v.abs()).collect();
    a.sort_by(f64::total_cmp);
    a
}

/// Q̂(δ) = F̂(δ) − 2·F₀⁺(δ) for a batch of δ values against sorted |stats|.
fn q_values(abs_sorted: &[f64], null: &NullModel, deltas: &[f64]) -> Vec<f64> {
    let m = abs_sorted.len() as f64;
    deltas
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .map(|&d| {
                    let below = abs_sorted.partition_point(|&a| a < d);
                    (abs_sorted.len() - below) as f64 / m - 2.0 * null.right_cdf(d)
                })
                .collect::<Vec<f64>>()
        })
        .collect::<Vec<_>>()
        .concat()
}

/// Maximize Q̂ over every distinct observed |stat| and a 512-point grid on
/// (0, max|stat|], breaking ties toward the smallest δ.
pub fn choose_threshold(stats: &[f64], null: &NullModel, n_units: usize) -> Result<ThresholdChoice> {
    let abs_sorted = sorted_abs(stats);
    if abs_sorted.is_empty() {
        return Err(TmoError::invalid(Module::NullThreshold, "no finite pair statistics"));
    }
    if n_units < 2 {
        return Err(TmoError::TooFewUnits(n_units));
    }
    let max_abs = *abs_sorted.last().unwrap();
    let mut observed = abs_sorted.clone();
    observed.dedup();
    let grid: Vec<f64> = (1..=GRID_POINTS).map(|g| max_abs * g as f64 / GRID_POINTS as f64).collect();
    let q_obs = q_values(&abs_sorted, null, &observed);
    let q_grid = q_values(&abs_sorted, null, &grid);

    let mut best = (f64::INFINITY, f64::NEG_INFINITY);
    for (&d, &q) in observed.iter().zip(&q_obs).chain(grid.iter().zip(&q_grid)) {
        if q > best.1 || (q == best.1 && d < best.0) {
            best = (d, q);
        }
    }
    let (mut delta_star, q_max) = best;
    let mut status = ThresholdStatus::Selected;
    if !(q_max > 0.0) {
        delta_star = max_abs.next_up().max(f64::MIN_POSITIVE);
        status = ThresholdStatus::NoneRetained;
    }
    let mut q_curve: Vec<(f64, f64)> = grid.into_iter().zip(q_grid).collect();
    if status == ThresholdStatus::Selected {
        let pos = q_curve.partition_point(|p| p.0 < delta_star);
        if q_curve.get(pos).map(|p| p.0) != Some(delta_star) {
            q_curve.insert(pos, (delta_star, q_max));
        }
    }
    let nn = n_units as f64;
    let bonferroni_delta = null.sd() * norm_isf(0.05 / (nn * nn));
    let scale = null.scale;
    Ok(ThresholdChoice {
        delta_star,
        delta_star_rho: to_rho(delta_star, scale),
        q_max,
        q_curve,
        bonferroni_delta,
        bonferroni_rho: to_rho(bonferroni_delta, scale),
        kept_fraction: empirical_right_cdf(stats, delta_star),
        p0: 1.0,
        status,
        scale,
    })
}

impl ThresholdChoice {
    /// Replace δ* by a user-supplied value, keeping the curve for diagnostics.
    pub fn with_override(mut self, stats: &[f64], delta: f64) -> Result<ThresholdChoice> {
        if !(delta > 0.0) {
            return Err(TmoError::invalid(Module::NullThreshold, "threshold override must be positive"));
        }
        self.delta_star = delta;
        self.delta_star_rho = to_rho(delta, self.scale);
        self.kept_fraction = empirical_right_cdf(stats, delta);
        self.status = ThresholdStatus::Override;
        Ok(self)
    }
}
