use serde::Serialize;

use crate::error::Result;
use crate::null_threshold::{NullModel, ThresholdStatus};
use crate::pipeline::{threshold_without_outcomes, PipelineOptions, PipelineOutput};
use crate::simulation::keyed_rng;
use crate::stats::{norm_cdf, quantile_sorted, sorted_copy};
use crate::variance::NeverThreshold;

pub const HISTOGRAM_BINS: usize = 100;
pub const RESAMPLE_DROP: f64 = 0.05;
pub const RESAMPLE_FLAG_RANGE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    /// `bins + 1` edges over the observed range.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Equal-width histogram of the finite values; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Histogram {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() || bins == 0 {
        return Histogram { edges: Vec::new(), counts: Vec::new() };
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let edges = (0..=bins).map(|k| if k == bins { lo + width * bins as f64 } else { lo + width * k as f64 }).collect();
    let mut counts = vec![0usize; bins];
    for v in finite {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    Histogram { edges, counts }
}

/// Largest gap between the empirical CDF and the fitted null CDF over
/// observed values inside the interquartile range.
pub fn central_fit_score(stats: &[f64], null: &NullModel) -> f64 {
    let finite: Vec<f64> = stats.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return f64::NAN;
    }
    let sorted = sorted_copy(&finite);
    let (q1, q3) = (quantile_sorted(&sorted, 0.25), quantile_sorted(&sorted, 0.75));
    let m = sorted.len() as f64;
    let sd = null.sd();
    let mut worst: f64 = 0.0;
    for (k, &x) in sorted.iter().enumerate() {
        if x < q1 || x > q3 {
            continue;
        }
        let f0 = norm_cdf(x / sd);
        worst = worst.max((k as f64 / m - f0).abs()).max(((k + 1) as f64 / m - f0).abs());
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResampleCheck {
    pub resamples: usize,
    pub outcomes_dropped: usize,
    pub delta_stars: Vec<f64>,
    pub range: f64,
    /// Set when δ* moves by more than the tolerance across resamples.
    pub unstable: bool,
}

/// Recompute δ* after dropping a random 5% of the auxiliary outcomes.
pub fn resample_stability(
    out: &PipelineOutput,
    opts: &PipelineOptions,
    never: &NeverThreshold,
    resamples: usize,
    seed: u64,
) -> Result<ResampleCheck> {
    use rand::seq::SliceRandom;
    let d = out.residuals.n_aux();
    let drop = ((d as f64 * RESAMPLE_DROP).ceil() as usize).clamp(1, d.saturating_sub(2));
    let mut delta_stars = Vec::with_capacity(resamples);
    for r in 0..resamples {
        let mut rng = keyed_rng(seed, r as u64, 0, 0);
        let mut idx: Vec<usize> = (0..d).collect();
        idx.shuffle(&mut rng);
        let mut keep = idx[drop..].to_vec();
        keep.sort_unstable();
        let tc = threshold_without_outcomes(&out.residuals, &keep, opts, never)?;
        delta_stars.push(tc.delta_star);
    }
    let lo = delta_stars.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = delta_stars.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = if delta_stars.is_empty() { 0.0 } else { hi - lo };
    Ok(ResampleCheck { resamples, outcomes_dropped: drop, delta_stars, range, unstable: range > RESAMPLE_FLAG_RANGE })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub histogram: Histogram,
    pub null: NullModel,
    pub null_sd: f64,
    pub q_curve: Vec<(f64, f64)>,
    pub delta_star: f64,
    pub delta_star_rho: f64,
    pub q_max: f64,
    pub bonferroni_delta: f64,
    pub bonferroni_rho: f64,
    pub kept_fraction: f64,
    pub status: ThresholdStatus,
    pub central_fit_score: f64,
    /// Absent when pair statistics were supplied from a file.
    pub resampling: Option<ResampleCheck>,
}

pub fn diagnostics(out: &PipelineOutput, resampling: Option<ResampleCheck>) -> Diagnostics {
    let tc = &out.threshold;
    Diagnostics {
        histogram: histogram(&out.candidate_stats, HISTOGRAM_BINS),
        null: out.null,
        null_sd: out.null.sd(),
        q_curve: tc.q_curve.clone(),
        delta_star: tc.delta_star,
        delta_star_rho: tc.delta_star_rho,
        q_max: tc.q_max,
        bonferroni_delta: tc.bonferroni_delta,
        bonferroni_rho: tc.bonferroni_rho,
        kept_fraction: tc.kept_fraction,
        status: tc.status,
        central_fit_score: central_fit_score(&out.candidate_stats, &out.null),
        resampling,
    }
}
