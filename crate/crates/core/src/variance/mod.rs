//! Sandwich variances built from a set of retained unit pairs.
//!
//! Every estimator here reduces to S⁻²·(Σ_i g_i² + Σ_kept 2·k_ii'·g_i·g_i'),
//! with g the unit scores and k a pair weight (1 except under a Bartlett
//! kernel). Sharing one reduction routine makes the identities between
//! estimators hold bit-for-bit.

mod distance;
mod report;

pub use distance::{haversine_miles, Kernel, EARTH_RADIUS_MILES};
pub use report::{compare_methods, BaselineSpec, CompareConfig, Method, MethodResult, VarianceReport};

use rayon::prelude::*;
use serde::Serialize;

use crate::correlation::PairCorrelations;
use crate::dataset_io::Coord;
use crate::error::{Module, Result, TmoError};
use crate::regression::ResidualPanel;

const REDUCE_CHUNK: usize = 1 << 14;
const ROW_BLOCK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PairSource {
    Threshold,
    Cluster,
    Distance,
    Forced,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KeptPair {
    pub i: usize,
    pub j: usize,
    pub source: PairSource,
    pub weight: f64,
}

/// Off-diagonal pairs entering the sandwich, sorted by (i, j) with i < j.
#[derive(Debug, Clone, PartialEq)]
pub struct KeepSet {
    pub n: usize,
    pub pairs: Vec<KeptPair>,
    /// Pairs outside the never-threshold set with a finite statistic.
    pub n_candidates: usize,
    pub n_threshold: usize,
    pub n_never: usize,
}

impl KeepSet {
    pub fn empty(n: usize) -> Self {
        KeepSet { n, pairs: Vec::new(), n_candidates: 0, n_threshold: 0, n_never: 0 }
    }

    /// Keep exactly the given pairs with unit weight.
    pub fn forced(n: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut v = Vec::with_capacity(pairs.len());
        for &(a, b) in pairs {
            let (i, j) = (a.min(b), a.max(b));
            if i == j || j >= n {
                return Err(TmoError::invalid(Module::Variance, format!("invalid forced pair ({a}, {b})")));
            }
            v.push(KeptPair { i, j, source: PairSource::Forced, weight: 1.0 });
        }
        v.sort_by_key(|p| (p.i, p.j));
        v.dedup_by_key(|p| (p.i, p.j));
        let n_never = v.len();
        Ok(KeepSet { n, pairs: v, n_candidates: 0, n_threshold: 0, n_never })
    }

    /// All pairs of units sharing a cluster label.
    pub fn same_cluster(clusters: &[usize]) -> Self {
        let nt = NeverThreshold { clusters: Some(clusters.to_vec()), distance: None };
        let n = clusters.len();
        let pairs = rows_par(n, |i, out| {
            for j in i + 1..n {
                if let Some((source, weight)) = nt.classify(i, j) {
                    out.push(KeptPair { i, j, source, weight });
                }
            }
        });
        let n_never = pairs.len();
        KeepSet { n, pairs, n_candidates: 0, n_threshold: 0, n_never }
    }

    /// Share of candidate pairs retained by the threshold.
    pub fn kept_fraction(&self) -> f64 {
        if self.n_candidates == 0 {
            0.0
        } else {
            self.n_threshold as f64 / self.n_candidates as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceSpec {
    pub coords: Vec<Coord>,
    pub bandwidth_miles: f64,
    pub kernel: Kernel,
}

impl DistanceSpec {
    pub fn new(coords: Vec<Coord>, bandwidth_miles: f64, kernel: Kernel) -> Result<Self> {
        if !(bandwidth_miles > 0.0) {
            return Err(TmoError::invalid(Module::Variance, "bandwidth must be positive"));
        }
        distance::validate_coords(&coords)?;
        Ok(DistanceSpec { coords, bandwidth_miles, kernel })
    }

    fn weight(&self, i: usize, j: usize) -> f64 {
        let d = haversine_miles(self.coords[i], self.coords[j]);
        self.kernel.weight(d / self.bandwidth_miles)
    }
}

/// The set C of pairs exempt from thresholding: same-cluster pairs and pairs
/// with positive distance-kernel weight.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NeverThreshold {
    pub clusters: Option<Vec<usize>>,
    pub distance: Option<DistanceSpec>,
}

impl NeverThreshold {
    pub fn is_empty(&self) -> bool {
        self.clusters.is_none() && self.distance.is_none()
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.clusters.as_ref().is_some_and(|c| c.len() != n) {
            return Err(TmoError::invalid(Module::Variance, "cluster labels do not match unit count"));
        }
        if self.distance.as_ref().is_some_and(|d| d.coords.len() != n) {
            return Err(TmoError::invalid(Module::Variance, "coordinates do not match unit count"));
        }
        Ok(())
    }

    /// Source and weight if (i, j) belongs to C.
    pub fn classify(&self, i: usize, j: usize) -> Option<(PairSource, f64)> {
        if let Some(c) = &self.clusters {
            if c[i] == c[j] {
                return Some((PairSource::Cluster, 1.0));
            }
        }
        if let Some(d) = &self.distance {
            let w = d.weight(i, j);
            if w > 0.0 {
                return Some((PairSource::Distance, w));
            }
        }
        None
    }

    /// Pair statistics of `pc` for pairs outside C, in triangular order.
    pub fn candidate_stats(&self, pc: &PairCorrelations) -> Result<Vec<f64>> {
        self.check(pc.n)?;
        let stats = pc.stats();
        let n = pc.n;
        Ok(rows_par(n, |i, out| {
            for j in i + 1..n {
                if self.classify(i, j).is_none() {
                    let s = stats[pc.index(i, j)];
                    if s.is_finite() {
                        out.push(s);
                    }
                }
            }
        }))
    }
}

/// Run `f(i, out)` for every row in fixed-size blocks and concatenate in row order.
fn rows_par<T: Send>(n: usize, f: impl Fn(usize, &mut Vec<T>) + Sync) -> Vec<T> {
    (0..n.div_ceil(ROW_BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut out = Vec::new();
            for i in b * ROW_BLOCK..((b + 1) * ROW_BLOCK).min(n) {
                f(i, &mut out);
            }
            out
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Keep C ∪ {(i, j) ∉ C : |stat| ≥ δ}. Pairs with a missing statistic are
/// never retained by the threshold.
pub fn build_keep_set(pc: &PairCorrelations, delta: f64, never: &NeverThreshold) -> Result<KeepSet> {
    never.check(pc.n)?;
    if delta.is_nan() {
        return Err(TmoError::invalid(Module::Variance, "threshold is NaN"));
    }
    let n = pc.n;
    let stats = pc.stats();
    let rows: Vec<(KeptPair, bool)> = rows_par(n, |i, out| {
        for j in i + 1..n {
            match never.classify(i, j) {
                Some((source, weight)) => out.push((KeptPair { i, j, source, weight }, false)),
                None => {
                    let s = stats[pc.index(i, j)];
                    if s.is_finite() {
                        let kept = s.abs() >= delta;
                        out.push((
                            KeptPair { i, j, source: PairSource::Threshold, weight: if kept { 1.0 } else { 0.0 } },
                            true,
                        ));
                    }
                }
            }
        }
    });
    let mut ks = KeepSet::empty(n);
    for (p, candidate) in rows {
        if candidate {
            ks.n_candidates += 1;
            if p.weight > 0.0 {
                ks.n_threshold += 1;
                ks.pairs.push(p);
            }
        } else {
            ks.n_never += 1;
            ks.pairs.push(p);
        }
    }
    Ok(ks)
}

/// Σ f(k) for k < len, summed sequentially within fixed-size chunks and then
/// across chunks in order, so the result does not depend on the worker count.
fn ordered_sum(len: usize, f: impl Fn(usize) -> f64 + Sync) -> f64 {
    let partial: Vec<f64> = (0..len.div_ceil(REDUCE_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut s = 0.0;
            for k in c * REDUCE_CHUNK..((c + 1) * REDUCE_CHUNK).min(len) {
                s += f(k);
            }
            s
        })
        .collect();
    partial.iter().sum()
}

/// Diagonal and kept-pair parts of the sandwich, before division by S².
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SandwichParts {
    pub diagonal: f64,
    pub off_diagonal: f64,
}

impl SandwichParts {
    pub fn variance(&self, s_n: f64) -> f64 {
        (self.diagonal + self.off_diagonal) / (s_n * s_n)
    }
}

pub fn sandwich_parts(scores: &[f64], pairs: &[KeptPair]) -> SandwichParts {
    let diagonal = ordered_sum(scores.len(), |i| scores[i] * scores[i]);
    let off_diagonal = ordered_sum(pairs.len(), |k| {
        let p = &pairs[k];
        2.0 * p.weight * scores[p.i] * scores[p.j]
    });
    SandwichParts { diagonal, off_diagonal }
}

/// Observation-level scores w̃·ε̂.
pub fn observation_scores(rp: &ResidualPanel) -> Vec<f64> {
    rp.w_tilde.iter().zip(rp.eps0.iter()).map(|(w, e)| w * e).collect()
}

/// TMO variance S⁻²[Σ_i g_i² + Σ_kept 2·g_i g_i'] on unit scores g.
pub fn sandwich_variance(rp: &ResidualPanel, ks: &KeepSet) -> Result<f64> {
    if ks.n != rp.n {
        return Err(TmoError::invalid(Module::Variance, "keep set and residuals disagree on unit count"));
    }
    check_s_n(rp)?;
    Ok(sandwich_parts(&rp.unit_scores(), &ks.pairs).variance(rp.s_n))
}

fn check_s_n(rp: &ResidualPanel) -> Result<()> {
    if !(rp.s_n > 0.0) {
        return Err(TmoError::numerical(Module::Variance, "S_n must be positive"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HcCorrection {
    #[default]
    Hc0,
    Hc1,
}

/// N/(N − k − 2) with N observations and k covariates besides intercept and treatment.
pub fn hc1_factor(rp: &ResidualPanel) -> Result<f64> {
    let n = rp.n_obs() as f64;
    let dof = n - rp.n_covariates as f64 - 2.0;
    if !(dof > 0.0) {
        return Err(TmoError::invalid(Module::Variance, "HC1 needs more observations than coefficients"));
    }
    Ok(n / dof)
}

/// Heteroskedasticity-robust variance over observations.
pub fn hc_variance(rp: &ResidualPanel, correction: HcCorrection) -> Result<f64> {
    check_s_n(rp)?;
    let v = sandwich_parts(&observation_scores(rp), &[]).variance(rp.s_n);
    Ok(match correction {
        HcCorrection::Hc0 => v,
        HcCorrection::Hc1 => v * hc1_factor(rp)?,
    })
}

/// Cluster-robust variance: the sandwich with every same-cluster pair kept.
///
/// With `small_sample`, multiplies by G/(G−1)·(N−1)/(N−K) where K = k + 2
/// counts all estimated coefficients.
pub fn cluster_variance(rp: &ResidualPanel, clusters: &[usize], small_sample: bool) -> Result<f64> {
    if clusters.len() != rp.n {
        return Err(TmoError::invalid(Module::Variance, "one cluster label per unit is required"));
    }
    let mut labels = clusters.to_vec();
    labels.sort_unstable();
    labels.dedup();
    let g = labels.len();
    if g < 2 {
        return Err(TmoError::invalid(Module::Variance, "cluster-robust variance needs at least two clusters"));
    }
    let v = sandwich_variance(rp, &KeepSet::same_cluster(clusters))?;
    if !small_sample {
        return Ok(v);
    }
    let n = rp.n_obs() as f64;
    let k = rp.n_covariates as f64 + 2.0;
    if !(n > k) {
        return Err(TmoError::invalid(Module::Variance, "small-sample factor needs N > K"));
    }
    let g = g as f64;
    Ok(v * g / (g - 1.0) * (n - 1.0) / (n - k))
}

/// Distance-kernel variance S⁻² Σ_i Σ_i' K(d_ii'/b)·g_i g_i'.
pub fn distance_kernel_variance(rp: &ResidualPanel, spec: &DistanceSpec) -> Result<f64> {
    let nt = NeverThreshold { clusters: None, distance: Some(spec.clone()) };
    nt.check(rp.n)?;
    let n = rp.n;
    let pairs = rows_par(n, |i, out| {
        for j in i + 1..n {
            if let Some((source, weight)) = nt.classify(i, j) {
                out.push(KeptPair { i, j, source, weight });
            }
        }
    });
    check_s_n(rp)?;
    Ok(sandwich_parts(&rp.unit_scores(), &pairs).variance(rp.s_n))
}

/// Projection-type variance (S⁻²/q) Σ_j (r_jᵀ g)² from caller-supplied
/// basis vectors r_j over units.
pub fn scpc_variance(rp: &ResidualPanel, basis: &[Vec<f64>]) -> Result<f64> {
    check_basis(rp, basis)?;
    let g = rp.unit_scores();
    let q = basis.len() as f64;
    let total: f64 = basis.iter().map(|r| r.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>().powi(2)).sum();
    Ok(total / q / (rp.s_n * rp.s_n))
}

/// The projection variance restricted to pairs outside the keep set and off
/// the diagonal, plus the TMO variance of `ks`.
pub fn scpc_augmented_variance(rp: &ResidualPanel, basis: &[Vec<f64>], ks: &KeepSet) -> Result<f64> {
    check_basis(rp, basis)?;
    let g = rp.unit_scores();
    let q = basis.len() as f64;
    let mut total = 0.0;
    for r in basis {
        let full: f64 = r.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>().powi(2);
        let diag: f64 = r.iter().zip(&g).map(|(a, b)| (a * b).powi(2)).sum();
        let kept: f64 = ks.pairs.iter().map(|p| 2.0 * r[p.i] * r[p.j] * g[p.i] * g[p.j]).sum();
        total += full - diag - kept;
    }
    Ok(total / q / (rp.s_n * rp.s_n) + sandwich_variance(rp, ks)?)
}

fn check_basis(rp: &ResidualPanel, basis: &[Vec<f64>]) -> Result<()> {
    check_s_n(rp)?;
    if basis.is_empty() || basis.iter().any(|r| r.len() != rp.n) {
        return Err(TmoError::invalid(Module::Variance, "basis vectors must be non-empty with one entry per unit"));
    }
    Ok(())
}
