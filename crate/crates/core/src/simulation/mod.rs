//! Calibrated Monte Carlo: block covariances from pair correlations, keyed
//! error draws, the estimator horse race and a proportional data generator.

mod config;
mod horserace;
mod proportional;

pub use config::{block_treatment, SigmaSource, SimulateConfig, TreatmentSource};
pub use horserace::{run_horserace, true_se, HorseRaceConfig, SimMethodResult, SimResult, AUX_DESIGN_LABEL, MIN_REPS};
pub use proportional::{generate_proportional, ProportionalDGP};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::correlation::PairCorrelations;
use crate::error::{Module, Result, TmoError};
use crate::warnings::Warning;

const PSD_TOL: f64 = 1e-8;

/// Generator keyed by (seed, replicate, outcome, block). Streams for distinct
/// keys are independent and do not depend on the order in which they are used.
pub fn keyed_rng(seed: u64, replicate: u64, outcome: u64, block: u64) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    for (k, v) in [seed, replicate, outcome, block].into_iter().enumerate() {
        key[8 * k..8 * k + 8].copy_from_slice(&v.to_le_bytes());
    }
    ChaCha20Rng::from_seed(key)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaBlock {
    pub id: usize,
    pub members: Vec<usize>,
    /// Row-major dense block, unit diagonal.
    pub values: Vec<Vec<f64>>,
}

impl SigmaBlock {
    pub fn matrix(&self) -> DMatrix<f64> {
        let k = self.members.len();
        DMatrix::from_fn(k, k, |a, b| self.values[a][b])
    }
}

/// Block-diagonal correlation matrix; units outside every block have unit
/// variance and no correlation.
///
/// Serialized as JSON `{n, cutoff, retained_pair_fraction, blocks: [{id, members, values}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedSigma {
    pub n: usize,
    pub cutoff: f64,
    pub retained_pair_fraction: f64,
    pub blocks: Vec<SigmaBlock>,
    #[serde(default)]
    pub warnings: Vec<Warning>,
}

impl CalibratedSigma {
    pub fn identity(n: usize) -> Self {
        CalibratedSigma { n, cutoff: f64::NAN, retained_pair_fraction: 0.0, blocks: Vec::new(), warnings: Vec::new() }
    }

    /// `n_blocks` consecutive blocks of `size` units with common correlation `rho`, then singletons up to `n`.
    pub fn equicorrelated_blocks(n: usize, n_blocks: usize, size: usize, rho: f64) -> Result<Self> {
        if n_blocks * size > n || size < 2 || !(-1.0 / (size as f64 - 1.0)..=1.0).contains(&rho) {
            return Err(TmoError::invalid(Module::Simulation, "infeasible block specification"));
        }
        let blocks = (0..n_blocks)
            .map(|b| SigmaBlock {
                id: b,
                members: (b * size..(b + 1) * size).collect(),
                values: (0..size).map(|a| (0..size).map(|c| if a == c { 1.0 } else { rho }).collect()).collect(),
            })
            .collect();
        Ok(CalibratedSigma { n, cutoff: f64::NAN, retained_pair_fraction: 1.0, blocks, warnings: Vec::new() })
    }

    /// Block id per unit.
    pub fn cluster_assignment(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.n];
        for b in &self.blocks {
            for &m in &b.members {
                out[m] = Some(b.id);
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut s = DMatrix::identity(self.n, self.n);
        for b in &self.blocks {
            for (a, &i) in b.members.iter().enumerate() {
                for (c, &j) in b.members.iter().enumerate() {
                    s[(i, j)] = b.values[a][c];
                }
            }
        }
        s
    }

    /// Smallest eigenvalue over all blocks (1 when there are none).
    pub fn min_eigenvalue(&self) -> f64 {
        self.blocks.iter().map(|b| SymmetricEigen::new(b.matrix()).eigenvalues.min()).fold(1.0, f64::min)
    }

    /// wᵀΣw.
    pub fn quadratic_form(&self, w: &[f64]) -> f64 {
        let mut in_block = vec![false; self.n];
        let mut q = 0.0;
        for b in &self.blocks {
            for (a, &i) in b.members.iter().enumerate() {
                in_block[i] = true;
                for (c, &j) in b.members.iter().enumerate() {
                    q += w[i] * b.values[a][c] * w[j];
                }
            }
        }
        q + (0..self.n).filter(|&i| !in_block[i]).map(|i| w[i] * w[i]).sum::<f64>()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sigma serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: CalibratedSigma = serde_json::from_str(text)
            .map_err(|e| TmoError::Malformed { path: "<sigma>".into(), message: e.to_string() })?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.n];
        for b in &self.blocks {
            let k = b.members.len();
            if b.values.len() != k || b.values.iter().any(|r| r.len() != k) {
                return Err(TmoError::invalid(Module::Simulation, format!("block {} is not square", b.id)));
            }
            for &m in &b.members {
                if m >= self.n || std::mem::replace(&mut seen[m], true) {
                    return Err(TmoError::invalid(
                        Module::Simulation,
                        format!("unit {m} is out of range or in two blocks"),
                    ));
                }
            }
            for a in 0..k {
                for c in 0..k {
                    if !b.values[a][c].is_finite() || b.values[a][c] != b.values[c][a] {
                        return Err(TmoError::invalid(Module::Simulation, format!("block {} is not symmetric", b.id)));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Replace a symmetric matrix by its eigenvalue-clipped version, rescaled to unit diagonal.
fn clip_to_correlation(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    let d: Vec<f64> = (0..m.nrows()).map(|i| rebuilt[(i, i)].max(f64::MIN_POSITIVE).sqrt()).collect();
    let mut out = DMatrix::from_fn(m.nrows(), m.ncols(), |a, b| rebuilt[(a, b)] / (d[a] * d[b]));
    for a in 0..m.nrows() {
        out[(a, a)] = 1.0;
        for b in 0..a {
            let v = 0.5 * (out[(a, b)] + out[(b, a)]);
            out[(a, b)] = v;
            out[(b, a)] = v;
        }
    }
    out
}

/// Greedy block calibration.
///
/// Links are pairs with |ρ̂| ≥ cutoff. Repeatedly take the unassigned unit
/// with the most links to other unassigned units (ties to the lowest index);
/// it and its unassigned linked neighbours form a block with σ = ρ̂ inside.
/// Stops when no links remain among unassigned units. Blocks that are not
/// positive semi-definite are repaired by eigenvalue clipping, with a warning.
pub fn calibrate_sigma(pc: &PairCorrelations, cutoff: f64) -> Result<CalibratedSigma> {
    if !(cutoff > 0.0 && cutoff < 1.0) {
        return Err(TmoError::invalid(Module::Simulation, "cutoff must lie in (0, 1)"));
    }
    let n = pc.n;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut n_links = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            let r = pc.rho[pc.index(i, j)];
            if r.is_finite() && r.abs() >= cutoff {
                adj[i].push(j);
                adj[j].push(i);
                n_links += 1;
            }
        }
    }
    let mut assigned = vec![false; n];
    let mut degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut blocks = Vec::new();
    let mut warnings = Vec::new();
    let mut retained = 0usize;
    let next_center = |assigned: &[bool], degree: &[usize]| {
        (0..n).filter(|&i| !assigned[i] && degree[i] > 0).max_by(|&a, &b| degree[a].cmp(&degree[b]).then(b.cmp(&a)))
    };
    while let Some(center) = next_center(&assigned, &degree) {
        let mut members: Vec<usize> = adj[center].iter().copied().filter(|&j| !assigned[j]).collect();
        members.push(center);
        members.sort_unstable();
        for &m in &members {
            assigned[m] = true;
        }
        for &m in &members {
            for &nb in &adj[m] {
                if !assigned[nb] {
                    degree[nb] -= 1;
                }
            }
            degree[m] = 0;
        }
        let k = members.len();
        let mut mat = DMatrix::identity(k, k);
        for a in 0..k {
            for b in a + 1..k {
                let r = pc.rho[pc.index(members[a], members[b])];
                let r = if r.is_finite() { r } else { 0.0 };
                mat[(a, b)] = r;
                mat[(b, a)] = r;
                retained += (r.abs() >= cutoff) as usize;
            }
        }
        let id = blocks.len();
        if SymmetricEigen::new(mat.clone()).eigenvalues.min() < -PSD_TOL {
            warnings.push(Warning::new(
                Module::Simulation,
                "psd_repair",
                format!("block {id} was not positive semi-definite; eigenvalues clipped at zero"),
            ));
            mat = clip_to_correlation(&mat);
        }
        let values = (0..k).map(|a| (0..k).map(|b| mat[(a, b)]).collect()).collect();
        blocks.push(SigmaBlock { id, members, values });
    }
    let retained_pair_fraction = if n_links == 0 { 0.0 } else { retained as f64 / n_links as f64 };
    Ok(CalibratedSigma { n, cutoff, retained_pair_fraction, blocks, warnings })
}

/// Lower-triangular factors of each block, ready for sampling.
#[derive(Debug, Clone)]
pub struct FactoredSigma {
    pub n: usize,
    blocks: Vec<(Vec<usize>, DMatrix<f64>)>,
    singletons: Vec<usize>,
    pub warnings: Vec<Warning>,
}

/// Cholesky with diagonal jitter up to `max_jitter`.
pub(crate) fn cholesky_with_jitter(m: &DMatrix<f64>, max_jitter: f64) -> Option<DMatrix<f64>> {
    let mut jitter = 0.0;
    loop {
        let shifted = m + DMatrix::identity(m.nrows(), m.ncols()) * jitter;
        if let Some(c) = shifted.cholesky() {
            return Some(c.l());
        }
        jitter = if jitter == 0.0 { 1e-14 } else { jitter * 10.0 };
        if jitter > max_jitter * 1.000_001 {
            return None;
        }
    }
}

impl FactoredSigma {
    pub fn new(sigma: &CalibratedSigma) -> Result<Self> {
        sigma.validate()?;
        let mut warnings = Vec::new();
        let mut blocks = Vec::with_capacity(sigma.blocks.len());
        let mut in_block = vec![false; sigma.n];
        for b in &sigma.blocks {
            let mut m = b.matrix();
            if SymmetricEigen::new(m.clone()).eigenvalues.min() < -PSD_TOL {
                warnings.push(Warning::new(
                    Module::Simulation,
                    "eigenvalues_clipped",
                    format!("block {} has negative eigenvalues; clipped at zero", b.id),
                ));
                m = clip_to_correlation(&m);
            }
            let l = cholesky_with_jitter(&m, PSD_TOL).ok_or_else(|| {
                TmoError::numerical(Module::Simulation, format!("block {} could not be factorized", b.id))
            })?;
            for &i in &b.members {
                in_block[i] = true;
            }
            blocks.push((b.members.clone(), l));
        }
        let singletons = (0..sigma.n).filter(|&i| !in_block[i]).collect();
        Ok(FactoredSigma { n: sigma.n, blocks, singletons, warnings })
    }

    /// One draw from N(0, Σ). Block b uses the stream keyed by block b + 1;
    /// all singletons share the stream keyed by block 0.
    pub fn draw(&self, seed: u64, replicate: u64, outcome: u64) -> Vec<f64> {
        let mut eps = vec![0.0; self.n];
        let mut rng = keyed_rng(seed, replicate, outcome, 0);
        for &i in &self.singletons {
            eps[i] = StandardNormal.sample(&mut rng);
        }
        for (b, (members, l)) in self.blocks.iter().enumerate() {
            let mut rng = keyed_rng(seed, replicate, outcome, b as u64 + 1);
            let z = DVector::from_fn(members.len(), |_, _| StandardNormal.sample(&mut rng));
            let x = l * z;
            for (a, &i) in members.iter().enumerate() {
                eps[i] = x[a];
            }
        }
        eps
    }
}

/// Draw ε ~ N(0, Σ) for one replicate.
pub fn draw_errors(sigma: &CalibratedSigma, seed: u64, replicate: u64) -> Result<Vec<f64>> {
    Ok(FactoredSigma::new(sigma)?.draw(seed, replicate, 0))
}
