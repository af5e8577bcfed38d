//! Normalized residuals and pairwise cross-outcome correlations between units.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Module, Result, TmoError};
use crate::regression::ResidualPanel;
use crate::warnings::Warning;

const FISHER_CLAMP: f64 = 1.0 - 1e-12;
const ROW_BLOCK: usize = 64;
const BINARY_MAGIC: &[u8; 8] = b"TMOPAIR1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Raw,
    #[default]
    Fisher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    /// One slot per auxiliary outcome; requires a single period.
    #[default]
    CrossSection,
    /// Every outcome-period combination is a separate slot.
    PanelPooled,
}

/// Auxiliary residuals scaled to unit mean square per outcome.
#[derive(Debug, Clone)]
pub struct NormalizedResiduals {
    pub n: usize,
    pub t: usize,
    /// `(n·t) × d`, unit-major rows.
    pub values: DMatrix<f64>,
    pub names: Vec<String>,
    pub warnings: Vec<Warning>,
}

/// Divide each auxiliary residual column by the root of its mean square.
/// Columns with zero residual variance are dropped with a warning.
pub fn normalize_residuals(rp: &ResidualPanel) -> Result<NormalizedResiduals> {
    normalize_columns(&rp.eps_aux, rp.n, rp.t, &rp.aux_names)
}

pub fn normalize_columns(eps: &DMatrix<f64>, n: usize, t: usize, names: &[String]) -> Result<NormalizedResiduals> {
    let nt = eps.nrows();
    if nt != n * t {
        return Err(TmoError::invalid(Module::Correlation, "residual rows differ from n·t"));
    }
    let mut warnings = Vec::new();
    let mut cols = Vec::new();
    let mut kept = Vec::new();
    for j in 0..eps.ncols() {
        let col = eps.column(j);
        let gamma = col.iter().map(|e| e * e).sum::<f64>() / nt as f64;
        let label = names.get(j).cloned().unwrap_or_else(|| format!("aux{}", j + 1));
        if !(gamma > 0.0) || !gamma.is_finite() {
            warnings.push(Warning::new(
                Module::Correlation,
                "zero_residual_variance",
                format!("auxiliary outcome `{label}` has zero residual variance; dropped"),
            ));
            continue;
        }
        let sd = gamma.sqrt();
        cols.push(col.map(|e| e / sd));
        kept.push(label);
    }
    if cols.len() < 2 {
        return Err(TmoError::TooFewOutcomes(cols.len()));
    }
    Ok(NormalizedResiduals { n, t, values: DMatrix::from_columns(&cols), names: kept, warnings })
}

/// Upper-triangular table of pair statistics. Pair (i, j) with i < j is
/// stored at [`PairCorrelations::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct PairCorrelations {
    pub n: usize,
    pub lambda: Vec<f64>,
    pub rho: Vec<f64>,
    pub rho_fisher: Vec<f64>,
    pub diag_lambda: Vec<f64>,
    pub scale: Scale,
    /// Units with λ̂_ii = 0; their pairs hold NaN and are ignored downstream.
    pub missing_units: Vec<usize>,
    pub warnings: Vec<Warning>,
}

impl PairCorrelations {
    /// Table from upper-triangle correlations in pair order; λ̂ is taken equal to ρ̂.
    pub fn from_rho(n: usize, rho: Vec<f64>, scale: Scale) -> Result<Self> {
        if rho.len() != n * n.saturating_sub(1) / 2 {
            return Err(TmoError::invalid(Module::Correlation, "correlation vector length is not n(n-1)/2"));
        }
        let rho_fisher = rho.iter().map(|&r| fisher_transform(r).0).collect();
        Ok(PairCorrelations {
            n,
            lambda: rho.clone(),
            rho,
            rho_fisher,
            diag_lambda: vec![1.0; n],
            scale,
            missing_units: Vec::new(),
            warnings: Vec::new(),
        })
    }

    pub fn n_pairs(&self) -> usize {
        self.n * (self.n - 1) / 2
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        pair_index(self.n, i, j)
    }

    /// The series that drives thresholding.
    pub fn stats(&self) -> &[f64] {
        match self.scale {
            Scale::Raw => &self.rho,
            Scale::Fisher => &self.rho_fisher,
        }
    }

    pub fn with_scale(mut self, scale: Scale) -> Self {
        self.scale = scale;
        self
    }

    /// Finite pair statistics on the active scale.
    pub fn finite_stats(&self) -> Vec<f64> {
        self.stats().iter().copied().filter(|v| v.is_finite()).collect()
    }

    /// (i, j) for triangular index `k`, by walking row offsets.
    pub fn pair_of(&self, k: usize) -> (usize, usize) {
        let n = self.n;
        let mut i = 0;
        let mut start = 0;
        while start + (n - i - 1) <= k {
            start += n - i - 1;
            i += 1;
        }
        (i, i + 1 + (k - start))
    }

    /// Write `i,i',lambda,rho,rho_fisher` rows, diagonal rows included.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| TmoError::io(path.display().to_string(), e))?;
        let mut out = BufWriter::new(file);
        let io = |e| TmoError::io(path.display().to_string(), e);
        writeln!(out, "i,i',lambda,rho,rho_fisher").map_err(io)?;
        for i in 0..self.n {
            let d = self.diag_lambda[i];
            let (r, f) = if d > 0.0 { (1.0, f64::INFINITY) } else { (f64::NAN, f64::NAN) };
            writeln!(out, "{i},{i},{d},{r},{f}").map_err(io)?;
            for j in i + 1..self.n {
                let k = self.index(i, j);
                writeln!(out, "{i},{j},{},{},{}", self.lambda[k], self.rho[k], self.rho_fisher[k]).map_err(io)?;
            }
        }
        out.flush().map_err(io)
    }

    pub fn read_csv(path: &Path, scale: Scale) -> Result<PairCorrelations> {
        let file = std::fs::File::open(path).map_err(|e| TmoError::io(path.display().to_string(), e))?;
        let malformed = |line: usize, msg: &str| TmoError::Malformed {
            path: path.display().to_string(),
            message: format!("line {line}: {msg}"),
        };
        let mut rows: Vec<(usize, usize, [f64; 3])> = Vec::new();
        for (ln, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| TmoError::io(path.display().to_string(), e))?;
            if ln == 0 {
                if line.trim() != "i,i',lambda,rho,rho_fisher" {
                    return Err(malformed(1, "unexpected header"));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(malformed(ln + 1, "expected 5 fields"));
            }
            let idx = |s: &str| s.trim().parse::<usize>().map_err(|_| malformed(ln + 1, "bad unit index"));
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| malformed(ln + 1, "bad number"));
            rows.push((idx(f[0])?, idx(f[1])?, [num(f[2])?, num(f[3])?, num(f[4])?]));
        }
        let n = rows.iter().map(|r| r.0.max(r.1) + 1).max().unwrap_or(0);
        if n < 3 {
            return Err(TmoError::TooFewUnits(n));
        }
        let m = n * (n - 1) / 2;
        let mut pc = PairCorrelations {
            n,
            lambda: vec![f64::NAN; m],
            rho: vec![f64::NAN; m],
            rho_fisher: vec![f64::NAN; m],
            diag_lambda: vec![f64::NAN; n],
            scale,
            missing_units: Vec::new(),
            warnings: Vec::new(),
        };
        let mut seen = vec![false; m + n];
        for (i, j, v) in rows {
            let (a, b) = (i.min(j), i.max(j));
            let slot = if a == b { m + a } else { pair_index(n, a, b) };
            if std::mem::replace(&mut seen[slot], true) {
                return Err(malformed(0, &format!("duplicate pair ({a},{b})")));
            }
            if a == b {
                pc.diag_lambda[a] = v[0];
            } else {
                pc.lambda[slot] = v[0];
                pc.rho[slot] = v[1];
                pc.rho_fisher[slot] = v[2];
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(malformed(0, "pair table is incomplete"));
        }
        pc.missing_units = (0..n).filter(|&i| !(pc.diag_lambda[i] > 0.0)).collect();
        Ok(pc)
    }

    /// Little-endian binary: magic, n as u64, then diag, lambda, rho, rho_fisher as f64.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| TmoError::io(path.display().to_string(), e))?;
        let mut out = BufWriter::new(file);
        let io = |e| TmoError::io(path.display().to_string(), e);
        out.write_all(BINARY_MAGIC).map_err(io)?;
        out.write_all(&(self.n as u64).to_le_bytes()).map_err(io)?;
        for series in [&self.diag_lambda, &self.lambda, &self.rho, &self.rho_fisher] {
            for v in series.iter() {
                out.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        out.flush().map_err(io)
    }

    pub fn read_binary(path: &Path, scale: Scale) -> Result<PairCorrelations> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| TmoError::io(path.display().to_string(), e))?;
        let malformed = |msg: &str| TmoError::Malformed { path: path.display().to_string(), message: msg.into() };
        if bytes.len() < 16 || &bytes[..8] != BINARY_MAGIC {
            return Err(malformed("not a pair table"));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if n < 3 {
            return Err(TmoError::TooFewUnits(n));
        }
        let m = n * (n - 1) / 2;
        if bytes.len() != 16 + 8 * (n + 3 * m) {
            return Err(malformed("truncated pair table"));
        }
        let mut vals = bytes[16..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = |k: usize| (&mut vals).take(k).collect::<Vec<f64>>();
        let diag_lambda = take(n);
        let lambda = take(m);
        let rho = take(m);
        let rho_fisher = take(m);
        let missing_units = (0..n).filter(|&i| !(diag_lambda[i] > 0.0)).collect();
        Ok(PairCorrelations { n, lambda, rho, rho_fisher, diag_lambda, scale, missing_units, warnings: Vec::new() })
    }
}

#[inline]
pub fn pair_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

/// ½·ln((1+ρ)/(1−ρ)), with |ρ| clamped to 1 − 1e-12. The flag reports whether clamping occurred.
pub fn fisher_transform(rho: f64) -> (f64, bool) {
    let clamped = rho.clamp(-FISHER_CLAMP, FISHER_CLAMP);
    (clamped.atanh(), clamped != rho)
}

/// Arrange normalized residuals as units × slots.
fn slot_matrix(eps: &NormalizedResiduals, pooling: Pooling) -> Result<DMatrix<f64>> {
    let (n, t, d) = (eps.n, eps.t, eps.values.ncols());
    match pooling {
        Pooling::CrossSection if t != 1 => Err(TmoError::invalid(
            Module::Correlation,
            "cross-section pooling needs a single period; use panel pooling",
        )),
        _ if d * t < 2 => Err(TmoError::TooFewOutcomes(d * t)),
        // slot m = j·t + s
        _ => Ok(DMatrix::from_fn(n, d * t, |i, m| eps.values[(i * t + m % t, m / t)])),
    }
}

/// λ̂, ρ̂ and Fisher ρ̃ for all unit pairs.
///
/// λ̂_ii' = (1/D) Σ_m (ε̃_im − ε̄_i)(ε̃_i'm − ε̄_i') over the D outcome slots.
/// Row blocks are computed in parallel; the partition does not depend on the
/// worker count, so results are bitwise reproducible.
pub fn pairwise_correlations(eps: &NormalizedResiduals, pooling: Pooling, scale: Scale) -> Result<PairCorrelations> {
    let e = slot_matrix(eps, pooling)?;
    let (n, dd) = (e.nrows(), e.ncols());
    if n < 3 {
        return Err(TmoError::TooFewUnits(n));
    }
    let mut c = e;
    for i in 0..n {
        let mean = c.row(i).iter().sum::<f64>() / dd as f64;
        for m in 0..dd {
            c[(i, m)] -= mean;
        }
    }
    let inv_d = 1.0 / dd as f64;
    let diag_lambda: Vec<f64> = (0..n).map(|i| c.row(i).iter().map(|v| v * v).sum::<f64>() * inv_d).collect();
    let ct = c.transpose();

    let blocks: Vec<usize> = (0..n).step_by(ROW_BLOCK).collect();
    let lambda: Vec<f64> = blocks
        .par_iter()
        .map(|&a| {
            let b = (a + ROW_BLOCK).min(n);
            let prod = c.rows(a, b - a) * ct.columns(a, n - a);
            let mut out = Vec::new();
            for i in a..b {
                for j in i + 1..n {
                    out.push(prod[(i - a, j - a)] * inv_d);
                }
            }
            out
        })
        .collect::<Vec<_>>()
        .concat();

    let missing_units: Vec<usize> = (0..n).filter(|&i| !(diag_lambda[i] > 0.0)).collect();
    let mut warnings = eps.warnings.clone();
    if !missing_units.is_empty() {
        warnings.push(Warning::new(
            Module::Correlation,
            "zero_unit_variance",
            format!("units {missing_units:?} have constant residuals across outcomes; their pairs are excluded"),
        ));
    }
    let m = lambda.len();
    let mut rho = vec![0.0; m];
    let mut rho_fisher = vec![0.0; m];
    let mut n_clamped = 0usize;
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            let denom = (diag_lambda[i] * diag_lambda[j]).sqrt();
            if denom > 0.0 {
                let r = (lambda[k] / denom).clamp(-1.0, 1.0);
                let (f, clamped) = fisher_transform(r);
                rho[k] = r;
                rho_fisher[k] = f;
                n_clamped += clamped as usize;
            } else {
                rho[k] = f64::NAN;
                rho_fisher[k] = f64::NAN;
            }
            k += 1;
        }
    }
    if n_clamped > 0 {
        warnings.push(Warning::new(
            Module::Correlation,
            "fisher_clamped",
            format!("{n_clamped} pairs with |rho| = 1 were clamped before the Fisher transform"),
        ));
    }
    Ok(PairCorrelations { n, lambda, rho, rho_fisher, diag_lambda, scale, missing_units, warnings })
}
