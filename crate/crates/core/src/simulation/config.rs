//! TOML configuration for the `simulate` command.
//!
//! ```toml
//! reps = 500
//! seed = 7
//! d = 60
//! methods = ["hc0", "hc1", "tmo"]
//!
//! [sigma]
//! source = "blocks"      # blocks | file | identity
//! n = 500
//! n_blocks = 50
//! block_size = 5
//! rho = 0.6
//!
//! [treatment]
//! source = "block"       # block | iid | column
//! ```

use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;

use super::{keyed_rng, CalibratedSigma, HorseRaceConfig};
use crate::correlation::Scale;
use crate::error::{Module, Result, TmoError};
use crate::variance::Method;

/// Replicate index reserved for drawing synthetic treatments.
const TREATMENT_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum SigmaSource {
    Blocks {
        n: usize,
        n_blocks: usize,
        block_size: usize,
        rho: f64,
    },
    /// A block file written by `calibrate`.
    File {
        path: PathBuf,
    },
    Identity {
        n: usize,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum TreatmentSource {
    /// One N(0, 1) value shared by each block; independent values elsewhere.
    Block,
    Iid,
    /// Column of a delimited file with one row per unit, in unit order.
    Column {
        path: PathBuf,
        column: String,
    },
}

fn default_alpha() -> f64 {
    0.05
}

fn default_methods() -> Vec<String> {
    vec!["hc0".into(), "hc1".into(), "tmo".into()]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub reps: usize,
    pub seed: u64,
    #[serde(default)]
    pub d: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    pub sigma: SigmaSource,
    pub treatment: TreatmentSource,
    #[serde(default)]
    pub scale: Scale,
    #[serde(default)]
    pub threshold_override: Option<f64>,
    /// Use Σ blocks as clusters (units outside blocks form their own cluster).
    #[serde(default)]
    pub clusters_from_blocks: bool,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl SimulateConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text)
            .map_err(|e| TmoError::Malformed { path: "<simulate config>".into(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TmoError::io(path.display().to_string(), e))?;
        toml::from_str(&text)
            .map_err(|e| TmoError::Malformed { path: path.display().to_string(), message: e.to_string() })
    }

    pub fn parsed_methods(&self) -> Result<Vec<Method>> {
        self.methods
            .iter()
            .map(|s| {
                Method::parse(s).ok_or_else(|| TmoError::invalid(Module::Simulation, format!("unknown method `{s}`")))
            })
            .collect()
    }

    /// Σ, treatment and horse-race settings; relative paths are taken from `base`.
    pub fn build(&self, base: &Path) -> Result<(CalibratedSigma, Vec<f64>, HorseRaceConfig)> {
        let sigma = match &self.sigma {
            SigmaSource::Blocks { n, n_blocks, block_size, rho } => {
                CalibratedSigma::equicorrelated_blocks(*n, *n_blocks, *block_size, *rho)?
            }
            SigmaSource::File { path } => {
                let p = resolve(base, path);
                CalibratedSigma::from_json(
                    &std::fs::read_to_string(&p).map_err(|e| TmoError::io(p.display().to_string(), e))?,
                )?
            }
            SigmaSource::Identity { n } => CalibratedSigma::identity(*n),
        };
        let w = match &self.treatment {
            TreatmentSource::Block => block_treatment(&sigma, self.seed),
            TreatmentSource::Iid => {
                let mut rng = keyed_rng(self.seed, TREATMENT_STREAM, 0, 0);
                (0..sigma.n).map(|_| StandardNormal.sample(&mut rng)).collect()
            }
            TreatmentSource::Column { path, column } => read_column(&resolve(base, path), column, sigma.n)?,
        };
        let mut cfg = HorseRaceConfig::new(self.parsed_methods()?, self.reps, self.d, self.seed);
        cfg.alpha = self.alpha;
        cfg.pipeline.scale = self.scale;
        cfg.pipeline.threshold_override = self.threshold_override;
        if self.clusters_from_blocks {
            let assign = sigma.cluster_assignment();
            let nb = sigma.blocks.len();
            cfg.clusters = Some(assign.iter().enumerate().map(|(i, b)| b.unwrap_or(nb + i)).collect());
        }
        Ok((sigma, w, cfg))
    }
}

/// Treatment shared within blocks of Σ.
pub fn block_treatment(sigma: &CalibratedSigma, seed: u64) -> Vec<f64> {
    let mut rng = keyed_rng(seed, TREATMENT_STREAM, 0, 0);
    let draws: Vec<f64> = (0..sigma.n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut w = draws.clone();
    for b in &sigma.blocks {
        let shared = draws[b.members[0]];
        for &m in &b.members {
            w[m] = shared;
        }
    }
    w
}

fn read_column(path: &Path, column: &str, n: usize) -> Result<Vec<f64>> {
    let malformed = |m: String| TmoError::Malformed { path: path.display().to_string(), message: m };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| malformed(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| malformed(e.to_string()))?.clone();
    let idx = headers.iter().position(|h| h == column).ok_or_else(|| TmoError::MissingColumn(column.to_string()))?;
    let mut out = Vec::with_capacity(n);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| malformed(e.to_string()))?;
        let v: f64 =
            rec.get(idx).unwrap_or("").trim().parse().map_err(|_| malformed(format!("non-numeric `{column}`")))?;
        out.push(v);
    }
    if out.len() != n {
        return Err(malformed(format!("{} treatment values for {n} units", out.len())));
    }
    Ok(out)
}
