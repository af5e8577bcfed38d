//! Loading, validating and cleaning unit-level (optionally panel) data.
//!
//! Observations are stored unit-major: observation `o = i * t + s` holds unit
//! `i` in period `s`. All per-observation columns share that layout.

mod clean;
mod schema;

pub use clean::{standardize_outcomes, winsorize_in_place, CleaningPolicy};
pub use schema::Schema;

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Module, Result, TmoError};
use crate::warnings::Warning;

/// Geographic location in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coord {
    pub lat: f64,
    pub lon: f64,
}

/// Categorical column with one code per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub name: String,
    pub codes: Vec<usize>,
    pub levels: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RegressionDataset {
    pub unit_ids: Vec<String>,
    /// Period labels; a single empty label for cross-sections.
    pub period_ids: Vec<String>,
    pub outcome_name: String,
    pub treatment_name: String,
    pub aux_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub y0: DVector<f64>,
    /// `(n·t) × d`
    pub aux: DMatrix<f64>,
    pub w: DVector<f64>,
    /// `(n·t) × k`
    pub x: DMatrix<f64>,
    pub fixed_effects: Vec<Factor>,
    pub weights: Option<DVector<f64>>,
    pub instrument: Option<DVector<f64>>,
    /// Cluster code per unit.
    pub clusters: Option<Vec<usize>>,
    pub cluster_levels: Vec<String>,
    pub coords: Option<Vec<Coord>>,
    pub warnings: Vec<Warning>,
}

impl RegressionDataset {
    /// Build an in-memory cross-sectional dataset (t = 1) without covariates.
    pub fn cross_section(y0: Vec<f64>, w: Vec<f64>, aux: DMatrix<f64>) -> Result<Self> {
        let n = y0.len();
        let d = aux.ncols();
        let ds = RegressionDataset {
            unit_ids: (1..=n).map(|i| i.to_string()).collect(),
            period_ids: vec![String::new()],
            outcome_name: "y".into(),
            treatment_name: "w".into(),
            aux_names: (1..=d).map(|j| format!("aux{j}")).collect(),
            covariate_names: Vec::new(),
            y0: DVector::from_vec(y0),
            aux,
            w: DVector::from_vec(w),
            x: DMatrix::zeros(n, 0),
            fixed_effects: Vec::new(),
            weights: None,
            instrument: None,
            clusters: None,
            cluster_levels: Vec::new(),
            coords: None,
            warnings: Vec::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n_units(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn n_periods(&self) -> usize {
        self.period_ids.len()
    }

    pub fn n_obs(&self) -> usize {
        self.y0.len()
    }

    pub fn n_aux(&self) -> usize {
        self.aux.ncols()
    }

    /// Attach cluster labels (one per unit).
    pub fn with_clusters(mut self, labels: &[&str]) -> Result<Self> {
        if labels.len() != self.n_units() {
            return Err(TmoError::invalid(Module::DatasetIo, "one cluster label per unit required"));
        }
        let (codes, levels) = encode(labels.iter().map(|s| s.to_string()));
        self.clusters = Some(codes);
        self.cluster_levels = levels;
        Ok(self)
    }

    pub fn with_coords(mut self, coords: Vec<Coord>) -> Result<Self> {
        if coords.len() != self.n_units() {
            return Err(TmoError::invalid(Module::DatasetIo, "one coordinate per unit required"));
        }
        self.coords = Some(coords);
        Ok(self)
    }

    pub fn with_covariates(mut self, names: Vec<String>, x: DMatrix<f64>) -> Result<Self> {
        if x.nrows() != self.n_obs() || x.ncols() != names.len() {
            return Err(TmoError::invalid(Module::DatasetIo, "covariate matrix shape mismatch"));
        }
        self.covariate_names = names;
        self.x = x;
        Ok(self)
    }

    pub fn with_weights(mut self, h: Vec<f64>) -> Result<Self> {
        if h.len() != self.n_obs() {
            return Err(TmoError::invalid(Module::DatasetIo, "one weight per observation required"));
        }
        self.weights = Some(DVector::from_vec(h));
        self.validate()?;
        Ok(self)
    }

    pub fn with_instrument(mut self, z: Vec<f64>) -> Result<Self> {
        if z.len() != self.n_obs() {
            return Err(TmoError::invalid(Module::DatasetIo, "one instrument value per observation required"));
        }
        self.instrument = Some(DVector::from_vec(z));
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_units();
        let t = self.n_periods();
        let nt = n * t;
        if n < 3 {
            return Err(TmoError::TooFewUnits(n));
        }
        if self.n_aux() < 2 {
            return Err(TmoError::TooFewOutcomes(self.n_aux()));
        }
        let shape_ok = self.y0.len() == nt
            && self.w.len() == nt
            && self.aux.nrows() == nt
            && self.x.nrows() == nt
            && self.aux_names.len() == self.aux.ncols()
            && self.weights.as_ref().is_none_or(|h| h.len() == nt)
            && self.instrument.as_ref().is_none_or(|z| z.len() == nt)
            && self.clusters.as_ref().is_none_or(|c| c.len() == n)
            && self.coords.as_ref().is_none_or(|c| c.len() == n)
            && self.fixed_effects.iter().all(|f| f.codes.len() == nt);
        if !shape_ok {
            return Err(TmoError::invalid(Module::DatasetIo, "column lengths disagree with n·t"));
        }
        if let Some(h) = &self.weights {
            if h.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(TmoError::invalid(Module::DatasetIo, "weights must be strictly positive"));
            }
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(self.y0.as_slice())
            || !finite(self.w.as_slice())
            || !finite(self.aux.as_slice())
            || !finite(self.x.as_slice())
        {
            return Err(TmoError::invalid(Module::DatasetIo, "missing or non-finite values remain after validation"));
        }
        Ok(())
    }
}

fn encode(labels: impl Iterator<Item = String>) -> (Vec<usize>, Vec<String>) {
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut levels = Vec::new();
    let codes = labels
        .map(|l| {
            *index.entry(l.clone()).or_insert_with(|| {
                levels.push(l);
                levels.len() - 1
            })
        })
        .collect();
    (codes, levels)
}

fn is_missing(s: &str) -> bool {
    matches!(s.trim(), "" | "NA" | "na" | "NaN" | "nan" | "." | "null" | "NULL")
}

fn parse_num(s: &str) -> Option<f64> {
    if is_missing(s) {
        return None;
    }
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Load a delimited text file with a header row into a validated dataset.
///
/// Units with a missing treatment, outcome, covariate, weight, instrument,
/// fixed-effect, cluster or coordinate value are dropped. Auxiliary columns
/// missing for more than `policy.drop_missing_threshold` of the remaining
/// observations are dropped; other missing auxiliary cells are imputed by
/// their period mean. Every such action is recorded in `warnings`.
pub fn load_dataset(path: &Path, schema: &Schema, policy: &CleaningPolicy) -> Result<RegressionDataset> {
    let path_str = path.display().to_string();
    let malformed = |message: String| TmoError::Malformed { path: path_str.clone(), message };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .has_headers(true)
        .from_path(path)
        .map_err(|e| malformed(e.to_string()))?;
    let header: Vec<String> =
        reader.headers().map_err(|e| malformed(e.to_string()))?.iter().map(|h| h.trim().to_string()).collect();
    let col = |name: &str| -> Result<usize> {
        header.iter().position(|h| h == name).ok_or_else(|| TmoError::MissingColumn(name.to_string()))
    };
    let aux_names = schema.resolve_aux(&header)?;
    let y_col = col(&schema.outcome)?;
    let w_col = col(&schema.treatment)?;
    let aux_cols: Vec<usize> = aux_names.iter().map(|a| col(a)).collect::<Result<_>>()?;
    let x_cols: Vec<usize> = schema.covariates.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let fe_cols: Vec<usize> = schema.fixed_effects.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let h_col = schema.weights.as_deref().map(col).transpose()?;
    let z_col = schema.instrument.as_deref().map(col).transpose()?;
    let c_col = schema.cluster.as_deref().map(col).transpose()?;
    let ll_cols = match &schema.coords {
        Some((a, b)) => Some((col(a)?, col(b)?)),
        None => None,
    };
    let p_col = schema.period.as_deref().map(col).transpose()?;
    let u_col = schema.unit.as_deref().map(col).transpose()?;
    if p_col.is_some() && u_col.is_none() {
        return Err(TmoError::invalid(Module::DatasetIo, "panel data (period column) requires a unit column"));
    }

    let mut rows: Vec<Vec<String>> = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| malformed(format!("record {}: {e}", k + 2)))?;
        if rec.len() != header.len() {
            return Err(malformed(format!("record {} has {} fields, header has {}", k + 2, rec.len(), header.len())));
        }
        rows.push(rec.iter().map(|s| s.to_string()).collect());
    }

    // unit and period bookkeeping, in order of first appearance
    let mut unit_index: HashMap<String, usize> = HashMap::new();
    let mut unit_ids: Vec<String> = Vec::new();
    let mut period_index: HashMap<String, usize> = HashMap::new();
    let mut period_ids: Vec<String> = Vec::new();
    let mut cell: HashMap<(usize, usize), usize> = HashMap::new();
    for (r, row) in rows.iter().enumerate() {
        let uid = match u_col {
            Some(c) => row[c].trim().to_string(),
            None => (r + 1).to_string(),
        };
        let pid = p_col.map(|c| row[c].trim().to_string()).unwrap_or_default();
        let ui = *unit_index.entry(uid.clone()).or_insert_with(|| {
            unit_ids.push(uid.clone());
            unit_ids.len() - 1
        });
        let pi = *period_index.entry(pid.clone()).or_insert_with(|| {
            period_ids.push(pid.clone());
            period_ids.len() - 1
        });
        if cell.insert((ui, pi), r).is_some() {
            return Err(malformed(format!("duplicate row for unit `{uid}` period `{pid}`")));
        }
    }
    if period_ids.is_empty() {
        period_ids.push(String::new());
    }
    let t = period_ids.len();

    let mut warnings = Vec::new();
    let mut keep_units = Vec::new();
    let mut incomplete_panel = 0usize;
    let mut dropped_missing = 0usize;
    'units: for ui in 0..unit_ids.len() {
        let mut obs_rows = Vec::with_capacity(t);
        for pi in 0..t {
            match cell.get(&(ui, pi)) {
                Some(&r) => obs_rows.push(r),
                None => {
                    incomplete_panel += 1;
                    continue 'units;
                }
            }
        }
        let required = [Some(y_col), Some(w_col), h_col, z_col].into_iter().flatten().chain(x_cols.iter().copied());
        for c in required {
            if obs_rows.iter().any(|&r| parse_num(&rows[r][c]).is_none()) {
                dropped_missing += 1;
                continue 'units;
            }
        }
        let labelled = fe_cols.iter().copied().chain(c_col);
        for c in labelled {
            if obs_rows.iter().any(|&r| is_missing(&rows[r][c])) {
                dropped_missing += 1;
                continue 'units;
            }
        }
        if let Some((a, b)) = ll_cols {
            if obs_rows.iter().any(|&r| parse_num(&rows[r][a]).is_none() || parse_num(&rows[r][b]).is_none()) {
                dropped_missing += 1;
                continue 'units;
            }
        }
        keep_units.push((ui, obs_rows));
    }
    if incomplete_panel > 0 {
        warnings.push(Warning::new(
            Module::DatasetIo,
            "unbalanced_panel",
            format!("dropped {incomplete_panel} units not observed in every period"),
        ));
    }
    if dropped_missing > 0 {
        warnings.push(Warning::new(
            Module::DatasetIo,
            "missing_required",
            format!("dropped {dropped_missing} units with missing treatment, outcome or design values"),
        ));
    }
    let n = keep_units.len();
    if n < 3 {
        return Err(TmoError::TooFewUnits(n));
    }
    let nt = n * t;
    let obs_row = |o: usize| keep_units[o / t].1[o % t];
    let num_col = |c: usize| -> Vec<f64> { (0..nt).map(|o| parse_num(&rows[obs_row(o)][c]).unwrap()).collect() };

    let y0 = DVector::from_vec(num_col(y_col));
    let w = DVector::from_vec(num_col(w_col));
    let mut x = DMatrix::zeros(nt, x_cols.len());
    for (k, &c) in x_cols.iter().enumerate() {
        x.set_column(k, &DVector::from_vec(num_col(c)));
    }
    let weights = h_col.map(|c| DVector::from_vec(num_col(c)));
    let instrument = z_col.map(|c| DVector::from_vec(num_col(c)));
    let fixed_effects = fe_cols
        .iter()
        .zip(&schema.fixed_effects)
        .map(|(&c, name)| {
            let (codes, levels) = encode((0..nt).map(|o| rows[obs_row(o)][c].trim().to_string()));
            Factor { name: name.clone(), codes, levels }
        })
        .collect();

    let per_unit_label = |c: usize, what: &str| -> Result<Vec<String>> {
        keep_units
            .iter()
            .map(|(ui, obs)| {
                let first = rows[obs[0]][c].trim().to_string();
                if obs.iter().any(|&r| rows[r][c].trim() != first) {
                    return Err(TmoError::invalid(
                        Module::DatasetIo,
                        format!("{what} varies across periods for unit `{}`", unit_ids[*ui]),
                    ));
                }
                Ok(first)
            })
            .collect()
    };
    let (clusters, cluster_levels) = match c_col {
        Some(c) => {
            let (codes, levels) = encode(per_unit_label(c, "cluster")?.into_iter());
            (Some(codes), levels)
        }
        None => (None, Vec::new()),
    };
    let coords = match ll_cols {
        Some((a, b)) => {
            let lat = per_unit_label(a, "latitude")?;
            let lon = per_unit_label(b, "longitude")?;
            Some(
                lat.iter()
                    .zip(&lon)
                    .map(|(la, lo)| Coord { lat: parse_num(la).unwrap(), lon: parse_num(lo).unwrap() })
                    .collect(),
            )
        }
        None => None,
    };

    // auxiliary outcomes: drop sparse columns, impute the rest by period mean
    let mut kept_names = Vec::new();
    let mut kept_cols: Vec<Vec<f64>> = Vec::new();
    for (name, &c) in aux_names.iter().zip(&aux_cols) {
        let raw: Vec<Option<f64>> = (0..nt).map(|o| parse_num(&rows[obs_row(o)][c])).collect();
        let missing = raw.iter().filter(|v| v.is_none()).count();
        let frac = missing as f64 / nt as f64;
        if frac > policy.drop_missing_threshold {
            warnings.push(Warning::new(
                Module::DatasetIo,
                "aux_dropped_missing",
                format!("auxiliary outcome `{name}` missing for {:.1}% of observations; dropped", 100.0 * frac),
            ));
            continue;
        }
        let mut values = vec![0.0; nt];
        if missing > 0 {
            let mut imputed = 0usize;
            for s in 0..t {
                let present: Vec<f64> = (0..n).filter_map(|i| raw[i * t + s]).collect();
                if present.is_empty() {
                    continue;
                }
                let mean = present.iter().sum::<f64>() / present.len() as f64;
                for i in 0..n {
                    if raw[i * t + s].is_none() {
                        values[i * t + s] = mean;
                        imputed += 1;
                    }
                }
            }
            if imputed < missing {
                warnings.push(Warning::new(
                    Module::DatasetIo,
                    "aux_dropped_missing",
                    format!("auxiliary outcome `{name}` has a period with no observed values; dropped"),
                ));
                continue;
            }
            warnings.push(Warning::new(
                Module::DatasetIo,
                "aux_imputed",
                format!("auxiliary outcome `{name}`: {imputed} missing cells imputed by period mean"),
            ));
        }
        for (o, v) in raw.iter().enumerate() {
            if let Some(v) = v {
                values[o] = *v;
            }
        }
        kept_names.push(name.clone());
        kept_cols.push(values);
    }
    if kept_cols.len() < 2 {
        return Err(TmoError::TooFewOutcomes(kept_cols.len()));
    }
    let aux = DMatrix::from_fn(nt, kept_cols.len(), |o, j| kept_cols[j][o]);

    let ds = RegressionDataset {
        unit_ids: keep_units.iter().map(|(ui, _)| unit_ids[*ui].clone()).collect(),
        period_ids,
        outcome_name: schema.outcome.clone(),
        treatment_name: schema.treatment.clone(),
        aux_names: kept_names,
        covariate_names: schema.covariates.clone(),
        y0,
        aux,
        w,
        x,
        fixed_effects,
        weights,
        instrument,
        clusters,
        cluster_levels,
        coords,
        warnings,
    };
    ds.validate()?;
    Ok(ds)
}

/// Write a dataset back to delimited text, returning the schema that reloads it.
///
/// Numbers are written in shortest round-trip form, so reloading reproduces
/// every value bit for bit.
pub fn write_dataset(ds: &RegressionDataset, path: &Path) -> Result<Schema> {
    let t = ds.n_periods();
    let mut schema = Schema::new(&ds.outcome_name, &ds.treatment_name, &[]);
    schema.aux = ds.aux_names.clone();
    schema.covariates = ds.covariate_names.clone();
    schema.fixed_effects = ds.fixed_effects.iter().map(|f| f.name.clone()).collect();
    schema.unit = Some("unit".into());
    let mut header = vec!["unit".to_string()];
    if t > 1 {
        schema.period = Some("period".into());
        header.push("period".into());
    }
    header.push(ds.outcome_name.clone());
    header.push(ds.treatment_name.clone());
    header.extend(ds.aux_names.iter().cloned());
    header.extend(ds.covariate_names.iter().cloned());
    header.extend(schema.fixed_effects.iter().cloned());
    if ds.weights.is_some() {
        schema.weights = Some("weight".into());
        header.push("weight".into());
    }
    if ds.instrument.is_some() {
        schema.instrument = Some("instrument".into());
        header.push("instrument".into());
    }
    if ds.clusters.is_some() {
        schema.cluster = Some("cluster".into());
        header.push("cluster".into());
    }
    if ds.coords.is_some() {
        schema.coords = Some(("lat".into(), "lon".into()));
        header.push("lat".into());
        header.push("lon".into());
    }

    let file = std::fs::File::create(path).map_err(|e| TmoError::io(path.display().to_string(), e))?;
    let mut wtr = csv::WriterBuilder::new().delimiter(schema.delimiter).from_writer(std::io::BufWriter::new(file));
    let io_err = |e: csv::Error| TmoError::Malformed { path: path.display().to_string(), message: e.to_string() };
    wtr.write_record(&header).map_err(io_err)?;
    for i in 0..ds.n_units() {
        for s in 0..t {
            let o = i * t + s;
            let mut rec = vec![ds.unit_ids[i].clone()];
            if t > 1 {
                rec.push(ds.period_ids[s].clone());
            }
            rec.push(ds.y0[o].to_string());
            rec.push(ds.w[o].to_string());
            rec.extend((0..ds.n_aux()).map(|j| ds.aux[(o, j)].to_string()));
            rec.extend((0..ds.x.ncols()).map(|k| ds.x[(o, k)].to_string()));
            rec.extend(ds.fixed_effects.iter().map(|f| f.levels[f.codes[o]].clone()));
            if let Some(h) = &ds.weights {
                rec.push(h[o].to_string());
            }
            if let Some(z) = &ds.instrument {
                rec.push(z[o].to_string());
            }
            if let Some(c) = &ds.clusters {
                rec.push(ds.cluster_levels[c[i]].clone());
            }
            if let Some(c) = &ds.coords {
                rec.push(c[i].lat.to_string());
                rec.push(c[i].lon.to_string());
            }
            wtr.write_record(&rec).map_err(io_err)?;
        }
    }
    let mut inner = wtr.into_inner().map_err(|e| TmoError::io(path.display().to_string(), e.into_error()))?;
    inner.flush().map_err(|e| TmoError::io(path.display().to_string(), e))?;
    Ok(schema)
}
