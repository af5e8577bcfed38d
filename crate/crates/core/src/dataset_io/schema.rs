use crate::error::{Module, Result, TmoError};

/// Mapping from column roles to header names.
///
/// An `aux` entry ending in `*` selects every header starting with the
/// given prefix, in header order.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub outcome: String,
    pub aux: Vec<String>,
    pub treatment: String,
    pub covariates: Vec<String>,
    /// Categorical columns expanded to indicator covariates.
    pub fixed_effects: Vec<String>,
    pub weights: Option<String>,
    pub instrument: Option<String>,
    pub cluster: Option<String>,
    /// (latitude, longitude) column names, both in degrees.
    pub coords: Option<(String, String)>,
    pub period: Option<String>,
    pub unit: Option<String>,
    pub delimiter: u8,
}

impl Schema {
    pub fn new(outcome: &str, treatment: &str, aux: &[&str]) -> Self {
        Schema {
            outcome: outcome.to_string(),
            aux: aux.iter().map(|s| s.to_string()).collect(),
            treatment: treatment.to_string(),
            covariates: Vec::new(),
            fixed_effects: Vec::new(),
            weights: None,
            instrument: None,
            cluster: None,
            coords: None,
            period: None,
            unit: None,
            delimiter: b',',
        }
    }

    /// Parse a `key = value` config. Lists are comma separated; `#` starts a comment.
    ///
    /// Recognized keys: outcome, treatment, aux, covariates, fixed_effects,
    /// weights, instrument, cluster, lat, lon, period, unit, delimiter.
    pub fn from_config_str(text: &str) -> Result<Schema> {
        let mut schema = Schema::new("", "", &[]);
        let mut lat = None;
        let mut lon = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TmoError::invalid(Module::DatasetIo, format!("schema line {}: expected key=value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim().to_string();
            let list = || split_list(&value);
            match key {
                "outcome" => schema.outcome = value,
                "treatment" => schema.treatment = value,
                "aux" => schema.aux = list(),
                "covariates" => schema.covariates = list(),
                "fixed_effects" => schema.fixed_effects = list(),
                "weights" => schema.weights = Some(value),
                "instrument" => schema.instrument = Some(value),
                "cluster" => schema.cluster = Some(value),
                "lat" => lat = Some(value),
                "lon" => lon = Some(value),
                "period" => schema.period = Some(value),
                "unit" => schema.unit = Some(value),
                "delimiter" => {
                    schema.delimiter = match value.as_str() {
                        "tab" | "\\t" => b'\t',
                        "comma" | "," => b',',
                        s if s.len() == 1 => s.as_bytes()[0],
                        _ => {
                            return Err(TmoError::invalid(
                                Module::DatasetIo,
                                format!("unsupported delimiter `{value}`"),
                            ))
                        }
                    }
                }
                other => return Err(TmoError::invalid(Module::DatasetIo, format!("unknown schema key `{other}`"))),
            }
        }
        schema.coords = match (lat, lon) {
            (Some(a), Some(b)) => Some((a, b)),
            (None, None) => None,
            _ => return Err(TmoError::invalid(Module::DatasetIo, "both lat and lon must be given")),
        };
        if schema.outcome.is_empty() || schema.treatment.is_empty() {
            return Err(TmoError::invalid(Module::DatasetIo, "schema needs outcome and treatment"));
        }
        Ok(schema)
    }

    pub(crate) fn resolve_aux(&self, header: &[String]) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for pat in &self.aux {
            if let Some(prefix) = pat.strip_suffix('*') {
                let reserved = self.reserved();
                let matched: Vec<&String> =
                    header.iter().filter(|h| h.starts_with(prefix) && !reserved.contains(&h.as_str())).collect();
                if matched.is_empty() {
                    return Err(TmoError::MissingColumn(pat.clone()));
                }
                out.extend(matched.into_iter().cloned());
            } else {
                out.push(pat.clone());
            }
        }
        let mut seen = std::collections::HashSet::new();
        out.retain(|c| seen.insert(c.clone()));
        Ok(out)
    }

    fn reserved(&self) -> Vec<&str> {
        let mut r = vec![self.outcome.as_str(), self.treatment.as_str()];
        r.extend(self.covariates.iter().map(String::as_str));
        r.extend(self.fixed_effects.iter().map(String::as_str));
        for c in [&self.weights, &self.instrument, &self.cluster, &self.period, &self.unit].into_iter().flatten() {
            r.push(c.as_str());
        }
        if let Some((a, b)) = &self.coords {
            r.push(a);
            r.push(b);
        }
        r
    }
}

fn split_list(value: &str) -> Vec<String> {
    value.split(',').map(|s| s.trim()).filter(|s| !s.is_empty()).map(String::from).collect()
}
