use nalgebra::DMatrix;

use super::RegressionDataset;
use crate::error::{Module, Result, TmoError};
use crate::stats::{quantile_sorted, sorted_copy};
use crate::warnings::Warning;

#[derive(Debug, Clone, PartialEq)]
pub struct CleaningPolicy {
    pub standardize_within_period: bool,
    /// Lower winsorization percentile as a fraction; 0 disables the lower clamp.
    pub winsor_lo: f64,
    /// Upper winsorization percentile as a fraction; 1 disables the upper clamp.
    pub winsor_hi: f64,
    /// Auxiliary columns missing for a larger fraction of observations are dropped.
    pub drop_missing_threshold: f64,
    /// Use the 1/(n−1) divisor instead of 1/n when standardizing.
    pub sample_variance: bool,
}

impl Default for CleaningPolicy {
    fn default() -> Self {
        CleaningPolicy {
            standardize_within_period: true,
            winsor_lo: 0.001,
            winsor_hi: 0.999,
            drop_missing_threshold: 0.5,
            sample_variance: false,
        }
    }
}

impl CleaningPolicy {
    pub fn no_winsorization() -> Self {
        CleaningPolicy { winsor_lo: 0.0, winsor_hi: 1.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.winsor_lo && self.winsor_lo < self.winsor_hi && self.winsor_hi <= 1.0) {
            return Err(TmoError::invalid(Module::DatasetIo, "need 0 <= winsor_lo < winsor_hi <= 1"));
        }
        if !(0.0..=1.0).contains(&self.drop_missing_threshold) {
            return Err(TmoError::invalid(Module::DatasetIo, "drop_missing_threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Clamp values outside the empirical `[lo, hi]` percentiles. Returns the
/// number of clamped values in each tail.
pub fn winsorize_in_place(values: &mut [f64], lo: f64, hi: f64) -> (usize, usize) {
    if values.is_empty() {
        return (0, 0);
    }
    let sorted = sorted_copy(values);
    let lo_v = if lo > 0.0 { quantile_sorted(&sorted, lo) } else { f64::NEG_INFINITY };
    let hi_v = if hi < 1.0 { quantile_sorted(&sorted, hi) } else { f64::INFINITY };
    let (mut n_lo, mut n_hi) = (0, 0);
    for v in values.iter_mut() {
        if *v < lo_v {
            *v = lo_v;
            n_lo += 1;
        } else if *v > hi_v {
            *v = hi_v;
            n_hi += 1;
        }
    }
    (n_lo, n_hi)
}

/// Standardize each auxiliary outcome to mean 0 and variance 1 within each
/// period, then winsorize at the policy percentiles.
///
/// Columns with zero variance in some period are dropped with a warning; the
/// call fails only if fewer than two auxiliary outcomes survive.
pub fn standardize_outcomes(mut ds: RegressionDataset, policy: &CleaningPolicy) -> Result<RegressionDataset> {
    policy.validate()?;
    let n = ds.n_units();
    let t = ds.n_periods();
    let groups: Vec<Vec<usize>> = if policy.standardize_within_period {
        (0..t).map(|s| (0..n).map(|i| i * t + s).collect()).collect()
    } else {
        vec![(0..n * t).collect()]
    };

    let mut kept_names = Vec::new();
    let mut kept_cols: Vec<Vec<f64>> = Vec::new();
    'cols: for (j, name) in ds.aux_names.iter().enumerate() {
        let mut col: Vec<f64> = ds.aux.column(j).iter().copied().collect();
        for g in &groups {
            let m = g.len() as f64;
            let mean = g.iter().map(|&o| col[o]).sum::<f64>() / m;
            let ss = g.iter().map(|&o| (col[o] - mean).powi(2)).sum::<f64>();
            let var = if policy.sample_variance { ss / (m - 1.0) } else { ss / m };
            if !(var > 0.0) {
                ds.warnings.push(Warning::new(
                    Module::DatasetIo,
                    "zero_variance",
                    format!("auxiliary outcome `{name}` has zero variance; dropped"),
                ));
                continue 'cols;
            }
            let sd = var.sqrt();
            for &o in g {
                col[o] = (col[o] - mean) / sd;
            }
            if policy.winsor_lo > 0.0 || policy.winsor_hi < 1.0 {
                let mut vals: Vec<f64> = g.iter().map(|&o| col[o]).collect();
                winsorize_in_place(&mut vals, policy.winsor_lo, policy.winsor_hi);
                for (&o, v) in g.iter().zip(vals) {
                    col[o] = v;
                }
            }
        }
        kept_names.push(name.clone());
        kept_cols.push(col);
    }
    if kept_cols.len() < 2 {
        return Err(TmoError::TooFewOutcomes(kept_cols.len()));
    }
    ds.aux = DMatrix::from_fn(n * t, kept_cols.len(), |o, j| kept_cols[j][o]);
    ds.aux_names = kept_names;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn ds_with(cols: Vec<Vec<f64>>) -> RegressionDataset {
        let n = cols[0].len();
        let aux = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
        RegressionDataset::cross_section(vec![0.0; n], (0..n).map(|i| i as f64).collect(), aux).unwrap()
    }

    #[test]
    fn standardizes_with_population_divisor() {
        let ds = ds_with(vec![vec![1.0, 2.0, 3.0], vec![0.0, 5.0, 1.0]]);
        let out = standardize_outcomes(ds, &CleaningPolicy::no_winsorization()).unwrap();
        let c = 1.5f64.sqrt();
        let got: Vec<f64> = out.aux.column(0).iter().copied().collect();
        for (g, e) in got.iter().zip([-c, 0.0, c]) {
            assert!((g - e).abs() < 1e-12);
        }
        assert!((1.224_744_871_391_589 - c).abs() < 1e-15);
    }

    #[test]
    fn sample_divisor_flag() {
        let ds = ds_with(vec![vec![1.0, 2.0, 3.0], vec![0.0, 5.0, 1.0]]);
        let p = CleaningPolicy { sample_variance: true, ..CleaningPolicy::no_winsorization() };
        let out = standardize_outcomes(ds, &p).unwrap();
        assert!((out.aux[(2, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_column_dropped_and_error_if_too_few_remain() {
        let ds = ds_with(vec![vec![1.0, 2.0, 3.0], vec![4.0, 4.0, 4.0], vec![1.0, 0.0, 2.0]]);
        let out = standardize_outcomes(ds, &CleaningPolicy::no_winsorization()).unwrap();
        assert_eq!(out.aux_names, vec!["aux1", "aux3"]);
        assert!(out.warnings.iter().any(|w| w.kind == "zero_variance"));

        let ds = ds_with(vec![vec![1.0, 2.0, 3.0], vec![4.0, 4.0, 4.0]]);
        assert!(matches!(
            standardize_outcomes(ds, &CleaningPolicy::no_winsorization()),
            Err(TmoError::TooFewOutcomes(1))
        ));
    }

    #[test]
    fn winsorizes_one_value_per_tail_of_1000() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut xs: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let original = xs.clone();
        let (lo, hi) = winsorize_in_place(&mut xs, 0.001, 0.999);
        // independent count: values strictly beyond the second-smallest / second-largest
        let mut s = original.clone();
        s.sort_by(f64::total_cmp);
        let expect = (0.001f64 * 1000.0).ceil() as usize;
        assert_eq!((lo, hi), (expect, expect));
        assert_eq!(original.iter().filter(|&&v| v < s[1]).count(), expect);
        let changed = xs.iter().zip(&original).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 2 * expect);
    }

    #[test]
    fn idempotent_without_clamping() {
        let ds = ds_with(vec![vec![1.0, 7.0, 3.0, 2.0], vec![0.0, 5.0, 1.0, 1.5]]);
        let p = CleaningPolicy::no_winsorization();
        let once = standardize_outcomes(ds, &p).unwrap();
        let twice = standardize_outcomes(once.clone(), &p).unwrap();
        for (a, b) in once.aux.iter().zip(twice.aux.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn invalid_policy() {
        let ds = ds_with(vec![vec![1.0, 2.0, 3.0], vec![0.0, 5.0, 1.0]]);
        let p = CleaningPolicy { winsor_lo: 0.6, winsor_hi: 0.4, ..CleaningPolicy::default() };
        assert!(standardize_outcomes(ds, &p).is_err());
    }
}
