//! Small numerical helpers shared across modules.

use statrs::function::erf::{erfc, erfc_inv};

/// Φ⁻¹(0.75).
pub const Z75: f64 = 0.674_489_750_196_081_7;

/// Two-sided 5% standard-normal critical value.
pub const Z_CRIT_05: f64 = 1.959_963_984_540_054;

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Upper tail 1 − Φ(x), accurate far into the tail.
pub fn norm_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile Φ⁻¹(p) for p in (0, 1).
pub fn norm_ppf(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// Upper quantile Φ⁻¹(1 − alpha), computed without forming 1 − alpha.
pub fn norm_isf(alpha: f64) -> f64 {
    std::f64::consts::SQRT_2 * erfc_inv(2.0 * alpha)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Empirical quantile of already sorted data by linear interpolation between
/// order statistics at plotting positions `i / (m + 1)`.
///
/// Positions outside `[1, m]` clamp to the extreme order statistics.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let m = sorted.len();
    assert!(m > 0, "quantile of empty sample");
    let h = p * (m as f64 + 1.0);
    if h <= 1.0 {
        return sorted[0];
    }
    if h >= m as f64 {
        return sorted[m - 1];
    }
    let lo = h.floor();
    let frac = h - lo;
    let k = lo as usize - 1;
    if frac == 0.0 {
        sorted[k]
    } else {
        sorted[k] + frac * (sorted[k + 1] - sorted[k])
    }
}

pub fn sorted_copy(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_helpers_agree() {
        assert!((norm_cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((norm_ppf(0.75) - Z75).abs() < 1e-14);
        assert!((norm_ppf(0.975) - Z_CRIT_05).abs() < 1e-13);
        assert!((norm_isf(0.025) - Z_CRIT_05).abs() < 1e-13);
        assert!((norm_cdf(1.3) + norm_sf(1.3) - 1.0).abs() < 1e-15);
        // deep tail stays finite and positive
        assert!(norm_isf(1e-12) > 7.0);
    }

    #[test]
    fn quantile_hits_plotting_positions_exactly() {
        let xs: Vec<f64> = (1..=99).map(|k| k as f64).collect();
        assert_eq!(quantile_sorted(&xs, 0.25), 25.0);
        assert_eq!(quantile_sorted(&xs, 0.75), 75.0);
        assert_eq!(quantile_sorted(&xs, 0.0), 1.0);
        assert_eq!(quantile_sorted(&xs, 1.0), 99.0);
        assert!((quantile_sorted(&[0.0, 1.0, 2.0], 0.3) - 0.2).abs() < 1e-15);
    }
}
