use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

use crate::stats::norm_pdf;

/// Two-component model for pair statistics: a N(0, null_sd²) null with
/// probability `p0`, otherwise |N(alt_mean, alt_sd²)|. Used to check the
/// selected threshold against the point where the local false discovery
/// rate equals one half.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureOracle {
    pub p0: f64,
    pub null_sd: f64,
    pub alt_mean: f64,
    pub alt_sd: f64,
}

impl MixtureOracle {
    pub fn new(p0: f64, null_sd: f64, alt_mean: f64, alt_sd: f64) -> Self {
        assert!(0.0 < p0 && p0 < 1.0, "p0 must lie in (0, 1)");
        assert!(null_sd > 0.0 && alt_sd > 0.0);
        MixtureOracle { p0, null_sd, alt_mean, alt_sd }
    }

    /// p0 = 0.9, null sd 0.2, non-nulls |N(0.6, 0.05²)|.
    pub fn documented() -> Self {
        Self::new(0.9, 0.2, 0.6, 0.05)
    }

    pub fn sample(&self, m: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let null = Normal::new(0.0, self.null_sd).unwrap();
        let alt = Normal::new(self.alt_mean, self.alt_sd).unwrap();
        (0..m)
            .map(|_| if rng.random::<f64>() < self.p0 { null.sample(&mut rng) } else { alt.sample(&mut rng).abs() })
            .collect()
    }

    /// Density of |X| under the null at x ≥ 0.
    pub fn f0(&self, x: f64) -> f64 {
        2.0 * norm_pdf(x / self.null_sd) / self.null_sd
    }

    /// Density of |X| under the alternative at x ≥ 0.
    pub fn f1(&self, x: f64) -> f64 {
        (norm_pdf((x - self.alt_mean) / self.alt_sd) + norm_pdf((x + self.alt_mean) / self.alt_sd)) / self.alt_sd
    }

    pub fn fdr(&self, x: f64) -> f64 {
        let a = self.p0 * self.f0(x);
        a / (a + (1.0 - self.p0) * self.f1(x))
    }

    /// Root of fdr(δ) = 0.5 on (0, alt_mean], by bisection.
    pub fn fdr_half_point(&self) -> f64 {
        let (mut lo, mut hi) = (0.0, self.alt_mean);
        assert!(self.fdr(lo) > 0.5 && self.fdr(hi) < 0.5, "fdr = 0.5 is not bracketed");
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.fdr(mid) > 0.5 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn densities_integrate_to_one() {
        let o = MixtureOracle::documented();
        let h = 1e-4;
        let (mut a, mut b) = (0.0, 0.0);
        for k in 0..30_000 {
            let x = (k as f64 + 0.5) * h;
            a += o.f0(x) * h;
            b += o.f1(x) * h;
        }
        assert!((a - 1.0).abs() < 1e-6);
        assert!((b - 1.0).abs() < 1e-6);
    }

    #[test]
    fn half_point_balances_the_two_components() {
        let o = MixtureOracle::documented();
        let r = o.fdr_half_point();
        assert!(r > 0.4 && r < 0.6);
        assert!((o.p0 * o.f0(r) - (1.0 - o.p0) * o.f1(r)).abs() < 1e-9);
    }
}
