use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use super::{cholesky_with_jitter, keyed_rng};
use crate::error::{Module, Result, TmoError};

const FACTOR_JITTER: f64 = 1e-10;

/// Y = 1τᵀ + A Z B with AAᵀ = Λ_n, BᵀB = Γ_d and Gaussian Z.
#[derive(Debug, Clone)]
pub struct ProportionalDGP {
    pub lambda_n: DMatrix<f64>,
    pub gamma_d: DMatrix<f64>,
    pub tau: DVector<f64>,
}

impl ProportionalDGP {
    pub fn new(lambda_n: DMatrix<f64>, gamma_d: DMatrix<f64>, tau: DVector<f64>) -> Result<Self> {
        if !lambda_n.is_square() || !gamma_d.is_square() || tau.len() != gamma_d.nrows() {
            return Err(TmoError::invalid(
                Module::Simulation,
                "Λ and Γ must be square and τ must have one entry per outcome",
            ));
        }
        Ok(ProportionalDGP { lambda_n, gamma_d, tau })
    }

    pub fn n(&self) -> usize {
        self.lambda_n.nrows()
    }

    pub fn d(&self) -> usize {
        self.gamma_d.nrows()
    }

    /// Correlation matrix of the outcomes.
    pub fn omega(&self) -> DMatrix<f64> {
        let g = &self.gamma_d;
        DMatrix::from_fn(g.nrows(), g.ncols(), |a, b| g[(a, b)] / (g[(a, a)] * g[(b, b)]).sqrt())
    }

    /// Variance of the null covariance distribution, λ²/d² Σ ω².
    pub fn v_star(&self, lambda: f64) -> f64 {
        let d = self.d() as f64;
        lambda * lambda * self.omega().iter().map(|w| w * w).sum::<f64>() / (d * d)
    }

    pub fn df_star(&self, lambda: f64) -> f64 {
        1.0 / self.v_star(lambda)
    }
}

/// One n×d draw. Column j of Z comes from the stream keyed by outcome j.
pub fn generate_proportional(dgp: &ProportionalDGP, seed: u64) -> Result<DMatrix<f64>> {
    let fail = |what: &str| TmoError::numerical(Module::Simulation, format!("{what} could not be factorized"));
    let a = cholesky_with_jitter(&dgp.lambda_n, FACTOR_JITTER).ok_or_else(|| fail("Λ"))?;
    let b = cholesky_with_jitter(&dgp.gamma_d, FACTOR_JITTER).ok_or_else(|| fail("Γ"))?.transpose();
    let (n, d) = (dgp.n(), dgp.d());
    let mut z = DMatrix::zeros(n, d);
    for j in 0..d {
        let mut rng = keyed_rng(seed, 0, j as u64, 0);
        for i in 0..n {
            z[(i, j)] = StandardNormal.sample(&mut rng);
        }
    }
    let mut y = a * z * b;
    for j in 0..d {
        y.column_mut(j).add_scalar_mut(dgp.tau[j]);
    }
    Ok(y)
}
