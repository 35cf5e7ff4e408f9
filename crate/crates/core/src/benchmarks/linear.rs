//! Straight-line fit `d_i = b + m t_i + noise` with a Gaussian prior on
//! `(b, m)` and the quadratic QoI `q = theta^T theta`. The posterior and both
//! moment maps are known in closed form.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::io::Table;
pub use crate::problem::gaussian_posterior;
use crate::problem::{
    DiagonalGaussian, GaussianNoiseModel, GaussianPriorFamily, HyperparameterBox,
    InverseProblem, LinearForwardModel,
};

pub const TIMES: [f64; 4] = [0.0, 0.5, 1.5, 2.5];
/// `(b, m)` generating the data.
pub const TRUE_PARAMS: [f64; 2] = [1.0, -2.0];
pub const HYPER_NAMES: [&str; 4] = ["mu_b", "mu_m", "var_b", "var_m"];
/// Seed of the committed dataset.
pub const SHIPPED_DATA_SEED: u64 = 20_210_601;

const SHIPPED_DATA: &str = include_str!("../../data/linear_data.csv");

/// Rows `[1, t]`.
pub fn design_matrix() -> DMatrix<f64> {
    DMatrix::from_fn(TIMES.len(), 2, |i, j| if j == 0 { 1.0 } else { TIMES[i] })
}

/// Every hyperparameter at its nominal value 1, perturbed by 50%.
pub fn hyper_box() -> HyperparameterBox {
    HyperparameterBox::new(
        HYPER_NAMES.iter().map(|s| s.to_string()).collect(),
        vec![0.5; 4],
        vec![1.5; 4],
    )
    .expect("static box is valid")
}

pub fn nominal_hyperparameters() -> Vec<f64> {
    vec![1.0; 4]
}

/// `N((1, 1), 1.5^2 I)`.
pub fn is_prior() -> DiagonalGaussian {
    DiagonalGaussian::new(vec![1.0, 1.0], vec![2.25, 2.25]).expect("static prior is valid")
}

pub fn quadratic_qoi(theta: &[f64]) -> f64 {
    theta.iter().map(|t| t * t).sum()
}

/// `d_i = -2 t_i + 1 + noise_std * eta_i`.
pub fn simulate_linear_data(seed: u64, noise_std: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TIMES
        .iter()
        .map(|t| {
            let eta: f64 = StandardNormal.sample(&mut rng);
            TRUE_PARAMS[0] + TRUE_PARAMS[1] * t + noise_std * eta
        })
        .collect()
}

/// The committed dataset (unit noise, [`SHIPPED_DATA_SEED`]).
pub fn shipped_data() -> Vec<f64> {
    let table = Table::parse(SHIPPED_DATA, "linear_data.csv").expect("committed data parses");
    table.column("value").expect("committed data has a value column")
}

/// A linear forward model with Gaussian noise and prior family, for which the
/// posterior is Gaussian.
#[derive(Debug, Clone)]
pub struct LinearGaussian {
    pub matrix: DMatrix<f64>,
    pub noise: GaussianNoiseModel,
    pub family: GaussianPriorFamily,
}

impl LinearGaussian {
    /// The line-fit problem on `data`, unit noise variance.
    pub fn line_fit(data: Vec<f64>) -> Result<Self> {
        let noise = GaussianNoiseModel::diagonal(&[1.0; 4], DVector::from_vec(data))?;
        let family = GaussianPriorFamily::means_then_variances(hyper_box())?;
        Ok(Self {
            matrix: design_matrix(),
            noise,
            family,
        })
    }

    pub fn shipped() -> Self {
        Self::line_fit(shipped_data()).expect("committed problem is valid")
    }

    /// Recovers the linear structure of a problem, if it has one.
    pub fn from_problem(problem: &InverseProblem) -> Option<Self> {
        Some(Self {
            matrix: problem.forward.linear_operator()?.clone(),
            noise: problem.noise.clone(),
            family: problem.prior_family.clone(),
        })
    }

    /// The problem with QoI `theta^T theta`.
    pub fn inverse_problem(&self) -> Result<InverseProblem> {
        let names = if self.matrix.ncols() == 2 {
            vec!["b".into(), "m".into()]
        } else {
            (1..=self.matrix.ncols()).map(|i| format!("theta{i}")).collect()
        };
        InverseProblem::new(
            names,
            Arc::new(LinearForwardModel::new(self.matrix.clone())?),
            self.noise.clone(),
            self.family.clone(),
            Arc::new(quadratic_qoi),
        )
    }

    /// Posterior mean and covariance for the prior selected by `xi`.
    pub fn posterior(&self, xi: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let prior = self.family.prior(xi)?;
        gaussian_posterior(&self.matrix, &self.noise, &prior)
    }

    /// `(F_mean, F_var)` for `q = theta^T theta`:
    /// `E q = m^T m + tr C`, `var q = 2 tr(C^2) + 4 m^T C m`.
    pub fn hs_maps(&self, xi: &[f64]) -> Result<(f64, f64)> {
        let (m, c) = self.posterior(xi)?;
        Ok(quadratic_moments(&m, &c))
    }

    pub fn analytic_mean_map(&self, xi: &[f64]) -> Result<f64> {
        Ok(self.hs_maps(xi)?.0)
    }

    pub fn analytic_var_map(&self, xi: &[f64]) -> Result<f64> {
        Ok(self.hs_maps(xi)?.1)
    }
}

/// Mean and variance of `x^T x` for `x ~ N(m, C)`.
pub fn quadratic_moments(m: &DVector<f64>, c: &DMatrix<f64>) -> (f64, f64) {
    let mean = m.dot(m) + c.trace();
    let var = 2.0 * (c * c).trace() + 4.0 * m.dot(&(c * m));
    (mean, var)
}
