//! Bayesian inverse problem: forward model, Gaussian likelihood, a
//! hyperparameter-indexed family of diagonal Gaussian priors and a scalar QoI.
//!
//! All densities are log-densities. The likelihood drops its constant; prior
//! densities keep the full normalization so that ratios between two priors of
//! the family are exact.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameter-to-observable map `theta -> B y(theta)`.
pub trait ForwardModel: Send + Sync {
    fn n_params(&self) -> usize;
    fn n_obs(&self) -> usize;
    fn evaluate(&self, theta: &[f64]) -> Result<DVector<f64>>;

    /// Predictions together with their Jacobian (`n_obs x n_params`), for
    /// models that can supply derivatives more accurately than differencing.
    fn evaluate_with_jacobian(
        &self,
        _theta: &[f64],
    ) -> Option<Result<(DVector<f64>, DMatrix<f64>)>> {
        None
    }

    /// The matrix of a linear model, enabling closed-form MAP solves.
    fn linear_operator(&self) -> Option<&DMatrix<f64>> {
        None
    }
}

/// `theta -> A theta`.
#[derive(Debug, Clone)]
pub struct LinearForwardModel {
    matrix: DMatrix<f64>,
}

impl LinearForwardModel {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(Error::Domain("forward matrix must be non-empty".into()));
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

impl ForwardModel for LinearForwardModel {
    fn n_params(&self) -> usize {
        self.matrix.ncols()
    }

    fn n_obs(&self) -> usize {
        self.matrix.nrows()
    }

    fn evaluate(&self, theta: &[f64]) -> Result<DVector<f64>> {
        check_dim(theta, self.n_params())?;
        Ok(&self.matrix * DVector::from_column_slice(theta))
    }

    fn evaluate_with_jacobian(
        &self,
        theta: &[f64],
    ) -> Option<Result<(DVector<f64>, DMatrix<f64>)>> {
        Some(self.evaluate(theta).map(|y| (y, self.matrix.clone())))
    }

    fn linear_operator(&self) -> Option<&DMatrix<f64>> {
        Some(&self.matrix)
    }
}

/// Additive Gaussian noise `d = B y(theta) + eta`, `eta ~ N(0, cov)`.
#[derive(Clone)]
pub struct GaussianNoiseModel {
    covariance: DMatrix<f64>,
    data: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl fmt::Debug for GaussianNoiseModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GaussianNoiseModel")
            .field("covariance", &self.covariance)
            .field("data", &self.data)
            .finish()
    }
}

impl GaussianNoiseModel {
    pub fn new(covariance: DMatrix<f64>, data: DVector<f64>) -> Result<Self> {
        if !covariance.is_square() || covariance.nrows() != data.len() {
            return Err(Error::Domain(format!(
                "noise covariance is {}x{} but data has length {}",
                covariance.nrows(),
                covariance.ncols(),
                data.len()
            )));
        }
        let asym = (&covariance - covariance.transpose()).amax();
        if asym > 1e-12 * covariance.amax().max(1.0) {
            return Err(Error::Domain("noise covariance is not symmetric".into()));
        }
        let chol = Cholesky::new(covariance.clone())
            .ok_or_else(|| Error::Domain("noise covariance is not positive definite".into()))?;
        Ok(Self {
            covariance,
            data,
            chol,
        })
    }

    /// Independent noise with the given per-observation variances.
    pub fn diagonal(variances: &[f64], data: DVector<f64>) -> Result<Self> {
        Self::new(
            DMatrix::from_diagonal(&DVector::from_column_slice(variances)),
            data,
        )
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn data(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn n_obs(&self) -> usize {
        self.data.len()
    }

    /// `L^{-1} r` where `cov = L L^T`, so that `|L^{-1} r|^2 = r^T cov^{-1} r`.
    pub fn whiten(&self, residual: &DVector<f64>) -> DVector<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(residual)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// `cov^{-1} v`.
    pub fn precision_times(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    pub fn precision(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// `r^T cov^{-1} r` with `r = predicted - d`.
    pub fn misfit(&self, predicted: &DVector<f64>) -> f64 {
        let r = predicted - &self.data;
        self.whiten(&r).norm_squared()
    }
}

/// Uniform box of admissible hyperparameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperparameterBox {
    names: Vec<String>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl HyperparameterBox {
    pub fn new(names: Vec<String>, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let mut problems = Vec::new();
        if names.len() != lower.len() || names.len() != upper.len() {
            problems.push(format!(
                "box has {} names, {} lower and {} upper bounds",
                names.len(),
                lower.len(),
                upper.len()
            ));
        }
        if names.is_empty() {
            problems.push("box has no components".into());
        }
        for (j, (a, b)) in lower.iter().zip(&upper).enumerate() {
            let name = names.get(j).map(String::as_str).unwrap_or("?");
            if !(a.is_finite() && b.is_finite()) {
                problems.push(format!("component {j} ({name}): bounds must be finite"));
            } else if a >= b {
                problems.push(format!(
                    "component {j} ({name}): lower bound {a} is not below upper bound {b}"
                ));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        Ok(Self {
            names,
            lower,
            upper,
        })
    }

    /// Unnamed box, components called `xi1`, `xi2`, ...
    pub fn unnamed(bounds: &[(f64, f64)]) -> Result<Self> {
        Self::new(
            (1..=bounds.len()).map(|j| format!("xi{j}")).collect(),
            bounds.iter().map(|b| b.0).collect(),
            bounds.iter().map(|b| b.1).collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(a, b)| 0.5 * (a + b))
            .collect()
    }

    pub fn contains(&self, xi: &[f64]) -> bool {
        xi.len() == self.dim()
            && xi
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (a, b))| *a <= *x && *x <= *b)
    }

    pub fn check(&self, xi: &[f64]) -> Result<()> {
        if self.contains(xi) {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "hyperparameter {xi:?} lies outside the box {:?}",
                self.lower.iter().zip(&self.upper).collect::<Vec<_>>()
            )))
        }
    }

    /// Affine map from `[0,1]^n`.
    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(u, (a, b))| a + u * (b - a))
            .collect()
    }

    /// Affine map to `[-1,1]^n`.
    pub fn to_symmetric(&self, xi: &[f64]) -> Vec<f64> {
        xi.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(x, (a, b))| (2.0 * x - a - b) / (b - a))
            .collect()
    }
}

/// Source of one prior mean or variance entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    /// Taken from the hyperparameter vector at this index.
    Hyper(usize),
    /// Held constant.
    Fixed(f64),
}

impl Slot {
    fn resolve(&self, xi: &[f64]) -> f64 {
        match *self {
            Slot::Hyper(j) => xi[j],
            Slot::Fixed(v) => v,
        }
    }
}

/// Diagonal Gaussian `N(mean, diag(variance))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() || mean.is_empty() {
            return Err(Error::Domain(format!(
                "Gaussian with {} means and {} variances",
                mean.len(),
                variance.len()
            )));
        }
        if let Some(v) = variance.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Domain(format!("variance {v} is not strictly positive")));
        }
        Ok(Self { mean, variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Full log-density including normalization.
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.variance)
            .zip(theta)
            .map(|((m, v), t)| -0.5 * ((2.0 * PI * v).ln() + (t - m) * (t - m) / v))
            .sum()
    }

    pub fn log_det_covariance(&self) -> f64 {
        self.variance.iter().map(|v| v.ln()).sum()
    }
}

/// Prior family `xi -> N(theta_xi, Gamma_xi)` with an explicit wiring from
/// hyperparameter indices to mean and variance slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPriorFamily {
    hyper_box: HyperparameterBox,
    mean_slots: Vec<Slot>,
    variance_slots: Vec<Slot>,
}

impl GaussianPriorFamily {
    pub fn new(
        hyper_box: HyperparameterBox,
        mean_slots: Vec<Slot>,
        variance_slots: Vec<Slot>,
    ) -> Result<Self> {
        let mut problems = Vec::new();
        let n = hyper_box.dim();
        if mean_slots.len() != variance_slots.len() || mean_slots.is_empty() {
            problems.push(format!(
                "prior has {} mean slots and {} variance slots",
                mean_slots.len(),
                variance_slots.len()
            ));
        }
        let mut used = vec![false; n];
        for (kind, slots) in [("mean", &mean_slots), ("variance", &variance_slots)] {
            for (i, slot) in slots.iter().enumerate() {
                match *slot {
                    Slot::Hyper(j) if j >= n => problems.push(format!(
                        "{kind} slot {i} refers to hyperparameter {j} but the box has {n}"
                    )),
                    Slot::Hyper(j) => {
                        used[j] = true;
                        if kind == "variance" && hyper_box.lower()[j] <= 0.0 {
                            problems.push(format!(
                                "variance slot {i} is fed by {} whose lower bound {} is not positive",
                                hyper_box.names()[j],
                                hyper_box.lower()[j]
                            ));
                        }
                    }
                    Slot::Fixed(v) if kind == "variance" && !(v > 0.0 && v.is_finite()) => {
                        problems.push(format!("fixed variance {v} in slot {i} is not positive"))
                    }
                    Slot::Fixed(v) if !v.is_finite() => {
                        problems.push(format!("fixed mean {v} in slot {i} is not finite"))
                    }
                    Slot::Fixed(_) => {}
                }
            }
        }
        for (j, used) in used.iter().enumerate() {
            if !used {
                problems.push(format!(
                    "hyperparameter {} does not feed any prior slot",
                    hyper_box.names()[j]
                ));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        Ok(Self {
            hyper_box,
            mean_slots,
            variance_slots,
        })
    }

    /// The usual layout `xi = (means..., variances...)`.
    pub fn means_then_variances(hyper_box: HyperparameterBox) -> Result<Self> {
        let n = hyper_box.dim();
        if n % 2 != 0 {
            return Err(Error::Config(vec![format!(
                "means-then-variances layout needs an even number of hyperparameters, got {n}"
            )]));
        }
        let p = n / 2;
        Self::new(
            hyper_box,
            (0..p).map(Slot::Hyper).collect(),
            (p..n).map(Slot::Hyper).collect(),
        )
    }

    pub fn n_params(&self) -> usize {
        self.mean_slots.len()
    }

    pub fn hyper_box(&self) -> &HyperparameterBox {
        &self.hyper_box
    }

    pub fn mean_slots(&self) -> &[Slot] {
        &self.mean_slots
    }

    pub fn variance_slots(&self) -> &[Slot] {
        &self.variance_slots
    }

    /// The prior selected by `xi`.
    pub fn prior(&self, xi: &[f64]) -> Result<DiagonalGaussian> {
        self.hyper_box.check(xi)?;
        Ok(self.prior_unchecked(xi))
    }

    pub(crate) fn prior_unchecked(&self, xi: &[f64]) -> DiagonalGaussian {
        DiagonalGaussian {
            mean: self.mean_slots.iter().map(|s| s.resolve(xi)).collect(),
            variance: self.variance_slots.iter().map(|s| s.resolve(xi)).collect(),
        }
    }
}

/// Scalar quantity of interest `q(theta)`.
pub trait Qoi: Send + Sync {
    fn value(&self, theta: &[f64]) -> f64;
}

impl<F> Qoi for F
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn value(&self, theta: &[f64]) -> f64 {
        self(theta)
    }
}

/// Forward model, noise, prior family and QoI bundled together.
#[derive(Clone)]
pub struct InverseProblem {
    pub parameter_names: Vec<String>,
    pub forward: Arc<dyn ForwardModel>,
    pub noise: GaussianNoiseModel,
    pub prior_family: GaussianPriorFamily,
    pub qoi: Arc<dyn Qoi>,
}

impl fmt::Debug for InverseProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InverseProblem")
            .field("parameter_names", &self.parameter_names)
            .field("noise", &self.noise)
            .field("prior_family", &self.prior_family)
            .finish_non_exhaustive()
    }
}

impl InverseProblem {
    pub fn new(
        parameter_names: Vec<String>,
        forward: Arc<dyn ForwardModel>,
        noise: GaussianNoiseModel,
        prior_family: GaussianPriorFamily,
        qoi: Arc<dyn Qoi>,
    ) -> Result<Self> {
        let mut problems = Vec::new();
        if forward.n_obs() != noise.n_obs() {
            problems.push(format!(
                "forward model predicts {} observations but the data has {}",
                forward.n_obs(),
                noise.n_obs()
            ));
        }
        if forward.n_params() != prior_family.n_params() {
            problems.push(format!(
                "forward model takes {} parameters but the prior has {}",
                forward.n_params(),
                prior_family.n_params()
            ));
        }
        if parameter_names.len() != forward.n_params() {
            problems.push(format!(
                "{} parameter names for {} parameters",
                parameter_names.len(),
                forward.n_params()
            ));
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        Ok(Self {
            parameter_names,
            forward,
            noise,
            prior_family,
            qoi,
        })
    }

    pub fn n_params(&self) -> usize {
        self.forward.n_params()
    }

    pub fn hyper_box(&self) -> &HyperparameterBox {
        self.prior_family.hyper_box()
    }

    pub fn log_likelihood(&self, theta: &[f64]) -> Result<f64> {
        log_likelihood(self.forward.as_ref(), &self.noise, theta)
    }

    pub fn log_prior(&self, xi: &[f64], theta: &[f64]) -> Result<f64> {
        log_prior(&self.prior_family, xi, theta)
    }

    pub fn log_posterior_unnormalized(&self, xi: &[f64], theta: &[f64]) -> Result<f64> {
        Ok(self.log_likelihood(theta)? + self.log_prior(xi, theta)?)
    }

    /// Unnormalized log-posterior under an arbitrary Gaussian prior (e.g. the
    /// importance-sampling prior, which need not lie in the box).
    pub fn log_posterior_with_prior(&self, prior: &DiagonalGaussian, theta: &[f64]) -> Result<f64> {
        check_dim(theta, prior.dim())?;
        Ok(self.log_likelihood(theta)? + prior.log_density(theta))
    }
}

/// `-1/2 r^T Gamma_noise^{-1} r`, `r = B y(theta) - d`.
pub fn log_likelihood(
    model: &dyn ForwardModel,
    noise: &GaussianNoiseModel,
    theta: &[f64],
) -> Result<f64> {
    check_dim(theta, model.n_params())?;
    let predicted = model.evaluate(theta)?;
    if predicted.len() != noise.n_obs() {
        return Err(Error::Evaluation {
            theta: theta.to_vec(),
            reason: format!(
                "model returned {} observations, expected {}",
                predicted.len(),
                noise.n_obs()
            ),
        });
    }
    Ok(-0.5 * noise.misfit(&predicted))
}

/// Normalized log-density of `N(theta_xi, Gamma_xi)` at `theta`.
pub fn log_prior(family: &GaussianPriorFamily, xi: &[f64], theta: &[f64]) -> Result<f64> {
    check_dim(theta, family.n_params())?;
    Ok(family.prior(xi)?.log_density(theta))
}

pub(crate) fn check_dim(theta: &[f64], n: usize) -> Result<()> {
    if theta.len() != n {
        return Err(Error::Domain(format!(
            "parameter vector has dimension {} but {} was expected",
            theta.len(),
            n
        )));
    }
    Ok(())
}

/// Posterior of `d = A theta + noise` under a diagonal Gaussian prior:
/// precision `A^T G^-1 A + P^-1`, mean solving the normal equations.
pub fn gaussian_posterior(
    matrix: &DMatrix<f64>,
    noise: &GaussianNoiseModel,
    prior: &DiagonalGaussian,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = matrix.ncols();
    if prior.dim() != n {
        return Err(Error::Domain(format!(
            "prior dimension {} does not match {n} columns",
            prior.dim()
        )));
    }
    let prior_precision = DMatrix::from_diagonal(&DVector::from_iterator(
        n,
        prior.variance.iter().map(|v| 1.0 / v),
    ));
    let at_pinv = matrix.transpose() * noise.precision();
    let precision = &at_pinv * matrix + &prior_precision;
    let rhs = &at_pinv * noise.data() + &prior_precision * DVector::from_column_slice(&prior.mean);
    let chol = precision
        .cholesky()
        .ok_or_else(|| Error::Numerical("posterior precision is not positive definite".into()))?;
    let mean = chol.solve(&rhs);
    let cov = chol.inverse();
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok((mean, cov))
}
