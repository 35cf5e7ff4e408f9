//! SEIR epidemic with births and natural deaths at equal rate `mu`:
//!
//! ```text
//! S' = mu N - beta S I / N - mu S
//! E' = beta S I / N - (sigma + mu) E
//! I' = sigma E - (gamma + mu) I
//! R' = gamma I - mu R
//! ```
//!
//! Inversion parameters are the logs of `(mu, beta, sigma, gamma)`; the data
//! are noisy `I` counts. The QoI is the basic reproduction number.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ode::{integrate, OdeTolerances};
use crate::error::{Error, Result};
use crate::io::Table;
use crate::problem::{
    check_dim, DiagonalGaussian, ForwardModel, GaussianNoiseModel, GaussianPriorFamily,
    HyperparameterBox, InverseProblem,
};

pub const POPULATION: f64 = 1000.0;
/// `(S, E, I, R)` at `t = 0`.
pub const INITIAL_STATE: [f64; 4] = [999.0, 0.0, 1.0, 0.0];
/// `(mu, beta, sigma, gamma)` generating the data.
pub const TRUE_RATES: [f64; 4] = [5.48e-5, 1.0 / 2.5, 1.0 / 3.0, 1.0 / 7.0];
pub const NOISE_STD: f64 = 30.0;
pub const PARAM_NAMES: [&str; 4] = ["log_mu", "log_beta", "log_sigma", "log_gamma"];
pub const HYPER_NAMES: [&str; 8] = [
    "m_log_mu",
    "m_log_beta",
    "m_log_sigma",
    "m_log_gamma",
    "s2_log_mu",
    "s2_log_beta",
    "s2_log_sigma",
    "s2_log_gamma",
];
/// Seed of the committed dataset.
pub const SHIPPED_DATA_SEED: u64 = 20_210_602;
/// Latest time the model is meant to be integrated to.
pub const HORIZON: f64 = 120.0;

const SHIPPED_DATA: &str = include_str!("../../data/seir_data.csv");

/// `t_k = 3k + 30`, `k = 1..=15`.
pub fn observation_times() -> Vec<f64> {
    (1..=15).map(|k| 3.0 * k as f64 + 30.0).collect()
}

pub fn true_log_params() -> Vec<f64> {
    TRUE_RATES.iter().map(|r| r.ln()).collect()
}

pub fn hyper_box() -> HyperparameterBox {
    HyperparameterBox::new(
        HYPER_NAMES.iter().map(|s| s.to_string()).collect(),
        vec![-15.0, -2.25, -2.25, -2.25, 0.5, 0.5, 0.5, 0.5],
        vec![-5.0, -0.75, -0.75, -0.75, 1.5, 1.5, 1.5, 1.5],
    )
    .expect("static box is valid")
}

/// Box midpoints: means `(-10, -1.5, -1.5, -1.5)`, unit variances.
pub fn nominal_hyperparameters() -> Vec<f64> {
    hyper_box().midpoint()
}

/// Means `(-10, -1.5, -1.5, -1.5)`, standard deviations `(3, 2, 2, 2)`.
pub fn is_prior() -> DiagonalGaussian {
    DiagonalGaussian::new(vec![-10.0, -1.5, -1.5, -1.5], vec![9.0, 4.0, 4.0, 4.0])
        .expect("static prior is valid")
}

/// `R0 = beta / (gamma + mu) * sigma / (sigma + mu)` from log-rates.
pub fn r0_qoi(theta: &[f64]) -> f64 {
    let [mu, beta, sigma, gamma] = [0, 1, 2, 3].map(|i| theta[i].exp());
    beta / (gamma + mu) * sigma / (sigma + mu)
}

fn rhs(p: &[f64; 4], y: &[f64], dy: &mut [f64]) {
    let [mu, beta, sigma, gamma] = *p;
    let (s, e, i, r) = (y[0], y[1], y[2], y[3]);
    let infection = beta * s * i / POPULATION;
    dy[0] = mu * POPULATION - infection - mu * s;
    dy[1] = infection - (sigma + mu) * e;
    dy[2] = sigma * e - (gamma + mu) * i;
    dy[3] = gamma * i - mu * r;
}

/// State plus `d state / d log p_j` for each of the four rates (20 entries,
/// block `j` at `4 + 4j`).
fn rhs_with_sensitivities(p: &[f64; 4], y: &[f64], dy: &mut [f64]) {
    rhs(p, &y[..4], &mut dy[..4]);
    let [mu, beta, sigma, gamma] = *p;
    let (s, e, i, r) = (y[0], y[1], y[2], y[3]);
    let n = POPULATION;
    let jac = [
        [-beta * i / n - mu, 0.0, -beta * s / n, 0.0],
        [beta * i / n, -(sigma + mu), beta * s / n, 0.0],
        [0.0, sigma, -(gamma + mu), 0.0],
        [0.0, 0.0, gamma, -mu],
    ];
    // d f / d p_j, multiplied by p_j below for the log parametrization
    let df_dp = [
        [n - s, -e, -i, -r],
        [-s * i / n, s * i / n, 0.0, 0.0],
        [0.0, -e, e, 0.0],
        [0.0, 0.0, -i, i],
    ];
    for j in 0..4 {
        let sj = &y[4 + 4 * j..8 + 4 * j];
        for row in 0..4 {
            let mut acc = p[j] * df_dp[j][row];
            for col in 0..4 {
                acc += jac[row][col] * sj[col];
            }
            dy[4 + 4 * j + row] = acc;
        }
    }
}

fn rates(theta: &[f64]) -> Result<[f64; 4]> {
    check_dim(theta, 4)?;
    let p = [0, 1, 2, 3].map(|i| theta[i].exp());
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::Evaluation {
            theta: theta.to_vec(),
            reason: "rates overflow".into(),
        });
    }
    Ok(p)
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.iter().any(|t| !(0.0..=HORIZON).contains(t)) || times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Domain(format!(
            "output times must be nondecreasing within [0, {HORIZON}]"
        )));
    }
    Ok(())
}

fn as_evaluation(theta: &[f64]) -> impl Fn(Error) -> Error + '_ {
    move |e| Error::Evaluation {
        theta: theta.to_vec(),
        reason: e.to_string(),
    }
}

/// Full `(S, E, I, R)` states at `times` for log-rates `theta`.
pub fn integrate_seir_states(theta: &[f64], times: &[f64], tol: OdeTolerances) -> Result<Vec<[f64; 4]>> {
    let p = rates(theta)?;
    check_times(times)?;
    let ys = integrate(|_, y, dy| rhs(&p, y, dy), 0.0, &INITIAL_STATE, times, tol)
        .map_err(as_evaluation(theta))?;
    Ok(ys.into_iter().map(|y| [y[0], y[1], y[2], y[3]]).collect())
}

/// `I(t)` at each of `times`.
pub fn integrate_seir(theta: &[f64], times: &[f64], tol: OdeTolerances) -> Result<Vec<f64>> {
    Ok(integrate_seir_states(theta, times, tol)?
        .into_iter()
        .map(|y| y[2])
        .collect())
}

/// `I(t)` and `d I(t) / d theta` at each of `times`.
pub fn integrate_seir_with_sensitivities(
    theta: &[f64],
    times: &[f64],
    tol: OdeTolerances,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let p = rates(theta)?;
    check_times(times)?;
    let mut y0 = [0.0; 20];
    y0[..4].copy_from_slice(&INITIAL_STATE);
    let ys = integrate(|_, y, dy| rhs_with_sensitivities(&p, y, dy), 0.0, &y0, times, tol)
        .map_err(as_evaluation(theta))?;
    let values = ys.iter().map(|y| y[2]).collect();
    let jac = DMatrix::from_fn(times.len(), 4, |k, j| ys[k][4 + 4 * j + 2]);
    Ok((values, jac))
}

/// Noisy `I` observations at the truth: `(t_k, I(t_k) + noise_std eta_k)`.
pub fn simulate_seir_data(seed: u64, noise_std: f64, tol: OdeTolerances) -> Result<Vec<(f64, f64)>> {
    let times = observation_times();
    let clean = integrate_seir(&true_log_params(), &times, tol)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(times
        .into_iter()
        .zip(clean)
        .map(|(t, i)| {
            let eta: f64 = StandardNormal.sample(&mut rng);
            (t, i + noise_std * eta)
        })
        .collect())
}

/// The committed dataset ([`SHIPPED_DATA_SEED`], noise std 30).
pub fn shipped_data() -> Vec<(f64, f64)> {
    let table = Table::parse(SHIPPED_DATA, "seir_data.csv").expect("committed data parses");
    let t = table.column("t").expect("committed data has a t column");
    let v = table.column("value").expect("committed data has a value column");
    t.into_iter().zip(v).collect()
}

/// `theta -> I(t_k)`.
#[derive(Debug, Clone)]
pub struct SeirModel {
    pub times: Vec<f64>,
    pub tolerances: OdeTolerances,
}

impl SeirModel {
    pub fn new(times: Vec<f64>, tolerances: OdeTolerances) -> Result<Self> {
        check_times(&times)?;
        Ok(Self { times, tolerances })
    }
}

impl ForwardModel for SeirModel {
    fn n_params(&self) -> usize {
        4
    }

    fn n_obs(&self) -> usize {
        self.times.len()
    }

    fn evaluate(&self, theta: &[f64]) -> Result<DVector<f64>> {
        integrate_seir(theta, &self.times, self.tolerances).map(DVector::from_vec)
    }

    fn evaluate_with_jacobian(
        &self,
        theta: &[f64],
    ) -> Option<Result<(DVector<f64>, DMatrix<f64>)>> {
        Some(
            integrate_seir_with_sensitivities(theta, &self.times, self.tolerances)
                .map(|(v, j)| (DVector::from_vec(v), j)),
        )
    }
}

/// The SEIR inverse problem on `(t_k, I_k)` data.
pub fn seir_problem(data: &[(f64, f64)], tol: OdeTolerances) -> Result<InverseProblem> {
    let times: Vec<f64> = data.iter().map(|d| d.0).collect();
    let values = DVector::from_iterator(data.len(), data.iter().map(|d| d.1));
    InverseProblem::new(
        PARAM_NAMES.iter().map(|s| s.to_string()).collect(),
        Arc::new(SeirModel::new(times, tol)?),
        GaussianNoiseModel::diagonal(&vec![NOISE_STD * NOISE_STD; data.len()], values)?,
        GaussianPriorFamily::means_then_variances(hyper_box())?,
        Arc::new(r0_qoi),
    )
}

pub fn shipped_problem() -> InverseProblem {
    seir_problem(&shipped_data(), OdeTolerances::default()).expect("committed problem is valid")
}
