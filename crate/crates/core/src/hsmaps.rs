//! Hyperparameter-to-statistic maps: posterior mean and variance of the QoI
//! through importance reweighting, and the QoI at the MAP point through a
//! prior-regularized least-squares solve.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::PosteriorSampleSet;
use crate::io::{Cell, Table};
use crate::optim::{bfgs, central_gradient, BfgsOptions, BfgsResult};
use crate::problem::{gaussian_posterior, DiagonalGaussian, InverseProblem};

/// Which posterior statistic of the QoI a map returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatisticKind {
    Mean,
    Var,
    Map,
}

impl StatisticKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StatisticKind::Mean => "mean",
            StatisticKind::Var => "var",
            StatisticKind::Map => "map",
        }
    }
}

impl std::fmt::Display for StatisticKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Relative tolerance below which a negative variance estimate is rounding.
pub const VARIANCE_ROUNDING: f64 = 1e-12;

pub fn eval_f_mean(samples: &PosteriorSampleSet, xi: &[f64]) -> Result<f64> {
    samples.is_moment(xi, 1)
}

/// `E[q^2] - E[q]^2`, clamped at zero when negative only by rounding.
pub fn eval_f_var(samples: &PosteriorSampleSet, xi: &[f64]) -> Result<f64> {
    let w = samples.weights(xi)?;
    let q = samples.qoi_values();
    let m1 = w.expectation(|i| q[i]);
    let m2 = w.expectation(|i| q[i] * q[i]);
    let v = m2 - m1 * m1;
    if v >= 0.0 {
        Ok(v)
    } else if -v <= VARIANCE_ROUNDING * m2.abs() {
        log::warn!("variance {v:e} at xi = {xi:?} clamped to zero");
        Ok(0.0)
    } else {
        Err(Error::NegativeVariance {
            xi: xi.to_vec(),
            value: v,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapSolverConfig {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
    /// Perturbed starts in addition to the prior mean.
    pub restarts: usize,
    /// Start perturbations are this many prior standard deviations.
    pub dispersion: f64,
    pub seed: u64,
    /// Solve linear-Gaussian problems through the normal equations.
    pub linear_shortcut: bool,
}

impl Default for MapSolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            gradient_tolerance: 1e-6,
            step_tolerance: 1e-12,
            restarts: 2,
            dispersion: 0.5,
            seed: 0,
            linear_shortcut: true,
        }
    }
}

impl MapSolverConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.gradient_tolerance > 0.0) {
            problems.push(format!("gradient_tolerance must be positive, got {}", self.gradient_tolerance));
        }
        if !(self.step_tolerance > 0.0) {
            problems.push(format!("step_tolerance must be positive, got {}", self.step_tolerance));
        }
        if self.max_iterations == 0 {
            problems.push("max_iterations must be positive".into());
        }
        if !(self.dispersion >= 0.0) {
            problems.push(format!("dispersion must be nonnegative, got {}", self.dispersion));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    fn bfgs_options(&self) -> BfgsOptions {
        BfgsOptions {
            max_iterations: self.max_iterations,
            gradient_tolerance: self.gradient_tolerance,
            step_tolerance: self.step_tolerance,
        }
    }
}

/// Result of one MAP solve.
#[derive(Debug, Clone, PartialEq)]
pub struct MapSolution {
    pub theta: Vec<f64>,
    pub objective: f64,
    pub qoi: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    /// 0 for the prior-mean start.
    pub start: usize,
    /// True for the closed-form linear solve.
    pub exact: bool,
}

/// `J(theta) = r^T G^-1 r - 2 log pi_prior(theta)`.
pub fn map_objective(problem: &InverseProblem, prior: &DiagonalGaussian, theta: &[f64]) -> Result<f64> {
    let pred = problem.forward.evaluate(theta)?;
    Ok(problem.noise.misfit(&pred) - 2.0 * prior.log_density(theta))
}

fn objective_and_gradient(
    problem: &InverseProblem,
    prior: &DiagonalGaussian,
    theta: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let prior_grad = theta
        .iter()
        .zip(&prior.mean)
        .zip(&prior.variance)
        .map(|((t, m), v)| 2.0 * (t - m) / v);
    match problem.forward.evaluate_with_jacobian(theta) {
        Some(res) => {
            let (pred, jac) = res?;
            let r = pred - problem.noise.data();
            let pr = problem.noise.precision_times(&r);
            let value = r.dot(&pr) - 2.0 * prior.log_density(theta);
            let g = jac.transpose() * pr * 2.0;
            Ok((value, g.iter().zip(prior_grad).map(|(a, b)| a + b).collect()))
        }
        None => {
            let f = |t: &[f64]| map_objective(problem, prior, t);
            Ok((f(theta)?, central_gradient(&f, theta)?))
        }
    }
}

/// QoI at the MAP point for the prior selected by `xi`.
pub fn eval_f_map(problem: &InverseProblem, xi: &[f64], config: &MapSolverConfig) -> Result<MapSolution> {
    config.validate()?;
    let prior = problem.prior_family.prior(xi)?;
    if config.linear_shortcut {
        if let Some(a) = problem.forward.linear_operator() {
            let (mean, _) = gaussian_posterior(a, &problem.noise, &prior)?;
            let theta = mean.as_slice().to_vec();
            let (objective, grad) = objective_and_gradient(problem, &prior, &theta)?;
            return Ok(MapSolution {
                qoi: problem.qoi.value(&theta),
                objective,
                gradient_norm: DVector::from_vec(grad).norm(),
                theta,
                iterations: 0,
                start: 0,
                exact: true,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut starts = vec![prior.mean.clone()];
    for _ in 0..config.restarts {
        starts.push(
            prior
                .mean
                .iter()
                .zip(&prior.variance)
                .map(|(m, v)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + config.dispersion * v.sqrt() * z
                })
                .collect(),
        );
    }
    let options = config.bfgs_options();
    let mut best_converged: Option<(usize, BfgsResult)> = None;
    let mut best_any: Option<BfgsResult> = None;
    let mut first_error = None;
    for (k, x0) in starts.iter().enumerate() {
        let run = bfgs(|t| objective_and_gradient(problem, &prior, t), x0, &options);
        let run = match run {
            Ok(r) => r,
            Err(e) => {
                first_error.get_or_insert(e);
                continue;
            }
        };
        if best_any.as_ref().is_none_or(|b| run.value < b.value) {
            best_any = Some(run.clone());
        }
        if run.converged(&options) && best_converged.as_ref().is_none_or(|b| run.value < b.1.value) {
            best_converged = Some((k, run));
        }
    }
    match (best_converged, best_any) {
        (Some((k, r)), _) => Ok(MapSolution {
            qoi: problem.qoi.value(&r.x),
            objective: r.value,
            gradient_norm: r.gradient_norm,
            iterations: r.iterations,
            theta: r.x,
            start: k,
            exact: false,
        }),
        (None, Some(r)) => Err(Error::OptimizationFailure {
            best_qoi: problem.qoi.value(&r.x),
            best_objective: r.value,
            best_theta: r.x,
        }),
        (None, None) => Err(first_error.expect("at least one start ran")),
    }
}

/// Per-point diagnostic stored alongside map values.
#[derive(Debug, Clone, PartialEq)]
pub enum PointDiagnostic {
    Ess(f64),
    Optimizer {
        gradient_norm: f64,
        iterations: usize,
        objective: f64,
        exact: bool,
    },
}

/// Values of one statistic over a design. Points whose evaluation failed are
/// kept apart in `failures` and excluded from `design`/`values`.
#[derive(Debug, Clone, PartialEq)]
pub struct HsMapEvaluations {
    pub kind: StatisticKind,
    pub names: Vec<String>,
    pub design: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub diagnostics: Vec<PointDiagnostic>,
    pub failures: Vec<(Vec<f64>, String)>,
    /// `M` for importance-sampled maps.
    pub total_samples: Option<u64>,
}

impl HsMapEvaluations {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_table(&self) -> Table {
        let mut cols = self.names.clone();
        cols.push("value".into());
        let tail: &[&str] = match self.kind {
            StatisticKind::Map => &["gradient_norm", "iterations", "objective", "status"],
            _ => &["ess", "status"],
        };
        cols.extend(tail.iter().map(|s| s.to_string()));
        let mut t = Table::new(cols).meta("statistic", self.kind);
        if let Some(m) = self.total_samples {
            t = t.meta("M", m);
        }
        for ((xi, v), d) in self.design.iter().zip(&self.values).zip(&self.diagnostics) {
            let mut row: Vec<Cell> = xi.iter().map(|x| Cell::Num(*x)).collect();
            row.push(Cell::Num(*v));
            match d {
                PointDiagnostic::Ess(e) => {
                    row.push(Cell::Num(*e));
                    row.push("ok".into());
                }
                PointDiagnostic::Optimizer {
                    gradient_norm,
                    iterations,
                    objective,
                    exact,
                } => {
                    row.push(Cell::Num(*gradient_norm));
                    row.push((*iterations).into());
                    row.push(Cell::Num(*objective));
                    row.push(if *exact { "exact" } else { "converged" }.into());
                }
            }
            t.push(row);
        }
        let pad = tail.len() - 1;
        for (xi, msg) in &self.failures {
            let mut row: Vec<Cell> = xi.iter().map(|x| Cell::Num(*x)).collect();
            row.extend((0..=pad).map(|_| Cell::Num(f64::NAN)));
            row.push(Cell::Text(format!("failed: {}", msg.replace([',', '\n'], ";"))));
            t.push(row);
        }
        t
    }
}

/// Largest tolerated fraction of failed design points.
pub const MAX_FAILURE_FRACTION: f64 = 0.1;

fn collect(
    kind: StatisticKind,
    names: &[String],
    design: &[Vec<f64>],
    results: Vec<Result<(f64, PointDiagnostic)>>,
    total_samples: Option<u64>,
) -> Result<HsMapEvaluations> {
    let mut out = HsMapEvaluations {
        kind,
        names: names.to_vec(),
        design: Vec::new(),
        values: Vec::new(),
        diagnostics: Vec::new(),
        failures: Vec::new(),
        total_samples,
    };
    for (xi, r) in design.iter().zip(results) {
        match r {
            Ok((v, d)) => {
                out.design.push(xi.clone());
                out.values.push(v);
                out.diagnostics.push(d);
            }
            Err(e) => out.failures.push((xi.clone(), e.to_string())),
        }
    }
    let failed = out.failures.len();
    if failed as f64 > MAX_FAILURE_FRACTION * design.len() as f64 {
        return Err(Error::DesignFailures {
            failed,
            total: design.len(),
            first: out.failures[0].1.clone(),
        });
    }
    if failed > 0 {
        log::warn!("{failed} of {} design points failed and were dropped", design.len());
    }
    Ok(out)
}

/// `F_mean` or `F_var` at every design point.
pub fn eval_is_over_design(
    samples: &PosteriorSampleSet,
    design: &[Vec<f64>],
    kind: StatisticKind,
) -> Result<HsMapEvaluations> {
    let eval: fn(&PosteriorSampleSet, &[f64]) -> Result<f64> = match kind {
        StatisticKind::Mean => eval_f_mean,
        StatisticKind::Var => eval_f_var,
        StatisticKind::Map => {
            return Err(Error::Unsupported(
                "the MAP statistic is not importance sampled; use eval_map_over_design".into(),
            ))
        }
    };
    let results = design
        .par_iter()
        .map(|xi| {
            let v = eval(samples, xi)?;
            Ok((v, PointDiagnostic::Ess(samples.effective_sample_size(xi)?)))
        })
        .collect();
    collect(
        kind,
        samples.family().hyper_box().names(),
        design,
        results,
        Some(samples.total_count()),
    )
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// `F_MAP` at every design point; point `k` draws its restarts from
/// `seed + k * golden`.
pub fn eval_map_over_design(
    problem: &InverseProblem,
    design: &[Vec<f64>],
    config: &MapSolverConfig,
) -> Result<HsMapEvaluations> {
    config.validate()?;
    let results = design
        .par_iter()
        .enumerate()
        .map(|(k, xi)| {
            let cfg = MapSolverConfig {
                seed: config.seed.wrapping_add((k as u64).wrapping_mul(GOLDEN)),
                ..config.clone()
            };
            let s = eval_f_map(problem, xi, &cfg)?;
            Ok((
                s.qoi,
                PointDiagnostic::Optimizer {
                    gradient_norm: s.gradient_norm,
                    iterations: s.iterations,
                    objective: s.objective,
                    exact: s.exact,
                },
            ))
        })
        .collect();
    collect(StatisticKind::Map, problem.hyper_box().names(), design, results, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::linear::{self, LinearGaussian};
    use crate::importance::Provenance;
    use crate::problem::{GaussianNoiseModel, GaussianPriorFamily, HyperparameterBox, Slot};
    use std::sync::Arc;

    fn linear_problem() -> InverseProblem {
        LinearGaussian::shipped().inverse_problem().unwrap()
    }

    #[test]
    fn map_shortcut_matches_posterior_mean() {
        let p = LinearGaussian::shipped();
        let problem = p.inverse_problem().unwrap();
        let xi = [0.6, 1.4, 0.9, 0.7];
        let s = eval_f_map(&problem, &xi, &MapSolverConfig::default()).unwrap();
        let (m, _) = p.posterior(&xi).unwrap();
        assert!((DVector::from_vec(s.theta.clone()) - &m).norm() < 1e-12);
        assert!(s.gradient_norm < 1e-10);
        assert_eq!(s.qoi, linear::quadratic_qoi(&s.theta));
    }

    #[test]
    fn map_bfgs_matches_posterior_mean() {
        let p = LinearGaussian::shipped();
        let problem = p.inverse_problem().unwrap();
        let cfg = MapSolverConfig {
            linear_shortcut: false,
            gradient_tolerance: 1e-11,
            ..Default::default()
        };
        for xi in [[1.0; 4], [0.5, 1.5, 1.5, 0.5], [1.3, 0.6, 0.55, 1.45]] {
            let s = eval_f_map(&problem, &xi, &cfg).unwrap();
            let (m, _) = p.posterior(&xi).unwrap();
            assert!((DVector::from_vec(s.theta) - m).norm() < 1e-9);
        }
    }

    /// Linear model that hides its matrix, forcing finite differences.
    struct Opaque(nalgebra::DMatrix<f64>);
    impl crate::problem::ForwardModel for Opaque {
        fn n_params(&self) -> usize {
            self.0.ncols()
        }
        fn n_obs(&self) -> usize {
            self.0.nrows()
        }
        fn evaluate(&self, theta: &[f64]) -> Result<DVector<f64>> {
            Ok(&self.0 * DVector::from_column_slice(theta))
        }
    }

    #[test]
    fn map_with_finite_differences() {
        let p = LinearGaussian::shipped();
        let mut problem = p.inverse_problem().unwrap();
        problem.forward = Arc::new(Opaque(p.matrix.clone()));
        let xi = [0.8, 1.2, 1.1, 0.6];
        let cfg = MapSolverConfig {
            gradient_tolerance: 1e-7,
            ..Default::default()
        };
        let s = eval_f_map(&problem, &xi, &cfg).unwrap();
        let (m, _) = p.posterior(&xi).unwrap();
        assert!((DVector::from_vec(s.theta) - m).norm() < 1e-7);
    }

    #[test]
    fn prior_dominated_limit() {
        let p = LinearGaussian::shipped();
        let noise = GaussianNoiseModel::diagonal(&[1e14; 4], p.noise.data().clone()).unwrap();
        let mut problem = p.inverse_problem().unwrap();
        problem.noise = noise;
        let xi = [0.7, 1.2, 1.0, 1.0];
        for shortcut in [true, false] {
            let cfg = MapSolverConfig {
                linear_shortcut: shortcut,
                ..Default::default()
            };
            let s = eval_f_map(&problem, &xi, &cfg).unwrap();
            assert!((s.theta[0] - 0.7).abs() < 1e-9 && (s.theta[1] - 1.2).abs() < 1e-9);
            assert!((s.qoi - (0.49 + 1.44)).abs() < 1e-8);
        }
    }

    #[test]
    fn map_ignores_objective_constants() {
        let problem = linear_problem();
        let xi = [1.1, 0.9, 0.8, 1.3];
        let prior = problem.prior_family.prior(&xi).unwrap();
        let opts = BfgsOptions {
            gradient_tolerance: 1e-11,
            ..Default::default()
        };
        let a = bfgs(|t| objective_and_gradient(&problem, &prior, t), &prior.mean, &opts).unwrap();
        let b = bfgs(
            |t| objective_and_gradient(&problem, &prior, t).map(|(v, g)| (v + 1234.5, g)),
            &prior.mean,
            &opts,
        )
        .unwrap();
        assert!((DVector::from_vec(a.x) - DVector::from_vec(b.x)).norm() < 1e-10);
    }

    #[test]
    fn nonconvergence_reports_best() {
        let problem = linear_problem();
        let cfg = MapSolverConfig {
            linear_shortcut: false,
            max_iterations: 1,
            gradient_tolerance: 1e-300,
            ..Default::default()
        };
        match eval_f_map(&problem, &[1.0; 4], &cfg) {
            Err(Error::OptimizationFailure { best_objective, .. }) => assert!(best_objective.is_finite()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn map_over_design() {
        let p = LinearGaussian::shipped();
        let problem = p.inverse_problem().unwrap();
        let design = crate::sampling::lhs_sample(problem.hyper_box(), 12, 3).unwrap();
        let ev = eval_map_over_design(&problem, &design, &MapSolverConfig::default()).unwrap();
        assert_eq!(ev.len(), 12);
        for (xi, v) in ev.design.iter().zip(&ev.values) {
            let (m, _) = p.posterior(xi).unwrap();
            assert!((v - m.dot(&m)).abs() < 1e-12);
        }
        let single = eval_map_over_design(&problem, &design[..1], &MapSolverConfig::default()).unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn design_failure_threshold() {
        let problem = linear_problem();
        let mut design = crate::sampling::lhs_sample(problem.hyper_box(), 20, 1).unwrap();
        design[3] = vec![9.0; 4];
        let ev = eval_map_over_design(&problem, &design, &MapSolverConfig::default()).unwrap();
        assert_eq!((ev.len(), ev.failures.len()), (19, 1));
        design[4] = vec![9.0; 4];
        design[5] = vec![9.0; 4];
        assert!(matches!(
            eval_map_over_design(&problem, &design, &MapSolverConfig::default()),
            Err(Error::DesignFailures { failed: 3, total: 20, .. })
        ));
    }

    fn toy_samples(q: impl Fn(f64) -> f64) -> PosteriorSampleSet {
        let bx = HyperparameterBox::unnamed(&[(-1.0, 1.0), (0.5, 2.0)]).unwrap();
        let family = GaussianPriorFamily::new(bx, vec![Slot::Hyper(0)], vec![Slot::Hyper(1)]).unwrap();
        let is_prior = DiagonalGaussian::new(vec![0.0], vec![1.0]).unwrap();
        let draws: Vec<f64> = (0..50).map(|i| -2.0 + 0.08 * i as f64).collect();
        PosteriorSampleSet::from_parts(
            1,
            draws.clone(),
            vec![1; 50],
            draws.iter().map(|t| q(*t)).collect(),
            draws.iter().map(|t| is_prior.log_density(&[*t])).collect(),
            is_prior,
            family,
            Provenance::default(),
        )
        .unwrap()
    }

    #[test]
    fn constant_qoi_maps() {
        let zero = toy_samples(|_| 0.0);
        assert_eq!(eval_f_mean(&zero, &[0.3, 1.2]).unwrap(), 0.0);
        let c = toy_samples(|_| 3.7);
        assert!(eval_f_var(&c, &[-0.4, 0.7]).unwrap().abs() <= 1e-12 * 3.7 * 3.7);
    }

    #[test]
    fn var_map_is_nonnegative_and_csv_has_ess() {
        let s = toy_samples(|t| t.sin());
        let design = crate::sampling::lhs_sample(s.family().hyper_box(), 30, 2).unwrap();
        let ev = eval_is_over_design(&s, &design, StatisticKind::Var).unwrap();
        assert!(ev.values.iter().all(|v| *v >= 0.0));
        let t = ev.to_table();
        assert_eq!(t.rows.len(), 30);
        assert_eq!(t.meta_value("statistic"), Some("var"));
        assert!(t.column("ess").unwrap().iter().all(|e| *e >= 1.0));
        assert!(eval_is_over_design(&s, &design, StatisticKind::Map).is_err());
    }
}
