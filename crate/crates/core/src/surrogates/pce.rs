//! Total-degree Legendre chaos expansions fitted by cross-validated lasso.
//!
//! Inputs are mapped affinely from the hyperparameter box to `[-1, 1]^n`; the
//! basis is `prod_j sqrt(2 a_j + 1) P_{a_j}(x_j)`, orthonormal under the
//! uniform measure, so Sobol indices are sums of squared coefficients.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::lasso::{CenteredDesign, LassoOptions};
use super::{check_training_data, SobolIndexReport};
use crate::error::{Error, Result};
use crate::problem::HyperparameterBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PceConfig {
    pub degree: usize,
    pub cv_folds: usize,
    /// Absolute penalties; `None` selects 20 log-spaced values over
    /// `[1e-6, 1] * lambda_max`.
    pub penalty_grid: Option<Vec<f64>>,
    pub lasso_tol: f64,
    pub max_sweeps: usize,
}

impl Default for PceConfig {
    fn default() -> Self {
        Self {
            degree: 5,
            cv_folds: 10,
            penalty_grid: None,
            lasso_tol: 1e-8,
            max_sweeps: 1000,
        }
    }
}

impl PceConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.cv_folds < 2 {
            problems.push(format!("cv_folds must be at least 2, got {}", self.cv_folds));
        }
        if let Some(g) = &self.penalty_grid {
            if g.is_empty() {
                problems.push("penalty_grid is empty".into());
            }
            if g.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
                problems.push("penalties must be finite and nonnegative".into());
            }
        }
        if !(self.lasso_tol > 0.0) {
            problems.push("lasso_tol must be positive".into());
        }
        if self.max_sweeps == 0 {
            problems.push("max_sweeps must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

pub const DEFAULT_GRID_SIZE: usize = 20;
pub const DEFAULT_GRID_SPAN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PceSurrogate {
    pub hyper_box: HyperparameterBox,
    pub degree: usize,
    /// Graded multi-indices; the first is all zeros.
    pub multi_indices: Vec<Vec<u32>>,
    pub coefficients: Vec<f64>,
    pub penalty: f64,
    pub cv_error: f64,
    pub training_rmse: f64,
}

/// All multi-indices of total degree at most `degree`, by degree then
/// lexicographically decreasing.
pub fn total_degree_indices(dim: usize, degree: usize) -> Vec<Vec<u32>> {
    fn fill(dim: usize, left: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == dim - 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for a in (0..=left).rev() {
            prefix.push(a);
            fill(dim, left - a, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if dim == 0 {
        return vec![vec![]];
    }
    for d in 0..=degree as u32 {
        fill(dim, d, &mut Vec::with_capacity(dim), &mut out);
    }
    out
}

/// `sqrt(2k + 1) P_k(x)` for `k = 0..=degree`.
pub fn orthonormal_legendre(x: f64, degree: usize) -> Vec<f64> {
    let mut p = vec![1.0; degree + 1];
    if degree >= 1 {
        p[1] = x;
    }
    for k in 1..degree {
        let kf = k as f64;
        p[k + 1] = ((2.0 * kf + 1.0) * x * p[k] - kf * p[k - 1]) / (kf + 1.0);
    }
    for (k, v) in p.iter_mut().enumerate() {
        *v *= (2.0 * k as f64 + 1.0).sqrt();
    }
    p
}

fn basis_row(z: &[f64], indices: &[Vec<u32>], degree: usize) -> Vec<f64> {
    let tables: Vec<Vec<f64>> = z.iter().map(|x| orthonormal_legendre(*x, degree)).collect();
    indices
        .iter()
        .map(|a| a.iter().enumerate().map(|(j, k)| tables[j][*k as usize]).product())
        .collect()
}

impl PceSurrogate {
    pub fn dim(&self) -> usize {
        self.hyper_box.dim()
    }

    pub fn predict(&self, xi: &[f64]) -> f64 {
        let z = self.hyper_box.to_symmetric(xi);
        basis_row(&z, &self.multi_indices, self.degree)
            .iter()
            .zip(&self.coefficients)
            .map(|(b, c)| b * c)
            .sum()
    }

    /// A surrogate with given coefficients over the full total-degree set.
    pub fn from_coefficients(hyper_box: HyperparameterBox, degree: usize, coefficients: Vec<f64>) -> Result<Self> {
        let multi_indices = total_degree_indices(hyper_box.dim(), degree);
        if coefficients.len() != multi_indices.len() {
            return Err(Error::Domain(format!(
                "{} coefficients for {} basis terms",
                coefficients.len(),
                multi_indices.len()
            )));
        }
        Ok(Self {
            hyper_box,
            degree,
            multi_indices,
            coefficients,
            penalty: 0.0,
            cv_error: f64::NAN,
            training_rmse: f64::NAN,
        })
    }
}

fn basis_rows(hyper_box: &HyperparameterBox, design: &[Vec<f64>], indices: &[Vec<u32>], degree: usize) -> Vec<Vec<f64>> {
    design
        .par_iter()
        .map(|xi| {
            let mut row = basis_row(&hyper_box.to_symmetric(xi), indices, degree);
            row.remove(0);
            row
        })
        .collect()
}

fn mse(fit: &super::lasso::LassoFit, rows: &[&Vec<f64>], y: &[f64]) -> f64 {
    rows.iter()
        .zip(y)
        .map(|(r, v)| (fit.predict(r) - v).powi(2))
        .sum::<f64>()
        / y.len() as f64
}

/// Fits a PCE by lasso, choosing the penalty by `cv_folds`-fold cross
/// validation (fold of point `i` is `i mod cv_folds`) and refitting on all
/// data.
pub fn fit_pce(
    hyper_box: &HyperparameterBox,
    design: &[Vec<f64>],
    values: &[f64],
    config: &PceConfig,
) -> Result<PceSurrogate> {
    config.validate()?;
    check_training_data(hyper_box, design, values, 2 * hyper_box.dim())?;
    if design.len() < config.cv_folds {
        return Err(Error::DesignTooSmall(format!(
            "{} points cannot be split into {} folds",
            design.len(),
            config.cv_folds
        )));
    }
    let indices = total_degree_indices(hyper_box.dim(), config.degree);
    let rows = basis_rows(hyper_box, design, &indices, config.degree);
    let full = CenteredDesign::new(&rows, values)?;
    let mut grid = match &config.penalty_grid {
        Some(g) => g.clone(),
        None => {
            let lm = full.lambda_max();
            (0..DEFAULT_GRID_SIZE)
                .map(|k| lm * DEFAULT_GRID_SPAN.powf(k as f64 / (DEFAULT_GRID_SIZE - 1) as f64))
                .collect()
        }
    };
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();
    if grid.contains(&0.0) {
        let p = indices.len() - 1;
        let x = DMatrix::from_fn(rows.len(), p, |i, j| full.centered_columns()[j][i]);
        let sv = x.singular_values();
        let smax = sv.max();
        let rank = sv.iter().filter(|s| **s > smax * 1e-10 * (rows.len().max(p) as f64)).count();
        if rank < p {
            return Err(Error::Numerical(format!(
                "design matrix has rank {rank} < {p} basis terms; use a positive penalty"
            )));
        }
    }
    let options = LassoOptions {
        tol: config.lasso_tol,
        max_sweeps: config.max_sweeps,
    };
    let k = config.cv_folds;
    let fold_errors: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|f| -> Result<Vec<f64>> {
            let (mut tr_rows, mut tr_y, mut va_rows, mut va_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for (i, (r, v)) in rows.iter().zip(values).enumerate() {
                if i % k == f {
                    va_rows.push(r);
                    va_y.push(*v);
                } else {
                    tr_rows.push(r.clone());
                    tr_y.push(*v);
                }
            }
            let d = CenteredDesign::new(&tr_rows, &tr_y)?;
            Ok(d.path(&grid, &options).iter().map(|fit| mse(fit, &va_rows, &va_y)).collect())
        })
        .collect::<Result<_>>()?;
    let cv: Vec<f64> = (0..grid.len())
        .map(|g| fold_errors.iter().map(|e| e[g]).sum::<f64>() / k as f64)
        .collect();
    let best = (0..grid.len())
        .min_by(|a, b| cv[*a].total_cmp(&cv[*b]))
        .expect("grid is nonempty");
    let fit = full.path(&grid[..=best], &options).pop().expect("path is nonempty");
    let all_rows: Vec<&Vec<f64>> = rows.iter().collect();
    let training_rmse = mse(&fit, &all_rows, values).sqrt();
    let mut coefficients = vec![fit.intercept];
    coefficients.extend(fit.coef);
    Ok(PceSurrogate {
        hyper_box: hyper_box.clone(),
        degree: config.degree,
        multi_indices: indices,
        coefficients,
        penalty: grid[best],
        cv_error: cv[best],
        training_rmse,
    })
}

/// Sobol indices from squared coefficients.
pub fn pce_sobol(surrogate: &PceSurrogate) -> SobolIndexReport {
    let n = surrogate.dim();
    let names = surrogate.hyper_box.names().to_vec();
    let mut variance = 0.0;
    let mut first = vec![0.0; n];
    let mut total = vec![0.0; n];
    for (a, c) in surrogate.multi_indices.iter().zip(&surrogate.coefficients) {
        let support: Vec<usize> = (0..n).filter(|j| a[*j] > 0).collect();
        if support.is_empty() {
            continue;
        }
        let c2 = c * c;
        variance += c2;
        if support.len() == 1 {
            first[support[0]] += c2;
        }
        for j in support {
            total[j] += c2;
        }
    }
    if variance <= 0.0 {
        return SobolIndexReport::constant(names, "pce");
    }
    SobolIndexReport {
        names,
        first_order: first.iter().map(|v| v / variance).collect(),
        total: total.iter().map(|v| v / variance).collect(),
        variance,
        method: "pce".into(),
        constant: false,
        provenance: Default::default(),
    }
}
