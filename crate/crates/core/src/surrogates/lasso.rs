//! Lasso by cyclic coordinate descent with warm starts along a decreasing
//! penalty path:
//!
//! `min (1/2N) |y - b0 - X b|^2 + lambda |b|_1`
//!
//! The intercept is unpenalized and handled by centering. Each penalty is
//! solved until the duality gap is at most `tol * |y_c|^2 / 2`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LassoOptions {
    /// Duality gap relative to the null-model objective.
    pub tol: f64,
    /// Full sweeps per penalty value.
    pub max_sweeps: usize,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_sweeps: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub lambda: f64,
    pub intercept: f64,
    pub coef: Vec<f64>,
    /// Duality gap relative to the null-model objective.
    pub relative_gap: f64,
    pub sweeps: usize,
}

impl LassoFit {
    pub fn predict(&self, row: &[f64]) -> f64 {
        self.intercept + row.iter().zip(&self.coef).map(|(x, b)| x * b).sum::<f64>()
    }
}

/// Centred design stored by columns.
pub struct CenteredDesign {
    columns: Vec<Vec<f64>>,
    means: Vec<f64>,
    sq_norms: Vec<f64>,
    y: Vec<f64>,
    y_mean: f64,
}

impl CenteredDesign {
    /// `rows` are the `N` feature vectors.
    pub fn new(rows: &[Vec<f64>], y: &[f64]) -> Result<Self> {
        let n = rows.len();
        if n == 0 || y.len() != n {
            return Err(Error::Domain(format!("{n} rows and {} responses", y.len())));
        }
        let p = rows[0].len();
        let mut columns = vec![vec![0.0; n]; p];
        for (i, r) in rows.iter().enumerate() {
            for j in 0..p {
                columns[j][i] = r[j];
            }
        }
        let mut means = Vec::with_capacity(p);
        let mut sq_norms = Vec::with_capacity(p);
        for c in &mut columns {
            let m = c.iter().sum::<f64>() / n as f64;
            c.iter_mut().for_each(|v| *v -= m);
            means.push(m);
            sq_norms.push(c.iter().map(|v| v * v).sum());
        }
        let y_mean = y.iter().sum::<f64>() / n as f64;
        Ok(Self {
            columns,
            means,
            sq_norms,
            y: y.iter().map(|v| v - y_mean).collect(),
            y_mean,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    /// Smallest penalty with an all-zero solution: `|X_c^T y_c|_inf / N`.
    pub fn lambda_max(&self) -> f64 {
        self.columns
            .iter()
            .map(|c| dot(c, &self.y).abs())
            .fold(0.0, f64::max)
            / self.n_rows() as f64
    }

    pub fn centered_columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    /// Solutions at each penalty in `lambdas` (sorted decreasing first).
    pub fn path(&self, lambdas: &[f64], options: &LassoOptions) -> Vec<LassoFit> {
        let mut order: Vec<usize> = (0..lambdas.len()).collect();
        order.sort_by(|a, b| lambdas[*b].total_cmp(&lambdas[*a]));
        let p = self.n_features();
        let mut beta = vec![0.0; p];
        let mut resid = self.y.clone();
        let mut fits: Vec<Option<LassoFit>> = vec![None; lambdas.len()];
        for k in order {
            let (gap, sweeps) = self.solve(lambdas[k], &mut beta, &mut resid, options);
            let intercept = self.y_mean - dot(&self.means, &beta);
            fits[k] = Some(LassoFit {
                lambda: lambdas[k],
                intercept,
                coef: beta.clone(),
                relative_gap: gap,
                sweeps,
            });
        }
        fits.into_iter().map(|f| f.expect("every penalty solved")).collect()
    }

    fn update(&self, j: usize, alpha: f64, beta: &mut [f64], resid: &mut [f64]) -> f64 {
        let sq = self.sq_norms[j];
        if sq == 0.0 {
            return 0.0;
        }
        let col = &self.columns[j];
        let rho = dot(col, resid) + sq * beta[j];
        let new = soft_threshold(rho, alpha) / sq;
        let delta = new - beta[j];
        if delta != 0.0 {
            for (r, c) in resid.iter_mut().zip(col) {
                *r -= delta * c;
            }
            beta[j] = new;
        }
        delta.abs() * sq.sqrt()
    }

    /// Relative duality gap of the problem scaled by `N`.
    fn gap(&self, alpha: f64, beta: &[f64], resid: &[f64], null: f64) -> f64 {
        let max_corr = self
            .columns
            .iter()
            .map(|c| dot(c, resid).abs())
            .fold(0.0, f64::max);
        let scale = if max_corr > alpha { alpha / max_corr } else { 1.0 };
        let rr = dot(resid, resid);
        let primal = 0.5 * rr + alpha * beta.iter().map(|b| b.abs()).sum::<f64>();
        // dual at u = scale * r: |y|^2/2 - |y - u|^2/2
        let yu: f64 = self
            .y
            .iter()
            .zip(resid)
            .map(|(y, r)| (y - scale * r).powi(2))
            .sum();
        let dual = null - 0.5 * yu;
        (primal - dual).max(0.0) / null
    }

    fn solve(&self, lambda: f64, beta: &mut [f64], resid: &mut [f64], options: &LassoOptions) -> (f64, usize) {
        let null = 0.5 * dot(&self.y, &self.y);
        if null == 0.0 {
            beta.iter_mut().for_each(|b| *b = 0.0);
            resid.iter_mut().for_each(|r| *r = 0.0);
            return (0.0, 0);
        }
        let alpha = lambda * self.n_rows() as f64;
        let y_norm = null.sqrt();
        let p = self.n_features();
        let mut sweeps = 0;
        let mut gap = f64::INFINITY;
        while sweeps < options.max_sweeps {
            sweeps += 1;
            let mut full_change = 0.0f64;
            for j in 0..p {
                full_change = full_change.max(self.update(j, alpha, beta, resid));
            }
            gap = self.gap(alpha, beta, resid, null);
            if gap <= options.tol || full_change <= 1e-15 * y_norm {
                break;
            }
            let active: Vec<usize> = (0..p).filter(|j| beta[*j] != 0.0).collect();
            // sweep the active set until it settles, then recheck all features
            for _ in 0..10 * options.max_sweeps {
                let mut change = 0.0f64;
                for &j in &active {
                    change = change.max(self.update(j, alpha, beta, resid));
                }
                if change <= 1e-3 * options.tol.sqrt() * y_norm {
                    break;
                }
            }
        }
        (gap, sweeps)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(n: usize, p: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y = rows
            .iter()
            .map(|r| 2.0 + 3.0 * r[0] - 1.5 * r[1] + 0.1 * rng.random_range(-1.0..1.0))
            .collect();
        (rows, y)
    }

    #[test]
    fn zero_above_lambda_max() {
        let (rows, y) = random_problem(50, 6, 1);
        let d = CenteredDesign::new(&rows, &y).unwrap();
        let lm = d.lambda_max();
        let fits = d.path(&[lm * 1.0001, lm * 0.9], &LassoOptions::default());
        assert!(fits[0].coef.iter().all(|b| *b == 0.0));
        assert!((fits[0].intercept - y.iter().sum::<f64>() / 50.0).abs() < 1e-14);
        assert!(fits[1].coef.iter().any(|b| *b != 0.0));
    }

    #[test]
    fn kkt_conditions_hold() {
        let (rows, y) = random_problem(80, 10, 2);
        let d = CenteredDesign::new(&rows, &y).unwrap();
        let lambda = 0.01 * d.lambda_max();
        let opts = LassoOptions {
            tol: 1e-14,
            ..Default::default()
        };
        let fit = &d.path(&[lambda], &opts)[0];
        let n = 80.0;
        for (j, col) in d.centered_columns().iter().enumerate() {
            let r: Vec<f64> = (0..80)
                .map(|i| y[i] - fit.predict(&rows[i]))
                .collect();
            let g = dot(col, &r) / n;
            if fit.coef[j] != 0.0 {
                assert!((g - lambda * fit.coef[j].signum()).abs() < 1e-6 * lambda, "{j}: {g}");
            } else {
                assert!(g.abs() <= lambda * (1.0 + 1e-6));
            }
        }
    }

    #[test]
    fn tiny_penalty_is_least_squares() {
        let (rows, y) = random_problem(60, 4, 3);
        let d = CenteredDesign::new(&rows, &y).unwrap();
        let opts = LassoOptions {
            tol: 1e-20,
            max_sweeps: 100_000,
        };
        let fit = &d.path(&[0.0], &opts)[0];
        let x = nalgebra::DMatrix::from_fn(60, 5, |i, j| if j == 0 { 1.0 } else { rows[i][j - 1] });
        let ls = x.clone().svd(true, true).solve(&nalgebra::DVector::from_vec(y), 1e-14).unwrap();
        assert!((fit.intercept - ls[0]).abs() < 1e-10);
        for j in 0..4 {
            assert!((fit.coef[j] - ls[j + 1]).abs() < 1e-10);
        }
    }

    #[test]
    fn gap_reaches_tolerance_along_path() {
        let (rows, y) = random_problem(40, 30, 4);
        let d = CenteredDesign::new(&rows, &y).unwrap();
        let lm = d.lambda_max();
        let grid: Vec<f64> = (0..20).map(|k| lm * 10f64.powf(-6.0 * k as f64 / 19.0)).collect();
        for fit in d.path(&grid, &LassoOptions::default()) {
            assert!(fit.relative_gap <= 1e-8, "{fit:?}");
        }
    }
}
