//! Sparse-weight extreme learning machine with sine activation:
//!
//! `f(x) = beta_0 + sum_k beta_k sin(w_k . z + b_k)`, `z` the input mapped to
//! `[-1, 1]^n`.
//!
//! Hidden weights are random and sparsified row by row; only the output layer
//! is fitted. For uniform inputs `E[exp(i w z_j)] = sinc(w)`, which gives every
//! conditional variance, and hence every Sobol index, in closed form.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check_training_data, SobolIndexReport};
use crate::error::{Error, Result};
use crate::problem::HyperparameterBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwelmConfig {
    pub validation_fraction: f64,
    /// Fractions of input weights kept per hidden node.
    pub p_grid: Vec<f64>,
    /// Hidden width; `None` is half the training-set size.
    pub width: Option<usize>,
    /// Ridge added to the Gram matrix, relative to its mean diagonal.
    pub ridge: f64,
    pub seed: u64,
}

impl Default for SwelmConfig {
    fn default() -> Self {
        Self {
            validation_fraction: 0.2,
            p_grid: vec![0.25, 0.5, 0.75, 1.0],
            width: None,
            ridge: 1e-10,
            seed: 0,
        }
    }
}

impl SwelmConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            problems.push(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            ));
        }
        if self.p_grid.is_empty() || self.p_grid.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) {
            problems.push("p_grid must be nonempty with entries in (0, 1]".into());
        }
        if self.width == Some(0) {
            problems.push("width must be positive".into());
        }
        if !(self.ridge >= 0.0) {
            problems.push("ridge must be nonnegative".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

pub const MIN_DESIGN: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwelmSurrogate {
    pub hyper_box: HyperparameterBox,
    /// Row `k` holds the input weights of hidden node `k`.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub output_weights: Vec<f64>,
    pub output_bias: f64,
    pub sparsity: f64,
    pub validation_rmse: f64,
    pub training_rmse: f64,
}

impl SwelmSurrogate {
    pub fn width(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.hyper_box.dim()
    }

    fn predict_symmetric(&self, z: &[f64]) -> f64 {
        self.output_bias
            + self
                .weights
                .iter()
                .zip(&self.biases)
                .zip(&self.output_weights)
                .map(|((w, b), beta)| beta * (dot(w, z) + b).sin())
                .sum::<f64>()
    }

    pub fn predict(&self, xi: &[f64]) -> f64 {
        self.predict_symmetric(&self.hyper_box.to_symmetric(xi))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Keeps the `ceil(p n)` largest-magnitude entries of each row.
pub fn sparsify(weights: &[Vec<f64>], p: f64) -> Vec<Vec<f64>> {
    weights
        .iter()
        .map(|row| {
            let keep = ((p * row.len() as f64).ceil() as usize).clamp(1, row.len());
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|a, b| row[*b].abs().total_cmp(&row[*a].abs()));
            let mut out = vec![0.0; row.len()];
            for &j in &order[..keep] {
                out[j] = row[j];
            }
            out
        })
        .collect()
}

/// Ridge least squares for output weights with a centred intercept.
fn solve_output(h: &DMatrix<f64>, y: &[f64], ridge: f64) -> (Vec<f64>, f64) {
    let n = h.nrows() as f64;
    let col_means: DVector<f64> = DVector::from_iterator(h.ncols(), h.column_iter().map(|c| c.sum() / n));
    let y_mean = y.iter().sum::<f64>() / n;
    let mut hc = h.clone();
    for (j, mut c) in hc.column_iter_mut().enumerate() {
        c.add_scalar_mut(-col_means[j]);
    }
    let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - y_mean));
    let mut gram = hc.transpose() * &hc;
    let k = gram.nrows();
    let shift = ridge * gram.trace() / k as f64;
    // a zero Gram (constant features) still needs a positive shift
    let shift = if shift > 0.0 { shift } else { f64::MIN_POSITIVE.sqrt() };
    for i in 0..k {
        gram[(i, i)] += shift;
    }
    let rhs = hc.transpose() * yc;
    let beta = match gram.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        None => gram
            .svd(true, true)
            .solve(&rhs, 1e-14)
            .unwrap_or_else(|_| DVector::zeros(k)),
    };
    let bias = y_mean - col_means.dot(&beta);
    (beta.as_slice().to_vec(), bias)
}

fn features(weights: &[Vec<f64>], biases: &[f64], zs: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(zs.len(), weights.len(), |i, k| (dot(&weights[k], &zs[i]) + biases[k]).sin())
}

fn rmse(pred: &DVector<f64>, y: &[f64]) -> f64 {
    (pred.iter().zip(y).map(|(p, v)| (p - v).powi(2)).sum::<f64>() / y.len() as f64).sqrt()
}

/// Random seeded split, hidden layer draw, and validation of the sparsity
/// fraction.
pub fn fit_swelm(
    hyper_box: &HyperparameterBox,
    design: &[Vec<f64>],
    values: &[f64],
    config: &SwelmConfig,
) -> Result<SwelmSurrogate> {
    config.validate()?;
    check_training_data(hyper_box, design, values, MIN_DESIGN)?;
    let n_points = design.len();
    let n = hyper_box.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n_points).collect();
    order.shuffle(&mut rng);
    let n_val = ((config.validation_fraction * n_points as f64).round() as usize).clamp(1, n_points - 2);
    let (val_idx, train_idx) = order.split_at(n_val);
    let width = config.width.unwrap_or(train_idx.len() / 2).max(1);

    let scale = 1.0 / (n as f64).sqrt();
    let dense: Vec<Vec<f64>> = (0..width)
        .map(|_| {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * scale
                })
                .collect()
        })
        .collect();
    let biases: Vec<f64> = (0..width).map(|_| rng.random_range(-1.0..=1.0)).collect();

    let zs = |idx: &[usize]| -> Vec<Vec<f64>> { idx.iter().map(|i| hyper_box.to_symmetric(&design[*i])).collect() };
    let (z_train, z_val) = (zs(train_idx), zs(val_idx));
    let y_train: Vec<f64> = train_idx.iter().map(|i| values[*i]).collect();
    let y_val: Vec<f64> = val_idx.iter().map(|i| values[*i]).collect();

    let mut best: Option<SwelmSurrogate> = None;
    for &p in &config.p_grid {
        let weights = sparsify(&dense, p);
        let h_train = features(&weights, &biases, &z_train);
        let (beta, beta0) = solve_output(&h_train, &y_train, config.ridge);
        let beta_v = DVector::from_column_slice(&beta);
        let pred_train = (&h_train * &beta_v).add_scalar(beta0);
        let pred_val = (features(&weights, &biases, &z_val) * &beta_v).add_scalar(beta0);
        let candidate = SwelmSurrogate {
            hyper_box: hyper_box.clone(),
            weights,
            biases: biases.clone(),
            output_weights: beta,
            output_bias: beta0,
            sparsity: p,
            validation_rmse: rmse(&pred_val, &y_val),
            training_rmse: rmse(&pred_train, &y_train),
        };
        if best.as_ref().is_none_or(|b| candidate.validation_rmse < b.validation_rmse) {
            best = Some(candidate);
        }
    }
    Ok(best.expect("p_grid is nonempty"))
}

/// `sin(w) / w`, `E[cos(w z)]` for `z ~ U[-1, 1]`.
pub fn sinc(w: f64) -> f64 {
    if w.abs() < 1e-4 {
        let w2 = w * w;
        1.0 - w2 / 6.0 + w2 * w2 / 120.0
    } else {
        w.sin() / w
    }
}

/// Variance of `E[f | z_u]` for the inputs flagged in `subset`.
fn closed_variance(s: &SwelmSurrogate, subset: &[bool]) -> f64 {
    // E[f | nothing] is a constant; the general formula would leave rounding
    // noise from two large cancelling sums
    if !subset.iter().any(|b| *b) {
        return 0.0;
    }
    let k = s.width();
    let w = &s.weights;
    let beta = &s.output_weights;
    let b = &s.biases;
    // damping from integrating out the inputs outside the subset
    let outer: Vec<f64> = (0..k)
        .map(|i| (0..subset.len()).filter(|j| !subset[*j]).map(|j| sinc(w[i][j])).product())
        .collect();
    let mut second = 0.0;
    for i in 0..k {
        for l in 0..k {
            let mut minus = 1.0;
            let mut plus = 1.0;
            for j in (0..subset.len()).filter(|j| subset[*j]) {
                minus *= sinc(w[i][j] - w[l][j]);
                plus *= sinc(w[i][j] + w[l][j]);
            }
            let damp = outer[i] * outer[l];
            second += beta[i] * beta[l] * damp * ((b[i] - b[l]).cos() * minus - (b[i] + b[l]).cos() * plus);
        }
    }
    second *= 0.5;
    let mean: f64 = (0..k)
        .map(|i| beta[i] * b[i].sin() * (0..subset.len()).map(|j| sinc(w[i][j])).product::<f64>())
        .sum();
    second - mean * mean
}

/// Largest input dimension for which every ANOVA component is formed.
pub const MAX_ANOVA_DIM: usize = 12;

/// Variance `D_u` of every ANOVA component, indexed by the bitmask of `u`.
///
/// Writing `exp(i w z) = sinc(w) + h(z)` with `E h = 0` splits each feature
/// into components over input subsets; for a pair of features the zero-mean
/// parts correlate through `sinc(w_k -/+ w_l) - sinc(w_k) sinc(w_l)`.
fn anova_variances(s: &SwelmSurrogate) -> Vec<f64> {
    let n = s.dim();
    let k = s.width();
    let w = &s.weights;
    let beta = &s.output_weights;
    let b = &s.biases;
    let a: Vec<Vec<f64>> = w.iter().map(|row| row.iter().map(|x| sinc(*x)).collect()).collect();
    let size = 1usize << n;
    let mut out = vec![0.0; size];
    let mut minus = vec![0.0; size];
    let mut plus = vec![0.0; size];
    for i in 0..k {
        if beta[i] == 0.0 {
            continue;
        }
        for l in i..k {
            if beta[l] == 0.0 {
                continue;
            }
            minus[0] = 1.0;
            plus[0] = 1.0;
            // extend subset products one input at a time: bit j set takes the
            // zero-mean factor, bit j clear the mean factor
            for j in 0..n {
                let mean = a[i][j] * a[l][j];
                let fm = sinc(w[i][j] - w[l][j]) - mean;
                let fp = sinc(w[i][j] + w[l][j]) - mean;
                let half = 1usize << j;
                for u in 0..half {
                    minus[u + half] = minus[u] * fm;
                    plus[u + half] = plus[u] * fp;
                    minus[u] *= mean;
                    plus[u] *= mean;
                }
            }
            let weight = if i == l { 0.5 } else { 1.0 } * beta[i] * beta[l];
            let (cm, cp) = ((b[i] - b[l]).cos(), (b[i] + b[l]).cos());
            for u in 1..size {
                out[u] += weight * (cm * minus[u] - cp * plus[u]);
            }
        }
    }
    // each D_u is a variance; negatives are rounding
    out.iter().map(|d| d.max(0.0)).collect()
}

/// Closed-form Sobol indices of the network.
pub fn swelm_sobol(surrogate: &SwelmSurrogate) -> SobolIndexReport {
    let n = surrogate.dim();
    let names = surrogate.hyper_box.names().to_vec();
    let scale: f64 = surrogate.output_weights.iter().map(|b| b * b).sum();
    let (variance, first, total) = if n <= MAX_ANOVA_DIM {
        let d = anova_variances(surrogate);
        let variance: f64 = d.iter().sum();
        let first: Vec<f64> = (0..n).map(|k| d[1 << k] / variance).collect();
        let total: Vec<f64> = (0..n)
            .map(|k| {
                d.iter()
                    .enumerate()
                    .filter(|(u, _)| u & (1 << k) != 0)
                    .map(|(_, v)| v)
                    .sum::<f64>()
                    / variance
            })
            .collect();
        (variance, first, total)
    } else {
        let variance = closed_variance(surrogate, &vec![true; n]);
        let mut first = Vec::with_capacity(n);
        let mut total = Vec::with_capacity(n);
        for k in 0..n {
            let mut only = vec![false; n];
            only[k] = true;
            first.push(closed_variance(surrogate, &only) / variance);
            let others: Vec<bool> = (0..n).map(|j| j != k).collect();
            total.push(1.0 - closed_variance(surrogate, &others) / variance);
        }
        (variance, first, total)
    };
    if !(variance > 1e-14 * scale) {
        return SobolIndexReport::constant(names, "swelm");
    }
    SobolIndexReport {
        names,
        first_order: first,
        total,
        variance,
        method: "swelm".into(),
        constant: false,
        provenance: Default::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::lhs_sample;

    fn bx(n: usize) -> HyperparameterBox {
        HyperparameterBox::unnamed(&vec![(1.0, 3.0); n]).unwrap()
    }

    fn random_net(n: usize, width: usize, seed: u64) -> SwelmSurrogate {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SwelmSurrogate {
            hyper_box: bx(n),
            weights: (0..width).map(|_| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).collect(),
            biases: (0..width).map(|_| rng.random_range(-1.0..1.0)).collect(),
            output_weights: (0..width).map(|_| rng.random_range(-1.0..1.0)).collect(),
            output_bias: 0.3,
            sparsity: 1.0,
            validation_rmse: 0.0,
            training_rmse: 0.0,
        }
    }

    #[test]
    fn sparsify_keeps_largest() {
        let w = vec![vec![0.1, -0.9, 0.5, 0.2]];
        assert_eq!(sparsify(&w, 0.25), vec![vec![0.0, -0.9, 0.0, 0.0]]);
        assert_eq!(sparsify(&w, 0.5), vec![vec![0.0, -0.9, 0.5, 0.0]]);
        assert_eq!(sparsify(&w, 0.6), vec![vec![0.0, -0.9, 0.5, 0.2]]);
        assert_eq!(sparsify(&w, 1.0), w);
    }

    #[test]
    fn width_is_half_the_training_set() {
        let b = bx(2);
        let design = lhs_sample(&b, 50, 1).unwrap();
        let y: Vec<f64> = design.iter().map(|x| x[0]).collect();
        let s = fit_swelm(&b, &design, &y, &SwelmConfig::default()).unwrap();
        assert_eq!(s.width(), 20);
    }

    #[test]
    fn fits_a_linear_function() {
        let b = bx(3);
        let design = lhs_sample(&b, 200, 2).unwrap();
        let f = |x: &[f64]| 2.0 * x[0] - x[1] + 0.5 * x[2];
        let y: Vec<f64> = design.iter().map(|x| f(x)).collect();
        let s = fit_swelm(&b, &design, &y, &SwelmConfig::default()).unwrap();
        let range = 2.0 * 2.0 + 2.0 + 0.5 * 2.0;
        assert!(s.validation_rmse <= 0.01 * range, "{}", s.validation_rmse);
    }

    #[test]
    fn constant_values() {
        let b = bx(2);
        let design = lhs_sample(&b, 40, 3).unwrap();
        let s = fit_swelm(&b, &design, &vec![-1.5; 40], &SwelmConfig::default()).unwrap();
        for x in lhs_sample(&b, 10, 4).unwrap() {
            assert!((s.predict(&x) + 1.5).abs() < 1e-6);
        }
        assert!(swelm_sobol(&s).constant);
    }

    #[test]
    fn too_small_design() {
        let b = bx(2);
        let design = lhs_sample(&b, 9, 3).unwrap();
        assert!(matches!(
            fit_swelm(&b, &design, &[0.0; 9], &SwelmConfig::default()),
            Err(Error::DesignTooSmall(_))
        ));
    }

    #[test]
    fn single_active_input() {
        let mut s = random_net(3, 8, 5);
        for row in &mut s.weights {
            row[1] = 0.0;
            row[2] = 0.0;
        }
        let r = swelm_sobol(&s);
        assert!((r.total[0] - 1.0).abs() < 1e-10 && (r.first_order[0] - 1.0).abs() < 1e-10);
        assert!(r.total[1].abs() < 1e-10 && r.total[2].abs() < 1e-10);
    }

    #[test]
    fn zero_output_weights_are_constant() {
        let mut s = random_net(3, 8, 6);
        s.output_weights = vec![0.0; 8];
        let r = swelm_sobol(&s);
        assert!(r.constant && r.total.iter().all(|t| *t == 0.0));
    }

    #[test]
    fn closed_form_variance_matches_quadrature() {
        // two inputs: tensor Gauss-Legendre on the symmetric square
        let s = random_net(2, 6, 7);
        let m = 400;
        let nodes: Vec<f64> = (0..m).map(|i| -1.0 + (2.0 * i as f64 + 1.0) / m as f64).collect();
        let vals: Vec<Vec<f64>> = nodes
            .iter()
            .map(|a| nodes.iter().map(|b| s.predict_symmetric(&[*a, *b])).collect())
            .collect();
        let mean = vals.iter().flatten().sum::<f64>() / (m * m) as f64;
        let var = vals.iter().flatten().map(|v| (v - mean).powi(2)).sum::<f64>() / (m * m) as f64;
        let cond: Vec<f64> = vals.iter().map(|row| row.iter().sum::<f64>() / m as f64).collect();
        let v1 = cond.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / m as f64;
        let r = swelm_sobol(&s);
        // midpoint rule error is O(1/m^2)
        assert!((r.variance - var).abs() < 1e-4 * var.max(1e-3), "{} vs {var}", r.variance);
        assert!((r.first_order[0] - v1 / var).abs() < 1e-4);
    }

    #[test]
    fn anova_components_match_conditional_variances() {
        for (n, seed) in [(2, 8), (3, 9), (4, 10)] {
            let s = random_net(n, 10, seed);
            let d = anova_variances(&s);
            let all = closed_variance(&s, &vec![true; n]);
            assert!((d.iter().sum::<f64>() - all).abs() < 1e-10 * all);
            // V of E[f | z_u] is the sum of D_v over v inside u
            for u in 1..(1usize << n) {
                let subset: Vec<bool> = (0..n).map(|j| u & (1 << j) != 0).collect();
                let inside: f64 = (1..(1usize << n)).filter(|v| v & !u == 0).map(|v| d[v]).sum();
                assert!((closed_variance(&s, &subset) - inside).abs() < 1e-10 * all, "{n} {u}");
            }
        }
    }

    #[test]
    fn wide_inputs_use_conditional_variances() {
        let s = random_net(MAX_ANOVA_DIM + 1, 6, 12);
        let r = swelm_sobol(&s);
        assert!(r.check_invariants().is_ok(), "{r:?}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(200))]

            #[test]
            fn report_invariants(seed in 0u64..100_000, n in 1usize..5, width in 1usize..12) {
                let r = swelm_sobol(&random_net(n, width, seed));
                prop_assert!(r.constant || r.check_invariants().is_ok(), "{r:?}");
            }
        }
    }
}
