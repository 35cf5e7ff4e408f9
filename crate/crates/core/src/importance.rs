//! Reweighting one posterior sample set to any prior of the family.
//!
//! Draws come from the posterior built with a covering prior `pi_IS`. For a
//! hyperparameter value `xi` the self-normalized weights are proportional to
//! the prior ratio `pi_xi(theta) / pi_IS(theta)`; the likelihood and both
//! posterior normalizing constants cancel. QoI values and `log pi_IS` are cached
//! once per distinct draw, and repeated draws enter through integer
//! multiplicities.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{Cell, Table};
use crate::problem::{check_dim, DiagonalGaussian, GaussianPriorFamily, InverseProblem};
use crate::sampling::McmcChain;

/// Where a sample set came from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Provenance {
    pub seed: u64,
    pub n_samples: usize,
    pub burn_in: usize,
}

/// Distinct posterior draws under the importance-sampling prior, in chain
/// order, with cached QoI values and IS-prior log-densities.
#[derive(Debug, Clone)]
pub struct PosteriorSampleSet {
    dim: usize,
    draws: Vec<f64>,
    multiplicities: Vec<u64>,
    qoi: Vec<f64>,
    log_prior_is: Vec<f64>,
    is_prior: DiagonalGaussian,
    family: GaussianPriorFamily,
    pub provenance: Provenance,
}

impl PosteriorSampleSet {
    /// Caches the QoI and IS-prior density at each distinct chain state.
    pub fn from_chain(
        chain: &McmcChain,
        problem: &InverseProblem,
        is_prior: &DiagonalGaussian,
    ) -> Result<Self> {
        let runs = chain.runs();
        let cached: Vec<(f64, f64)> = runs
            .par_iter()
            .map(|(i, _)| {
                let theta = chain.draw(*i);
                (problem.qoi.value(theta), is_prior.log_density(theta))
            })
            .collect();
        let mut draws = Vec::with_capacity(runs.len() * chain.dim());
        for (i, _) in &runs {
            draws.extend_from_slice(chain.draw(*i));
        }
        Self::from_parts(
            chain.dim(),
            draws,
            runs.iter().map(|r| r.1 as u64).collect(),
            cached.iter().map(|c| c.0).collect(),
            cached.iter().map(|c| c.1).collect(),
            is_prior.clone(),
            problem.prior_family.clone(),
            Provenance {
                seed: chain.seed,
                n_samples: chain.len(),
                burn_in: chain.burn_in,
            },
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        dim: usize,
        draws: Vec<f64>,
        multiplicities: Vec<u64>,
        qoi: Vec<f64>,
        log_prior_is: Vec<f64>,
        is_prior: DiagonalGaussian,
        family: GaussianPriorFamily,
        provenance: Provenance,
    ) -> Result<Self> {
        let n = multiplicities.len();
        let mut problems = Vec::new();
        if n == 0 {
            problems.push("sample set is empty".to_string());
        }
        if draws.len() != n * dim || qoi.len() != n || log_prior_is.len() != n {
            problems.push(format!(
                "inconsistent lengths: {} draw entries for dim {dim}, {n} multiplicities, {} qoi, {} log-priors",
                draws.len(),
                qoi.len(),
                log_prior_is.len()
            ));
        }
        if is_prior.dim() != dim || family.n_params() != dim {
            problems.push(format!(
                "IS prior has dim {}, prior family {}, draws {dim}",
                is_prior.dim(),
                family.n_params()
            ));
        }
        if multiplicities.contains(&0) {
            problems.push("multiplicities must be positive".into());
        }
        if let Some(i) = qoi.iter().chain(&log_prior_is).position(|v| !v.is_finite()) {
            problems.push(format!("cached value {i} is not finite"));
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        Ok(Self {
            dim,
            draws,
            multiplicities,
            qoi,
            log_prior_is,
            is_prior,
            family,
            provenance,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `M`, the chain length the set represents.
    pub fn total_count(&self) -> u64 {
        self.multiplicities.iter().sum()
    }

    /// `M-hat`.
    pub fn n_distinct(&self) -> usize {
        self.multiplicities.len()
    }

    pub fn draw(&self, i: usize) -> &[f64] {
        &self.draws[i * self.dim..(i + 1) * self.dim]
    }

    pub fn multiplicities(&self) -> &[u64] {
        &self.multiplicities
    }

    pub fn qoi_values(&self) -> &[f64] {
        &self.qoi
    }

    pub fn is_prior(&self) -> &DiagonalGaussian {
        &self.is_prior
    }

    pub fn family(&self) -> &GaussianPriorFamily {
        &self.family
    }

    /// The same draws with the QoI replaced.
    pub fn with_qoi(&self, q: impl Fn(&[f64]) -> f64) -> Self {
        let mut out = self.clone();
        out.qoi = (0..self.n_distinct()).map(|i| q(self.draw(i))).collect();
        out
    }

    /// The set formed by the first `m` chain draws.
    pub fn prefix(&self, m: u64) -> Result<Self> {
        if m == 0 || m > self.total_count() {
            return Err(Error::Domain(format!(
                "prefix length {m} not in 1..={}",
                self.total_count()
            )));
        }
        let mut out = self.clone();
        let mut seen = 0;
        let mut keep = 0;
        for (i, k) in self.multiplicities.iter().enumerate() {
            keep = i + 1;
            if seen + k >= m {
                out.multiplicities[i] = m - seen;
                break;
            }
            seen += k;
        }
        out.multiplicities.truncate(keep);
        out.qoi.truncate(keep);
        out.log_prior_is.truncate(keep);
        out.draws.truncate(keep * self.dim);
        out.provenance.n_samples = m as usize;
        Ok(out)
    }

    /// `log pi_xi(theta_i) - log pi_IS(theta_i)` at every distinct draw.
    pub fn log_ratios(&self, xi: &[f64]) -> Result<Vec<f64>> {
        let prior = self.family.prior(xi)?;
        Ok((0..self.n_distinct())
            .map(|i| prior.log_density(self.draw(i)) - self.log_prior_is[i])
            .collect())
    }

    /// Importance weights for `xi`.
    pub fn weights(&self, xi: &[f64]) -> Result<IsWeightVector> {
        IsWeightVector::from_log_ratios(xi, &self.log_ratios(xi)?, &self.multiplicities)
    }

    /// Self-normalized estimate of `E_xi[q^power]`.
    pub fn is_moment(&self, xi: &[f64], power: i32) -> Result<f64> {
        Ok(self.weights(xi)?.expectation(|i| self.qoi[i].powi(power)))
    }

    /// Self-normalized estimate of `E_xi[q^power]` with a batch-means standard
    /// error that accounts for chain autocorrelation.
    pub fn is_moment_with_error(&self, xi: &[f64], power: i32) -> Result<Estimate> {
        let w = self.weights(xi)?;
        let h: Vec<f64> = self.qoi.iter().map(|q| q.powi(power)).collect();
        let value = w.expectation(|i| h[i]);
        let std_error = w.batch_means_error(|i| h[i] - value);
        Ok(Estimate { value, std_error })
    }

    /// Posterior variance of `q` under `xi` with its standard error.
    pub fn is_variance_with_error(&self, xi: &[f64]) -> Result<Estimate> {
        let w = self.weights(xi)?;
        let mean = w.expectation(|i| self.qoi[i]);
        let centered: Vec<f64> = self.qoi.iter().map(|q| (q - mean) * (q - mean)).collect();
        let value = w.expectation(|i| centered[i]);
        let std_error = w.batch_means_error(|i| centered[i] - value);
        Ok(Estimate { value, std_error })
    }

    pub fn effective_sample_size(&self, xi: &[f64]) -> Result<f64> {
        Ok(self.weights(xi)?.effective_sample_size())
    }
}

/// An estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

/// Self-normalized weights for one hyperparameter value, one entry per
/// distinct draw (each copy of a repeated draw carries the same weight).
#[derive(Debug, Clone, PartialEq)]
pub struct IsWeightVector {
    pub xi: Vec<f64>,
    /// `u_i = exp(log_ratio_i - max_j log_ratio_j)`.
    pub unnormalized: Vec<f64>,
    pub multiplicities: Vec<u64>,
    /// `C = sum_i m_i u_i`.
    pub sum: f64,
    /// `u_i / C`.
    pub normalized: Vec<f64>,
}

impl IsWeightVector {
    /// Max-shifted exponentiation of log-ratios.
    pub fn from_log_ratios(xi: &[f64], log_ratios: &[f64], multiplicities: &[u64]) -> Result<Self> {
        let degenerate = || Error::DegenerateWeights { xi: xi.to_vec() };
        let max = log_ratios
            .iter()
            .copied()
            .filter(|v| !v.is_nan())
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(degenerate());
        }
        let unnormalized: Vec<f64> = log_ratios
            .iter()
            .map(|l| if l.is_nan() { 0.0 } else { (l - max).exp() })
            .collect();
        let sum: f64 = unnormalized
            .iter()
            .zip(multiplicities)
            .map(|(u, m)| u * *m as f64)
            .sum();
        if !(sum > 0.0 && sum.is_finite()) {
            return Err(degenerate());
        }
        let normalized = unnormalized.iter().map(|u| u / sum).collect();
        Ok(Self {
            xi: xi.to_vec(),
            unnormalized,
            multiplicities: multiplicities.to_vec(),
            sum,
            normalized,
        })
    }

    /// `sum_i m_i wbar_i f(i)`.
    pub fn expectation(&self, f: impl Fn(usize) -> f64) -> f64 {
        self.normalized
            .iter()
            .zip(&self.multiplicities)
            .enumerate()
            .map(|(i, (w, m))| w * *m as f64 * f(i))
            .sum()
    }

    /// `(sum u)^2 / sum u^2` over all `M` draws.
    pub fn effective_sample_size(&self) -> f64 {
        let (s1, s2) = self
            .unnormalized
            .iter()
            .zip(&self.multiplicities)
            .fold((0.0, 0.0), |(s1, s2), (u, m)| {
                (s1 + u * *m as f64, s2 + u * u * *m as f64)
            });
        s1 * s1 / s2
    }

    /// Standard error of `sum wbar_t h_t` for a centred influence `h`, from
    /// batch means of `wbar_t h_t` over the chain order (batch length
    /// `floor(sqrt(M))`).
    pub fn batch_means_error(&self, centered: impl Fn(usize) -> f64) -> f64 {
        let total: u64 = self.multiplicities.iter().sum();
        let batch = (total as f64).sqrt().floor().max(1.0) as u64;
        let n_batches = total / batch;
        if n_batches < 2 {
            return f64::NAN;
        }
        let mut sums = vec![0.0; n_batches as usize];
        let mut t = 0u64;
        'outer: for (i, m) in self.multiplicities.iter().enumerate() {
            let z = self.normalized[i] * centered(i);
            let mut left = *m;
            while left > 0 {
                let b = t / batch;
                if b >= n_batches {
                    break 'outer;
                }
                let take = left.min(batch - t % batch);
                sums[b as usize] += z * take as f64;
                t += take;
                left -= take;
            }
        }
        let mean = sums.iter().sum::<f64>() / n_batches as f64;
        let var = sums.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>()
            / (n_batches as f64 - 1.0);
        // the used draws cover n_batches * batch of the M positions
        (var * n_batches as f64).sqrt() * total as f64 / (n_batches * batch) as f64
    }
}

/// Closed-form `log pi_xi(theta) - log pi_IS(theta)` for Gaussian priors:
/// half the difference of the two Mahalanobis terms plus the log-determinant
/// term `1/2 log(det Gamma_IS / det Gamma_xi)`.
pub fn prior_log_ratio(
    family: &GaussianPriorFamily,
    xi: &[f64],
    is_prior: &DiagonalGaussian,
    theta: &[f64],
) -> Result<f64> {
    let prior = family.prior(xi)?;
    check_dim(theta, prior.dim())?;
    if is_prior.dim() != prior.dim() {
        return Err(Error::Domain(format!(
            "IS prior has dimension {}, family {}",
            is_prior.dim(),
            prior.dim()
        )));
    }
    let mahalanobis = |g: &DiagonalGaussian| -> f64 {
        g.mean
            .iter()
            .zip(&g.variance)
            .zip(theta)
            .map(|((m, v), t)| (m - t) * (m - t) / v)
            .sum()
    };
    Ok(0.5 * (mahalanobis(is_prior) - mahalanobis(&prior))
        + 0.5 * (is_prior.log_det_covariance() - prior.log_det_covariance()))
}

/// ESS of one design point, or why it could not be computed.
#[derive(Debug, Clone, PartialEq)]
pub struct EssEntry {
    pub xi: Vec<f64>,
    pub ess: std::result::Result<f64, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EssProfile {
    /// Sorted by ascending ESS; failed points first.
    pub entries: Vec<EssEntry>,
    pub total_count: u64,
    pub floor: f64,
}

impl EssProfile {
    pub fn failures(&self) -> impl Iterator<Item = &EssEntry> {
        self.entries.iter().filter(|e| e.ess.is_err())
    }

    /// Points whose ESS is below the warning floor.
    pub fn below_floor(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.ess.as_ref().map_or(true, |v| *v < self.floor))
            .count()
    }

    pub fn to_table(&self, names: &[String]) -> Table {
        let mut cols = names.to_vec();
        cols.push("ess".into());
        cols.push("status".into());
        let mut t = Table::new(cols)
            .meta("M", self.total_count)
            .meta("ess_floor", crate::io::fmt_num(self.floor));
        for e in &self.entries {
            let mut row: Vec<Cell> = e.xi.iter().map(|v| Cell::Num(*v)).collect();
            match &e.ess {
                Ok(v) => {
                    row.push(Cell::Num(*v));
                    row.push(if *v < self.floor { "low" } else { "ok" }.into());
                }
                Err(msg) => {
                    row.push(Cell::Num(f64::NAN));
                    row.push(Cell::Text(format!("failed: {}", msg.replace(',', ";"))));
                }
            }
            t.push(row);
        }
        t
    }
}

/// ESS over a design with the default warning floor `M / 100`.
pub fn ess_profile(samples: &PosteriorSampleSet, design: &[Vec<f64>]) -> EssProfile {
    ess_profile_with_floor(samples, design, samples.total_count() as f64 / 100.0)
}

pub fn ess_profile_with_floor(
    samples: &PosteriorSampleSet,
    design: &[Vec<f64>],
    floor: f64,
) -> EssProfile {
    let mut entries: Vec<EssEntry> = design
        .par_iter()
        .map(|xi| EssEntry {
            xi: xi.clone(),
            ess: samples.effective_sample_size(xi).map_err(|e| e.to_string()),
        })
        .collect();
    entries.sort_by(|a, b| match (&a.ess, &b.ess) {
        (Ok(x), Ok(y)) => x.total_cmp(y),
        (Err(_), Ok(_)) => std::cmp::Ordering::Less,
        (Ok(_), Err(_)) => std::cmp::Ordering::Greater,
        (Err(_), Err(_)) => std::cmp::Ordering::Equal,
    });
    let profile = EssProfile {
        entries,
        total_count: samples.total_count(),
        floor,
    };
    let low = profile.below_floor();
    if low > 0 {
        log::warn!("{low} design points have ESS below {floor}");
    }
    profile
}

/// Design-ordered table of ESS and the first two IS moments.
pub fn moment_table(samples: &PosteriorSampleSet, design: &[Vec<f64>], names: &[String]) -> Table {
    let mut cols = names.to_vec();
    cols.extend(["ess", "mean", "second_moment"].map(String::from));
    let mut t = Table::new(cols).meta("M", samples.total_count());
    let rows: Vec<Vec<Cell>> = design
        .par_iter()
        .map(|xi| {
            let mut row: Vec<Cell> = xi.iter().map(|v| Cell::Num(*v)).collect();
            match samples.weights(xi) {
                Ok(w) => {
                    row.push(Cell::Num(w.effective_sample_size()));
                    row.push(Cell::Num(w.expectation(|i| samples.qoi[i])));
                    row.push(Cell::Num(w.expectation(|i| samples.qoi[i].powi(2))));
                }
                Err(_) => row.extend((0..3).map(|_| Cell::Num(f64::NAN))),
            }
            row
        })
        .collect();
    for r in rows {
        t.push(r);
    }
    t
}
