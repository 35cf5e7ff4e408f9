//! Delayed-rejection adaptive Metropolis.
//!
//! Each iteration proposes from `N(x, C)`; on rejection up to `dr_scales.len()`
//! further proposals `N(x, s_k^2 C)` are tried with the delayed-rejection
//! acceptance probability that keeps the chain reversible. `C` is re-estimated
//! from the whole chain history (`s_d (Cov + eps I)`, `s_d = 2.38^2 / d`) every
//! `adapt_interval` iterations once `adapt_start` iterations have run.

use std::cell::Cell;
use std::io::BufRead;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::io::{self, fmt_num, fnv1a_hex, Table};

/// Band for the first-stage acceptance rate outside of which a diagnostic
/// warning is attached. Later stages only raise the overall rate.
pub const ACCEPTANCE_BAND: (f64, f64) = (0.1, 0.6);

#[derive(Debug, Clone, PartialEq)]
pub struct DramConfig {
    pub initial_state: Vec<f64>,
    pub initial_covariance: DMatrix<f64>,
    /// Proposal scale (relative to the first-stage proposal) of each
    /// delayed-rejection stage; empty gives plain adaptive Metropolis.
    pub dr_scales: Vec<f64>,
    pub adapt_start: usize,
    pub adapt_interval: usize,
    /// Covariance scale `s_d`; `None` uses `2.38^2 / d`.
    pub adapt_scale: Option<f64>,
    pub epsilon: f64,
    pub burn_in: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl DramConfig {
    /// Defaults: one extra stage at scale 0.2, adaptation from iteration 1000
    /// every 100 iterations, `eps = 1e-8`.
    pub fn new(
        initial_state: Vec<f64>,
        initial_covariance: DMatrix<f64>,
        burn_in: usize,
        n_samples: usize,
        seed: u64,
    ) -> Self {
        Self {
            initial_state,
            initial_covariance,
            dr_scales: vec![0.2],
            adapt_start: 1000,
            adapt_interval: 100,
            adapt_scale: None,
            epsilon: 1e-8,
            burn_in,
            n_samples,
            seed,
        }
    }

    /// Starts at a Gaussian prior's mean with proposal covariance `0.1^2 Gamma`.
    pub fn from_prior(
        prior: &crate::problem::DiagonalGaussian,
        burn_in: usize,
        n_samples: usize,
        seed: u64,
    ) -> Self {
        let cov = DMatrix::from_diagonal(&DVector::from_iterator(
            prior.dim(),
            prior.variance.iter().map(|v| 0.01 * v),
        ));
        Self::new(prior.mean.clone(), cov, burn_in, n_samples, seed)
    }

    pub fn dim(&self) -> usize {
        self.initial_state.len()
    }

    /// Proposals tried per iteration at most.
    pub fn stages(&self) -> usize {
        1 + self.dr_scales.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let d = self.dim();
        if d == 0 {
            problems.push("initial state is empty".to_string());
        }
        if self.initial_covariance.nrows() != d || self.initial_covariance.ncols() != d {
            problems.push(format!(
                "initial covariance is {}x{}, expected {d}x{d}",
                self.initial_covariance.nrows(),
                self.initial_covariance.ncols()
            ));
        } else if self.initial_covariance.clone().cholesky().is_none() {
            problems.push("initial covariance is not positive definite".into());
        }
        for (k, s) in self.dr_scales.iter().enumerate() {
            if !(*s > 0.0 && *s < 1.0) {
                problems.push(format!("delayed-rejection scale {k} = {s} is not in (0, 1)"));
            }
        }
        if self.adapt_start < 1 {
            problems.push("adaptation start must be at least 1".into());
        }
        if self.adapt_interval < 1 {
            problems.push("adaptation interval must be at least 1".into());
        }
        if let Some(s) = self.adapt_scale {
            if !(s > 0.0) {
                problems.push(format!("adaptation scale {s} is not positive"));
            }
        }
        if !(self.epsilon >= 0.0) {
            problems.push(format!("regularization {} is negative", self.epsilon));
        }
        if self.n_samples == 0 {
            problems.push("chain length must be positive".into());
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        fnv1a_hex(format!("{self:?}").as_bytes())
    }
}

/// Post-burn-in draws with per-draw acceptance stage (0 = rejected).
#[derive(Debug, Clone, PartialEq)]
pub struct McmcChain {
    dim: usize,
    draws: Vec<f64>,
    accepted_stage: Vec<u8>,
    pub burn_in: usize,
    pub seed: u64,
    pub config_hash: String,
    /// Target evaluations including burn-in.
    pub target_evaluations: usize,
    /// Proposals whose target evaluation failed (treated as zero density).
    pub failed_evaluations: usize,
    pub final_covariance: DMatrix<f64>,
    pub warnings: Vec<String>,
}

impl McmcChain {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.accepted_stage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accepted_stage.is_empty()
    }

    pub fn draw(&self, i: usize) -> &[f64] {
        &self.draws[i * self.dim..(i + 1) * self.dim]
    }

    pub fn draws(&self) -> impl Iterator<Item = &[f64]> {
        self.draws.chunks_exact(self.dim)
    }

    pub fn accepted_stage(&self) -> &[u8] {
        &self.accepted_stage
    }

    pub fn acceptance_rate(&self) -> f64 {
        let acc = self.accepted_stage.iter().filter(|s| **s > 0).count();
        acc as f64 / self.len().max(1) as f64
    }

    /// Fraction of draws accepted at the first proposal stage.
    pub fn first_stage_rate(&self) -> f64 {
        let acc = self.accepted_stage.iter().filter(|s| **s == 1).count();
        acc as f64 / self.len().max(1) as f64
    }

    /// Number of distinct states. A draw repeats its predecessor exactly when
    /// the proposal (cascade) was rejected.
    pub fn n_distinct(&self) -> usize {
        if self.is_empty() {
            return 0;
        }
        1 + self.accepted_stage[1..].iter().filter(|s| **s > 0).count()
    }

    /// Runs of identical consecutive draws as `(first index, length)`.
    pub fn runs(&self) -> Vec<(usize, usize)> {
        let mut runs: Vec<(usize, usize)> = Vec::with_capacity(self.n_distinct());
        for (i, s) in self.accepted_stage.iter().enumerate() {
            match runs.last_mut() {
                Some(last) if *s == 0 => last.1 += 1,
                _ => runs.push((i, 1)),
            }
        }
        runs
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for x in self.draws() {
            for (mj, xj) in m.iter_mut().zip(x) {
                *mj += xj;
            }
        }
        m.iter().map(|v| v / self.len() as f64).collect()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.mean();
        let mut c = DMatrix::zeros(self.dim, self.dim);
        for x in self.draws() {
            for i in 0..self.dim {
                for j in 0..self.dim {
                    c[(i, j)] += (x[i] - m[i]) * (x[j] - m[j]);
                }
            }
        }
        c / (self.len() as f64 - 1.0)
    }

    /// The chain as a table: metadata, then one row per draw with the
    /// parameter columns and the acceptance stage.
    pub fn to_table(&self, names: &[String]) -> Table {
        let mut columns = names.to_vec();
        columns.push("stage".into());
        let mut t = Table::new(columns)
            .meta("chain_seed", self.seed)
            .meta("sampler_hash", &self.config_hash)
            .meta("burn_in", self.burn_in)
            .meta("n_samples", self.len())
            .meta("acceptance_rate", fmt_num(self.acceptance_rate()));
        for (x, s) in self.draws().zip(&self.accepted_stage) {
            let mut row: Vec<io::Cell> = x.iter().map(|v| io::Cell::Num(*v)).collect();
            row.push(io::Cell::Int(*s as i64));
            t.push(row);
        }
        t
    }

    pub fn write_csv(&self, path: &Path, names: &[String]) -> Result<()> {
        self.to_table(names).write(path)
    }

    /// Reads a chain written by [`McmcChain::write_csv`].
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut seed = 0;
        let mut burn_in = 0;
        let mut config_hash = String::new();
        let mut dim = None;
        let mut draws = Vec::new();
        let mut stages = Vec::new();
        for line in file.lines() {
            let line = line?;
            if let Some(meta) = line.strip_prefix("# ") {
                let (k, v) = meta.split_once('=').unwrap_or((meta, ""));
                let parse = |v: &str| v.parse().map_err(|_| Error::Parse(format!("bad {k}: {v}")));
                match k {
                    "chain_seed" => seed = parse(v)?,
                    "burn_in" => burn_in = parse(v)? as usize,
                    "sampler_hash" => config_hash = v.to_string(),
                    _ => {}
                }
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            match dim {
                None => dim = Some(fields.len() - 1),
                Some(d) => {
                    if fields.len() != d + 1 {
                        return Err(Error::Parse(format!("row has {} fields: {line}", fields.len())));
                    }
                    for f in &fields[..d] {
                        draws.push(f.parse::<f64>().map_err(|e| Error::Parse(format!("{f}: {e}")))?);
                    }
                    stages.push(fields[d].parse::<u8>().map_err(|e| Error::Parse(e.to_string()))?);
                }
            }
        }
        let dim = dim.ok_or_else(|| Error::Parse("empty chain file".into()))?;
        Ok(Self {
            dim,
            draws,
            accepted_stage: stages,
            burn_in,
            seed,
            config_hash,
            target_evaluations: 0,
            failed_evaluations: 0,
            final_covariance: DMatrix::zeros(dim, dim),
            warnings: Vec::new(),
        })
    }
}

/// A proposal point with its cached log-target.
struct Point {
    x: DVector<f64>,
    log_target: f64,
}

struct Stages {
    /// Inverse Cholesky factor of the proposal covariance of each stage.
    chol_inv: Vec<DMatrix<f64>>,
}

impl Stages {
    fn log_q(&self, stage: usize, from: &DVector<f64>, to: &DVector<f64>) -> f64 {
        -0.5 * (&self.chol_inv[stage] * (to - from)).norm_squared()
    }

    /// Delayed-rejection acceptance probability for the cascade
    /// `pts[0] -> pts[1] -> ... -> pts[n]`.
    fn alpha(&self, pts: &[&Point]) -> f64 {
        let n = pts.len() - 1;
        let (first, last) = (pts[0], pts[n]);
        if last.log_target == f64::NEG_INFINITY {
            return 0.0;
        }
        if first.log_target == f64::NEG_INFINITY {
            return 1.0;
        }
        let mut forward = 1.0;
        let mut backward = 1.0;
        let reversed: Vec<&Point> = pts.iter().rev().copied().collect();
        for k in 1..n {
            forward *= 1.0 - self.alpha(&pts[..=k]);
            backward *= 1.0 - self.alpha(&reversed[..=k]);
            if backward == 0.0 {
                return 0.0;
            }
        }
        if forward <= 0.0 {
            return 1.0;
        }
        let mut log_ratio = last.log_target - first.log_target;
        for k in 1..n {
            // earlier-stage proposal densities along the reversed path
            log_ratio += self.log_q(k - 1, &pts[n].x, &pts[n - k].x)
                - self.log_q(k - 1, &pts[0].x, &pts[k].x);
        }
        (log_ratio.exp() * backward / forward).min(1.0)
    }
}

/// Running mean and scatter matrix over every visited state.
struct History {
    n: usize,
    mean: DVector<f64>,
    scatter: DMatrix<f64>,
}

impl History {
    fn new(d: usize) -> Self {
        Self {
            n: 0,
            mean: DVector::zeros(d),
            scatter: DMatrix::zeros(d, d),
        }
    }

    fn push(&mut self, x: &DVector<f64>) {
        self.n += 1;
        let delta = x - &self.mean;
        self.mean += &delta / self.n as f64;
        let delta2 = x - &self.mean;
        self.scatter += &delta * delta2.transpose();
    }

    fn covariance(&self) -> DMatrix<f64> {
        let c = &self.scatter / (self.n as f64 - 1.0);
        // symmetrize away rounding drift
        (&c + c.transpose()) * 0.5
    }
}

fn stage_factors(base_cov: &DMatrix<f64>, dr_scales: &[f64]) -> Option<(DMatrix<f64>, Stages)> {
    let l = base_cov.clone().cholesky()?.unpack();
    let l_inv = l.clone().try_inverse()?;
    let mut chol_inv = vec![l_inv.clone()];
    for s in dr_scales {
        chol_inv.push(&l_inv / *s);
    }
    Some((l, Stages { chol_inv }))
}

/// Runs DRAM on `target` (log-density up to a constant).
///
/// Target evaluation errors and non-finite values at proposals count as zero
/// density; at the initial state they are a configuration error.
pub fn dram_sample<F>(target: F, config: &DramConfig) -> Result<McmcChain>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    config.validate()?;
    let d = config.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let evaluations = Cell::new(0usize);
    let failed = Cell::new(0usize);
    let eval = |x: &DVector<f64>| -> f64 {
        evaluations.set(evaluations.get() + 1);
        match target(x.as_slice()) {
            Ok(v) if !v.is_nan() && v < f64::INFINITY => v,
            _ => {
                failed.set(failed.get() + 1);
                f64::NEG_INFINITY
            }
        }
    };

    let x0 = DVector::from_column_slice(&config.initial_state);
    let l0 = eval(&x0);
    if !l0.is_finite() {
        return Err(Error::Config(vec![format!(
            "target is not finite at the initial state {:?}",
            config.initial_state
        )]));
    }
    failed.set(0);

    let scale = config.adapt_scale.unwrap_or(2.38 * 2.38 / d as f64);
    let mut cov = config.initial_covariance.clone();
    let (mut chol, mut stages) = stage_factors(&cov, &config.dr_scales)
        .expect("validated covariance has a Cholesky factor");

    let total = config.burn_in + config.n_samples;
    let mut current = Point { x: x0, log_target: l0 };
    let mut history = History::new(d);
    let mut draws = Vec::with_capacity(config.n_samples * d);
    let mut accepted_stage = Vec::with_capacity(config.n_samples);

    for iter in 0..total {
        let mut cascade: Vec<Point> = Vec::with_capacity(config.stages());
        let mut accepted = 0u8;
        for stage in 0..config.stages() {
            let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let step = if stage == 0 {
                &chol * z
            } else {
                &chol * z * config.dr_scales[stage - 1]
            };
            let y = &current.x + step;
            let ly = eval(&y);
            cascade.push(Point { x: y, log_target: ly });
            let pts: Vec<&Point> = std::iter::once(&current).chain(cascade.iter()).collect();
            let a = stages.alpha(&pts);
            let u: f64 = rng.random();
            if u < a {
                accepted = (stage + 1) as u8;
                break;
            }
        }
        if accepted > 0 {
            current = cascade.swap_remove(accepted as usize - 1);
        }
        history.push(&current.x);

        let n = iter + 1;
        if n >= config.adapt_start && (n - config.adapt_start) % config.adapt_interval == 0 && history.n > 1 {
            let adapted =
                (history.covariance() + DMatrix::identity(d, d) * config.epsilon) * scale;
            if let Some((l, s)) = stage_factors(&adapted, &config.dr_scales) {
                cov = adapted;
                chol = l;
                stages = s;
            }
        }

        if iter >= config.burn_in {
            draws.extend_from_slice(current.x.as_slice());
            accepted_stage.push(accepted);
        }
    }

    let mut chain = McmcChain {
        dim: d,
        draws,
        accepted_stage,
        burn_in: config.burn_in,
        seed: config.seed,
        config_hash: config.hash(),
        target_evaluations: evaluations.get(),
        failed_evaluations: failed.get(),
        final_covariance: cov,
        warnings: Vec::new(),
    };
    let rate = chain.acceptance_rate();
    let first = chain.first_stage_rate();
    if rate == 0.0 {
        chain
            .warnings
            .push("every proposal after burn-in was rejected".to_string());
    } else if !(ACCEPTANCE_BAND.0 < first && first < ACCEPTANCE_BAND.1) {
        chain.warnings.push(format!(
            "first-stage acceptance rate {first:.3} outside ({}, {})",
            ACCEPTANCE_BAND.0, ACCEPTANCE_BAND.1
        ));
    }
    if chain.failed_evaluations > 0 {
        chain.warnings.push(format!(
            "{} proposals failed to evaluate and were rejected",
            chain.failed_evaluations
        ));
    }
    for w in &chain.warnings {
        warn!("DRAM (seed {}): {w}", config.seed);
    }
    Ok(chain)
}
