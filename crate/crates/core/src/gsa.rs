//! Global sensitivity analysis over prior hyperparameters.
//!
//! The pipeline draws one posterior chain under a wide importance-sampling
//! prior, reweights it to evaluate the statistic at every design point, fits
//! surrogates to those values and reads the Sobol indices off the surrogates.
//! A pick-freeze estimator supplies benchmark indices for cheap functions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};
use crate::hsmaps::{eval_is_over_design, eval_map_over_design, HsMapEvaluations, MapSolverConfig, StatisticKind};
use crate::importance::{ess_profile, EssProfile, PosteriorSampleSet};
use crate::io::{Cell, Table};
use crate::problem::{DiagonalGaussian, HyperparameterBox, InverseProblem};
use crate::sampling::{dram_sample, lhs_sample, DramConfig, McmcChain};
use crate::surrogates::{
    fit_pce, fit_swelm, PceConfig, ReportProvenance, SobolIndexReport, Surrogate, SurrogateKind, SwelmConfig,
};

/// Chain settings; the chain starts at the IS prior mean with proposal
/// covariance `0.01 * Gamma_IS`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainSettings {
    pub burn_in: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub dr_scales: Vec<f64>,
    pub adapt_start: usize,
    pub adapt_interval: usize,
}

impl Default for ChainSettings {
    fn default() -> Self {
        Self {
            burn_in: 1000,
            n_samples: 10_000,
            seed: 0,
            dr_scales: vec![0.2],
            adapt_start: 1000,
            adapt_interval: 100,
        }
    }
}

impl ChainSettings {
    pub fn dram_config(&self, is_prior: &DiagonalGaussian) -> DramConfig {
        let mut c = DramConfig::from_prior(is_prior, self.burn_in, self.n_samples, self.seed);
        c.dr_scales = self.dr_scales.clone();
        c.adapt_start = self.adapt_start;
        c.adapt_interval = self.adapt_interval;
        c
    }
}

/// Which surrogates to fit and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateSettings {
    pub kinds: Vec<SurrogateKind>,
    pub pce: PceConfig,
    pub swelm: SwelmConfig,
}

impl Default for SurrogateSettings {
    fn default() -> Self {
        Self {
            kinds: vec![SurrogateKind::Pce, SurrogateKind::Swelm],
            pce: PceConfig::default(),
            swelm: SwelmConfig::default(),
        }
    }
}

impl SurrogateSettings {
    fn problems(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.kinds.is_empty() {
            problems.push("no surrogate kinds selected".into());
        }
        for (i, k) in self.kinds.iter().enumerate() {
            if self.kinds[..i].contains(k) {
                problems.push(format!("surrogate kind {k} listed twice"));
            }
        }
        if let Err(Error::Config(p)) = self.pce.validate() {
            problems.extend(p.into_iter().map(|s| format!("pce: {s}")));
        }
        if let Err(Error::Config(p)) = self.swelm.validate() {
            problems.extend(p.into_iter().map(|s| format!("swelm: {s}")));
        }
        problems
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GsaConfig {
    pub statistic: StatisticKind,
    pub design_size: usize,
    pub design_seed: u64,
    pub is_prior: DiagonalGaussian,
    pub chain: ChainSettings,
    pub surrogates: SurrogateSettings,
    /// Chain-prefix lengths for a convergence study, strictly increasing and
    /// at most the chain length.
    pub schedule: Option<Vec<u64>>,
}

impl GsaConfig {
    pub fn validate(&self, problem: &InverseProblem) -> Result<()> {
        let mut problems = Vec::new();
        if self.statistic == StatisticKind::Map {
            problems.push("the MAP statistic is not importance sampled; use run_map_gsa".into());
        }
        if self.design_size == 0 {
            problems.push("design size must be at least 1".into());
        }
        if self.is_prior.dim() != problem.n_params() {
            problems.push(format!(
                "IS prior has dimension {} but the problem has {} parameters",
                self.is_prior.dim(),
                problem.n_params()
            ));
        }
        if let Err(Error::Config(p)) = self.chain.dram_config(&self.is_prior).validate() {
            problems.extend(p.into_iter().map(|s| format!("chain: {s}")));
        }
        problems.extend(self.surrogates.problems());
        if let Some(s) = &self.schedule {
            problems.extend(schedule_problems(s, self.chain.n_samples as u64));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

fn schedule_problems(schedule: &[u64], total: u64) -> Vec<String> {
    let mut problems = Vec::new();
    if schedule.is_empty() {
        problems.push("schedule is empty".into());
    }
    if schedule.first() == Some(&0) {
        problems.push("schedule entries must be positive".into());
    }
    if schedule.windows(2).any(|w| w[0] >= w[1]) {
        problems.push("schedule must be strictly increasing".into());
    }
    if let Some(last) = schedule.last() {
        if *last > total {
            problems.push(format!("schedule entry {last} exceeds the chain length {total}"));
        }
    }
    problems
}

/// One fitted surrogate and its indices.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedSurrogate {
    pub surrogate: Surrogate,
    pub report: SobolIndexReport,
}

/// Every intermediate artifact of one run.
#[derive(Debug, Clone)]
pub struct GsaOutput {
    pub chain: McmcChain,
    pub samples: PosteriorSampleSet,
    pub design: Vec<Vec<f64>>,
    pub evaluations: HsMapEvaluations,
    pub ess: EssProfile,
    pub fits: Vec<FittedSurrogate>,
}

impl GsaOutput {
    pub fn report(&self, kind: SurrogateKind) -> Option<&SobolIndexReport> {
        self.fits.iter().find(|f| f.surrogate.kind() == kind).map(|f| &f.report)
    }
}

/// Runs the chain under the IS prior and caches the QoI and IS-prior density
/// at its distinct states.
pub fn sample_posterior(
    problem: &InverseProblem,
    is_prior: &DiagonalGaussian,
    chain: &ChainSettings,
) -> Result<(McmcChain, PosteriorSampleSet)> {
    let config = chain.dram_config(is_prior);
    let draws = dram_sample(|theta| problem.log_posterior_with_prior(is_prior, theta), &config).stage("sampling")?;
    let samples = PosteriorSampleSet::from_chain(&draws, problem, is_prior).stage("caching")?;
    Ok((draws, samples))
}

/// Fits each selected surrogate to the evaluated points and extracts indices.
pub fn fit_surrogates(
    hyper_box: &HyperparameterBox,
    evaluations: &HsMapEvaluations,
    settings: &SurrogateSettings,
    design_seed: u64,
) -> Result<Vec<FittedSurrogate>> {
    let provenance = ReportProvenance {
        statistic: Some(evaluations.kind),
        design_size: evaluations.len(),
        total_samples: evaluations.total_samples,
        seed: Some(design_seed),
    };
    let fits: Vec<Result<FittedSurrogate>> = settings
        .kinds
        .par_iter()
        .map(|kind| {
            let surrogate = match kind {
                SurrogateKind::Pce => Surrogate::Pce(fit_pce(
                    hyper_box,
                    &evaluations.design,
                    &evaluations.values,
                    &settings.pce,
                )?),
                SurrogateKind::Swelm => Surrogate::Swelm(fit_swelm(
                    hyper_box,
                    &evaluations.design,
                    &evaluations.values,
                    &settings.swelm,
                )?),
            };
            let report = surrogate.sobol().with_provenance(provenance.clone());
            report.check_invariants()?;
            Ok(FittedSurrogate { surrogate, report })
        })
        .collect();
    fits.into_iter().collect::<Result<Vec<_>>>().stage("surrogate fit")
}

/// Reweighting, surrogate fitting and index extraction for a fixed chain.
pub fn analyze_samples(
    samples: &PosteriorSampleSet,
    design: &[Vec<f64>],
    statistic: StatisticKind,
    settings: &SurrogateSettings,
    design_seed: u64,
) -> Result<(HsMapEvaluations, Vec<FittedSurrogate>)> {
    let evaluations = eval_is_over_design(samples, design, statistic).stage("importance sampling")?;
    let fits = fit_surrogates(samples.family().hyper_box(), &evaluations, settings, design_seed)?;
    Ok((evaluations, fits))
}

pub fn run_gsa(problem: &InverseProblem, config: &GsaConfig) -> Result<GsaOutput> {
    config.validate(problem).stage("configuration")?;
    let (chain, samples) = sample_posterior(problem, &config.is_prior, &config.chain)?;
    let design = lhs_sample(problem.hyper_box(), config.design_size, config.design_seed).stage("design")?;
    let ess = ess_profile(&samples, &design);
    if ess.below_floor() > 0 {
        log::warn!(
            "{} of {} design points have ESS below {}",
            ess.below_floor(),
            design.len(),
            ess.floor
        );
    }
    let (evaluations, fits) =
        analyze_samples(&samples, &design, config.statistic, &config.surrogates, config.design_seed)?;
    Ok(GsaOutput {
        chain,
        samples,
        design,
        evaluations,
        ess,
        fits,
    })
}

#[derive(Debug, Clone)]
pub struct MapGsaOutput {
    pub evaluations: HsMapEvaluations,
    pub fits: Vec<FittedSurrogate>,
}

/// Sensitivity of the QoI at the MAP point.
pub fn run_map_gsa(
    problem: &InverseProblem,
    design: &[Vec<f64>],
    solver: &MapSolverConfig,
    settings: &SurrogateSettings,
) -> Result<MapGsaOutput> {
    let problems = settings.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems).at_stage("configuration"));
    }
    let evaluations = eval_map_over_design(problem, design, solver).stage("map evaluation")?;
    let fits = fit_surrogates(problem.hyper_box(), &evaluations, settings, solver.seed)?;
    Ok(MapGsaOutput { evaluations, fits })
}

/// One entry of a convergence study.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub m: u64,
    pub input: String,
    pub index: IndexKind,
    pub value: f64,
    pub surrogate: SurrogateKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexKind {
    FirstOrder,
    Total,
}

impl IndexKind {
    pub fn as_str(self) -> &'static str {
        match self {
            IndexKind::FirstOrder => "first_order",
            IndexKind::Total => "total",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceStudy {
    pub statistic: StatisticKind,
    pub rows: Vec<ConvergenceRow>,
    /// Full report per schedule entry and surrogate, in schedule order.
    pub reports: Vec<(u64, SobolIndexReport)>,
}

impl ConvergenceStudy {
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(
            ["M", "input", "index", "value", "surrogate"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .meta("statistic", self.statistic);
        for r in &self.rows {
            t.push(vec![
                Cell::Int(r.m as i64),
                Cell::Text(r.input.clone()),
                r.index.as_str().into(),
                Cell::Num(r.value),
                r.surrogate.as_str().into(),
            ]);
        }
        t
    }

    /// Total indices for one surrogate at one prefix length.
    pub fn totals(&self, m: u64, kind: SurrogateKind) -> Option<&[f64]> {
        self.reports
            .iter()
            .find(|(mm, r)| *mm == m && r.method == kind.as_str())
            .map(|(_, r)| r.total.as_slice())
    }
}

/// Repeats reweighting and fitting on nested chain prefixes.
pub fn convergence_from_samples(
    samples: &PosteriorSampleSet,
    design: &[Vec<f64>],
    statistic: StatisticKind,
    schedule: &[u64],
    settings: &SurrogateSettings,
    design_seed: u64,
) -> Result<ConvergenceStudy> {
    let problems = schedule_problems(schedule, samples.total_count());
    if !problems.is_empty() {
        return Err(Error::Config(problems).at_stage("configuration"));
    }
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &m in schedule {
        let prefix = samples.prefix(m).stage("prefix")?;
        let (_, fits) = analyze_samples(&prefix, design, statistic, settings, design_seed)?;
        for f in fits {
            let kind = f.surrogate.kind();
            for (k, name) in f.report.names.iter().enumerate() {
                for (index, value) in [
                    (IndexKind::FirstOrder, f.report.first_order[k]),
                    (IndexKind::Total, f.report.total[k]),
                ] {
                    rows.push(ConvergenceRow {
                        m,
                        input: name.clone(),
                        index,
                        value,
                        surrogate: kind,
                    });
                }
            }
            reports.push((m, f.report));
        }
    }
    Ok(ConvergenceStudy {
        statistic,
        rows,
        reports,
    })
}

pub fn convergence_study(problem: &InverseProblem, config: &GsaConfig) -> Result<ConvergenceStudy> {
    config.validate(problem).stage("configuration")?;
    let Some(schedule) = &config.schedule else {
        return Err(Error::Config(vec!["convergence study needs a schedule".into()]).at_stage("configuration"));
    };
    let (_, samples) = sample_posterior(problem, &config.is_prior, &config.chain)?;
    let design = lhs_sample(problem.hyper_box(), config.design_size, config.design_seed).stage("design")?;
    convergence_from_samples(
        &samples,
        &design,
        config.statistic,
        schedule,
        &config.surrogates,
        config.design_seed,
    )
}

/// Saltelli first-order and Jansen total indices of `f` under the uniform
/// measure on the box, from `(n + 2) n_mc` evaluations.
pub fn try_pick_freeze_sobol<F>(f: F, hyper_box: &HyperparameterBox, n_mc: usize, seed: u64) -> Result<SobolIndexReport>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if n_mc < 2 {
        return Err(Error::Config(vec![format!("pick-freeze needs at least 2 samples, got {n_mc}")]));
    }
    let n = hyper_box.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> Vec<Vec<f64>> {
        (0..n_mc)
            .map(|_| hyper_box.from_unit(&(0..n).map(|_| rng.random::<f64>()).collect::<Vec<_>>()))
            .collect()
    };
    let a = draw();
    let b = draw();
    let eval = |pts: &[Vec<f64>]| -> Result<Vec<f64>> { pts.par_iter().map(|x| f(x)).collect() };
    let fa = eval(&a)?;
    let fb = eval(&b)?;
    let all = fa.iter().chain(&fb);
    let mean = all.clone().sum::<f64>() / (2 * n_mc) as f64;
    let variance = all.map(|v| (v - mean).powi(2)).sum::<f64>() / (2 * n_mc) as f64;
    let names = hyper_box.names().to_vec();
    let scale = mean.abs().max(f64::MIN_POSITIVE);
    if !(variance > 1e-28 * scale * scale) {
        return Ok(SobolIndexReport::constant(names, "pick_freeze"));
    }
    let mut first = Vec::with_capacity(n);
    let mut total = Vec::with_capacity(n);
    for k in 0..n {
        let ab: Vec<Vec<f64>> = a
            .iter()
            .zip(&b)
            .map(|(ra, rb)| {
                let mut r = ra.clone();
                r[k] = rb[k];
                r
            })
            .collect();
        let fab = eval(&ab)?;
        let mut s1 = 0.0;
        let mut st = 0.0;
        for i in 0..n_mc {
            s1 += fb[i] * (fab[i] - fa[i]);
            st += (fa[i] - fab[i]).powi(2);
        }
        first.push(s1 / n_mc as f64 / variance);
        total.push(st / (2.0 * n_mc as f64) / variance);
    }
    Ok(SobolIndexReport {
        names,
        first_order: first,
        total,
        variance,
        method: "pick_freeze".into(),
        constant: false,
        provenance: ReportProvenance {
            statistic: None,
            design_size: n_mc,
            total_samples: None,
            seed: Some(seed),
        },
    })
}

pub fn pick_freeze_sobol<F>(f: F, hyper_box: &HyperparameterBox, n_mc: usize, seed: u64) -> Result<SobolIndexReport>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    try_pick_freeze_sobol(|x| Ok(f(x)), hyper_box, n_mc, seed)
}

/// Where HS-map values come from.
#[derive(Clone, Copy)]
pub enum HsMapSource<'a> {
    Importance(&'a PosteriorSampleSet, StatisticKind),
    Map(&'a InverseProblem, &'a MapSolverConfig),
}

impl HsMapSource<'_> {
    pub fn evaluate(&self, design: &[Vec<f64>]) -> Result<HsMapEvaluations> {
        match self {
            HsMapSource::Importance(s, kind) => eval_is_over_design(s, design, *kind),
            HsMapSource::Map(p, c) => eval_map_over_design(p, design, c),
        }
    }
}

/// `design` with the named inputs overwritten. Unknown names and values
/// outside the box are all reported together.
pub fn freeze_design(
    hyper_box: &HyperparameterBox,
    design: &[Vec<f64>],
    fixed: &[(String, f64)],
) -> Result<Vec<Vec<f64>>> {
    let mut problems = Vec::new();
    let mut resolved = Vec::new();
    for (name, value) in fixed {
        match hyper_box.index_of(name) {
            None => problems.push(format!("unknown hyperparameter {name:?}")),
            Some(j) => {
                let (lo, hi) = (hyper_box.lower()[j], hyper_box.upper()[j]);
                if !(*value >= lo && *value <= hi) {
                    problems.push(format!("{name} = {value} outside [{lo}, {hi}]"));
                }
                if resolved.iter().any(|(k, _)| *k == j) {
                    problems.push(format!("{name} fixed twice"));
                }
                resolved.push((j, *value));
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    Ok(design
        .iter()
        .map(|xi| {
            let mut x = xi.clone();
            for (j, v) in &resolved {
                x[*j] = *v;
            }
            x
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct FixComparison {
    pub full: HsMapEvaluations,
    pub fixed: HsMapEvaluations,
    pub ks: f64,
}

impl FixComparison {
    /// Paired values, one row per design point that succeeded in both.
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(vec!["full".into(), "fixed".into()])
            .meta("statistic", self.full.kind)
            .meta("ks_statistic", crate::io::fmt_num(self.ks));
        let n = self.full.len().max(self.fixed.len());
        for i in 0..n {
            let cell = |v: Option<&f64>| Cell::Num(v.copied().unwrap_or(f64::NAN));
            t.push(vec![cell(self.full.values.get(i)), cell(self.fixed.values.get(i))]);
        }
        t
    }
}

/// Evaluates the map over the design and again with `fixed` inputs frozen.
pub fn fix_and_compare(
    source: HsMapSource<'_>,
    hyper_box: &HyperparameterBox,
    design: &[Vec<f64>],
    fixed: &[(String, f64)],
) -> Result<FixComparison> {
    let frozen = freeze_design(hyper_box, design, fixed).stage("configuration")?;
    let full = source.evaluate(design).stage("full design")?;
    let fixed = source.evaluate(&frozen).stage("frozen design")?;
    let ks = ks_statistic(&full.values, &fixed.values);
    Ok(FixComparison { full, fixed, ks })
}

/// Two-sample Kolmogorov-Smirnov statistic `sup |F_a - F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return if a.len() == b.len() { 0.0 } else { 1.0 };
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < a.len() && j < b.len() {
        // step past every copy of the smaller value in both samples
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}
