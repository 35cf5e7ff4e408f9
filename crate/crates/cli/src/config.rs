//! Run configuration: one JSON document with a version field. Unknown keys
//! and every semantic violation are collected and reported together.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use priorsens::benchmarks::linear::{self, LinearGaussian};
use priorsens::benchmarks::seir;
use priorsens::gsa::{ChainSettings, SurrogateSettings};
use priorsens::hsmaps::{MapSolverConfig, StatisticKind};
use priorsens::io::fnv1a_hex;
use priorsens::problem::{
    DiagonalGaussian, GaussianNoiseModel, GaussianPriorFamily, HyperparameterBox, InverseProblem,
    LinearForwardModel,
};
use priorsens::surrogates::{PceConfig, SurrogateKind};
use priorsens::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemSpec {
    Linear,
    Seir,
    External(ExternalProblem),
}

/// A linear-Gaussian problem `d = A theta + noise` with QoI `theta^T theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalProblem {
    pub parameter_names: Vec<String>,
    /// Rows of the forward matrix.
    pub matrix: Vec<Vec<f64>>,
    pub data: Vec<f64>,
    pub noise_variance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub names: Vec<String>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainSection {
    pub burn_in: usize,
    pub n_samples: usize,
    pub dr_scales: Vec<f64>,
    pub adapt_start: usize,
    pub adapt_interval: usize,
}

impl Default for ChainSection {
    fn default() -> Self {
        let c = ChainSettings::default();
        Self {
            burn_in: c.burn_in,
            n_samples: c.n_samples,
            dr_scales: c.dr_scales,
            adapt_start: c.adapt_start,
            adapt_interval: c.adapt_interval,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwelmSection {
    pub validation_fraction: f64,
    pub p_grid: Vec<f64>,
    pub width: Option<usize>,
    pub ridge: f64,
}

impl Default for SwelmSection {
    fn default() -> Self {
        let c = priorsens::surrogates::SwelmConfig::default();
        Self {
            validation_fraction: c.validation_fraction,
            p_grid: c.p_grid,
            width: c.width,
            ridge: c.ridge,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateSection {
    pub kinds: Vec<SurrogateKind>,
    pub pce: PceConfig,
    pub swelm: SwelmSection,
}

impl Default for SurrogateSection {
    fn default() -> Self {
        Self {
            kinds: vec![SurrogateKind::Pce, SurrogateKind::Swelm],
            pce: PceConfig::default(),
            swelm: SwelmSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapSection {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
    pub restarts: usize,
    pub dispersion: f64,
    pub linear_shortcut: bool,
}

impl Default for MapSection {
    fn default() -> Self {
        let c = MapSolverConfig::default();
        Self {
            max_iterations: c.max_iterations,
            gradient_tolerance: c.gradient_tolerance,
            step_tolerance: c.step_tolerance,
            restarts: c.restarts,
            dispersion: c.dispersion,
            linear_shortcut: c.linear_shortcut,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSection {
    /// Base sample size of the pick-freeze estimator.
    pub n_mc: usize,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        Self { n_mc: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub version: u32,
    pub problem: ProblemSpec,
    pub statistics: Vec<StatisticKind>,
    pub hyper_box: Option<BoxSpec>,
    pub is_prior: Option<PriorSpec>,
    pub chain: ChainSection,
    pub design_size: usize,
    pub surrogates: SurrogateSection,
    pub map_solver: MapSection,
    /// Master seed; every stage seed derives from it.
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub schedule: Option<Vec<u64>>,
    pub benchmark: BenchmarkSection,
    /// Hyperparameters frozen by `fix-compare`.
    pub fixed: BTreeMap<String, f64>,
    pub workers: Option<usize>,
}

/// Per-stage seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Seeds {
    pub chain: u64,
    pub design: u64,
    pub swelm: u64,
    pub map: u64,
    pub benchmark: u64,
}

impl Seeds {
    pub fn from_master(seed: u64) -> Self {
        Self {
            chain: seed,
            design: seed.wrapping_add(1),
            swelm: seed.wrapping_add(2),
            map: seed.wrapping_add(3),
            benchmark: seed.wrapping_add(4),
        }
    }

    pub fn pairs(&self) -> [(&'static str, u64); 5] {
        [
            ("chain_seed", self.chain),
            ("design_seed", self.design),
            ("swelm_seed", self.swelm),
            ("map_seed", self.map),
            ("benchmark_seed", self.benchmark),
        ]
    }
}

fn field<T: DeserializeOwned>(key: &str, value: &Value, problems: &mut Vec<String>) -> Option<T> {
    match serde_json::from_value(value.clone()) {
        Ok(v) => Some(v),
        Err(e) => {
            problems.push(format!("{key}: {e}"));
            None
        }
    }
}

impl RunConfig {
    /// Parses and validates, reporting every problem found.
    pub fn parse(text: &str) -> Result<Self> {
        let root: Value = serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("not valid JSON: {e}")]))?;
        let Value::Object(map) = root else {
            return Err(Error::Config(vec!["config must be a JSON object".into()]));
        };
        let mut problems = Vec::new();
        let mut version: Option<u32> = None;
        let mut problem = None;
        let mut c = RunConfig {
            version: CONFIG_VERSION,
            problem: ProblemSpec::Linear,
            statistics: vec![StatisticKind::Mean, StatisticKind::Var],
            hyper_box: None,
            is_prior: None,
            chain: ChainSection::default(),
            design_size: 1000,
            surrogates: SurrogateSection::default(),
            map_solver: MapSection::default(),
            seed: 0,
            output_dir: None,
            schedule: None,
            benchmark: BenchmarkSection::default(),
            fixed: BTreeMap::new(),
            workers: None,
        };
        for (key, value) in &map {
            let p = &mut problems;
            match key.as_str() {
                "version" => version = field(key, value, p),
                "problem" => problem = field(key, value, p),
                "statistics" => c.statistics = field(key, value, p).unwrap_or_default(),
                "hyper_box" => c.hyper_box = field(key, value, p),
                "is_prior" => c.is_prior = field(key, value, p),
                "chain" => c.chain = field(key, value, p).unwrap_or_default(),
                "design_size" => c.design_size = field(key, value, p).unwrap_or(c.design_size),
                "surrogates" => c.surrogates = field(key, value, p).unwrap_or_default(),
                "map_solver" => c.map_solver = field(key, value, p).unwrap_or_default(),
                "seed" => c.seed = field(key, value, p).unwrap_or(0),
                "output_dir" => c.output_dir = field(key, value, p),
                "schedule" => c.schedule = field(key, value, p),
                "benchmark" => c.benchmark = field(key, value, p).unwrap_or_default(),
                "fixed" => c.fixed = field(key, value, p).unwrap_or_default(),
                "workers" => c.workers = field(key, value, p),
                _ => problems.push(format!("unknown key {key:?}")),
            }
        }
        match version {
            Some(v) if v == CONFIG_VERSION => {}
            Some(v) => problems.push(format!("unsupported version {v}, expected {CONFIG_VERSION}")),
            None if map.contains_key("version") => {}
            None => problems.push("missing key \"version\"".into()),
        }
        match problem {
            Some(p) => c.problem = p,
            None if map.contains_key("problem") => {}
            None => problems.push("missing key \"problem\"".into()),
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        c.validate()?;
        Ok(c)
    }

    /// Semantic checks; rerun after command-line overrides.
    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
        Self::parse(&text)
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_master(self.seed)
    }

    /// Hash of everything that affects results; output location and worker
    /// count are left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        c.workers = None;
        fnv1a_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    fn problems(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.statistics.is_empty() {
            problems.push("statistics: at least one statistic is required".into());
        }
        for (i, s) in self.statistics.iter().enumerate() {
            if self.statistics[..i].contains(s) {
                problems.push(format!("statistics: {s} listed twice"));
            }
        }
        if self.design_size == 0 {
            problems.push("design_size must be at least 1".into());
        }
        if self.benchmark.n_mc < 2 {
            problems.push(format!("benchmark.n_mc must be at least 2, got {}", self.benchmark.n_mc));
        }
        if self.workers == Some(0) {
            problems.push("workers must be at least 1".into());
        }
        match self.build() {
            Ok(built) => {
                let chain = self.chain_settings();
                if let Err(Error::Config(p)) = chain.dram_config(&built.is_prior).validate() {
                    problems.extend(p.into_iter().map(|s| format!("chain: {s}")));
                }
                let surrogates = self.surrogate_settings();
                if surrogates.kinds.is_empty() {
                    problems.push("surrogates.kinds: no surrogate kinds selected".into());
                }
                if let Err(Error::Config(p)) = surrogates.pce.validate() {
                    problems.extend(p.into_iter().map(|s| format!("surrogates.pce: {s}")));
                }
                if let Err(Error::Config(p)) = surrogates.swelm.validate() {
                    problems.extend(p.into_iter().map(|s| format!("surrogates.swelm: {s}")));
                }
                if let Err(Error::Config(p)) = self.map_config().validate() {
                    problems.extend(p.into_iter().map(|s| format!("map_solver: {s}")));
                }
                if let Some(s) = &self.schedule {
                    if s.is_empty() {
                        problems.push("schedule: must not be empty".into());
                    }
                    if s.first() == Some(&0) {
                        problems.push("schedule: entries must be positive".into());
                    }
                    if s.windows(2).any(|w| w[0] >= w[1]) {
                        problems.push("schedule: must be strictly increasing".into());
                    }
                    if let Some(last) = s.last() {
                        if *last > self.chain.n_samples as u64 {
                            problems.push(format!(
                                "schedule: entry {last} exceeds chain.n_samples = {}",
                                self.chain.n_samples
                            ));
                        }
                    }
                }
                let bx = built.problem.hyper_box();
                for (name, v) in &self.fixed {
                    match bx.index_of(name) {
                        None => problems.push(format!("fixed: unknown hyperparameter {name:?}")),
                        Some(j) => {
                            let (lo, hi) = (bx.lower()[j], bx.upper()[j]);
                            if !(*v >= lo && *v <= hi) {
                                problems.push(format!("fixed: {name} = {v} outside [{lo}, {hi}]"));
                            }
                        }
                    }
                }
            }
            Err(Error::Config(p)) => problems.extend(p),
            Err(e) => problems.push(e.to_string()),
        }
        problems
    }

    pub fn chain_settings(&self) -> ChainSettings {
        ChainSettings {
            burn_in: self.chain.burn_in,
            n_samples: self.chain.n_samples,
            seed: self.seeds().chain,
            dr_scales: self.chain.dr_scales.clone(),
            adapt_start: self.chain.adapt_start,
            adapt_interval: self.chain.adapt_interval,
        }
    }

    pub fn surrogate_settings(&self) -> SurrogateSettings {
        let s = &self.surrogates.swelm;
        SurrogateSettings {
            kinds: self.surrogates.kinds.clone(),
            pce: self.surrogates.pce.clone(),
            swelm: priorsens::surrogates::SwelmConfig {
                validation_fraction: s.validation_fraction,
                p_grid: s.p_grid.clone(),
                width: s.width,
                ridge: s.ridge,
                seed: self.seeds().swelm,
            },
        }
    }

    pub fn map_config(&self) -> MapSolverConfig {
        let m = &self.map_solver;
        MapSolverConfig {
            max_iterations: m.max_iterations,
            gradient_tolerance: m.gradient_tolerance,
            step_tolerance: m.step_tolerance,
            restarts: m.restarts,
            dispersion: m.dispersion,
            seed: self.seeds().map,
            linear_shortcut: m.linear_shortcut,
        }
    }

    /// The inverse problem, IS prior and, when the problem is linear-Gaussian,
    /// its analytic form.
    pub fn build(&self) -> Result<BuiltProblem> {
        let mut problems = Vec::new();
        let hyper_box = match &self.hyper_box {
            Some(b) => match HyperparameterBox::new(b.names.clone(), b.lower.clone(), b.upper.clone()) {
                Ok(b) => Some(b),
                Err(Error::Config(p)) => {
                    problems.extend(p.into_iter().map(|s| format!("hyper_box: {s}")));
                    None
                }
                Err(e) => return Err(e),
            },
            None => match &self.problem {
                ProblemSpec::Linear => Some(linear::hyper_box()),
                ProblemSpec::Seir => Some(seir::hyper_box()),
                ProblemSpec::External(_) => {
                    problems.push("hyper_box is required for an external problem".into());
                    None
                }
            },
        };
        let is_prior = match &self.is_prior {
            Some(p) => match DiagonalGaussian::new(p.mean.clone(), p.variance.clone()) {
                Ok(p) => Some(p),
                Err(e) => {
                    problems.push(format!("is_prior: {e}"));
                    None
                }
            },
            None => match &self.problem {
                ProblemSpec::Linear => Some(linear::is_prior()),
                ProblemSpec::Seir => Some(seir::is_prior()),
                ProblemSpec::External(_) => {
                    problems.push("is_prior is required for an external problem".into());
                    None
                }
            },
        };
        let n_params = match &self.problem {
            ProblemSpec::Linear => 2,
            ProblemSpec::Seir => 4,
            ProblemSpec::External(e) => e.parameter_names.len(),
        };
        if let Some(b) = &hyper_box {
            if b.dim() != 2 * n_params {
                problems.push(format!(
                    "hyper_box: {} components, but {n_params} parameters need {} (a mean and a variance each)",
                    b.dim(),
                    2 * n_params
                ));
            }
        }
        if let Some(p) = &is_prior {
            if p.dim() != n_params {
                problems.push(format!("is_prior: dimension {} but the problem has {n_params} parameters", p.dim()));
            }
        }
        if let ProblemSpec::External(e) = &self.problem {
            problems.extend(external_problems(e));
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let (hyper_box, is_prior) = (hyper_box.unwrap(), is_prior.unwrap());
        let family = GaussianPriorFamily::means_then_variances(hyper_box)?;
        let (problem, linear) = match &self.problem {
            ProblemSpec::Linear => {
                let lg = LinearGaussian {
                    family,
                    ..LinearGaussian::shipped()
                };
                (lg.inverse_problem()?, Some(lg))
            }
            ProblemSpec::Seir => {
                let mut p = seir::shipped_problem();
                p.prior_family = family;
                (p, None)
            }
            ProblemSpec::External(e) => {
                let rows = e.matrix.len();
                let cols = e.parameter_names.len();
                let matrix = DMatrix::from_fn(rows, cols, |i, j| e.matrix[i][j]);
                let noise = GaussianNoiseModel::diagonal(&e.noise_variance, DVector::from_vec(e.data.clone()))?;
                let lg = LinearGaussian { matrix, noise, family };
                let p = InverseProblem::new(
                    e.parameter_names.clone(),
                    Arc::new(LinearForwardModel::new(lg.matrix.clone())?),
                    lg.noise.clone(),
                    lg.family.clone(),
                    Arc::new(linear::quadratic_qoi),
                )?;
                (p, Some(lg))
            }
        };
        Ok(BuiltProblem {
            problem,
            is_prior,
            linear,
        })
    }
}

fn external_problems(e: &ExternalProblem) -> Vec<String> {
    let mut problems = Vec::new();
    let p = e.parameter_names.len();
    if p == 0 {
        problems.push("problem.external.parameter_names: at least one parameter is required".into());
    }
    if e.matrix.is_empty() {
        problems.push("problem.external.matrix: no rows".into());
    }
    for (i, row) in e.matrix.iter().enumerate() {
        if row.len() != p {
            problems.push(format!("problem.external.matrix: row {i} has {} entries, expected {p}", row.len()));
        }
        if row.iter().any(|v| !v.is_finite()) {
            problems.push(format!("problem.external.matrix: row {i} has a non-finite entry"));
        }
    }
    if e.data.len() != e.matrix.len() {
        problems.push(format!(
            "problem.external.data: {} values for {} matrix rows",
            e.data.len(),
            e.matrix.len()
        ));
    }
    if e.noise_variance.len() != e.data.len() {
        problems.push(format!(
            "problem.external.noise_variance: {} values for {} observations",
            e.noise_variance.len(),
            e.data.len()
        ));
    }
    if e.noise_variance.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        problems.push("problem.external.noise_variance: entries must be positive".into());
    }
    problems
}

pub struct BuiltProblem {
    pub problem: InverseProblem,
    pub is_prior: DiagonalGaussian,
    pub linear: Option<LinearGaussian>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(text: &str) -> String {
        RunConfig::parse(text).unwrap_err().to_string()
    }

    #[test]
    fn minimal_linear_config() {
        let c = RunConfig::parse(r#"{"version": 1, "problem": "linear"}"#).unwrap();
        assert_eq!(c.statistics, vec![StatisticKind::Mean, StatisticKind::Var]);
        assert_eq!(c.build().unwrap().problem.hyper_box().names()[0], "mu_b");
    }

    #[test]
    fn every_violation_is_listed() {
        let m = msg(
            r#"{"version": 2, "problem": "linear", "bogus": 1, "design_size": 0,
                "chain": {"n_samples": 0}, "benchmark": {"n_mc": 0}}"#,
        );
        for needle in ["unsupported version", "bogus"] {
            assert!(m.contains(needle), "{m}");
        }
        let m = msg(r#"{"version": 1, "problem": "linear", "design_size": 0, "chain": {"n_samples": 0}, "benchmark": {"n_mc": 0}}"#);
        for needle in ["design_size", "chain: chain length", "n_mc"] {
            assert!(m.contains(needle), "{m}");
        }
    }

    #[test]
    fn inverted_bounds_name_the_component() {
        let m = msg(
            r#"{"version": 1, "problem": "linear",
                "hyper_box": {"names": ["mu_b", "mu_m", "var_b", "var_m"],
                              "lower": [0.5, 1.5, 0.5, 0.5], "upper": [1.5, 0.5, 1.5, 1.5]}}"#,
        );
        assert!(m.contains("mu_m"), "{m}");
    }

    #[test]
    fn missing_keys_and_unknown_section_fields() {
        let m = msg(r#"{"chain": {"n_samples": 10, "colour": "red"}}"#);
        assert!(m.contains("version") && m.contains("problem") && m.contains("colour"), "{m}");
    }

    #[test]
    fn schedule_and_fixed_checked_against_problem() {
        let m = msg(
            r#"{"version": 1, "problem": "linear", "chain": {"n_samples": 100},
                "schedule": [50, 40, 200], "fixed": {"nope": 1.0, "mu_b": 5.0}}"#,
        );
        for needle in ["strictly increasing", "exceeds", "nope", "mu_b = 5"] {
            assert!(m.contains(needle), "{m}");
        }
    }

    #[test]
    fn external_problem_needs_box_and_prior() {
        let m = msg(
            r#"{"version": 1, "problem": {"external": {"parameter_names": ["a"],
                "matrix": [[1.0], [2.0, 3.0]], "data": [1.0], "noise_variance": [1.0, -1.0]}}}"#,
        );
        for needle in ["hyper_box is required", "is_prior is required", "row 1", "data"] {
            assert!(m.contains(needle), "{m}");
        }
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = RunConfig::parse(r#"{"version": 1, "problem": "linear", "output_dir": "a", "workers": 2}"#).unwrap();
        let b = RunConfig::parse(r#"{"version": 1, "problem": "linear", "output_dir": "b"}"#).unwrap();
        let c = RunConfig::parse(r#"{"version": 1, "problem": "linear", "seed": 1}"#).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }
}
