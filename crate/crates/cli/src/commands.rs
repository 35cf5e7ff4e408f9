//! The four verbs. Each writes its artifacts plus `manifest.json` into the
//! output directory; CSV bodies depend only on the config.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Map, Value};

use priorsens::benchmarks::linear::LinearGaussian;
use priorsens::gsa::{
    analyze_samples, convergence_from_samples, fix_and_compare, run_map_gsa, sample_posterior, try_pick_freeze_sobol,
    FittedSurrogate, HsMapSource,
};
use priorsens::hsmaps::StatisticKind;
use priorsens::importance::{ess_profile, PosteriorSampleSet};
use priorsens::io::{Cell, Table};
use priorsens::sampling::lhs_sample;
use priorsens::surrogates::SobolIndexReport;
use priorsens::{Error, Result, StageExt};

use crate::config::{BuiltProblem, RunConfig, Seeds};

pub const DEFAULT_OUTPUT_DIR: &str = "priorsens-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Run,
    Benchmark,
    Convergence,
    FixCompare,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Run => "run",
            Command::Benchmark => "benchmark",
            Command::Convergence => "convergence",
            Command::FixCompare => "fix-compare",
        }
    }
}

/// True when the error, under any stage labels, is a configuration problem.
pub fn is_config_error(e: &Error) -> bool {
    match e {
        Error::Config(_) => true,
        Error::Stage { source, .. } => is_config_error(source),
        _ => false,
    }
}

/// Writes artifacts stamped with the config hash and seeds, and remembers
/// them for the manifest.
pub struct OutputWriter {
    dir: PathBuf,
    hash: String,
    seeds: Seeds,
    files: Vec<String>,
}

impl OutputWriter {
    pub fn create(dir: &Path, hash: String, seeds: Seeds) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(Error::from).stage("output")?;
        Ok(Self {
            dir: dir.to_path_buf(),
            hash,
            seeds,
            files: Vec::new(),
        })
    }

    pub fn table(&mut self, name: &str, table: Table) -> Result<()> {
        let mut t = table.meta("config_hash", &self.hash);
        for (k, v) in self.seeds.pairs() {
            if !t.metadata.iter().any(|(key, _)| key == k) {
                t = t.meta(k, v);
            }
        }
        t.write(&self.dir.join(name)).stage("output")?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn json(&mut self, name: &str, body: impl Serialize) -> Result<()> {
        let doc = json!({
            "config_hash": self.hash,
            "seeds": self.seeds,
            "data": body,
        });
        self.write_json(name, &doc)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn write_json(&self, name: &str, doc: &Value) -> Result<()> {
        let mut text = serde_json::to_string_pretty(doc)?;
        text.push('\n');
        std::fs::write(self.dir.join(name), text).map_err(Error::from).stage("output")
    }

    /// Writes `manifest.json` listing every file written so far.
    pub fn finish(self, command: Command, config: &RunConfig, summary: Value) -> Result<PathBuf> {
        let doc = json!({
            "command": command.as_str(),
            "config_hash": self.hash,
            "seeds": self.seeds,
            "config": config,
            "files": self.files,
            "summary": summary,
        });
        self.write_json("manifest.json", &doc)?;
        Ok(self.dir.join("manifest.json"))
    }
}

fn report_summary(r: &SobolIndexReport) -> Value {
    let per_input = |v: &[f64]| -> Value {
        Value::Object(r.names.iter().zip(v).map(|(n, x)| (n.clone(), json!(x))).collect())
    };
    json!({
        "first_order": per_input(&r.first_order),
        "total": per_input(&r.total),
        "variance": r.variance,
        "constant": r.constant,
    })
}

fn design_table(names: &[String], design: &[Vec<f64>]) -> Table {
    let mut t = Table::new(names.to_vec());
    for xi in design {
        t.push(xi.iter().map(|v| Cell::Num(*v)).collect());
    }
    t
}

fn is_statistics(config: &RunConfig) -> Vec<StatisticKind> {
    config
        .statistics
        .iter()
        .copied()
        .filter(|s| *s != StatisticKind::Map)
        .collect()
}

struct Session {
    config: RunConfig,
    built: BuiltProblem,
    seeds: Seeds,
    writer: OutputWriter,
}

impl Session {
    fn open(config: &RunConfig) -> Result<Self> {
        let built = config.build().stage("configuration")?;
        let dir = config
            .output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR));
        let seeds = config.seeds();
        let writer = OutputWriter::create(&dir, config.hash(), seeds)?;
        Ok(Self {
            config: config.clone(),
            built,
            seeds,
            writer,
        })
    }

    fn names(&self) -> Vec<String> {
        self.built.problem.hyper_box().names().to_vec()
    }

    fn design(&self) -> Result<Vec<Vec<f64>>> {
        lhs_sample(self.built.problem.hyper_box(), self.config.design_size, self.seeds.design).stage("design")
    }

    fn samples(&mut self, write_chain: bool) -> Result<PosteriorSampleSet> {
        let (chain, samples) = sample_posterior(&self.built.problem, &self.built.is_prior, &self.config.chain_settings())?;
        log::info!(
            "chain: {} draws, acceptance {:.3}, {} distinct states",
            chain.len(),
            chain.acceptance_rate(),
            samples.n_distinct()
        );
        if write_chain {
            self.writer.table("chain.csv", chain.to_table(&self.built.problem.parameter_names))?;
        }
        Ok(samples)
    }

    fn write_fits(&mut self, stat: StatisticKind, fits: &[FittedSurrogate], summary: &mut Map<String, Value>) -> Result<()> {
        let mut per_kind = Map::new();
        for f in fits {
            let kind = f.surrogate.kind();
            self.writer.json(
                &format!("surrogate_{stat}_{kind}.json"),
                json!({"statistic": stat, "surrogate": f.surrogate, "sobol": f.report}),
            )?;
            self.writer.table(&format!("sobol_{stat}_{kind}.csv"), f.report.to_table())?;
            per_kind.insert(kind.to_string(), report_summary(&f.report));
        }
        summary.insert(stat.to_string(), Value::Object(per_kind));
        Ok(())
    }

    fn finish(self, command: Command, summary: Map<String, Value>) -> Result<PathBuf> {
        self.writer.finish(command, &self.config, Value::Object(summary))
    }
}

/// Dispatches one verb.
pub fn execute(command: Command, config: &RunConfig) -> Result<PathBuf> {
    match command {
        Command::Run => run(config),
        Command::Benchmark => benchmark(config),
        Command::Convergence => convergence(config),
        Command::FixCompare => fix_compare(config),
    }
}

/// Full pipeline for every configured statistic.
pub fn run(config: &RunConfig) -> Result<PathBuf> {
    let mut s = Session::open(config)?;
    let names = s.names();
    let design = s.design()?;
    s.writer.table("design.csv", design_table(&names, &design))?;
    let mut summary = Map::new();
    let is_stats = is_statistics(config);
    if !is_stats.is_empty() {
        let samples = s.samples(true)?;
        let ess = ess_profile(&samples, &design);
        s.writer.table("ess_profile.csv", ess.to_table(&names))?;
        for stat in is_stats {
            let settings = config.surrogate_settings();
            let (evals, fits) = analyze_samples(&samples, &design, stat, &settings, s.seeds.design)?;
            s.writer.table(&format!("hsmap_{stat}.csv"), evals.to_table())?;
            s.write_fits(stat, &fits, &mut summary)?;
        }
    }
    if config.statistics.contains(&StatisticKind::Map) {
        let out = run_map_gsa(&s.built.problem, &design, &config.map_config(), &config.surrogate_settings())?;
        if !out.evaluations.failures.is_empty() {
            log::warn!(
                "{} of {} MAP solves failed and were left out of the fit",
                out.evaluations.failures.len(),
                design.len()
            );
        }
        s.writer.table("hsmap_map.csv", out.evaluations.to_table())?;
        s.write_fits(StatisticKind::Map, &out.fits, &mut summary)?;
    }
    s.finish(Command::Run, summary)
}

/// Pick-freeze indices of the exact maps of a linear-Gaussian problem.
pub fn benchmark(config: &RunConfig) -> Result<PathBuf> {
    let mut s = Session::open(config)?;
    let Some(lg) = s.built.linear.clone().or_else(|| LinearGaussian::from_problem(&s.built.problem)) else {
        return Err(Error::Unsupported(
            "the benchmark needs closed-form maps, which only linear-Gaussian problems have".into(),
        )
        .at_stage("benchmark"));
    };
    let bx = s.built.problem.hyper_box().clone();
    let mut summary = Map::new();
    for &stat in &config.statistics {
        let f = |xi: &[f64]| -> Result<f64> {
            match stat {
                StatisticKind::Mean => lg.analytic_mean_map(xi),
                StatisticKind::Var => lg.analytic_var_map(xi),
                // the MAP point of a Gaussian posterior is its mean
                StatisticKind::Map => {
                    let (m, _) = lg.posterior(xi)?;
                    Ok(s.built.problem.qoi.value(m.as_slice()))
                }
            }
        };
        let report = try_pick_freeze_sobol(f, &bx, config.benchmark.n_mc, s.seeds.benchmark).stage("benchmark")?;
        s.writer.table(&format!("benchmark_{stat}.csv"), report.to_table())?;
        let mut per = Map::new();
        per.insert("pick_freeze".into(), report_summary(&report));
        summary.insert(stat.to_string(), Value::Object(per));
    }
    s.finish(Command::Benchmark, summary)
}

/// Indices on nested chain prefixes.
pub fn convergence(config: &RunConfig) -> Result<PathBuf> {
    let Some(schedule) = config.schedule.clone() else {
        return Err(Error::Config(vec!["the convergence command needs a schedule".into()]).at_stage("configuration"));
    };
    let is_stats = is_statistics(config);
    if is_stats.is_empty() {
        return Err(Error::Config(vec![
            "the convergence command needs an importance-sampled statistic (mean or var)".into(),
        ])
        .at_stage("configuration"));
    }
    if config.statistics.contains(&StatisticKind::Map) {
        log::warn!("the MAP statistic does not depend on the chain length and is skipped");
    }
    let mut s = Session::open(config)?;
    let design = s.design()?;
    let samples = s.samples(false)?;
    let mut summary = Map::new();
    for stat in is_stats {
        let study = convergence_from_samples(
            &samples,
            &design,
            stat,
            &schedule,
            &config.surrogate_settings(),
            s.seeds.design,
        )?;
        s.writer.table(&format!("convergence_{stat}.csv"), study.to_table())?;
        let mut per = Map::new();
        for (m, r) in &study.reports {
            per.insert(format!("{}@{m}", r.method), report_summary(r));
        }
        summary.insert(stat.to_string(), Value::Object(per));
    }
    s.finish(Command::Convergence, summary)
}

/// Map values with and without the configured inputs frozen.
pub fn fix_compare(config: &RunConfig) -> Result<PathBuf> {
    let mut s = Session::open(config)?;
    let fixed: Vec<(String, f64)> = config.fixed.iter().map(|(k, v)| (k.clone(), *v)).collect();
    if fixed.is_empty() {
        log::warn!("no inputs fixed; both samples coincide");
    }
    let bx = s.built.problem.hyper_box().clone();
    let design = s.design()?;
    let samples = if is_statistics(config).is_empty() {
        None
    } else {
        Some(s.samples(false)?)
    };
    let map_config = config.map_config();
    let mut summary = Map::new();
    for &stat in &config.statistics {
        let source = match (stat, &samples) {
            (StatisticKind::Map, _) => HsMapSource::Map(&s.built.problem, &map_config),
            (_, Some(samples)) => HsMapSource::Importance(samples, stat),
            (_, None) => unreachable!("samples exist for importance-sampled statistics"),
        };
        let cmp = fix_and_compare(source, &bx, &design, &fixed)?;
        let table = cmp
            .to_table()
            .meta("fixed", fixed.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";"));
        s.writer.table(&format!("fix_compare_{stat}.csv"), table)?;
        summary.insert(stat.to_string(), json!({"ks_statistic": cmp.ks}));
    }
    s.finish(Command::FixCompare, summary)
}
