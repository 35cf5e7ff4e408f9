use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use priorsens::{Error, Result};
use priorsens_cli::{execute, is_config_error, Command, RunConfig};

/// Global sensitivity of posterior statistics to prior hyperparameters.
#[derive(Parser)]
#[command(name = "priorsens", version)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Sample, reweight, fit surrogates and write Sobol indices.
    Run(Common),
    /// Pick-freeze indices of the exact maps (linear-Gaussian problems only).
    Benchmark(Common),
    /// Indices on nested chain prefixes given by the config's schedule.
    Convergence(Common),
    /// Compare map values with some hyperparameters frozen.
    FixCompare(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads, overriding the config.
    #[arg(long)]
    workers: Option<usize>,
    /// Freeze a hyperparameter, as NAME=VALUE; repeatable.
    #[arg(long = "fix", value_parser = parse_fix)]
    fix: Vec<(String, f64)>,
}

fn parse_fix(s: &str) -> std::result::Result<(String, f64), String> {
    let (name, value) = s.split_once('=').ok_or_else(|| format!("expected NAME=VALUE, got {s:?}"))?;
    let value: f64 = value.trim().parse().map_err(|e| format!("{name}: {e}"))?;
    Ok((name.trim().to_string(), value))
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut config = RunConfig::read(&common.config)?;
    if let Some(out) = &common.out {
        config.output_dir = Some(out.clone());
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if common.workers.is_some() {
        config.workers = common.workers;
    }
    for (name, value) in &common.fix {
        config.fixed.insert(name.clone(), *value);
    }
    config.validate()?;
    Ok(config)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (command, common) = match &cli.verb {
        Verb::Run(c) => (Command::Run, c),
        Verb::Benchmark(c) => (Command::Benchmark, c),
        Verb::Convergence(c) => (Command::Convergence, c),
        Verb::FixCompare(c) => (Command::FixCompare, c),
    };
    let result = load(common).map_err(|e| e.at_stage("configuration")).and_then(|config| {
        if let Some(n) = config.workers {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Numerical(format!("thread pool: {e}")))?;
        }
        execute(command, &config)
    });
    match result {
        Ok(manifest) => {
            println!("{}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_config_error(&e) { 2 } else { 1 })
        }
    }
}
