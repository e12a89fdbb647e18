mod data;
mod echo;
mod fit;
mod predict;
mod study;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hanova::eval::{SimSpec, WeightScheme};
use hanova::FitOptions;

use crate::echo::Echo;

#[derive(Parser)]
#[command(name = "hanova", version, about = "Hierarchical penalized ANOVA for sparse multi-way tables")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a cell table.
    Fit(fit::FitArgs),
    /// Predict cell means for query rows, or shrink unit means.
    Predict(predict::PredictArgs),
    /// Aggregate unit-level data into a cell table.
    Preprocess(data::PreprocessArgs),
    /// Estimate variance components and penalties.
    Lambda(study::LambdaArgs),
    /// Cross-validate the penalties.
    Cv(study::CvArgs),
    /// Simulate a cell table (or unit data) from the random-effects model.
    Simulate(data::SimulateArgs),
    /// Run a replicated simulation study.
    Experiment(study::ExperimentArgs),
    /// Compare the fit with the exact posterior mean on a balanced table.
    #[command(hide = true)]
    Oracle(study::OracleArgs),
}

/// Non-convergence under `--strict`.
#[derive(Debug)]
struct NotConverged;

impl std::fmt::Display for NotConverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("fit did not converge (--strict)")
    }
}

impl std::error::Error for NotConverged {}

#[derive(Args, Clone, Debug)]
struct SolverArgs {
    /// Convergence tolerance on the sweep change of the fitted values.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 500)]
    max_sweeps: usize,
    /// Largest coefficient block stored densely.
    #[arg(long, default_value_t = 1 << 22)]
    dense_budget: usize,
}

impl SolverArgs {
    fn options(&self) -> Result<FitOptions> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            bail!("--tol must be positive");
        }
        if self.max_sweeps == 0 {
            bail!("--max-sweeps must be positive");
        }
        Ok(FitOptions {
            tol: self.tol,
            max_sweeps: self.max_sweeps,
            dense_budget: self.dense_budget,
        })
    }

    fn echo(&self, e: &mut Echo) {
        e.opt("--tol", self.tol)
            .opt("--max-sweeps", self.max_sweeps)
            .opt("--dense-budget", self.dense_budget);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum LambdaMode {
    Empirical,
    Supplied,
    Cv,
}

#[derive(Args, Clone, Debug)]
struct SimArgs {
    /// Level count of each factor, e.g. `10,10,10`.
    #[arg(long, value_delimiter = ',', required = true)]
    levels: Vec<usize>,
    /// Standard deviations σ_0, σ_1, … of the effect orders.
    #[arg(long, value_delimiter = ',', required = true)]
    sigmas: Vec<f64>,
    /// Noise standard deviation of a unit-weight cell.
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    /// `equal` or `ratio:R` (log-uniform weights on [1, R]).
    #[arg(long, default_value = "equal")]
    weights: String,
    /// Fraction of cells observed.
    #[arg(long, default_value_t = 1.0)]
    rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SimArgs {
    fn spec(&self, replicates: usize) -> Result<SimSpec> {
        let weights = match self.weights.as_str() {
            "equal" => WeightScheme::Equal,
            w => match w.strip_prefix("ratio:").map(str::parse::<f64>) {
                Some(Ok(r)) => WeightScheme::RatioBounded(r),
                _ => bail!("--weights must be `equal` or `ratio:R`, got `{w}`"),
            },
        };
        let mut spec = SimSpec::new(self.levels.clone(), self.sigmas.clone(), self.noise);
        spec.weights = weights;
        spec.observation_rate = self.rate;
        spec.replicates = replicates;
        spec.seed = self.seed;
        spec.validate()?;
        Ok(spec)
    }

    fn echo(&self, e: &mut Echo) {
        e.list("--levels", &self.levels)
            .list("--sigmas", &self.sigmas)
            .opt("--noise", self.noise)
            .opt("--weights", &self.weights)
            .opt("--rate", self.rate)
            .opt("--seed", self.seed);
    }
}

/// Buffered writer on `path`, or stdout.
fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

/// `path` with `suffix` appended to its file name.
fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn distinct(paths: &[(&str, Option<&Path>)]) -> Result<()> {
    for (i, (a, pa)) in paths.iter().enumerate() {
        for (b, pb) in &paths[i + 1..] {
            if let (Some(pa), Some(pb)) = (pa, pb) {
                if pa == pb {
                    bail!("{a} and {b} must be different files");
                }
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let threads = match cli.threads {
        Some(t) => t,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    if threads == 0 {
        bail!("--threads must be positive");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("cannot start the thread pool")?;
    match cli.command {
        Command::Fit(a) => fit::run(&a, threads),
        Command::Predict(a) => predict::run(&a, threads),
        Command::Preprocess(a) => data::preprocess(&a, threads),
        Command::Lambda(a) => study::lambda(&a, threads),
        Command::Cv(a) => study::cv(&a, threads),
        Command::Simulate(a) => data::simulate(&a, threads),
        Command::Experiment(a) => study::experiment(&a, threads),
        Command::Oracle(a) => study::oracle(&a, threads),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<NotConverged>() => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
