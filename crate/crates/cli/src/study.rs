use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use hanova::eval::experiment::{run_experiment, write_experiment, write_summary, ExperimentOptions};
use hanova::eval::cv::write_cv;
use hanova::eval::{cross_validate, default_grid, Method};
use hanova::oracle::{build_basis, dense_posterior_mean};
use hanova::solver::{final_blend, parse_penalties};
use hanova::table::{fmt_f64, load_cells, weighted_grand_mean};
use hanova::variance::{empirical_lambdas, lambdas_from_sigmas, VarianceComponents, VarianceOptions};
use hanova::fit_hanova;

use crate::echo::Echo;
use crate::fit::{resolve_sigma2, variance_header, variance_rows};
use crate::{create, distinct, output, SimArgs, SolverArgs};

#[derive(Args, Debug)]
pub struct LambdaArgs {
    #[arg(long)]
    input: PathBuf,
    /// Noise variance of a unit-weight cell, or `preprocessed` (= 1).
    #[arg(long)]
    sigma2: Option<String>,
    #[arg(long)]
    lambda_cap: Option<f64>,
    /// Write CSV instead of an aligned table.
    #[arg(long)]
    csv: bool,
    /// Output file (default: stdout).
    #[arg(long)]
    output: Option<PathBuf>,
}

fn sigma2_or_fail(arg: Option<&str>, input: &std::path::Path) -> Result<f64> {
    resolve_sigma2(arg, input)?
        .context("--sigma2 is required unless the table was written by `hanova preprocess`")
}

pub fn lambda(a: &LambdaArgs, threads: usize) -> Result<()> {
    distinct(&[("--input", Some(&a.input)), ("--output", a.output.as_deref())])?;
    let table = load_cells(&a.input, None).with_context(|| format!("reading {}", a.input.display()))?;
    let sigma2 = sigma2_or_fail(a.sigma2.as_deref(), &a.input)?;
    let mut e = Echo::new("lambda", threads);
    e.path("--input", &a.input)
        .opt("--sigma2", sigma2)
        .maybe("--lambda-cap", a.lambda_cap)
        .flag("--csv", a.csv);
    if let Some(o) = &a.output {
        e.path("--output", o);
    }
    e.print();

    let (info, vc, lambdas) = empirical_lambdas(&table, sigma2, a.lambda_cap, &VarianceOptions::default())?;
    let header = variance_header();
    let rows = variance_rows(&info, &vc, &lambdas);
    let mut w = output(a.output.as_deref())?;
    if a.csv {
        let mut c = csv::Writer::from_writer(&mut w);
        c.write_record(&header)?;
        for r in &rows {
            c.write_record(r)?;
        }
        c.flush()?;
    } else {
        let widths: Vec<usize> = (0..header.len())
            .map(|j| rows.iter().map(|r| r[j].len()).chain([header[j].len()]).max().unwrap())
            .collect();
        let line = |cells: Vec<&str>| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        writeln!(w, "{}", line(header.clone()))?;
        for r in &rows {
            writeln!(w, "{}", line(r.iter().map(String::as_str).collect()))?;
        }
        writeln!(
            w,
            "sigma2 {}, effective {}, weight scale {}",
            fmt_f64(vc.sigma2),
            fmt_f64(vc.sigma2_eff),
            fmt_f64(vc.weight_scale)
        )?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct CvArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    maxk: Option<usize>,
    /// Centres of the grid (default: empirical penalties).
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    sigma2: Option<String>,
    #[arg(long)]
    lambda_cap: Option<f64>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    solver: SolverArgs,
    /// Output CSV (default: stdout).
    #[arg(long)]
    output: Option<PathBuf>,
}

pub fn cv(a: &CvArgs, threads: usize) -> Result<()> {
    distinct(&[("--input", Some(&a.input)), ("--output", a.output.as_deref())])?;
    let opts = a.solver.options()?;
    let table = load_cells(&a.input, None).with_context(|| format!("reading {}", a.input.display()))?;
    let m = table.m();
    let maxk = a.maxk.unwrap_or(m);
    if maxk == 0 || maxk > m {
        bail!("--maxk must be in 1..={m}");
    }
    let mut e = Echo::new("cv", threads);
    e.path("--input", &a.input).opt("--maxk", maxk);
    let base = match &a.lambda {
        Some(s) => {
            let l = parse_penalties(s)?;
            if l.len() != maxk {
                bail!("--lambda has {} values for maxk = {maxk}", l.len());
            }
            e.list("--lambda", &l);
            l
        }
        None => {
            let sigma2 = sigma2_or_fail(a.sigma2.as_deref(), &a.input)?;
            e.opt("--sigma2", sigma2).maybe("--lambda-cap", a.lambda_cap);
            let (_, _, l) = empirical_lambdas(&table, sigma2, a.lambda_cap, &VarianceOptions::default())?;
            l[..maxk].to_vec()
        }
    };
    e.opt("--folds", a.folds).opt("--seed", a.seed);
    a.solver.echo(&mut e);
    if let Some(o) = &a.output {
        e.path("--output", o);
    }
    e.print();

    let grid = default_grid(&base);
    let result = cross_validate(&table, maxk, &base, &grid, a.folds, a.seed, &opts)?;
    write_cv(&result, output(a.output.as_deref())?)?;
    let show = |l: &[hanova::Penalty]| l.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
    eprintln!("selected {}; one-se {}", show(&result.selected), show(&result.one_se));
    Ok(())
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long, default_value_t = 100)]
    replicates: usize,
    /// Comma-separated methods: `ols-K`, `hanova-oracle-K`,
    /// `hanova-empirical-K`, `bayes-oracle`.
    #[arg(long, value_delimiter = ',', required = true)]
    methods: Vec<String>,
    /// Cap on the empirical penalties.
    #[arg(long)]
    lambda_cap: Option<f64>,
    /// Per-replicate results.
    #[arg(long)]
    output: PathBuf,
    /// Summary CSV (default: stdout).
    #[arg(long)]
    summary: Option<PathBuf>,
}

pub fn experiment(a: &ExperimentArgs, threads: usize) -> Result<()> {
    distinct(&[("--output", Some(&a.output)), ("--summary", a.summary.as_deref())])?;
    let spec = a.sim.spec(a.replicates)?;
    let methods: Vec<Method> = a
        .methods
        .iter()
        .map(|s| {
            let m: Method = s.parse()?;
            Ok(match m {
                Method::HanovaEmpirical { order, .. } => Method::HanovaEmpirical {
                    order,
                    cap: a.lambda_cap,
                },
                m => m,
            })
        })
        .collect::<Result<_>>()?;
    let mut e = Echo::new("experiment", threads);
    a.sim.echo(&mut e);
    e.opt("--replicates", a.replicates)
        .list("--methods", &methods)
        .maybe("--lambda-cap", a.lambda_cap)
        .path("--output", &a.output);
    if let Some(s) = &a.summary {
        e.path("--summary", s);
    }
    e.print();

    let result = run_experiment(&spec, &methods, &ExperimentOptions::default())?;
    write_experiment(&result, create(&a.output)?)?;
    write_summary(&result, output(a.summary.as_deref())?)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    /// Fully observed, equally weighted cell table.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    sigma2: f64,
    /// Variance components σ²_0 … σ²_m.
    #[arg(long, value_delimiter = ',', required = true)]
    components: Vec<f64>,
    /// Output CSV (default: stdout).
    #[arg(long)]
    output: Option<PathBuf>,
}

pub fn oracle(a: &OracleArgs, threads: usize) -> Result<()> {
    distinct(&[("--input", Some(&a.input)), ("--output", a.output.as_deref())])?;
    let table = load_cells(&a.input, None).with_context(|| format!("reading {}", a.input.display()))?;
    let mut e = Echo::new("oracle", threads);
    e.path("--input", &a.input)
        .opt("--sigma2", a.sigma2)
        .list("--components", &a.components);
    if let Some(o) = &a.output {
        e.path("--output", o);
    }
    e.print();

    let m = table.m();
    let vc = VarianceComponents::from_truth(&table, a.sigma2, &a.components)?;
    let lambdas = lambdas_from_sigmas(&vc, None);
    let opts = hanova::FitOptions {
        tol: 1e-13,
        max_sweeps: 100_000,
        ..hanova::FitOptions::default()
    };
    let fit = fit_hanova(&table, &lambdas, m, &opts)?;
    let blended = final_blend(&fit, &table, vc.sigma2_eff, a.components[m])?;

    let gm = weighted_grand_mean(&table);
    let ys: Vec<f64> = table.responses().iter().map(|y| y - gm).collect();
    let centered = table.with_responses(&ys)?;
    let basis = build_basis(&centered)?;
    let post = dense_posterior_mean(&centered, &basis, a.sigma2, &a.components)?;

    let spec = table.spec();
    let mut w = csv::Writer::from_writer(output(a.output.as_deref())?);
    let mut header: Vec<String> = spec.names().to_vec();
    header.extend(["y", "hanova", "posterior"].map(String::from));
    w.write_record(&header)?;
    let mut worst: f64 = 0.0;
    for ((c, h), p) in table.cells().iter().zip(&blended).zip(&post) {
        let p = p + gm;
        worst = worst.max((h - p).abs());
        let mut row: Vec<String> = (0..m).map(|f| spec.label(f, c.index.0[f]).to_owned()).collect();
        row.extend([fmt_f64(c.y), fmt_f64(*h), fmt_f64(p)]);
        w.write_record(&row)?;
    }
    w.flush()?;
    eprintln!("max |hanova - posterior| = {worst:e}");
    Ok(())
}
