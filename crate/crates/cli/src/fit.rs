use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use hanova::eval::{cross_validate, default_grid, CvResult};
use hanova::solver::parse_penalties;
use hanova::table::{fmt_f64, load_cells};
use hanova::variance::{empirical_lambdas, SubspaceInfo, VarianceComponents, VarianceOptions};
use hanova::{fit_hanova, HanovaFit, HanovaModel, Penalty, SparseTable};

use crate::echo::Echo;
use crate::{create, distinct, with_suffix, LambdaMode, NotConverged, SolverArgs};

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Cell table: factor columns, then `y` and `n`.
    #[arg(long)]
    input: PathBuf,
    /// Model file to write.
    #[arg(long)]
    output: PathBuf,
    /// Diagnostics report (default: the model path plus `.report`).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Highest interaction order (default: number of factors).
    #[arg(long)]
    maxk: Option<usize>,
    #[command(flatten)]
    lambda: LambdaArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Exit with status 3 if any order fails to converge.
    #[arg(long)]
    strict: bool,
}

#[derive(Args, Clone, Debug)]
pub struct LambdaArgs {
    /// How penalties are chosen (default: `supplied` with --lambda, else
    /// `empirical`).
    #[arg(long, value_enum)]
    pub lambda_mode: Option<LambdaMode>,
    /// Comma-separated penalties, `inf` for total shrinkage. In cv mode
    /// these are the centres of the grid.
    #[arg(long)]
    pub lambda: Option<String>,
    /// Noise variance of a unit-weight cell, or `preprocessed` (= 1).
    #[arg(long)]
    pub sigma2: Option<String>,
    /// Upper bound on empirical penalties.
    #[arg(long)]
    pub lambda_cap: Option<f64>,
    /// Cross-validation folds.
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// In cv mode, take the largest penalty within one standard error.
    #[arg(long)]
    pub one_se: bool,
    /// Seed of the fold assignment.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Penalties with whatever produced them.
pub struct Resolved {
    pub mode: LambdaMode,
    pub sigma2: Option<f64>,
    pub lambdas: Vec<Penalty>,
    pub variance: Option<(SubspaceInfo, VarianceComponents, Vec<Penalty>)>,
    pub cv: Option<CvResult>,
}

/// σ² from the flag, or 1 when the table comes with a preprocessing sidecar.
pub fn resolve_sigma2(arg: Option<&str>, input: &Path) -> Result<Option<f64>> {
    let sidecar = with_suffix(input, ".variances");
    match arg {
        Some("preprocessed") => {
            if !sidecar.exists() {
                bail!(
                    "--sigma2 preprocessed needs {} from `hanova preprocess`",
                    sidecar.display()
                );
            }
            Ok(Some(1.0))
        }
        Some(v) => {
            let s: f64 = v.parse().with_context(|| format!("--sigma2 `{v}` is not a number"))?;
            if !(s > 0.0 && s.is_finite()) {
                bail!("--sigma2 must be positive");
            }
            Ok(Some(s))
        }
        None if sidecar.exists() => Ok(Some(1.0)),
        None => Ok(None),
    }
}

fn need_sigma2(sigma2: Option<f64>) -> Result<f64> {
    sigma2.context("--sigma2 is required unless the table was written by `hanova preprocess`")
}

impl LambdaArgs {
    pub fn mode(&self) -> Result<LambdaMode> {
        match (self.lambda_mode, &self.lambda) {
            (None, Some(_)) => Ok(LambdaMode::Supplied),
            (None, None) => Ok(LambdaMode::Empirical),
            (Some(LambdaMode::Supplied), None) => bail!("--lambda-mode supplied needs --lambda"),
            (Some(LambdaMode::Empirical), Some(_)) => {
                bail!("--lambda conflicts with --lambda-mode empirical; choose one")
            }
            (Some(mode), _) => Ok(mode),
        }
    }

    pub fn resolve(
        &self,
        table: &SparseTable,
        input: &Path,
        maxk: usize,
        solver: &hanova::FitOptions,
    ) -> Result<Resolved> {
        let mode = self.mode()?;
        if let Some(c) = self.lambda_cap {
            if !(c >= 0.0) {
                bail!("--lambda-cap must be non-negative");
            }
        }
        let sigma2 = resolve_sigma2(self.sigma2.as_deref(), input)?;
        let supplied = match &self.lambda {
            Some(s) => {
                let l = parse_penalties(s)?;
                if l.len() != maxk {
                    bail!("--lambda has {} values for maxk = {maxk}", l.len());
                }
                Some(l)
            }
            None => None,
        };
        let mut variance = None;
        let base = match supplied {
            Some(l) => l,
            None => {
                let s2 = need_sigma2(sigma2)?;
                let v = empirical_lambdas(table, s2, self.lambda_cap, &VarianceOptions::default())?;
                let l = v.2[..maxk].to_vec();
                variance = Some(v);
                l
            }
        };
        let (lambdas, cv) = if mode == LambdaMode::Cv {
            let grid = default_grid(&base);
            let cv = cross_validate(table, maxk, &base, &grid, self.folds, self.seed, solver)?;
            let pick = if self.one_se { cv.one_se.clone() } else { cv.selected.clone() };
            (pick, Some(cv))
        } else {
            (base, None)
        };
        Ok(Resolved {
            mode,
            sigma2,
            lambdas,
            variance,
            cv,
        })
    }

    pub fn echo(&self, e: &mut Echo, r: &Resolved) {
        let mode = match r.mode {
            LambdaMode::Empirical => "empirical",
            LambdaMode::Supplied => "supplied",
            LambdaMode::Cv => "cv",
        };
        e.opt("--lambda-mode", mode);
        if r.mode == LambdaMode::Supplied {
            e.list("--lambda", &r.lambdas);
        } else if let Some(l) = &self.lambda {
            e.opt("--lambda", l);
        }
        e.maybe("--sigma2", r.sigma2).maybe("--lambda-cap", self.lambda_cap);
        if r.mode == LambdaMode::Cv {
            e.opt("--folds", self.folds)
                .opt("--seed", self.seed)
                .flag("--one-se", self.one_se);
        }
    }
}

pub fn variance_header() -> Vec<&'static str> {
    vec!["k", "dim", "sq_norm", "sigma2_raw", "sigma2", "clamped", "degenerate", "tau2", "lambda"]
}

/// One row per component `k = 0..=m`; `λ_k` sits on row `k`.
pub fn variance_rows(info: &SubspaceInfo, vc: &VarianceComponents, lambdas: &[Penalty]) -> Vec<Vec<String>> {
    (0..vc.sigmas.len())
        .map(|k| {
            vec![
                k.to_string(),
                info.dims[k].to_string(),
                fmt_f64(info.sq_norms[k]),
                fmt_f64(vc.raw[k]),
                fmt_f64(vc.sigmas[k]),
                vc.clamped[k].to_string(),
                vc.degenerate[k].to_string(),
                vc.taus.get(k).map(|&t| fmt_f64(t)).unwrap_or_default(),
                if k == 0 { String::new() } else { lambdas[k - 1].to_string() },
            ]
        })
        .collect()
}

fn section<W: Write>(w: &mut W, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    writeln!(w, "# {name}")?;
    let mut c = csv::Writer::from_writer(Vec::new());
    c.write_record(header)?;
    for r in rows {
        c.write_record(r)?;
    }
    w.write_all(&c.into_inner().map_err(|e| e.into_error())?)?;
    writeln!(w)?;
    Ok(())
}

fn write_report<W: Write>(mut w: W, table: &SparseTable, fit: &HanovaFit, r: &Resolved) -> Result<()> {
    let summary = vec![
        vec!["cells".into(), table.len().to_string()],
        vec!["maxk".into(), fit.maxk.to_string()],
        vec!["grand_mean".into(), fmt_f64(fit.grand_mean)],
        vec!["sigma2".into(), r.sigma2.map(fmt_f64).unwrap_or_default()],
        vec!["converged".into(), fit.converged().to_string()],
    ];
    section(&mut w, "summary", &["key", "value"], &summary)?;

    let orders: Vec<Vec<String>> = fit
        .order_fits
        .iter()
        .map(|f| {
            vec![
                f.order.to_string(),
                f.lambda.to_string(),
                f.sweeps.to_string(),
                f.converged.to_string(),
                fmt_f64(*f.objective_trace.last().unwrap()),
            ]
        })
        .collect();
    section(&mut w, "orders", &["order", "lambda", "sweeps", "converged", "objective"], &orders)?;

    if let Some((info, vc, lambdas)) = &r.variance {
        section(&mut w, "variance", &variance_header(), &variance_rows(info, vc, lambdas))?;
    }
    if let Some(cv) = &r.cv {
        let mut rows = Vec::new();
        for k in 0..cv.grid.len() {
            for (c, l) in cv.grid[k].iter().enumerate() {
                rows.push(vec![
                    (k + 1).to_string(),
                    l.to_string(),
                    fmt_f64(cv.losses[k][c]),
                    fmt_f64(cv.std_errors[k][c]),
                    (cv.selected[k] == *l).to_string(),
                    (cv.one_se[k] == *l).to_string(),
                ]);
            }
        }
        section(
            &mut w,
            "cv",
            &["order", "lambda", "mean_loss", "std_error", "selected", "one_se"],
            &rows,
        )?;
    }

    let mut trace = Vec::new();
    for f in &fit.order_fits {
        for (s, v) in f.objective_trace.iter().enumerate() {
            trace.push(vec![f.order.to_string(), s.to_string(), fmt_f64(*v)]);
        }
    }
    section(&mut w, "objective_trace", &["order", "sweep", "objective"], &trace)?;

    let spec = table.spec();
    let mut header: Vec<&str> = spec.names().iter().map(String::as_str).collect();
    header.extend(["y", "n", "fitted"]);
    let fitted: Vec<Vec<String>> = table
        .cells()
        .iter()
        .zip(fit.fitted())
        .map(|(c, mu)| {
            let mut row: Vec<String> = c
                .index
                .0
                .iter()
                .enumerate()
                .map(|(f, &l)| spec.label(f, l).to_owned())
                .collect();
            row.extend([fmt_f64(c.y), fmt_f64(c.n), fmt_f64(*mu)]);
            row
        })
        .collect();
    section(&mut w, "fitted", &header, &fitted)?;
    w.flush()?;
    Ok(())
}

pub fn run(a: &FitArgs, threads: usize) -> Result<()> {
    let report = a.report.clone().unwrap_or_else(|| with_suffix(&a.output, ".report"));
    distinct(&[
        ("--input", Some(&a.input)),
        ("--output", Some(&a.output)),
        ("--report", Some(&report)),
    ])?;
    let opts = a.solver.options()?;
    let table = load_cells(&a.input, None)
        .with_context(|| format!("reading {}", a.input.display()))?;
    let m = table.m();
    let maxk = a.maxk.unwrap_or(m);
    if maxk == 0 || maxk > m {
        bail!("--maxk must be in 1..={m}");
    }
    let resolved = a.lambda.resolve(&table, &a.input, maxk, &opts)?;

    let mut e = Echo::new("fit", threads);
    e.path("--input", &a.input)
        .path("--output", &a.output)
        .path("--report", &report)
        .opt("--maxk", maxk);
    a.lambda.echo(&mut e, &resolved);
    a.solver.echo(&mut e);
    e.flag("--strict", a.strict).print();

    let fit = fit_hanova(&table, &resolved.lambdas, maxk, &opts)?;
    HanovaModel::from_fit(&fit).save(&a.output)?;
    write_report(create(&report)?, &table, &fit, &resolved)?;

    for f in &fit.order_fits {
        eprintln!(
            "order {}: lambda {}, {} sweeps{}",
            f.order,
            f.lambda,
            f.sweeps,
            if f.converged { "" } else { ", NOT converged" }
        );
    }
    if !fit.converged() {
        if a.strict {
            return Err(NotConverged.into());
        }
        eprintln!("warning: some orders hit the sweep limit; the partial fit was written");
    }
    Ok(())
}
