//! Replicated simulation studies comparing estimators of the cell means.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::eval::rmse;
use crate::eval::sim::{simulate, SimInstance, SimSpec, WeightScheme};
use crate::oracle::{build_basis, dense_posterior_mean, factorial_components, DENSE_LIMIT};
use crate::solver::{final_blend, fit_hanova, FitOptions, Penalty};
use crate::table::{fmt_f64, weighted_grand_mean, SparseTable};
use crate::variance::{empirical_lambdas, lambdas_from_sigmas, VarianceComponents, VarianceOptions};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method {
    /// Unpenalized least squares on the order-`order` subspace.
    Ols { order: usize },
    /// Penalties computed from the true variance components.
    HanovaOracle { order: usize },
    /// Penalties from moment estimates, optionally capped.
    HanovaEmpirical { order: usize, cap: Option<f64> },
    /// Exact posterior mean under the true components (equal weights only).
    BayesOracle,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Ols { order } => write!(f, "ols-{order}"),
            Method::HanovaOracle { order } => write!(f, "hanova-oracle-{order}"),
            Method::HanovaEmpirical { order, .. } => write!(f, "hanova-empirical-{order}"),
            Method::BayesOracle => f.write_str("bayes-oracle"),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = crate::error::HanovaError;

    /// `ols-2`, `hanova-oracle-2`, `hanova-empirical-2` or `bayes-oracle`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "bayes-oracle" {
            return Ok(Method::BayesOracle);
        }
        let (name, order) = s
            .rsplit_once('-')
            .and_then(|(n, o)| o.parse::<usize>().ok().map(|o| (n, o)))
            .ok_or_else(|| crate::error::HanovaError::Invalid(format!("unknown method `{s}`")))?;
        match name {
            "ols" => Ok(Method::Ols { order }),
            "hanova-oracle" => Ok(Method::HanovaOracle { order }),
            "hanova-empirical" => Ok(Method::HanovaEmpirical { order, cap: None }),
            _ => invalid(format!("unknown method `{s}`")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOptions {
    pub fit: FitOptions,
    pub variance: VarianceOptions,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            fit: FitOptions {
                tol: 1e-10,
                max_sweeps: 5_000,
                ..FitOptions::default()
            },
            variance: VarianceOptions::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MethodSummary {
    pub method: Method,
    pub mean: f64,
    pub q05: f64,
    pub median: f64,
    pub q95: f64,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub methods: Vec<Method>,
    /// `rmse[r][j]`: replicate `r`, method `j`.
    pub rmse: Vec<Vec<f64>>,
    pub summaries: Vec<MethodSummary>,
    /// Root of the per-cell Bayes risk, for complete equal-weight designs.
    pub bayes_reference: Option<f64>,
}

impl ExperimentResult {
    pub fn column(&self, method: Method) -> Option<Vec<f64>> {
        let j = self.methods.iter().position(|&m| m == method)?;
        Some(self.rmse.iter().map(|r| r[j]).collect())
    }

    pub fn mean(&self, method: Method) -> Option<f64> {
        let j = self.methods.iter().position(|&m| m == method)?;
        Some(self.summaries[j].mean)
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn check_method(spec: &SimSpec, method: Method) -> Result<()> {
    let m = spec.m();
    match method {
        Method::Ols { order } | Method::HanovaOracle { order } | Method::HanovaEmpirical { order, .. } => {
            if order == 0 || order > m {
                return invalid(format!("{method}: order must be in 1..={m}"));
            }
        }
        Method::BayesOracle => {
            if spec.weights != WeightScheme::Equal {
                return invalid("the Bayes oracle needs equal weights");
            }
            if spec.observation_rate < 1.0 {
                let total: f64 = spec.levels.iter().map(|&l| l as f64).product();
                if (spec.observation_rate * total).round() > DENSE_LIMIT as f64 {
                    return invalid("the Bayes oracle on a sparse table is limited to the dense size");
                }
            }
        }
    }
    Ok(())
}

/// Grand mean plus the posterior mean of the centered responses on an
/// equal-weight table. Complete tables use their factorial decomposition,
/// others the dense basis.
fn bayes_estimate(table: &SparseTable, sigma2: f64, variances: &[f64]) -> Result<Vec<f64>> {
    let m = table.m();
    let gm = weighted_grand_mean(table);
    let centered: Vec<f64> = table.cells().iter().map(|c| c.y - gm).collect();
    let table = table.with_responses(&centered)?;
    let post = if table.is_complete() {
        let noise = sigma2 / table.cells()[0].n;
        let parts = factorial_components(&table, &centered)?;
        let shrink: Vec<f64> = (1..=m)
            .map(|j| {
                let a: f64 = variances[j - 1..].iter().sum();
                if a > 0.0 {
                    a / (a + noise)
                } else {
                    0.0
                }
            })
            .collect();
        (0..centered.len())
            .map(|i| (1..=m).map(|j| shrink[j - 1] * parts[j][i]).sum())
            .collect()
    } else {
        let basis = build_basis(&table)?;
        dense_posterior_mean(&table, &basis, sigma2, variances)?
    };
    Ok(post.into_iter().map(|v: f64| v + gm).collect())
}

/// Per-cell Bayes risk of the posterior mean on a complete equal-weight
/// table, square-rooted.
pub fn bayes_reference(spec: &SimSpec) -> Option<f64> {
    if spec.weights != WeightScheme::Equal || spec.observation_rate < 1.0 {
        return None;
    }
    let m = spec.m();
    let v = spec.variances();
    let noise = spec.sigma2();
    let n: f64 = spec.levels.iter().map(|&l| l as f64).product();
    // the grand mean is estimated without shrinkage
    let mut risk = noise;
    for j in 1..=m {
        let dim: f64 = crate::table::Subset::all_of_size(m, j)
            .iter()
            .map(|s| s.factors().iter().map(|&f| (spec.levels[f] - 1) as f64).product::<f64>())
            .sum();
        let a: f64 = v[j - 1..].iter().sum();
        if a + noise > 0.0 {
            risk += dim * a * noise / (a + noise);
        }
    }
    Some((risk / n).sqrt())
}

fn estimate(inst: &SimInstance, spec: &SimSpec, method: Method, opts: &ExperimentOptions) -> Result<Vec<f64>> {
    let table = &inst.table;
    let m = spec.m();
    let sigma2 = spec.sigma2();
    let fitted = |lambdas: &[Penalty], order: usize, sigma_m2: f64, s2: f64| -> Result<Vec<f64>> {
        let fit = fit_hanova(table, lambdas, order, &opts.fit)?;
        if order == m && sigma_m2 > 0.0 {
            final_blend(&fit, table, s2, sigma_m2)
        } else {
            Ok(fit.fitted().to_vec())
        }
    };
    match method {
        Method::Ols { order } => fitted(&vec![Penalty::Finite(0.0); order], order, 0.0, sigma2),
        Method::HanovaOracle { order } => {
            let vc = VarianceComponents::from_truth(table, sigma2, &spec.variances())?;
            let lambdas = lambdas_from_sigmas(&vc, None);
            fitted(&lambdas, order, vc.sigmas[m], vc.sigma2_eff)
        }
        Method::HanovaEmpirical { order, cap } => {
            let (_, vc, lambdas) = empirical_lambdas(table, sigma2, cap, &opts.variance)?;
            fitted(&lambdas, order, vc.sigmas[m], vc.sigma2_eff)
        }
        Method::BayesOracle => bayes_estimate(table, sigma2, &spec.variances()),
    }
}

/// Runs every method on every replicate (in parallel, deterministic order)
/// and scores each against the true means at the observed cells.
pub fn run_experiment(spec: &SimSpec, methods: &[Method], opts: &ExperimentOptions) -> Result<ExperimentResult> {
    spec.validate()?;
    if methods.is_empty() {
        return invalid("no methods requested");
    }
    for &m in methods {
        check_method(spec, m)?;
    }
    let rmse_rows: Vec<Vec<f64>> = (0..spec.replicates)
        .into_par_iter()
        .map(|r| {
            let inst = simulate(spec, r)?;
            methods
                .iter()
                .map(|&m| rmse(&estimate(&inst, spec, m, opts)?, &inst.true_mu, None))
                .collect()
        })
        .collect::<Result<_>>()?;
    let summaries = methods
        .iter()
        .enumerate()
        .map(|(j, &method)| {
            let mut col: Vec<f64> = rmse_rows.iter().map(|r| r[j]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            col.sort_by(f64::total_cmp);
            MethodSummary {
                method,
                mean,
                q05: quantile(&col, 0.05),
                median: quantile(&col, 0.5),
                q95: quantile(&col, 0.95),
            }
        })
        .collect();
    Ok(ExperimentResult {
        methods: methods.to_vec(),
        rmse: rmse_rows,
        summaries,
        bayes_reference: bayes_reference(spec),
    })
}

/// Per-replicate CSV: `replicate,method,rmse`.
pub fn write_experiment<W: Write>(result: &ExperimentResult, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["replicate", "method", "rmse"])?;
    for (r, row) in result.rmse.iter().enumerate() {
        for (m, v) in result.methods.iter().zip(row) {
            w.write_record([r.to_string(), m.to_string(), fmt_f64(*v)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Summary CSV: `method,mean,q05,median,q95`, then the Bayes reference.
pub fn write_summary<W: Write>(result: &ExperimentResult, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["method", "mean", "q05", "median", "q95"])?;
    for s in &result.summaries {
        w.write_record([
            s.method.to_string(),
            fmt_f64(s.mean),
            fmt_f64(s.q05),
            fmt_f64(s.median),
            fmt_f64(s.q95),
        ])?;
    }
    if let Some(b) = result.bayes_reference {
        let b = fmt_f64(b);
        w.write_record(["bayes-risk", &b, &b, &b, &b])?;
    }
    w.flush()?;
    Ok(())
}
