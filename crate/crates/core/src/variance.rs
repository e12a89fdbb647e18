//! Method-of-moments variance components and the penalties they imply.
//!
//! With `Q_k = ‖P_k y‖²` the squared norm of the (unweighted) projection of
//! the centered responses onto `S_k` and `d_k = dim S_k`, the gap means
//! `G_k = (Q_{k+1} − Q_k)/(d_{k+1} − d_k)` have expectation
//! `σ² + σ²_k + … + σ²_m`, so successive differences estimate each `σ²_k`.
//! Index 0 is the constant (after centering) and index `m+1` is the whole
//! observed space.

use nalgebra::DMatrix;

use crate::error::{invalid, HanovaError, Result};
use crate::solver::{fit_order, CoefficientSet, FitOptions, OrderFit, Penalty};
use crate::table::{weighted_grand_mean, SparseTable, Subset};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DimMethod {
    ClosedForm,
    NumericRank,
}

/// `dims[k]` and `sq_norms[k]` for `k = 0..=m+1`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceInfo {
    pub dims: Vec<usize>,
    pub sq_norms: Vec<f64>,
    pub method: DimMethod,
}

#[derive(Clone, Debug)]
pub struct VarianceOptions {
    /// Ridge added to the unpenalized projection fits.
    pub jitter: f64,
    /// Largest table whose subspace dimensions may be found numerically.
    pub rank_limit: usize,
    pub fit: FitOptions,
}

impl Default for VarianceOptions {
    fn default() -> Self {
        Self {
            jitter: 1e-10,
            rank_limit: 20_000,
            fit: FitOptions {
                tol: 1e-12,
                max_sweeps: 10_000,
                ..FitOptions::default()
            },
        }
    }
}

/// `σ² · mean(1/n_I)`: the noise level of the table treated as balanced.
pub fn effective_sigma2(table: &SparseTable, sigma2: f64) -> f64 {
    sigma2 / weight_scale(table)
}

/// Harmonic mean of the cell weights.
pub fn weight_scale(table: &SparseTable) -> f64 {
    let inv: f64 = table.cells().iter().map(|c| 1.0 / c.n).sum();
    table.len() as f64 / inv
}

fn centered_unit_table(table: &SparseTable) -> Result<SparseTable> {
    let gm = weighted_grand_mean(table);
    let ys: Vec<f64> = table.cells().iter().map(|c| c.y - gm).collect();
    table.with_responses(&ys)?.with_weights(&vec![1.0; table.len()])
}

fn projection_fit(
    unit: &SparseTable,
    k: usize,
    lower: &[&CoefficientSet],
    opts: &VarianceOptions,
) -> Result<(f64, OrderFit)> {
    let prior = vec![0.0; unit.len()];
    let fit = fit_order(unit, k, Penalty::Finite(opts.jitter), &prior, lower, &opts.fit)?;
    let total: f64 = unit.cells().iter().map(|c| c.y * c.y).sum();
    let resid: f64 = unit
        .cells()
        .iter()
        .zip(&fit.mu)
        .map(|(c, &u)| (c.y - u).powi(2))
        .sum();
    let q = (total - resid).max(0.0);
    if !fit.converged {
        return Err(HanovaError::NotConverged {
            partial: q,
            sweeps: fit.sweeps,
        });
    }
    Ok((q, fit))
}

/// `‖P_k y‖²` for the grand-mean-centered responses, every cell weighted
/// equally.
pub fn projection_sq_norm(table: &SparseTable, k: usize) -> Result<f64> {
    projection_sq_norm_with(table, k, &VarianceOptions::default())
}

pub fn projection_sq_norm_with(table: &SparseTable, k: usize, opts: &VarianceOptions) -> Result<f64> {
    let m = table.m();
    if k == 0 || k > m {
        return invalid(format!("order must be in 1..={m}, got {k}"));
    }
    let unit = centered_unit_table(table)?;
    let mut lower: Vec<OrderFit> = Vec::new();
    for j in 1..=k {
        let sets: Vec<&CoefficientSet> = lower.iter().map(|f| &f.coefficients).collect();
        let (q, fit) = projection_fit(&unit, j, &sets, opts)?;
        if j == k {
            return Ok(q);
        }
        lower.push(fit);
    }
    unreachable!("loop returns at j == k")
}

/// `dim S_k` restricted to the observed cells.
pub fn subspace_dim(table: &SparseTable, k: usize) -> Result<usize> {
    subspace_dim_with(table, k, VarianceOptions::default().rank_limit).map(|(d, _)| d)
}

fn subspace_dim_with(table: &SparseTable, k: usize, rank_limit: usize) -> Result<(usize, DimMethod)> {
    let m = table.m();
    if k > m {
        return invalid(format!("order must be in 0..={m}, got {k}"));
    }
    if k == m {
        return Ok((table.len(), DimMethod::ClosedForm));
    }
    if table.is_complete() {
        let counts = table.spec().level_counts();
        let d = (0..=k)
            .flat_map(|j| Subset::all_of_size(m, j))
            .map(|s| s.factors().iter().map(|&f| counts[f] - 1).product::<usize>())
            .sum();
        return Ok((d, DimMethod::ClosedForm));
    }
    if table.len() > rank_limit {
        return Err(HanovaError::TooLarge(format!(
            "{} observed cells exceed the limit of {rank_limit} for numeric subspace \
             dimensions; supply the penalties directly or choose them by cross-validation",
            table.len()
        )));
    }
    Ok((numeric_rank(table, k, rank_limit)?, DimMethod::NumericRank))
}

/// Rank of the order-`k` design on the observed cells, in treatment coding
/// (one column per subset `|J| ≤ k` and level tuple avoiding level 0).
fn numeric_rank(table: &SparseTable, k: usize, rank_limit: usize) -> Result<usize> {
    let mut columns: std::collections::BTreeMap<(Subset, Vec<u32>), usize> = Default::default();
    let mut entries = Vec::new();
    for (row, cell) in table.cells().iter().enumerate() {
        for j in 0..=k {
            for s in Subset::all_of_size(table.m(), j) {
                let lv = cell.index.project(&s);
                if lv.contains(&0) {
                    continue;
                }
                let next = columns.len();
                let col = *columns.entry((s, lv)).or_insert(next);
                entries.push((row, col));
            }
        }
    }
    let (n, p) = (table.len(), columns.len());
    if n.saturating_mul(p) > rank_limit.saturating_mul(2_000) {
        return Err(HanovaError::TooLarge(format!(
            "a {n}×{p} design is too large for a dense rank computation; \
             supply the penalties directly or choose them by cross-validation"
        )));
    }
    let mut x = DMatrix::<f64>::zeros(n, p);
    for (r, c) in entries {
        x[(r, c)] = 1.0;
    }
    Ok(matrix_rank(x, 1e-10))
}

pub(crate) fn matrix_rank(x: DMatrix<f64>, rel_tol: f64) -> usize {
    if x.nrows() == 0 || x.ncols() == 0 {
        return 0;
    }
    let qr = x.col_piv_qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..r.nrows().min(r.ncols())).map(|i| r[(i, i)].abs()).collect();
    let top = diag.iter().cloned().fold(0.0, f64::max);
    if top == 0.0 {
        return 0;
    }
    diag.iter().filter(|&&d| d > rel_tol * top).count()
}

/// Dimensions and squared projection norms for every order.
pub fn subspace_info(table: &SparseTable, opts: &VarianceOptions) -> Result<SubspaceInfo> {
    let m = table.m();
    let unit = centered_unit_table(table)?;
    let n = table.len();
    let total: f64 = unit.cells().iter().map(|c| c.y * c.y).sum();
    let mean = unit.cells().iter().map(|c| c.y).sum::<f64>() / n as f64;

    let mut dims = vec![1usize];
    let mut sq_norms = vec![n as f64 * mean * mean];
    let mut method = DimMethod::ClosedForm;
    let mut lower: Vec<OrderFit> = Vec::new();
    for k in 1..=m {
        let (d, how) = subspace_dim_with(table, k, opts.rank_limit)?;
        if how == DimMethod::NumericRank {
            method = how;
        }
        dims.push(d);
        if k == m {
            // S_m spans every observed cell
            sq_norms.push(total);
        } else {
            let sets: Vec<&CoefficientSet> = lower.iter().map(|f| &f.coefficients).collect();
            let (q, fit) = projection_fit(&unit, k, &sets, opts)?;
            sq_norms.push(q.min(total));
            lower.push(fit);
        }
    }
    dims.push(n);
    sq_norms.push(total);
    Ok(SubspaceInfo {
        dims,
        sq_norms,
        method,
    })
}

/// Variance components `σ²_0 … σ²_m` and the noise level they sit on.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceComponents {
    /// Per-unit-weight noise variance as supplied.
    pub sigma2: f64,
    /// Noise variance of the table treated as balanced.
    pub sigma2_eff: f64,
    /// Harmonic mean of the cell weights; penalties are scaled by it so they
    /// apply to the weighted objective.
    pub weight_scale: f64,
    /// Estimates after clamping, index `k = 0..=m`.
    pub sigmas: Vec<f64>,
    /// Estimates before clamping.
    pub raw: Vec<f64>,
    pub clamped: Vec<bool>,
    /// Components left at 0 because their estimating equation is undefined.
    pub degenerate: Vec<bool>,
    /// `τ²_k = σ²_k + … + σ²_{m−1}` for `k = 0..m`.
    pub taus: Vec<f64>,
}

impl VarianceComponents {
    /// Known components, e.g. the truth of a simulation.
    pub fn from_truth(table: &SparseTable, sigma2: f64, sigmas: &[f64]) -> Result<Self> {
        if sigmas.len() != table.m() + 1 {
            return invalid(format!(
                "need {} components, got {}",
                table.m() + 1,
                sigmas.len()
            ));
        }
        if sigma2 < 0.0 || sigmas.iter().any(|&s| !(s >= 0.0)) {
            return invalid("variances must be non-negative");
        }
        Ok(Self::assemble(
            sigma2,
            effective_sigma2(table, sigma2),
            weight_scale(table),
            sigmas.to_vec(),
            vec![false; sigmas.len()],
        ))
    }

    fn assemble(
        sigma2: f64,
        sigma2_eff: f64,
        weight_scale: f64,
        raw: Vec<f64>,
        degenerate: Vec<bool>,
    ) -> Self {
        let sigmas: Vec<f64> = raw.iter().map(|&v| v.max(0.0)).collect();
        let clamped = raw.iter().map(|&v| v < 0.0).collect();
        let m = sigmas.len() - 1;
        let mut taus = vec![0.0; m];
        let mut acc = 0.0;
        for k in (0..m).rev() {
            acc += sigmas[k];
            taus[k] = acc;
        }
        Self {
            sigma2,
            sigma2_eff,
            weight_scale,
            sigmas,
            raw,
            clamped,
            degenerate,
            taus,
        }
    }
}

/// Moment estimates of `σ²_0 … σ²_m`. `σ²_m` shares its estimating equation
/// with the noise and is only defined when `n > d_m`; otherwise it is 0 and
/// flagged, and the order `m−1` estimate absorbs it.
pub fn estimate_sigmas(table: &SparseTable, sigma2: f64, info: &SubspaceInfo) -> Result<VarianceComponents> {
    let m = table.m();
    if info.dims.len() != m + 2 || info.sq_norms.len() != m + 2 {
        return invalid("subspace info must cover orders 0..=m+1");
    }
    if !(sigma2 >= 0.0) {
        return invalid("σ² must be non-negative");
    }
    let s2 = effective_sigma2(table, sigma2);
    let gap = |k: usize| {
        let dd = info.dims[k + 1] as f64 - info.dims[k] as f64;
        (dd > 0.0).then(|| (info.sq_norms[k + 1] - info.sq_norms[k]) / dd)
    };
    let means: Vec<Option<f64>> = (0..=m).map(gap).collect();

    let mut raw = vec![0.0; m + 1];
    let mut degenerate = vec![false; m + 1];
    match means[m] {
        Some(g) => raw[m] = g - s2,
        None => degenerate[m] = true,
    }
    for k in 0..m {
        let Some(g) = means[k] else {
            degenerate[k] = true;
            continue;
        };
        let next = means[k + 1..].iter().flatten().next().copied().unwrap_or(s2);
        raw[k] = g - next;
    }
    Ok(VarianceComponents::assemble(
        sigma2,
        s2,
        weight_scale(table),
        raw,
        degenerate,
    ))
}

/// `λ_k = (σ² + σ²_m + … + σ²_k)/σ²_{k−1}` for `k = 1..=m`, with `σ²` the
/// balanced-equivalent noise and the result scaled to the weighted
/// objective. A zero denominator gives an infinite penalty; `cap` bounds
/// every penalty, infinite ones included.
pub fn lambdas_from_sigmas(vc: &VarianceComponents, cap: Option<f64>) -> Vec<Penalty> {
    let m = vc.sigmas.len() - 1;
    (1..=m)
        .map(|k| {
            let num = vc.sigma2_eff + vc.sigmas[k..].iter().sum::<f64>();
            let den = vc.sigmas[k - 1];
            let lambda = if den > 0.0 {
                Penalty::Finite(vc.weight_scale * num / den)
            } else {
                Penalty::Infinite
            };
            match (cap, lambda) {
                (Some(c), Penalty::Infinite) => Penalty::Finite(c),
                (Some(c), Penalty::Finite(v)) => Penalty::Finite(v.min(c)),
                (None, l) => l,
            }
        })
        .collect()
}

/// Subspace info, moment estimates and penalties in one step.
pub fn empirical_lambdas(
    table: &SparseTable,
    sigma2: f64,
    cap: Option<f64>,
    opts: &VarianceOptions,
) -> Result<(SubspaceInfo, VarianceComponents, Vec<Penalty>)> {
    let info = subspace_info(table, opts)?;
    let vc = estimate_sigmas(table, sigma2, &info)?;
    let lambdas = lambdas_from_sigmas(&vc, cap);
    Ok((info, vc, lambdas))
}
