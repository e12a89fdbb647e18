//! Hierarchical penalized ANOVA fitting.
//!
//! Order `k` of the hierarchy fits a sum of `k`-way margin effects by
//! weighted penalized least squares, shrinking toward the order `k-1` fit:
//!
//! ```text
//! min  Σ_{I∈Ω} n_I (y_I − μ_I)² + λ_k Σ_{I∈Ω} (μ_I − μ^(k-1)_I)²,
//!      μ_I = Σ_{|J|=k} β^J_{I_J}
//! ```
//!
//! Each order is solved by block backfitting: one block per margin subset
//! `J`, visited in lexicographic order, each update a weighted table sum
//! followed by a closed-form per-margin correction.
//!
//! Coefficients are warm-started by lifting the previous order: each order
//! `k-1` effect is spread evenly over the `m-k+1` order-`k` subsets that
//! contain it, which reproduces `μ^(k-1)` exactly inside `S_k`. A margin with
//! no observed cell keeps its lifted value, so predictions there fall back to
//! lower-order structure.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, HanovaError, Result};
use crate::table::{
    fmt_f64, weighted_grand_mean, CellIndex, FactorSpec, MarginIndex, SparseTable, Subset,
};

/// Penalty weight of one order. `Infinite` pins the order to its prior.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Penalty {
    Finite(f64),
    Infinite,
}

impl Penalty {
    pub fn finite(value: f64) -> Result<Self> {
        if value.is_nan() || value < 0.0 {
            return invalid(format!("penalty must be non-negative, got {value}"));
        }
        if value.is_infinite() {
            return Ok(Penalty::Infinite);
        }
        Ok(Penalty::Finite(value))
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Penalty::Finite(v) => Some(v),
            Penalty::Infinite => None,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Penalty::Infinite)
    }
}

impl fmt::Display for Penalty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Penalty::Finite(v) => f.write_str(&fmt_f64(*v)),
            Penalty::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Penalty {
    type Err = HanovaError;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("infinity") {
            return Ok(Penalty::Infinite);
        }
        let v: f64 = t
            .parse()
            .map_err(|_| HanovaError::Invalid(format!("cannot parse penalty `{s}`")))?;
        Penalty::finite(v)
    }
}

/// Parses a comma-separated penalty list such as `0.5,2,inf`.
pub fn parse_penalties(s: &str) -> Result<Vec<Penalty>> {
    s.split(',').map(str::parse).collect()
}

#[derive(Clone, Debug)]
pub struct FitOptions {
    /// A sweep converges when no fitted value moves by more than
    /// `tol * (1 + max|y|)`.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Largest block (cells of the margin cross-product) stored densely.
    /// Larger blocks keep only observed margins.
    pub dense_budget: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_sweeps: 500,
            dense_budget: 1 << 22,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Storage {
    Dense(Vec<f64>),
    /// Only observed margins; anything else is the lifted lower-order value.
    Sparse(BTreeMap<Vec<u32>, f64>),
}

/// Effects `β^J_L` of one margin subset `J`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientBlock {
    subset: Subset,
    radices: Vec<usize>,
    storage: Storage,
}

impl CoefficientBlock {
    pub fn subset(&self) -> &Subset {
        &self.subset
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.storage, Storage::Dense(_))
    }

    fn flat(&self, levels: &[u32]) -> usize {
        levels
            .iter()
            .zip(&self.radices)
            .fold(0usize, |acc, (&l, &r)| acc * r + l as usize)
    }

    fn unflat(&self, mut flat: usize) -> Vec<u32> {
        let mut out = vec![0u32; self.radices.len()];
        for (slot, &r) in out.iter_mut().zip(&self.radices).rev() {
            *slot = (flat % r) as u32;
            flat /= r;
        }
        out
    }

    /// Stored value at `levels`; `None` means "use the lifted value".
    pub fn get(&self, levels: &[u32]) -> Option<f64> {
        match &self.storage {
            Storage::Dense(v) => Some(v[self.flat(levels)]),
            Storage::Sparse(map) => map.get(levels).copied(),
        }
    }

    /// Stored entries in lexicographic order of the level tuple.
    pub fn entries(&self) -> Vec<(Vec<u32>, f64)> {
        match &self.storage {
            Storage::Dense(v) => v
                .iter()
                .enumerate()
                .map(|(i, &x)| (self.unflat(i), x))
                .collect(),
            Storage::Sparse(map) => map.iter().map(|(k, &v)| (k.clone(), v)).collect(),
        }
    }
}

/// All order-`k` effect blocks, one per size-`k` subset, lexicographic.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientSet {
    order: usize,
    blocks: Vec<CoefficientBlock>,
}

impl CoefficientSet {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn blocks(&self) -> &[CoefficientBlock] {
        &self.blocks
    }

    pub fn block(&self, subset: &Subset) -> Option<&CoefficientBlock> {
        self.blocks
            .binary_search_by(|b| b.subset.cmp(subset))
            .ok()
            .map(|i| &self.blocks[i])
    }

    /// Rebuilds a set from stored entries, e.g. when reading a model file.
    /// A block holding every entry of its cross-product is stored densely.
    pub(crate) fn from_entries(
        spec: &FactorSpec,
        order: usize,
        mut entries: BTreeMap<Subset, BTreeMap<Vec<u32>, f64>>,
    ) -> Result<Self> {
        let counts = spec.level_counts();
        let mut blocks = Vec::new();
        for subset in Subset::all_of_size(spec.m(), order) {
            let radices: Vec<usize> = subset.factors().iter().map(|&f| counts[f]).collect();
            let total: usize = radices.iter().product();
            let map = entries.remove(&subset).unwrap_or_default();
            let storage = if map.len() == total {
                Storage::Dense(map.into_values().collect())
            } else {
                Storage::Sparse(map)
            };
            blocks.push(CoefficientBlock {
                subset,
                radices,
                storage,
            });
        }
        if let Some((s, _)) = entries.into_iter().next() {
            return invalid(format!("subset {:?} is not of order {order}", s.factors()));
        }
        Ok(Self { order, blocks })
    }
}

/// Value of `β^J_L` at order `order`, lifting from lower orders wherever the
/// block does not store one. `sets[i]` holds order `i + 1`; orders missing
/// from `sets` lift to zero, as does the (centered) order 0.
pub fn coefficient(
    sets: &[&CoefficientSet],
    m: usize,
    order: usize,
    subset: &Subset,
    levels: &[u32],
) -> f64 {
    if order == 0 {
        return 0.0;
    }
    if let Some(v) = sets
        .get(order - 1)
        .and_then(|s| s.block(subset))
        .and_then(|b| b.get(levels))
    {
        return v;
    }
    lifted(sets, m, order, subset, levels)
}

fn lifted(sets: &[&CoefficientSet], m: usize, order: usize, subset: &Subset, levels: &[u32]) -> f64 {
    if order <= 1 || sets.len() < order - 1 {
        return 0.0;
    }
    let mut acc = 0.0;
    for pos in 0..subset.len() {
        let sub = subset.without(pos);
        let mut lv = levels.to_vec();
        lv.remove(pos);
        acc += coefficient(sets, m, order - 1, &sub, &lv);
    }
    acc / (m - order + 1) as f64
}

/// `Σ n_I (y_I − μ_I)² + λ Σ (μ_I − prior_I)²` over observed cells.
pub fn wpls_objective(table: &SparseTable, mu: &[f64], lambda: f64, prior: &[f64]) -> Result<f64> {
    if lambda.is_nan() || lambda < 0.0 || lambda.is_infinite() {
        return invalid(format!("objective needs a finite non-negative penalty, got {lambda}"));
    }
    if mu.len() != table.len() || prior.len() != table.len() {
        return invalid("fitted values and prior must have one entry per observed cell");
    }
    Ok(table
        .cells()
        .iter()
        .zip(mu.iter().zip(prior))
        .map(|(c, (&u, &p))| c.n * (c.y - u).powi(2) + lambda * (u - p).powi(2))
        .sum())
}

#[derive(Clone, Debug)]
struct BlockState {
    index: MarginIndex,
    u: Vec<f64>,
    z: Vec<f64>,
    beta: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepStats {
    pub max_coef_delta: f64,
    pub max_mu_delta: f64,
}

/// State of one order's backfitting iteration.
#[derive(Clone, Debug)]
pub struct BackfitWorkspace {
    lambda: f64,
    blocks: Vec<BlockState>,
    response: Vec<f64>,
    weights: Vec<f64>,
    prior: Vec<f64>,
    mu: Vec<f64>,
    scratch: Vec<f64>,
}

impl BackfitWorkspace {
    /// Precomputes `u^J_L = Σ_{I_J=L} (n_I y_I + λ prior_I)` and
    /// `z^{J,L}_{J,L} = Σ_{I_J=L} (n_I + λ)`, sets each coefficient from
    /// `init`, and makes `μ` consistent with them.
    pub fn new(
        table: &SparseTable,
        order: usize,
        lambda: f64,
        prior: &[f64],
        init: impl Fn(&Subset, &[u32]) -> f64,
    ) -> Result<Self> {
        let m = table.m();
        if order == 0 || order > m {
            return invalid(format!("order must be in 1..={m}, got {order}"));
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return invalid(format!("penalty must be finite and non-negative, got {lambda}"));
        }
        if prior.len() != table.len() {
            return invalid("prior must have one entry per observed cell");
        }
        let response = table.responses();
        let weights = table.weights();
        let rhs: Vec<f64> = response
            .iter()
            .zip(&weights)
            .zip(prior)
            .map(|((&y, &n), &p)| n * y + lambda * p)
            .collect();
        let diag: Vec<f64> = weights.iter().map(|&n| n + lambda).collect();
        let blocks: Vec<BlockState> = Subset::all_of_size(m, order)
            .iter()
            .map(|subset| {
                let index = MarginIndex::new(table, subset);
                let u = index.accumulate(&rhs);
                let z = index.accumulate(&diag);
                let beta = index.keys().iter().map(|k| init(subset, k)).collect();
                BlockState { index, u, z, beta }
            })
            .collect();
        let mut ws = Self {
            lambda,
            blocks,
            response,
            weights,
            prior: prior.to_vec(),
            mu: vec![0.0; table.len()],
            scratch: vec![0.0; table.len()],
        };
        ws.recompute_mu();
        Ok(ws)
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn margin_index(&self, block: usize) -> &MarginIndex {
        &self.blocks[block].index
    }

    pub fn u(&self, block: usize) -> &[f64] {
        &self.blocks[block].u
    }

    pub fn z_diag(&self, block: usize) -> &[f64] {
        &self.blocks[block].z
    }

    pub fn beta(&self, block: usize) -> &[f64] {
        &self.blocks[block].beta
    }

    /// Sets `μ_I = Σ_J β^J_{I_J}` from the current coefficients.
    pub fn recompute_mu(&mut self) {
        self.mu.iter_mut().for_each(|v| *v = 0.0);
        for b in &self.blocks {
            for (mu, &s) in self.mu.iter_mut().zip(b.index.slots()) {
                *mu += b.beta[s as usize];
            }
        }
    }

    pub fn objective(&self) -> f64 {
        self.response
            .iter()
            .zip(&self.weights)
            .zip(self.mu.iter().zip(&self.prior))
            .map(|((&y, &n), (&u, &p))| n * (y - u).powi(2) + self.lambda * (u - p).powi(2))
            .sum()
    }

    /// One Gauss–Seidel pass over all blocks.
    pub fn sweep(&mut self) -> SweepStats {
        let start = self.mu.clone();
        let mut max_coef_delta: f64 = 0.0;
        for b in &mut self.blocks {
            for ((s, &mu), &n) in self.scratch.iter_mut().zip(&self.mu).zip(&self.weights) {
                *s = (n + self.lambda) * mu;
            }
            let sums = b.index.accumulate(&self.scratch);
            let delta: Vec<f64> = b
                .u
                .iter()
                .zip(&b.z)
                .zip(&sums)
                .map(|((&u, &z), &s)| if z > 0.0 { (u - s) / z } else { 0.0 })
                .collect();
            for (beta, d) in b.beta.iter_mut().zip(&delta) {
                *beta += d;
                max_coef_delta = max_coef_delta.max(d.abs());
            }
            for (mu, &s) in self.mu.iter_mut().zip(b.index.slots()) {
                *mu += delta[s as usize];
            }
        }
        let max_mu_delta = self
            .mu
            .iter()
            .zip(&start)
            .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
        SweepStats {
            max_coef_delta,
            max_mu_delta,
        }
    }
}

/// Runs one sweep and returns the sup-norm of the coefficient changes.
pub fn backfit_sweep(ws: &mut BackfitWorkspace) -> f64 {
    ws.sweep().max_coef_delta
}

/// Result of fitting one order of the hierarchy.
#[derive(Clone, Debug)]
pub struct OrderFit {
    pub order: usize,
    pub coefficients: CoefficientSet,
    /// Fitted values at the observed cells, in table order.
    pub mu: Vec<f64>,
    pub lambda: Penalty,
    pub sweeps: usize,
    pub converged: bool,
    /// Objective after each sweep (the initial value first).
    pub objective_trace: Vec<f64>,
}

/// Fits order `k` of the hierarchy on the table's responses, shrinking
/// toward `prior_mu`. `lower` holds the coefficient sets of orders
/// `1..k` that produced the prior; they seed the warm start and the values
/// at unobserved margins. With fewer sets the missing orders count as zero.
pub fn fit_order(
    table: &SparseTable,
    k: usize,
    penalty: Penalty,
    prior_mu: &[f64],
    lower: &[&CoefficientSet],
    opts: &FitOptions,
) -> Result<OrderFit> {
    let m = table.m();
    if k == 0 || k > m {
        return invalid(format!("order must be in 1..={m}, got {k}"));
    }
    if prior_mu.len() != table.len() {
        return invalid("prior must have one entry per observed cell");
    }
    let lower = &lower[..lower.len().min(k - 1)];
    let init = |s: &Subset, l: &[u32]| lifted(lower, m, k, s, l);

    let lambda = match penalty {
        Penalty::Infinite => {
            // μ^(k) = μ^(k-1); the lifted coefficients represent it exactly
            // when the full chain of lower orders is supplied.
            let ws = BackfitWorkspace::new(table, k, 0.0, prior_mu, init)?;
            let scale = 1.0 + prior_mu.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let consistent = ws
                .mu()
                .iter()
                .zip(prior_mu)
                .all(|(a, b)| (a - b).abs() <= 1e-9 * scale);
            if !consistent {
                return invalid(
                    "an infinite penalty needs the coefficient sets that produced the prior",
                );
            }
            let data: f64 = table
                .cells()
                .iter()
                .zip(prior_mu)
                .map(|(c, &p)| c.n * (c.y - p).powi(2))
                .sum();
            return Ok(OrderFit {
                order: k,
                coefficients: materialize(table, k, &ws, lower, opts)?,
                mu: ws.mu().to_vec(),
                lambda: penalty,
                sweeps: 0,
                converged: true,
                objective_trace: vec![data],
            });
        }
        Penalty::Finite(l) => l,
    };

    let mut ws = BackfitWorkspace::new(table, k, lambda, prior_mu, init)?;
    let threshold = opts.tol
        * (1.0 + table.cells().iter().fold(0.0f64, |a, c| a.max(c.y.abs())));
    let mut trace = vec![ws.objective()];
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < opts.max_sweeps {
        let stats = ws.sweep();
        sweeps += 1;
        trace.push(ws.objective());
        if stats.max_mu_delta <= threshold {
            converged = true;
            break;
        }
    }
    ws.recompute_mu();
    Ok(OrderFit {
        order: k,
        coefficients: materialize(table, k, &ws, lower, opts)?,
        mu: ws.mu().to_vec(),
        lambda: penalty,
        sweeps,
        converged,
        objective_trace: trace,
    })
}

fn materialize(
    table: &SparseTable,
    k: usize,
    ws: &BackfitWorkspace,
    lower: &[&CoefficientSet],
    opts: &FitOptions,
) -> Result<CoefficientSet> {
    let counts = table.spec().level_counts();
    let m = table.m();
    let mut blocks = Vec::with_capacity(ws.blocks.len());
    for b in &ws.blocks {
        let subset = b.index.subset().clone();
        let radices: Vec<usize> = subset.factors().iter().map(|&f| counts[f]).collect();
        let total = radices
            .iter()
            .try_fold(1usize, |acc, &r| acc.checked_mul(r));
        let mut block = CoefficientBlock {
            subset,
            radices,
            storage: Storage::Sparse(BTreeMap::new()),
        };
        match total {
            Some(total) if total <= opts.dense_budget => {
                let mut values = vec![f64::NAN; total];
                for (key, &beta) in b.index.keys().iter().zip(&b.beta) {
                    values[block.flat(key)] = beta;
                }
                for (i, v) in values.iter_mut().enumerate() {
                    if v.is_nan() {
                        *v = lifted(lower, m, k, &block.subset, &block.unflat(i));
                    }
                }
                block.storage = Storage::Dense(values);
            }
            _ => {
                block.storage = Storage::Sparse(
                    b.index
                        .keys()
                        .iter()
                        .cloned()
                        .zip(b.beta.iter().copied())
                        .collect(),
                );
            }
        }
        blocks.push(block);
    }
    Ok(CoefficientSet { order: k, blocks })
}

/// A fitted hierarchy `μ^(0) … μ^(maxk)`.
#[derive(Clone, Debug)]
pub struct HanovaFit {
    pub spec: FactorSpec,
    pub grand_mean: f64,
    /// Orders `1..=maxk`; fitted values include the grand mean.
    pub order_fits: Vec<OrderFit>,
    pub maxk: usize,
    pub lambdas: Vec<Penalty>,
    pub centered: bool,
}

impl HanovaFit {
    pub fn coefficient_sets(&self) -> Vec<&CoefficientSet> {
        self.order_fits.iter().map(|f| &f.coefficients).collect()
    }

    /// Fitted values of the highest order at the observed cells.
    pub fn fitted(&self) -> &[f64] {
        &self.order_fits[self.maxk - 1].mu
    }

    pub fn converged(&self) -> bool {
        self.order_fits.iter().all(|f| f.converged)
    }

    /// Prediction of order `order` (default `maxk`) at any cell.
    pub fn predict(&self, index: &CellIndex, order: Option<usize>) -> Result<f64> {
        predict_with(
            &self.spec,
            self.grand_mean,
            &self.coefficient_sets(),
            index,
            order.unwrap_or(self.maxk),
        )
    }
}

pub(crate) fn predict_with(
    spec: &FactorSpec,
    grand_mean: f64,
    sets: &[&CoefficientSet],
    index: &CellIndex,
    order: usize,
) -> Result<f64> {
    spec.check_index(index)?;
    if order > sets.len() {
        return invalid(format!(
            "order {order} requested but the model stops at {}",
            sets.len()
        ));
    }
    let m = spec.m();
    let mut acc = 0.0;
    for subset in Subset::all_of_size(m, order) {
        acc += coefficient(sets, m, order, &subset, &index.project(&subset));
    }
    Ok(grand_mean + acc)
}

/// Fits orders `1..=maxk`, each shrunk toward the one before it.
/// `lambdas[k-1]` is the penalty of order `k`; extra entries are ignored.
pub fn fit_hanova(
    table: &SparseTable,
    lambdas: &[Penalty],
    maxk: usize,
    opts: &FitOptions,
) -> Result<HanovaFit> {
    let m = table.m();
    if maxk == 0 || maxk > m {
        return invalid(format!("maxk must be in 1..={m}, got {maxk}"));
    }
    if lambdas.len() < maxk {
        return invalid(format!(
            "{} penalties supplied for maxk = {maxk}",
            lambdas.len()
        ));
    }
    let grand_mean = weighted_grand_mean(table);
    let centered_y: Vec<f64> = table.cells().iter().map(|c| c.y - grand_mean).collect();
    let centered = table.with_responses(&centered_y)?;

    let mut prior = vec![0.0; table.len()];
    let mut fits: Vec<OrderFit> = Vec::with_capacity(maxk);
    for k in 1..=maxk {
        let lower: Vec<&CoefficientSet> = fits.iter().map(|f| &f.coefficients).collect();
        let fit = fit_order(&centered, k, lambdas[k - 1], &prior, &lower, opts)?;
        prior.clone_from(&fit.mu);
        fits.push(fit);
    }
    for f in &mut fits {
        f.mu.iter_mut().for_each(|v| *v += grand_mean);
    }
    Ok(HanovaFit {
        spec: table.spec().clone(),
        grand_mean,
        order_fits: fits,
        maxk,
        lambdas: lambdas[..maxk].to_vec(),
        centered: true,
    })
}

/// Blends the data with the full-order fit,
/// `σ²_m/(σ²+σ²_m)·y + σ²/(σ²+σ²_m)·μ^(m)`, per observed cell.
pub fn final_blend(fit: &HanovaFit, table: &SparseTable, sigma2: f64, sigma_m2: f64) -> Result<Vec<f64>> {
    if fit.maxk != fit.spec.m() {
        return invalid("the blend needs a fit of every order (maxk = m)");
    }
    if table.len() != fit.fitted().len() {
        return invalid("table does not match the fit");
    }
    if sigma2 < 0.0 || sigma_m2 < 0.0 {
        return invalid("variances must be non-negative");
    }
    let total = sigma2 + sigma_m2;
    if total <= 0.0 {
        return invalid("σ² + σ²_m must be positive");
    }
    Ok(table
        .cells()
        .iter()
        .zip(fit.fitted())
        .map(|(c, &mu)| (sigma_m2 * c.y + sigma2 * mu) / total)
        .collect())
}
