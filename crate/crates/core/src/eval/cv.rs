//! K-fold cross-validation of the penalties, one order at a time.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::solver::{fit_hanova, FitOptions, Penalty};
use crate::table::{fmt_f64, SparseTable};

/// Multipliers applied to a base penalty to form the default grid.
pub const GRID_MULTIPLIERS: [f64; 7] = [0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0];

const TIE_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct CvResult {
    pub folds: usize,
    pub seed: u64,
    /// Candidates for each order.
    pub grid: Vec<Vec<Penalty>>,
    /// Mean held-out loss per candidate.
    pub losses: Vec<Vec<f64>>,
    /// Standard error of that mean across folds.
    pub std_errors: Vec<Vec<f64>>,
    pub selected: Vec<Penalty>,
    /// Largest candidate within one standard error of the best.
    pub one_se: Vec<Penalty>,
}

/// `base × {0.1, …, 10}`. An infinite base gets a wide finite sweep plus the
/// sentinel; a zero base a small positive sweep plus 0.
pub fn default_grid(base: &[Penalty]) -> Vec<Vec<Penalty>> {
    base.iter()
        .map(|b| match *b {
            Penalty::Infinite => [0.1, 1.0, 10.0, 100.0, 1000.0]
                .iter()
                .map(|&v| Penalty::Finite(v))
                .chain([Penalty::Infinite])
                .collect(),
            Penalty::Finite(0.0) => [0.0, 0.01, 0.1, 1.0]
                .iter()
                .map(|&v| Penalty::Finite(v))
                .collect(),
            Penalty::Finite(v) => GRID_MULTIPLIERS
                .iter()
                .map(|&f| Penalty::Finite(v * f))
                .collect(),
        })
        .collect()
}

fn rank(p: Penalty) -> f64 {
    p.value().unwrap_or(f64::INFINITY)
}

/// Fold of every cell: a seeded shuffle dealt round-robin.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![0; n];
    for (pos, &cell) in order.iter().enumerate() {
        out[cell] = pos % folds;
    }
    out
}

/// Weighted held-out squared error of one fold.
fn fold_loss(
    table: &SparseTable,
    assignment: &[usize],
    fold: usize,
    lambdas: &[Penalty],
    maxk: usize,
    opts: &FitOptions,
) -> Result<f64> {
    let (train, test): (Vec<usize>, Vec<usize>) =
        (0..table.len()).partition(|&i| assignment[i] != fold);
    if train.is_empty() {
        return invalid(format!("fold {fold} leaves no training cells"));
    }
    let fit = fit_hanova(&table.select(&train)?, lambdas, maxk, opts)?;
    let (mut num, mut den) = (0.0, 0.0);
    for &i in &test {
        let c = &table.cells()[i];
        let pred = fit.predict(&c.index, None)?;
        num += c.n * (c.y - pred).powi(2);
        den += c.n;
    }
    Ok(num / den)
}

/// Varies each order's penalty over its grid while the others stay at
/// `base`, scoring weighted held-out error of the order-`maxk` prediction.
/// Ties within 1e-12 go to the larger penalty.
pub fn cross_validate(
    table: &SparseTable,
    maxk: usize,
    base: &[Penalty],
    grid: &[Vec<Penalty>],
    folds: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<CvResult> {
    if folds < 2 {
        return invalid("cross-validation needs at least two folds");
    }
    if table.len() < folds {
        return invalid(format!("{} cells cannot fill {folds} folds", table.len()));
    }
    let assignment = fold_assignment(table.len(), folds, seed);
    let mut cv = cross_validate_folds(table, maxk, base, grid, &assignment, opts)?;
    cv.seed = seed;
    Ok(cv)
}

/// As [`cross_validate`] with an explicit fold per cell (folds numbered
/// from 0, each non-empty).
pub fn cross_validate_folds(
    table: &SparseTable,
    maxk: usize,
    base: &[Penalty],
    grid: &[Vec<Penalty>],
    assignment: &[usize],
    opts: &FitOptions,
) -> Result<CvResult> {
    if assignment.len() != table.len() {
        return invalid(format!("{} fold labels for {} cells", assignment.len(), table.len()));
    }
    let folds = assignment.iter().max().map_or(0, |f| f + 1);
    if folds < 2 {
        return invalid("cross-validation needs at least two folds");
    }
    if (0..folds).any(|f| !assignment.contains(&f)) {
        return invalid("every fold needs at least one cell");
    }
    if base.len() < maxk || grid.len() < maxk {
        return invalid(format!("need a base penalty and a grid for each of {maxk} orders"));
    }
    if grid[..maxk].iter().any(Vec::is_empty) {
        return invalid("every order needs at least one candidate");
    }
    let tasks: Vec<(usize, usize, usize)> = (0..maxk)
        .flat_map(|k| (0..grid[k].len()).flat_map(move |c| (0..folds).map(move |f| (k, c, f))))
        .collect();
    let scores: Vec<f64> = tasks
        .par_iter()
        .map(|&(k, c, f)| {
            let mut lambdas = base[..maxk].to_vec();
            lambdas[k] = grid[k][c];
            fold_loss(table, assignment, f, &lambdas, maxk, opts)
        })
        .collect::<Result<_>>()?;

    let mut losses = Vec::with_capacity(maxk);
    let mut std_errors = Vec::with_capacity(maxk);
    let mut selected = Vec::with_capacity(maxk);
    let mut one_se = Vec::with_capacity(maxk);
    let mut offset = 0;
    for k in 0..maxk {
        let mut mean = Vec::new();
        let mut se = Vec::new();
        for _ in &grid[k] {
            let s = &scores[offset..offset + folds];
            offset += folds;
            let mu = s.iter().sum::<f64>() / folds as f64;
            let var = s.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (folds - 1) as f64;
            mean.push(mu);
            se.push((var / folds as f64).sqrt());
        }
        let best = mean.iter().cloned().fold(f64::INFINITY, f64::min);
        let pick = |bound: f64| {
            (0..mean.len())
                .filter(|&c| mean[c] <= bound)
                .max_by(|&a, &b| rank(grid[k][a]).total_cmp(&rank(grid[k][b])))
                .expect("the minimum is always within bound")
        };
        let best_at = pick(best + TIE_TOL * best.abs().max(1.0));
        selected.push(grid[k][best_at]);
        one_se.push(grid[k][pick(best + se[best_at])]);
        losses.push(mean);
        std_errors.push(se);
    }
    Ok(CvResult {
        folds,
        seed: 0,
        grid: grid[..maxk].to_vec(),
        losses,
        std_errors,
        selected,
        one_se,
    })
}

pub fn write_cv<W: Write>(cv: &CvResult, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["order", "lambda", "mean_loss", "std_error", "selected", "one_se"])?;
    for k in 0..cv.grid.len() {
        for (c, lambda) in cv.grid[k].iter().enumerate() {
            w.write_record([
                (k + 1).to_string(),
                lambda.to_string(),
                fmt_f64(cv.losses[k][c]),
                fmt_f64(cv.std_errors[k][c]),
                (cv.selected[k] == *lambda).to_string(),
                (cv.one_se[k] == *lambda).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
