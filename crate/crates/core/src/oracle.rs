//! Dense reference computations for small tables: explicit orthonormal
//! bases of the nested order subspaces, the closed-form posterior mean, and
//! the two-way additive shrinkage estimate. These exist to check the
//! iterative solver, not to scale.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, HanovaError, Result};
use crate::solver::Penalty;
use crate::table::{MarginIndex, SparseTable, Subset};

/// Largest table accepted by [`build_basis`].
pub const DENSE_LIMIT: usize = 5_000;

const DROP_TOL: f64 = 1e-10;

/// Orthonormal basis adapted to `S_1 ⊂ … ⊂ S_m` on the observed cells.
/// `blocks[k-1]` holds the columns `V_k` added at order `k`.
#[derive(Clone, Debug)]
pub struct DenseBasis {
    pub n: usize,
    pub blocks: Vec<DMatrix<f64>>,
    /// Columns completing the basis of `ℝⁿ` (empty unless `S_m` is a proper
    /// subspace).
    pub complement: DMatrix<f64>,
}

impl DenseBasis {
    /// `d_k` for `k = 1..=m`.
    pub fn dims(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .scan(0, |acc, b| {
                *acc += b.ncols();
                Some(*acc)
            })
            .collect()
    }

    /// `U_k = [V_1 … V_k]`.
    pub fn u(&self, k: usize) -> DMatrix<f64> {
        let cols: Vec<_> = self.blocks[..k].iter().flat_map(|b| b.column_iter()).collect();
        if cols.is_empty() {
            DMatrix::zeros(self.n, 0)
        } else {
            DMatrix::from_columns(&cols)
        }
    }

    /// `P_k = U_k U_kᵀ`.
    pub fn projector(&self, k: usize) -> DMatrix<f64> {
        let u = self.u(k);
        &u * u.transpose()
    }

    /// The full orthogonal matrix `[U_m V]`.
    pub fn full(&self) -> DMatrix<f64> {
        let mut cols: Vec<_> = self.blocks.iter().flat_map(|b| b.column_iter()).collect();
        cols.extend(self.complement.column_iter());
        DMatrix::from_columns(&cols)
    }
}

/// Projects `v` off the columns in `basis` twice (Gram–Schmidt with one
/// reorthogonalization) and returns the residual.
fn orthogonalize(basis: &[DVector<f64>], mut v: DVector<f64>) -> DVector<f64> {
    for _ in 0..2 {
        for q in basis {
            let c = q.dot(&v);
            v.axpy(-c, q, 1.0);
        }
    }
    v
}

fn try_add(basis: &mut Vec<DVector<f64>>, v: DVector<f64>) -> bool {
    let norm0 = v.norm();
    if norm0 == 0.0 {
        return false;
    }
    let r = orthogonalize(basis, v);
    let norm = r.norm();
    if norm <= DROP_TOL * norm0 {
        return false;
    }
    basis.push(r / norm);
    true
}

/// Orthonormalizes the order-1, …, order-m indicator designs over the
/// observed cells, lower orders first, subsets lexicographic, levels in
/// ordinal order.
pub fn build_basis(table: &SparseTable) -> Result<DenseBasis> {
    let n = table.len();
    if n > DENSE_LIMIT {
        return Err(HanovaError::TooLarge(format!(
            "the dense oracle handles at most {DENSE_LIMIT} cells, got {n}"
        )));
    }
    let m = table.m();
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(n);
    let mut blocks = Vec::with_capacity(m);
    for k in 1..=m {
        let start = basis.len();
        for subset in Subset::all_of_size(m, k) {
            let index = MarginIndex::new(table, &subset);
            for slot in 0..index.n_margins() {
                let v = DVector::from_iterator(
                    n,
                    index.slots().iter().map(|&s| if s as usize == slot { 1.0 } else { 0.0 }),
                );
                try_add(&mut basis, v);
            }
        }
        let cols: Vec<_> = basis[start..].to_vec();
        blocks.push(if cols.is_empty() {
            DMatrix::zeros(n, 0)
        } else {
            DMatrix::from_columns(&cols)
        });
    }
    let start = basis.len();
    for i in 0..n {
        if basis.len() == n {
            break;
        }
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        try_add(&mut basis, e);
    }
    let complement = if basis.len() > start {
        DMatrix::from_columns(&basis[start..])
    } else {
        DMatrix::zeros(n, 0)
    };
    Ok(DenseBasis {
        n,
        blocks,
        complement,
    })
}

/// Noise variance per cell of a table whose weights are all equal.
fn balanced_noise(table: &SparseTable, basis: &DenseBasis, sigma2: f64, sigmas: &[f64]) -> Result<f64> {
    let m = table.m();
    if basis.n != table.len() || basis.blocks.len() != m {
        return invalid("basis does not match the table");
    }
    if sigmas.len() != m + 1 {
        return invalid(format!("need {} components, got {}", m + 1, sigmas.len()));
    }
    if sigma2 < 0.0 || sigmas.iter().any(|&s| !(s >= 0.0)) {
        return invalid("variances must be non-negative");
    }
    let w = table.cells()[0].n;
    if !table.is_balanced() {
        return invalid("the closed-form posterior needs equal cell weights");
    }
    let noise = sigma2 / w;
    if noise + sigmas[m] <= 0.0 {
        return invalid("σ² + σ²_m must be positive");
    }
    Ok(noise)
}

/// `E[μ | y]` under the random-effects model with prior covariance
/// `σ²_m I + Σ_k (σ²_{k−1} + … + σ²_{m−1}) V_k V_kᵀ`, written as a sum of
/// per-subspace shrinkage factors. Responses are used as given, so center
/// them first. The noise variance of a cell is `σ²/n`.
pub fn dense_posterior_mean(
    table: &SparseTable,
    basis: &DenseBasis,
    sigma2: f64,
    sigmas: &[f64],
) -> Result<Vec<f64>> {
    let noise = balanced_noise(table, basis, sigma2, sigmas)?;
    let m = table.m();
    let y = DVector::from_vec(table.responses());
    let base = noise + sigmas[m];
    let mut out = &y * (sigmas[m] / base);
    for k in 1..=m {
        let v = &basis.blocks[k - 1];
        if v.ncols() == 0 {
            continue;
        }
        let a = base + sigmas[k - 1..m].iter().sum::<f64>();
        let factor = noise / base - noise / a;
        out += v * (v.transpose() * &y) * factor;
    }
    Ok(out.iter().copied().collect())
}

/// The same posterior mean as `y − σ²(σ² I + Cov μ)⁻¹ y`, by a dense solve.
pub fn dense_posterior_mean_resolvent(
    table: &SparseTable,
    basis: &DenseBasis,
    sigma2: f64,
    sigmas: &[f64],
) -> Result<Vec<f64>> {
    let noise = balanced_noise(table, basis, sigma2, sigmas)?;
    let m = table.m();
    let n = table.len();
    let mut a = DMatrix::<f64>::identity(n, n) * (noise + sigmas[m]);
    for k in 1..=m {
        let v = &basis.blocks[k - 1];
        let tau: f64 = sigmas[k - 1..m].iter().sum();
        a += v * v.transpose() * tau;
    }
    let y = DVector::from_vec(table.responses());
    let solved = a
        .cholesky()
        .ok_or_else(|| HanovaError::Invalid("covariance is not positive definite".into()))?
        .solve(&y);
    Ok((y - solved * noise).iter().copied().collect())
}

/// Shrinkage of a complete two-way table with unit weights toward its
/// additive fit: `(y + λ P_A y)/(1 + λ)`.
pub fn barry_two_way(table: &SparseTable, lambda: Penalty) -> Result<Vec<f64>> {
    if table.m() != 2 || !table.is_complete() {
        return invalid("needs a fully observed two-way table");
    }
    if table.cells().iter().any(|c| c.n != 1.0) {
        return invalid("needs unit weights");
    }
    let y = table.responses();
    let comps = factorial_components(table, &y)?;
    let additive: Vec<f64> = (0..y.len()).map(|i| comps[0][i] + comps[1][i]).collect();
    Ok(match lambda {
        Penalty::Infinite => additive,
        Penalty::Finite(l) => y
            .iter()
            .zip(&additive)
            .map(|(&y, &a)| (y + l * a) / (1.0 + l))
            .collect(),
    })
}

/// Splits per-cell `values` of a complete table into its orthogonal
/// factorial pieces: `out[0]` is the overall mean and `out[j]` the pure
/// order-`j` interaction, so that the pieces sum to `values`.
///
/// Uses `E_j = Σ_{|K| ≤ j} (−1)^{j−|K|} C(m−|K|, j−|K|) · mean_K`, where
/// `mean_K` averages over the cells sharing the `K` margin.
pub fn factorial_components(table: &SparseTable, values: &[f64]) -> Result<Vec<Vec<f64>>> {
    if !table.is_complete() {
        return invalid("factorial components need a fully observed table");
    }
    if values.len() != table.len() {
        return invalid("need one value per cell");
    }
    let m = table.m();
    let n = table.len();
    let mut out = vec![vec![0.0; n]; m + 1];
    for size in 0..=m {
        for subset in Subset::all_of_size(m, size) {
            let index = MarginIndex::new(table, &subset);
            let sums = index.accumulate(values);
            let per = (n / index.n_margins()) as f64;
            for j in size..=m {
                let sign = if (j - size) % 2 == 0 { 1.0 } else { -1.0 };
                let coef = sign * binomial(m - size, j - size);
                for (o, &s) in out[j].iter_mut().zip(index.slots()) {
                    *o += coef * sums[s as usize] / per;
                }
            }
        }
    }
    Ok(out)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}
