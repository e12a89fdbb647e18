//! Simulation from the hierarchical random-effects model.
//!
//! The cell means have covariance `Σ_{k=0}^{m} σ²_k P_{k+1}` over the
//! observed cells, where `P_k` projects onto the order-`k` subspace and
//! `P_{m+1} = I`. Equivalently the component in `V_j = S_j ⊖ S_{j−1}` has
//! variance `σ²_{j−1} + … + σ²_m` per dimension. Complete tables are sampled
//! exactly through their factorial decomposition, small sparse ones through
//! an explicit basis, and large sparse ones through independent margin
//! effects.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, HanovaError, Result};
use crate::oracle::{build_basis, factorial_components, DENSE_LIMIT};
use crate::preprocess::{Unit, UnitRecords};
use crate::table::{Cell, CellIndex, FactorSpec, MarginIndex, SparseTable, Subset};

/// Largest full cross-product the simulator will enumerate.
const GRID_LIMIT: usize = 10_000_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightScheme {
    Equal,
    /// Log-uniform on `[1, ratio]`.
    RatioBounded(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimSpec {
    pub levels: Vec<usize>,
    /// Standard deviations `σ_0, σ_1, …`; missing trailing entries are 0.
    /// Up to `m + 1` entries, the last being the cell-level `σ_m`.
    pub sigmas: Vec<f64>,
    /// Noise standard deviation `σ` of a unit-weight cell.
    pub noise: f64,
    pub weights: WeightScheme,
    pub observation_rate: f64,
    pub replicates: usize,
    pub seed: u64,
}

impl SimSpec {
    pub fn new(levels: Vec<usize>, sigmas: Vec<f64>, noise: f64) -> Self {
        Self {
            levels,
            sigmas,
            noise,
            weights: WeightScheme::Equal,
            observation_rate: 1.0,
            replicates: 1,
            seed: 0,
        }
    }

    pub fn m(&self) -> usize {
        self.levels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m();
        if m == 0 || self.levels.iter().any(|&l| l < 2) {
            return invalid("every factor needs at least two levels");
        }
        if self.sigmas.len() > m + 1 {
            return invalid(format!("at most {} standard deviations for {m} factors", m + 1));
        }
        if self.sigmas.iter().chain([&self.noise]).any(|&s| !(s >= 0.0 && s.is_finite())) {
            return invalid("standard deviations must be finite and non-negative");
        }
        if !(self.observation_rate > 0.0 && self.observation_rate <= 1.0) {
            return invalid("observation rate must lie in (0, 1]");
        }
        if let WeightScheme::RatioBounded(r) = self.weights {
            if !(r >= 1.0 && r.is_finite()) {
                return invalid("weight ratio must be at least 1");
            }
        }
        if self.replicates == 0 {
            return invalid("need at least one replicate");
        }
        Ok(())
    }

    /// Variance components `σ²_0 … σ²_m`.
    pub fn variances(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.sigmas.iter().map(|s| s * s).collect();
        v.resize(self.m() + 1, 0.0);
        v
    }

    pub fn sigma2(&self) -> f64 {
        self.noise * self.noise
    }

    /// Highest `k` with `σ²_{k−1} > 0` (0 when every component vanishes).
    pub fn true_order(&self) -> usize {
        let v = self.variances();
        (1..=self.m()).rev().find(|&k| v[k - 1] > 0.0).unwrap_or(0)
    }

    /// Generator of replicate `replicate`: one stream per replicate of the
    /// master seed.
    pub fn rng(&self, replicate: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(replicate as u64);
        rng
    }
}

#[derive(Clone, Debug)]
pub struct SimInstance {
    pub table: SparseTable,
    /// True means at the observed cells.
    pub true_mu: Vec<f64>,
    /// `true_effects[j]` is the order-`j` part of `true_mu` (index 0 the
    /// constant), when the sampler works in orthogonal coordinates; the
    /// sum over `j` is `true_mu` up to the cell-level term.
    pub true_effects: Vec<Vec<f64>>,
    pub replicate: usize,
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn enumerate_cells(levels: &[usize], flat: &[usize]) -> Vec<Vec<u32>> {
    flat.iter()
        .map(|&i| {
            let mut rest = i;
            let mut out = vec![0u32; levels.len()];
            for f in (0..levels.len()).rev() {
                out[f] = (rest % levels[f]) as u32;
                rest /= levels[f];
            }
            out
        })
        .collect()
}

/// Observed cells in lexicographic order.
fn observed_cells(spec: &SimSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<u32>>> {
    let total = spec
        .levels
        .iter()
        .try_fold(1usize, |a, &l| a.checked_mul(l))
        .filter(|&t| t <= GRID_LIMIT)
        .ok_or_else(|| HanovaError::TooLarge("table has too many cells to simulate".into()))?;
    let flat: Vec<usize> = if spec.observation_rate >= 1.0 {
        (0..total).collect()
    } else {
        let count = ((spec.observation_rate * total as f64).round() as usize).clamp(1, total);
        let mut picked = index::sample(rng, total, count).into_vec();
        picked.sort_unstable();
        picked
    };
    Ok(enumerate_cells(&spec.levels, &flat))
}

/// Draws cell means over the (unit-weight) table `skeleton`. Returns the
/// means and their per-order parts.
fn sample_mu(
    skeleton: &SparseTable,
    variances: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let m = skeleton.m();
    let n = skeleton.len();
    let cell_var = variances[m];
    // per-dimension variance of V_j, j = 1..=m
    let scale: Vec<f64> = (1..=m)
        .map(|j| (variances[j - 1..].iter().sum::<f64>()).sqrt())
        .collect();

    if skeleton.is_complete() {
        let z = normals(rng, n);
        let mut parts = factorial_components(skeleton, &z)?;
        // the constant direction belongs to V_1
        for p in parts[0].iter_mut() {
            *p *= scale[0];
        }
        for j in 1..=m {
            for p in parts[j].iter_mut() {
                *p *= scale[j - 1];
            }
        }
        let mu = (0..n).map(|i| parts.iter().map(|p| p[i]).sum()).collect();
        return Ok((mu, parts));
    }

    if n <= DENSE_LIMIT {
        let basis = build_basis(skeleton)?;
        let mut parts = vec![vec![0.0; n]; m + 1];
        for j in 1..=m {
            let v = &basis.blocks[j - 1];
            let z = nalgebra::DVector::from_vec(normals(rng, v.ncols()));
            let draw = v * z * scale[j - 1];
            parts[j] = draw.iter().copied().collect();
        }
        let mut mu: Vec<f64> = (0..n).map(|i| parts.iter().map(|p| p[i]).sum()).collect();
        if basis.complement.ncols() > 0 {
            let z = nalgebra::DVector::from_vec(normals(rng, basis.complement.ncols()));
            let draw = &basis.complement * z * cell_var.sqrt();
            for (u, d) in mu.iter_mut().zip(draw.iter()) {
                *u += d;
            }
        }
        return Ok((mu, parts));
    }

    // independent raw margin effects β^J ~ N(0, σ²_{|J|−1}) plus a cell term
    let mut mu = vec![0.0; n];
    let mut parts = vec![vec![0.0; n]; m + 1];
    for k in 1..=m {
        let sd = variances[k - 1].sqrt();
        for subset in Subset::all_of_size(m, k) {
            let index = MarginIndex::new(skeleton, &subset);
            let beta = normals(rng, index.n_margins());
            for (i, &s) in index.slots().iter().enumerate() {
                let v = sd * beta[s as usize];
                parts[k][i] += v;
                mu[i] += v;
            }
        }
    }
    let sd = cell_var.sqrt();
    for u in mu.iter_mut() {
        *u += sd * rng.sample::<f64, _>(StandardNormal);
    }
    Ok((mu, parts))
}

fn draw_weights(scheme: WeightScheme, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match scheme {
        WeightScheme::Equal => vec![1.0; n],
        WeightScheme::RatioBounded(1.0) => vec![1.0; n],
        WeightScheme::RatioBounded(r) => {
            let hi = r.ln();
            (0..n).map(|_| rng.random_range(0.0..=hi).exp()).collect()
        }
    }
}

/// One replicate: observed cells, weights, true means, then noisy
/// responses `y = μ + N(0, σ²/n)`.
pub fn simulate(spec: &SimSpec, replicate: usize) -> Result<SimInstance> {
    spec.validate()?;
    let mut rng = spec.rng(replicate);
    let coords = observed_cells(spec, &mut rng)?;
    let n = coords.len();
    let weights = draw_weights(spec.weights, n, &mut rng);
    let fspec = FactorSpec::numbered(&spec.levels)?;
    let skeleton = SparseTable::new(
        fspec,
        coords.into_iter().map(|c| Cell::new(c, 0.0, 1.0)).collect(),
    )?;
    let (true_mu, true_effects) = sample_mu(&skeleton, &spec.variances(), &mut rng)?;
    let ys: Vec<f64> = true_mu
        .iter()
        .zip(&weights)
        .map(|(&u, &w)| u + spec.noise / w.sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let table = skeleton.with_responses(&ys)?.with_weights(&weights)?;
    Ok(SimInstance {
        table,
        true_mu,
        true_effects,
        replicate,
    })
}

/// Unit-level data on top of simulated cell means.
#[derive(Clone, Debug)]
pub struct UnitSimSpec {
    /// Model of the cell means; its noise and weight settings are unused.
    pub cells: SimSpec,
    pub units_per_cell: (usize, usize),
    pub reviews_per_unit: (usize, usize),
    pub sigma_u: f64,
    pub sigma_r: f64,
}

#[derive(Clone, Debug)]
pub struct UnitSimInstance {
    pub units: UnitRecords,
    /// `μ_c + α_i` per unit, in unit order.
    pub true_unit_means: Vec<f64>,
    pub cell_index: Vec<CellIndex>,
    pub true_cell_mu: Vec<f64>,
}

pub fn simulate_units(spec: &UnitSimSpec, replicate: usize) -> Result<UnitSimInstance> {
    spec.cells.validate()?;
    let (u_lo, u_hi) = spec.units_per_cell;
    let (r_lo, r_hi) = spec.reviews_per_unit;
    if u_lo == 0 || u_lo > u_hi || r_lo == 0 || r_lo > r_hi {
        return invalid("unit and review counts need 1 ≤ min ≤ max");
    }
    if !(spec.sigma_u >= 0.0 && spec.sigma_r >= 0.0) {
        return invalid("unit standard deviations must be non-negative");
    }
    let mut rng = spec.cells.rng(replicate);
    let coords = observed_cells(&spec.cells, &mut rng)?;
    let fspec = FactorSpec::numbered(&spec.cells.levels)?;
    let skeleton = SparseTable::new(
        fspec.clone(),
        coords.into_iter().map(|c| Cell::new(c, 0.0, 1.0)).collect(),
    )?;
    let (mu, _) = sample_mu(&skeleton, &spec.cells.variances(), &mut rng)?;

    let mut units = Vec::new();
    let mut reviews = Vec::new();
    let mut truth = Vec::new();
    for (cell, &mu_c) in skeleton.cells().iter().zip(&mu) {
        for _ in 0..rng.random_range(u_lo..=u_hi) {
            let id = format!("u{}", units.len());
            let alpha = spec.sigma_u * rng.sample::<f64, _>(StandardNormal);
            let count = rng.random_range(r_lo..=r_hi);
            let ratings: Vec<f64> = (0..count)
                .map(|_| mu_c + alpha + spec.sigma_r * rng.sample::<f64, _>(StandardNormal))
                .collect();
            units.push(Unit {
                cell: cell.index.clone(),
                id: id.clone(),
                y: ratings.iter().sum::<f64>() / count as f64,
                n: count as f64,
            });
            reviews.extend(ratings.into_iter().map(|r| (id.clone(), r)));
            truth.push(mu_c + alpha);
        }
    }
    Ok(UnitSimInstance {
        units: UnitRecords::new(fspec, units, reviews)?,
        true_unit_means: truth,
        cell_index: skeleton.cells().iter().map(|c| c.index.clone()).collect(),
        true_cell_mu: mu,
    })
}
