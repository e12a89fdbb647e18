//! Collapsing unit-level ratings into weighted cell means, and shrinking
//! each unit back toward its cell's regularized estimate.
//!
//! Units follow the one-way model `y_ci = μ_c + α_i + ε̄_i` with
//! `α_i ~ N(0, σ²_u)` and `ε̄_i ~ N(0, σ²_r/n_i)`, so a unit's precision is
//! `w_i = 1/(σ²_u + σ²_r/n_i)`. Aggregated cells carry weight `Σ w_i`, which
//! puts the cell table on a unit noise scale.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{invalid, HanovaError, Result};
use crate::table::{fmt_f64, parse_f64, Cell, CellIndex, FactorSpec, LevelReader, SparseTable};

#[derive(Clone, Debug, PartialEq)]
pub struct Unit {
    pub cell: CellIndex,
    pub id: String,
    /// Mean rating of the unit.
    pub y: f64,
    /// Number of ratings behind `y`.
    pub n: f64,
}

#[derive(Clone, Debug)]
pub struct UnitRecords {
    spec: FactorSpec,
    units: Vec<Unit>,
    /// Individual ratings `(unit id, rating)`, if available.
    reviews: Vec<(String, f64)>,
}

impl UnitRecords {
    pub fn new(spec: FactorSpec, units: Vec<Unit>, reviews: Vec<(String, f64)>) -> Result<Self> {
        if units.is_empty() {
            return invalid("no units");
        }
        let mut ids: HashMap<&str, &CellIndex> = HashMap::new();
        for u in &units {
            spec.check_index(&u.cell)?;
            if !u.y.is_finite() {
                return invalid(format!("unit `{}` has a non-finite mean", u.id));
            }
            if !(u.n >= 1.0 && u.n.is_finite()) {
                return invalid(format!("unit `{}` needs at least one review", u.id));
            }
            if let Some(prev) = ids.insert(&u.id, &u.cell) {
                return invalid(if prev == &u.cell {
                    format!("unit `{}` is listed twice in one cell", u.id)
                } else {
                    format!("unit `{}` appears in more than one cell", u.id)
                });
            }
        }
        for (id, r) in &reviews {
            if !ids.contains_key(id.as_str()) {
                return invalid(format!("review for unknown unit `{id}`"));
            }
            if !r.is_finite() {
                return invalid(format!("non-finite rating for unit `{id}`"));
            }
        }
        Ok(Self {
            spec,
            units,
            reviews,
        })
    }

    pub fn spec(&self) -> &FactorSpec {
        &self.spec
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn reviews(&self) -> &[(String, f64)] {
        &self.reviews
    }

    pub fn with_reviews(mut self, reviews: Vec<(String, f64)>) -> Result<Self> {
        self.reviews = reviews;
        Self::new(self.spec, self.units, self.reviews)
    }

    fn by_cell(&self) -> BTreeMap<&CellIndex, Vec<&Unit>> {
        let mut out: BTreeMap<&CellIndex, Vec<&Unit>> = BTreeMap::new();
        for u in &self.units {
            out.entry(&u.cell).or_default().push(u);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarianceSource {
    Estimated,
    Supplied,
    /// `σ²_r` supplied, `σ²_u` estimated.
    Mixed,
}

impl fmt::Display for VarianceSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VarianceSource::Estimated => "estimated",
            VarianceSource::Supplied => "supplied",
            VarianceSource::Mixed => "mixed",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnitVariances {
    pub sigma_u2: f64,
    pub sigma_r2: f64,
    pub source: VarianceSource,
    /// `σ²_u` before clamping at 0.
    pub sigma_u2_raw: f64,
    /// Multi-unit cells whose units all rest on a single review with no raw
    /// ratings; they inform `σ²_u` only through `σ²_u + σ²_r`.
    pub single_review_cells: usize,
}

impl UnitVariances {
    pub fn supplied(sigma_u2: f64, sigma_r2: f64) -> Result<Self> {
        if !(sigma_u2 >= 0.0 && sigma_r2 >= 0.0) || !(sigma_u2 + sigma_r2).is_finite() {
            return invalid("unit variances must be finite and non-negative");
        }
        Ok(Self {
            sigma_u2,
            sigma_r2,
            source: VarianceSource::Supplied,
            sigma_u2_raw: sigma_u2,
            single_review_cells: 0,
        })
    }
}

/// Pooled within-unit variance of the raw ratings.
fn pooled_review_variance(units: &UnitRecords) -> Result<f64> {
    let mut groups: HashMap<&str, Vec<f64>> = HashMap::new();
    for (id, r) in &units.reviews {
        groups.entry(id).or_default().push(*r);
    }
    let (mut ss, mut df) = (0.0, 0usize);
    for rs in groups.values() {
        if rs.len() < 2 {
            continue;
        }
        let mean = rs.iter().sum::<f64>() / rs.len() as f64;
        ss += rs.iter().map(|r| (r - mean).powi(2)).sum::<f64>();
        df += rs.len() - 1;
    }
    if df == 0 {
        return Err(HanovaError::Inestimable(
            "σ²_r needs raw ratings with at least two per unit for some unit; supply it instead"
                .into(),
        ));
    }
    Ok(ss / df as f64)
}

/// Moment estimates of `σ²_u` and `σ²_r`. `sigma_r2` overrides the
/// raw-rating estimate.
pub fn estimate_unit_variances(units: &UnitRecords, sigma_r2: Option<f64>) -> Result<UnitVariances> {
    let (sigma_r2, source) = match sigma_r2 {
        Some(v) if v >= 0.0 && v.is_finite() => (v, VarianceSource::Mixed),
        Some(v) => return invalid(format!("σ²_r must be non-negative, got {v}")),
        None => (pooled_review_variance(units)?, VarianceSource::Estimated),
    };
    let reviewed: HashSet<&str> = units.reviews.iter().map(|(id, _)| id.as_str()).collect();
    let (mut total, mut cells, mut single) = (0.0, 0usize, 0usize);
    for group in units.by_cell().values() {
        if group.len() < 2 {
            continue;
        }
        let k = group.len() as f64;
        let mean = group.iter().map(|u| u.y).sum::<f64>() / k;
        let var = group.iter().map(|u| (u.y - mean).powi(2)).sum::<f64>() / (k - 1.0);
        let inv_n = group.iter().map(|u| 1.0 / u.n).sum::<f64>() / k;
        total += var - sigma_r2 * inv_n;
        cells += 1;
        if group.iter().all(|u| u.n == 1.0 && !reviewed.contains(u.id.as_str())) {
            single += 1;
        }
    }
    if cells == 0 {
        return Err(HanovaError::Inestimable(
            "σ²_u needs a cell with at least two units; supply it instead".into(),
        ));
    }
    let raw = total / cells as f64;
    Ok(UnitVariances {
        sigma_u2: raw.max(0.0),
        sigma_r2,
        source,
        sigma_u2_raw: raw,
        single_review_cells: single,
    })
}

/// Precision-weighted cell means with weights `Σ_i 1/(σ²_u + σ²_r/n_i)`.
pub fn aggregate_cells(units: &UnitRecords, uv: &UnitVariances) -> Result<SparseTable> {
    if uv.sigma_u2 <= 0.0 && uv.sigma_r2 <= 0.0 {
        return invalid("σ²_u and σ²_r are both zero, so units have infinite precision; supply positive variances");
    }
    let cells = units
        .by_cell()
        .into_iter()
        .map(|(cell, group)| {
            let (mut sw, mut swy) = (0.0, 0.0);
            for u in group {
                let w = 1.0 / (uv.sigma_u2 + uv.sigma_r2 / u.n);
                sw += w;
                swy += w * u.y;
            }
            Cell {
                index: cell.clone(),
                y: swy / sw,
                n: sw,
            }
        })
        .collect();
    SparseTable::new(units.spec.clone(), cells)
}

/// `(n_i y_i/σ²_r + μ_c/σ²_u)/(n_i/σ²_r + 1/σ²_u)` per unit, in input order,
/// where `estimate` gives the regularized cell mean `μ_c`.
pub fn unit_shrinkage(
    units: &UnitRecords,
    uv: &UnitVariances,
    estimate: impl Fn(&CellIndex) -> Result<f64>,
) -> Result<Vec<f64>> {
    units
        .units
        .iter()
        .map(|u| {
            if uv.sigma_r2 == 0.0 {
                return Ok(u.y);
            }
            let mu = estimate(&u.cell)?;
            if uv.sigma_u2 == 0.0 {
                return Ok(mu);
            }
            let a = u.n / uv.sigma_r2;
            let b = 1.0 / uv.sigma_u2;
            Ok((a * u.y + b * mu) / (a + b))
        })
        .collect()
}

/// Reads unit rows: factor columns, then `unit_id`, `y`, `n_reviews`.
pub fn read_units<R: Read>(reader: R, spec: Option<&FactorSpec>) -> Result<UnitRecords> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let w = header.len();
    if w < 4 || header[w - 3] != "unit_id" || header[w - 2] != "y" || header[w - 1] != "n_reviews" {
        return Err(HanovaError::Parse {
            line: 1,
            msg: "header must list the factor columns followed by `unit_id`, `y`, `n_reviews`"
                .into(),
        });
    }
    let mut levels = LevelReader::new(&header[..w - 3], spec)?;
    let mut units = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != w {
            return Err(HanovaError::Parse {
                line,
                msg: format!("expected {w} fields, found {}", rec.len()),
            });
        }
        let coords = levels.coords(&rec, line)?;
        let n: u64 = rec[w - 1].parse().map_err(|_| HanovaError::Parse {
            line,
            msg: format!("review count `{}` is not a positive integer", &rec[w - 1]),
        })?;
        if n == 0 {
            return Err(HanovaError::Parse {
                line,
                msg: "review count must be at least 1".into(),
            });
        }
        units.push(Unit {
            cell: CellIndex(coords),
            id: rec[w - 3].to_owned(),
            y: parse_f64(&rec[w - 2], "y", line)?,
            n: n as f64,
        });
    }
    UnitRecords::new(levels.finish()?, units, Vec::new())
}

/// Reads raw ratings: columns `unit_id`, `rating`.
pub fn read_reviews<R: Read>(reader: R) -> Result<Vec<(String, f64)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<&str> = rdr.headers()?.iter().collect();
    if header != ["unit_id", "rating"] {
        return Err(HanovaError::Parse {
            line: 1,
            msg: "header must be `unit_id,rating`".into(),
        });
    }
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != 2 {
                return Err(HanovaError::Parse {
                    line,
                    msg: format!("expected 2 fields, found {}", rec.len()),
                });
            }
            Ok((rec[0].to_owned(), parse_f64(&rec[1], "rating", line)?))
        })
        .collect()
}

pub fn write_units<W: Write>(units: &UnitRecords, writer: W) -> Result<()> {
    let spec = &units.spec;
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = spec.names().iter().map(String::as_str).collect();
    header.extend(["unit_id", "y", "n_reviews"]);
    w.write_record(&header)?;
    for u in &units.units {
        let mut row: Vec<String> = u
            .cell
            .0
            .iter()
            .enumerate()
            .map(|(f, &l)| spec.label(f, l).to_owned())
            .collect();
        row.extend([u.id.clone(), fmt_f64(u.y), (u.n as u64).to_string()]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_reviews<W: Write>(reviews: &[(String, f64)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["unit_id", "rating"])?;
    for (id, r) in reviews {
        w.write_record([id.clone(), fmt_f64(*r)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_units(path: impl AsRef<Path>, spec: Option<&FactorSpec>) -> Result<UnitRecords> {
    read_units(File::open(path)?, spec)
}

pub fn load_reviews(path: impl AsRef<Path>) -> Result<Vec<(String, f64)>> {
    read_reviews(File::open(path)?)
}

/// Writes the `key = value` variance sidecar.
pub fn write_variances<W: Write>(uv: &UnitVariances, mut writer: W) -> Result<()> {
    writeln!(writer, "sigma_u2 = {}", fmt_f64(uv.sigma_u2))?;
    writeln!(writer, "sigma_r2 = {}", fmt_f64(uv.sigma_r2))?;
    writeln!(writer, "source = {}", uv.source)?;
    writeln!(writer, "sigma_u2_raw = {}", fmt_f64(uv.sigma_u2_raw))?;
    writeln!(writer, "single_review_cells = {}", uv.single_review_cells)?;
    Ok(())
}

pub fn read_variances<R: Read>(reader: R) -> Result<UnitVariances> {
    let mut values: HashMap<String, String> = HashMap::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let (k, v) = t.split_once('=').ok_or_else(|| HanovaError::Parse {
            line: i as u64 + 1,
            msg: format!("expected `key = value`, found `{t}`"),
        })?;
        values.insert(k.trim().to_owned(), v.trim().to_owned());
    }
    let get = |k: &str| -> Result<f64> {
        let v = values
            .get(k)
            .ok_or_else(|| HanovaError::Invalid(format!("variance file lacks `{k}`")))?;
        parse_f64(v, k, 0)
    };
    let mut uv = UnitVariances::supplied(get("sigma_u2")?, get("sigma_r2")?)?;
    uv.source = match values.get("source").map(String::as_str) {
        Some("estimated") => VarianceSource::Estimated,
        Some("mixed") => VarianceSource::Mixed,
        _ => VarianceSource::Supplied,
    };
    if values.contains_key("sigma_u2_raw") {
        uv.sigma_u2_raw = get("sigma_u2_raw")?;
    }
    if let Some(v) = values.get("single_review_cells") {
        uv.single_review_cells = v.parse().unwrap_or(0);
    }
    Ok(uv)
}

pub fn load_variances(path: impl AsRef<Path>) -> Result<UnitVariances> {
    read_variances(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn unit(cell: u32, id: &str, y: f64, n: f64) -> Unit {
        Unit {
            cell: CellIndex(vec![cell]),
            id: id.into(),
            y,
            n,
        }
    }

    fn records(units: Vec<Unit>) -> UnitRecords {
        let cells = units.iter().map(|u| u.cell.0[0]).max().unwrap() as usize + 1;
        UnitRecords::new(FactorSpec::numbered(&[cells]).unwrap(), units, Vec::new()).unwrap()
    }

    #[test]
    fn degenerate_data_gives_zero_variances() {
        let units = records(vec![
            unit(0, "a", 3.0, 2.0),
            unit(0, "b", 3.0, 2.0),
            unit(1, "c", 1.0, 2.0),
            unit(1, "d", 1.0, 2.0),
        ]);
        let reviews = ["a", "a", "b", "b", "c", "c", "d", "d"]
            .iter()
            .zip([3.0, 3.0, 3.0, 3.0, 1.0, 1.0, 1.0, 1.0])
            .map(|(id, r)| (id.to_string(), r))
            .collect();
        let units = units.with_reviews(reviews).unwrap();
        let uv = estimate_unit_variances(&units, None).unwrap();
        assert_eq!((uv.sigma_u2, uv.sigma_r2), (0.0, 0.0));
        assert!(aggregate_cells(&units, &uv).is_err());
    }

    #[test]
    fn many_reviews_remove_the_noise_correction() {
        let units = records(vec![unit(0, "a", 0.0, 1e15), unit(0, "b", 2.0, 1e15)]);
        let uv = estimate_unit_variances(&units, Some(1.0)).unwrap();
        assert_abs_diff_eq!(uv.sigma_u2, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn no_multi_unit_cell_is_inestimable() {
        let units = records(vec![unit(0, "a", 0.0, 3.0), unit(1, "b", 2.0, 3.0)]);
        assert!(matches!(
            estimate_unit_variances(&units, Some(1.0)),
            Err(HanovaError::Inestimable(_))
        ));
        assert!(matches!(
            estimate_unit_variances(&units, None),
            Err(HanovaError::Inestimable(_))
        ));
    }

    #[test]
    fn malformed_units_are_rejected() {
        let spec = FactorSpec::numbered(&[2]).unwrap();
        assert!(UnitRecords::new(
            spec.clone(),
            vec![unit(0, "a", 1.0, 1.0), unit(1, "a", 1.0, 1.0)],
            vec![]
        )
        .is_err());
        assert!(UnitRecords::new(spec.clone(), vec![unit(0, "a", 1.0, 0.0)], vec![]).is_err());
        assert!(
            UnitRecords::new(spec, vec![unit(0, "a", 1.0, 1.0)], vec![("b".into(), 1.0)]).is_err()
        );
    }

    #[test]
    fn moment_estimates_recover_simulated_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (su, sr) = (1.0, 2.0);
        let mu = Normal::new(0.0, 3.0).unwrap();
        let mut units = Vec::new();
        let mut reviews = Vec::new();
        for c in 0..200u32 {
            let m = mu.sample(&mut rng);
            for i in 0..5 {
                let id = format!("{c}-{i}");
                let alpha = su * rng.sample::<f64, _>(rand_distr::StandardNormal);
                let rs: Vec<f64> = (0..10)
                    .map(|_| m + alpha + sr * rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                units.push(unit(c, &id, rs.iter().sum::<f64>() / 10.0, 10.0));
                reviews.extend(rs.into_iter().map(|r| (id.clone(), r)));
            }
        }
        let recs = records(units).with_reviews(reviews).unwrap();
        let uv = estimate_unit_variances(&recs, None).unwrap();
        assert!((uv.sigma_r2 / 4.0 - 1.0).abs() < 0.15, "{}", uv.sigma_r2);
        assert!((uv.sigma_u2 / 1.0 - 1.0).abs() < 0.15, "{}", uv.sigma_u2);
        assert_eq!(uv.source, VarianceSource::Estimated);
    }

    #[test]
    fn aggregation_examples() {
        let units = records(vec![unit(0, "a", 2.0, 1.0), unit(0, "b", 4.0, 1e300), unit(1, "c", 5.0, 4.0)]);
        let uv = UnitVariances::supplied(1.0, 1.0).unwrap();
        let t = aggregate_cells(&units, &uv).unwrap();
        assert_abs_diff_eq!(t.cells()[0].y, 10.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.cells()[0].n, 1.5, epsilon = 1e-12);
        assert_eq!(t.cells()[1].y, 5.0);
        assert_abs_diff_eq!(t.cells()[1].n, 1.0 / 1.25, epsilon = 1e-15);
    }

    #[test]
    fn aggregation_matches_resummation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let units: Vec<Unit> = (0..40)
            .map(|i| {
                unit(
                    rng.random_range(0..6),
                    &i.to_string(),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(1..20) as f64,
                )
            })
            .collect();
        let recs = records(units.clone());
        let uv = UnitVariances::supplied(0.4, 2.5).unwrap();
        let t = aggregate_cells(&recs, &uv).unwrap();
        for c in t.cells() {
            let members: Vec<&Unit> = units.iter().filter(|u| u.cell == c.index).collect();
            let ws: Vec<f64> = members.iter().map(|u| 1.0 / (0.4 + 2.5 / u.n)).collect();
            let sw: f64 = ws.iter().sum();
            let mean = members.iter().zip(&ws).map(|(u, w)| u.y * w).sum::<f64>() / sw;
            assert_abs_diff_eq!(c.y, mean, epsilon = 1e-12);
            assert_abs_diff_eq!(c.n, sw, epsilon = 1e-12);
            let lo = members.iter().map(|u| u.y).fold(f64::INFINITY, f64::min);
            let hi = members.iter().map(|u| u.y).fold(f64::NEG_INFINITY, f64::max);
            assert!(c.y >= lo - 1e-12 && c.y <= hi + 1e-12);
        }
    }

    #[test]
    fn shrinkage_examples() {
        let units = records(vec![unit(0, "a", 4.0, 1.0), unit(0, "b", 4.0, 1e15)]);
        let uv = UnitVariances::supplied(1.0, 1.0).unwrap();
        let out = unit_shrinkage(&units, &uv, |_| Ok(2.0)).unwrap();
        assert_eq!(out[0], 3.0);
        assert_abs_diff_eq!(out[1], 4.0, epsilon = 1e-12);
        let exact = UnitVariances::supplied(1.0, 0.0).unwrap();
        assert_eq!(unit_shrinkage(&units, &exact, |_| Ok(2.0)).unwrap()[0], 4.0);
        let pooled = UnitVariances::supplied(0.0, 1.0).unwrap();
        assert_eq!(unit_shrinkage(&units, &pooled, |_| Ok(2.0)).unwrap()[0], 2.0);
    }

    #[test]
    fn shrinkage_is_a_strict_convex_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let y = rng.random_range(-5.0..5.0);
            let mu = rng.random_range(-5.0..5.0);
            let n = rng.random_range(1..50) as f64;
            let uv = UnitVariances::supplied(rng.random_range(0.01..4.0), rng.random_range(0.01..4.0))
                .unwrap();
            let recs = records(vec![unit(0, "a", y, n)]);
            let out = unit_shrinkage(&recs, &uv, |_| Ok(mu)).unwrap()[0];
            if y != mu {
                assert!(out > y.min(mu) && out < y.max(mu));
            }
            let higher = records(vec![unit(0, "a", y + 0.5, n)]);
            assert!(unit_shrinkage(&higher, &uv, |_| Ok(mu)).unwrap()[0] > out);
            assert!(unit_shrinkage(&recs, &uv, |_| Ok(mu + 0.5)).unwrap()[0] > out);
        }
    }

    #[test]
    fn csv_and_sidecar_round_trip() {
        let units = records(vec![unit(0, "a", 2.5, 3.0), unit(1, "b,c", -1.0, 1.0)])
            .with_reviews(vec![("a".into(), 2.0), ("a".into(), 3.0)])
            .unwrap();
        let mut buf = Vec::new();
        write_units(&units, &mut buf).unwrap();
        let back = read_units(buf.as_slice(), Some(units.spec())).unwrap();
        assert_eq!(back.units(), units.units());
        let mut buf = Vec::new();
        write_reviews(units.reviews(), &mut buf).unwrap();
        assert_eq!(read_reviews(buf.as_slice()).unwrap(), units.reviews());

        let uv = estimate_unit_variances(
            &records(vec![unit(0, "a", 0.0, 2.0), unit(0, "b", 1.0, 2.0)]),
            Some(0.3),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_variances(&uv, &mut buf).unwrap();
        assert_eq!(read_variances(buf.as_slice()).unwrap(), uv);
        assert!(read_units("a,y,n\n1,2,3\n".as_bytes(), None).is_err());
        assert!(read_units("a,unit_id,y,n_reviews\n1,u,2,0\n".as_bytes(), None).is_err());
    }
}
