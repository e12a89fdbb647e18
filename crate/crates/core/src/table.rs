//! Sparse multi-way tables of cell means and the weighted margin-sum kernel.
//!
//! A table stores only its observed cells. Every cell carries a mean response
//! `y` and a positive weight `n`. Cells are kept in lexicographic order of
//! their level ordinals, so every reduction over the table visits cells in the
//! same order regardless of how the input was laid out.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use itertools::Itertools;
use rayon::prelude::*;

use crate::error::{invalid, HanovaError, Result};

/// Factor names and their ordered level labels.
#[derive(Clone, Debug)]
pub struct FactorSpec {
    names: Vec<String>,
    levels: Vec<Vec<String>>,
    lookup: Vec<HashMap<String, u32>>,
}

impl PartialEq for FactorSpec {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.levels == other.levels
    }
}

impl FactorSpec {
    pub fn new(names: Vec<String>, levels: Vec<Vec<String>>) -> Result<Self> {
        if names.is_empty() {
            return invalid("a table needs at least one factor");
        }
        if names.len() != levels.len() {
            return invalid(format!(
                "{} factor names but {} level lists",
                names.len(),
                levels.len()
            ));
        }
        if let Some(dup) = names.iter().duplicates().next() {
            return invalid(format!("duplicate factor name `{dup}`"));
        }
        let mut lookup = Vec::with_capacity(levels.len());
        for (name, labels) in names.iter().zip(&levels) {
            if labels.is_empty() {
                return invalid(format!("factor `{name}` has no levels"));
            }
            if labels.len() > u32::MAX as usize {
                return invalid(format!("factor `{name}` has too many levels"));
            }
            let mut map = HashMap::with_capacity(labels.len());
            for (i, label) in labels.iter().enumerate() {
                if map.insert(label.clone(), i as u32).is_some() {
                    return invalid(format!("duplicate level `{label}` in factor `{name}`"));
                }
            }
            lookup.push(map);
        }
        Ok(Self {
            names,
            levels,
            lookup,
        })
    }

    /// Spec with factors named `F1..Fm` and levels labelled `1..L`.
    pub fn numbered(level_counts: &[usize]) -> Result<Self> {
        let names = (1..=level_counts.len()).map(|f| format!("F{f}")).collect();
        let levels = level_counts
            .iter()
            .map(|&l| (1..=l).map(|i| i.to_string()).collect())
            .collect();
        Self::new(names, levels)
    }

    /// Number of factors.
    pub fn m(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn levels(&self, factor: usize) -> &[String] {
        &self.levels[factor]
    }

    pub fn level_counts(&self) -> Vec<usize> {
        self.levels.iter().map(Vec::len).collect()
    }

    pub fn label(&self, factor: usize, ordinal: u32) -> &str {
        &self.levels[factor][ordinal as usize]
    }

    pub fn ordinal(&self, factor: usize, label: &str) -> Option<u32> {
        self.lookup[factor].get(label).copied()
    }

    pub fn factor_position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Number of cells in the complete cross-classification, if it fits.
    pub fn full_size(&self) -> Option<usize> {
        self.levels
            .iter()
            .try_fold(1usize, |acc, l| acc.checked_mul(l.len()))
    }

    pub fn check_index(&self, index: &CellIndex) -> Result<()> {
        if index.0.len() != self.m() {
            return invalid(format!(
                "cell index has {} coordinates, table has {} factors",
                index.0.len(),
                self.m()
            ));
        }
        for (f, &c) in index.0.iter().enumerate() {
            if c as usize >= self.levels[f].len() {
                return invalid(format!(
                    "level ordinal {c} out of range for factor `{}` ({} levels)",
                    self.names[f],
                    self.levels[f].len()
                ));
            }
        }
        Ok(())
    }
}

/// Level ordinals of one cell, one per factor.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellIndex(pub Vec<u32>);

impl CellIndex {
    /// Coordinates restricted to the factors in `subset`.
    pub fn project(&self, subset: &Subset) -> Vec<u32> {
        subset.0.iter().map(|&f| self.0[f]).collect()
    }
}

/// One observed cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub index: CellIndex,
    pub y: f64,
    pub n: f64,
}

impl Cell {
    pub fn new(coords: Vec<u32>, y: f64, n: f64) -> Self {
        Self {
            index: CellIndex(coords),
            y,
            n,
        }
    }
}

/// Strictly increasing set of factor positions.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Subset(Vec<usize>);

impl Subset {
    pub fn new(mut factors: Vec<usize>) -> Self {
        factors.sort_unstable();
        factors.dedup();
        Self(factors)
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn full(m: usize) -> Self {
        Self((0..m).collect())
    }

    /// All subsets of `{0..m}` with `k` elements, in lexicographic order.
    pub fn all_of_size(m: usize, k: usize) -> Vec<Subset> {
        (0..m).combinations(k).map(Subset).collect()
    }

    pub fn factors(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The subset with its `pos`-th element removed.
    pub fn without(&self, pos: usize) -> Subset {
        let mut v = self.0.clone();
        v.remove(pos);
        Subset(v)
    }
}

/// A margin `(J, L)`: the cells whose coordinates on `subset` equal `levels`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MarginKey {
    pub subset: Subset,
    pub levels: Vec<u32>,
}

/// Observed cells of a multi-way layout.
#[derive(Clone, Debug)]
pub struct SparseTable {
    spec: FactorSpec,
    cells: Vec<Cell>,
    lookup: HashMap<CellIndex, usize>,
}

impl PartialEq for SparseTable {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.cells == other.cells
    }
}

impl SparseTable {
    /// Builds a table, merging duplicate indices into a weighted mean with
    /// summed weight and sorting cells lexicographically.
    pub fn new(spec: FactorSpec, rows: Vec<Cell>) -> Result<Self> {
        let mut merged: BTreeMap<CellIndex, Vec<(f64, f64)>> = BTreeMap::new();
        for cell in rows {
            spec.check_index(&cell.index)?;
            validate_values(cell.y, cell.n)?;
            merged.entry(cell.index).or_default().push((cell.y, cell.n));
        }
        if merged.is_empty() {
            return invalid("table has no observed cells");
        }
        let cells: Vec<Cell> = merged
            .into_iter()
            .map(|(index, parts)| match parts[..] {
                // a lone row keeps its exact value
                [(y, n)] => Cell { index, y, n },
                _ => {
                    let n: f64 = parts.iter().map(|p| p.1).sum();
                    let sum: f64 = parts.iter().map(|p| p.0 * p.1).sum();
                    Cell { index, y: sum / n, n }
                }
            })
            .collect();
        Ok(Self::from_sorted(spec, cells))
    }

    fn from_sorted(spec: FactorSpec, cells: Vec<Cell>) -> Self {
        let lookup = cells
            .iter()
            .enumerate()
            .map(|(i, c)| (c.index.clone(), i))
            .collect();
        Self {
            spec,
            cells,
            lookup,
        }
    }

    pub fn spec(&self) -> &FactorSpec {
        &self.spec
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    /// Always false; tables hold at least one cell.
    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn m(&self) -> usize {
        self.spec.m()
    }

    pub fn position(&self, index: &CellIndex) -> Option<usize> {
        self.lookup.get(index).copied()
    }

    pub fn responses(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.y).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.n).collect()
    }

    /// Same cells and weights with new responses.
    pub fn with_responses(&self, ys: &[f64]) -> Result<Self> {
        check_len(ys.len(), self.len())?;
        let cells = self
            .cells
            .iter()
            .zip(ys)
            .map(|(c, &y)| {
                validate_values(y, c.n)?;
                Ok(Cell { y, ..c.clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_sorted(self.spec.clone(), cells))
    }

    /// Same cells and responses with new weights.
    pub fn with_weights(&self, ns: &[f64]) -> Result<Self> {
        check_len(ns.len(), self.len())?;
        let cells = self
            .cells
            .iter()
            .zip(ns)
            .map(|(c, &n)| {
                validate_values(c.y, n)?;
                Ok(Cell { n, ..c.clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_sorted(self.spec.clone(), cells))
    }

    /// The cells at the given positions, keeping the full factor spec.
    pub fn select(&self, positions: &[usize]) -> Result<Self> {
        let mut pos = positions.to_vec();
        pos.sort_unstable();
        pos.dedup();
        if pos.is_empty() {
            return invalid("selection is empty");
        }
        if let Some(&bad) = pos.iter().find(|&&p| p >= self.len()) {
            return invalid(format!("cell position {bad} out of range"));
        }
        let cells = pos.iter().map(|&p| self.cells[p].clone()).collect();
        Ok(Self::from_sorted(self.spec.clone(), cells))
    }

    /// True when every observed cell has the same weight.
    pub fn is_balanced(&self) -> bool {
        let n0 = self.cells[0].n;
        self.cells.iter().all(|c| c.n == n0)
    }

    /// True when every cell of the cross-classification is observed.
    pub fn is_complete(&self) -> bool {
        self.spec.full_size() == Some(self.len())
    }
}

fn validate_values(y: f64, n: f64) -> Result<()> {
    if !y.is_finite() {
        return invalid(format!("non-finite cell mean {y}"));
    }
    if !(n.is_finite() && n > 0.0) {
        return invalid(format!("cell weight must be positive and finite, got {n}"));
    }
    Ok(())
}

fn check_len(got: usize, want: usize) -> Result<()> {
    if got != want {
        return invalid(format!(
            "expected one value per observed cell ({want}), got {got}"
        ));
    }
    Ok(())
}

/// Cells above this count are reduced in fixed-size chunks in parallel.
const PARALLEL_CELLS: usize = 1 << 17;
const CHUNK_LEN: usize = 1 << 14;

/// Precomputed grouping of observed cells by their margin on one subset.
///
/// Margins are numbered ("slots") in lexicographic order of their level tuple,
/// and only margins with at least one observed cell get a slot.
#[derive(Clone, Debug)]
pub struct MarginIndex {
    subset: Subset,
    slots: Vec<u32>,
    keys: Vec<Vec<u32>>,
}

impl MarginIndex {
    pub fn new(table: &SparseTable, subset: &Subset) -> Self {
        let projected: Vec<Vec<u32>> = table
            .cells
            .iter()
            .map(|c| c.index.project(subset))
            .collect();
        let mut keys = projected.clone();
        keys.sort_unstable();
        keys.dedup();
        let slots = projected
            .iter()
            .map(|p| keys.binary_search(p).expect("key present") as u32)
            .collect();
        Self {
            subset: subset.clone(),
            slots,
            keys,
        }
    }

    pub fn subset(&self) -> &Subset {
        &self.subset
    }

    pub fn n_margins(&self) -> usize {
        self.keys.len()
    }

    /// Level tuple of a slot.
    pub fn key(&self, slot: usize) -> &[u32] {
        &self.keys[slot]
    }

    pub fn keys(&self) -> &[Vec<u32>] {
        &self.keys
    }

    /// Slot of each observed cell, in table order.
    pub fn slots(&self) -> &[u32] {
        &self.slots
    }

    /// Sums `values` (one per observed cell) into their margin slots.
    pub fn accumulate(&self, values: &[f64]) -> Vec<f64> {
        if values.len() >= PARALLEL_CELLS {
            return self.accumulate_chunked(values, CHUNK_LEN);
        }
        let mut out = vec![0.0; self.keys.len()];
        for (&s, &v) in self.slots.iter().zip(values) {
            out[s as usize] += v;
        }
        out
    }

    /// Chunked parallel reduction. Partial sums are merged in chunk order, so
    /// the result depends only on `chunk_len`, never on the thread count.
    pub fn accumulate_chunked(&self, values: &[f64], chunk_len: usize) -> Vec<f64> {
        let chunk_len = chunk_len.max(1);
        let k = self.keys.len();
        let partials: Vec<Vec<f64>> = self
            .slots
            .par_chunks(chunk_len)
            .zip(values.par_chunks(chunk_len))
            .map(|(slots, vals)| {
                let mut acc = vec![0.0; k];
                for (&s, &v) in slots.iter().zip(vals) {
                    acc[s as usize] += v;
                }
                acc
            })
            .collect();
        let mut out = vec![0.0; k];
        for part in partials {
            for (o, p) in out.iter_mut().zip(part) {
                *o += p;
            }
        }
        out
    }
}

/// Sums per-cell `values` over every observed margin `(subset, L)`.
pub fn margin_sum(
    table: &SparseTable,
    values: &[f64],
    subset: &Subset,
) -> Result<BTreeMap<MarginKey, f64>> {
    check_len(values.len(), table.len())?;
    if let Some(&f) = subset.factors().iter().find(|&&f| f >= table.m()) {
        return invalid(format!("factor position {f} out of range"));
    }
    let index = MarginIndex::new(table, subset);
    let sums = index.accumulate(values);
    Ok(index
        .keys
        .into_iter()
        .zip(sums)
        .map(|(levels, s)| {
            (
                MarginKey {
                    subset: subset.clone(),
                    levels,
                },
                s,
            )
        })
        .collect())
}

/// `Σ n_I y_I / Σ n_I` over observed cells.
pub fn weighted_grand_mean(table: &SparseTable) -> f64 {
    let (num, den) = table
        .cells
        .iter()
        .fold((0.0, 0.0), |(a, b), c| (a + c.n * c.y, b + c.n));
    num / den
}

/// Formats a float so that parsing it back yields the same bits.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-5..1e16).contains(&a) || !v.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub(crate) fn parse_f64(field: &str, what: &str, line: u64) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| HanovaError::Parse {
        line,
        msg: format!("cannot parse {what} `{field}` as a number"),
    })
}

/// Resolves the leading label columns of a CSV record to level ordinals,
/// either against a known spec (matching columns by factor name) or by
/// numbering levels in order of first appearance.
pub(crate) struct LevelReader<'a> {
    spec: Option<&'a FactorSpec>,
    names: Vec<String>,
    column_factor: Vec<usize>,
    discovered: Vec<Vec<String>>,
    lookup: Vec<HashMap<String, u32>>,
}

impl<'a> LevelReader<'a> {
    pub(crate) fn new(names: &[String], spec: Option<&'a FactorSpec>) -> Result<Self> {
        let column_factor = match spec {
            Some(s) => {
                if names.len() != s.m() {
                    return Err(HanovaError::Parse {
                        line: 1,
                        msg: format!("file has {} factor columns, spec has {}", names.len(), s.m()),
                    });
                }
                names
                    .iter()
                    .map(|name| {
                        s.factor_position(name).ok_or_else(|| HanovaError::Parse {
                            line: 1,
                            msg: format!("unknown factor column `{name}`"),
                        })
                    })
                    .collect::<Result<_>>()?
            }
            None => (0..names.len()).collect(),
        };
        let m = names.len();
        Ok(Self {
            spec,
            names: names.to_vec(),
            column_factor,
            discovered: vec![Vec::new(); m],
            lookup: vec![HashMap::new(); m],
        })
    }

    pub(crate) fn coords(&mut self, record: &csv::StringRecord, line: u64) -> Result<Vec<u32>> {
        let mut coords = vec![0u32; self.names.len()];
        for (col, &f) in self.column_factor.iter().enumerate() {
            let label = &record[col];
            coords[f] = match self.spec {
                Some(s) => s.ordinal(f, label).ok_or_else(|| HanovaError::Parse {
                    line,
                    msg: format!("unknown level `{label}` for factor `{}`", s.names()[f]),
                })?,
                None => {
                    let next = self.discovered[f].len() as u32;
                    let discovered = &mut self.discovered[f];
                    *self.lookup[f].entry(label.to_owned()).or_insert_with(|| {
                        discovered.push(label.to_owned());
                        next
                    })
                }
            };
        }
        Ok(coords)
    }

    pub(crate) fn finish(self) -> Result<FactorSpec> {
        match self.spec {
            Some(s) => Ok(s.clone()),
            None => FactorSpec::new(self.names, self.discovered),
        }
    }
}

/// Reads the cell CSV format: factor columns, then `y` and `n`.
///
/// Without a spec, levels are numbered in order of first appearance. With a
/// spec, columns are matched by factor name and unknown labels are errors.
pub fn read_cells<R: Read>(reader: R, spec: Option<&FactorSpec>) -> Result<SparseTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let width = header.len();
    if width < 3 || header[width - 2] != "y" || header[width - 1] != "n" {
        return Err(HanovaError::Parse {
            line: 1,
            msg: "header must list the factor columns followed by `y` and `n`".into(),
        });
    }
    let mut levels = LevelReader::new(&header[..width - 2], spec)?;

    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(HanovaError::Parse {
                line,
                msg: format!("expected {width} fields, found {}", record.len()),
            });
        }
        let coords = levels.coords(&record, line)?;
        let y = parse_f64(&record[width - 2], "y", line)?;
        let n = parse_f64(&record[width - 1], "n", line)?;
        if !y.is_finite() {
            return Err(HanovaError::Parse {
                line,
                msg: format!("non-finite cell mean {y}"),
            });
        }
        if !(n.is_finite() && n > 0.0) {
            return Err(HanovaError::Parse {
                line,
                msg: format!("weight must be positive, got {n}"),
            });
        }
        rows.push(Cell::new(coords, y, n));
    }
    if rows.is_empty() {
        return invalid("cell file has no data rows");
    }
    SparseTable::new(levels.finish()?, rows)
}

pub fn load_cells(path: impl AsRef<Path>, spec: Option<&FactorSpec>) -> Result<SparseTable> {
    read_cells(File::open(path)?, spec)
}

pub fn write_cells<W: Write>(table: &SparseTable, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let spec = table.spec();
    let mut header: Vec<&str> = spec.names().iter().map(String::as_str).collect();
    header.extend(["y", "n"]);
    wtr.write_record(&header)?;
    for cell in table.cells() {
        let mut row: Vec<String> = cell
            .index
            .0
            .iter()
            .enumerate()
            .map(|(f, &o)| spec.label(f, o).to_owned())
            .collect();
        row.push(fmt_f64(cell.y));
        row.push(fmt_f64(cell.n));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_cells(table: &SparseTable, path: impl AsRef<Path>) -> Result<()> {
    write_cells(table, File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_by_two(values: [f64; 4]) -> SparseTable {
        let spec = FactorSpec::numbered(&[2, 2]).unwrap();
        let cells = (0..4)
            .map(|i| Cell::new(vec![i / 2, i % 2], values[i as usize], 1.0))
            .collect();
        SparseTable::new(spec, cells).unwrap()
    }

    #[test]
    fn load_two_rows() {
        let csv = "A,B,y,n\na1,b1,2,3\na1,b2,0,1\n";
        let t = read_cells(csv.as_bytes(), None).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.spec().level_counts(), vec![1, 2]);
        assert_eq!(t.cells()[0].y, 2.0);
        assert_eq!(t.cells()[0].n, 3.0);
    }

    #[test]
    fn duplicate_rows_merge_as_weighted_mean() {
        let csv = "A,B,y,n\na,b,1,1\na,b,3,1\n";
        let t = read_cells(csv.as_bytes(), None).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.cells()[0].y, 2.0);
        assert_eq!(t.cells()[0].n, 2.0);
    }

    #[test]
    fn zero_weight_names_line() {
        let csv = "A,y,n\na,1,1\nb,2,0\n";
        match read_cells(csv.as_bytes(), None) {
            Err(HanovaError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_and_empty_inputs() {
        assert!(matches!(
            read_cells("A,y,n\na,oops,1\n".as_bytes(), None),
            Err(HanovaError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            read_cells("A,y,n\n".as_bytes(), None),
            Err(HanovaError::Invalid(_))
        ));
        assert!(read_cells("".as_bytes(), None).is_err());
        assert!(read_cells("A,n,y\na,1,1\n".as_bytes(), None).is_err());
    }

    #[test]
    fn spec_order_and_unused_levels_are_kept() {
        let spec = FactorSpec::new(
            vec!["A".into()],
            vec![vec!["z".into(), "a".into(), "unused".into()]],
        )
        .unwrap();
        let t = read_cells("A,y,n\na,1,1\nz,2,1\n".as_bytes(), Some(&spec)).unwrap();
        assert_eq!(t.spec().level_counts(), vec![3]);
        // lexicographic by ordinal: z (0) before a (1)
        assert_eq!(t.cells()[0].y, 2.0);
        assert!(read_cells("A,y,n\nq,1,1\n".as_bytes(), Some(&spec)).is_err());
    }

    #[test]
    fn cells_sorted_regardless_of_file_order() {
        let csv = "A,B,y,n\nx,q,1,1\ny,p,2,1\nx,p,3,1\n";
        let t = read_cells(csv.as_bytes(), None).unwrap();
        let idx: Vec<_> = t.cells().iter().map(|c| c.index.0.clone()).collect();
        assert_eq!(idx, vec![vec![0, 0], vec![0, 1], vec![1, 1]]);
    }

    #[test]
    fn margin_sum_rows() {
        let t = two_by_two([1.0, 2.0, 3.0, 4.0]);
        let sums = margin_sum(&t, &t.responses(), &Subset::new(vec![0])).unwrap();
        let got: Vec<f64> = sums.values().copied().collect();
        assert_eq!(got, vec![3.0, 7.0]);
    }

    #[test]
    fn margin_sum_full_subset_is_identity() {
        let t = two_by_two([1.0, 2.0, 3.0, 4.0]);
        let sums = margin_sum(&t, &t.responses(), &Subset::full(2)).unwrap();
        assert_eq!(sums.len(), 4);
        for (key, v) in sums {
            let pos = t.position(&CellIndex(key.levels)).unwrap();
            assert_eq!(v, t.cells()[pos].y);
        }
    }

    #[test]
    fn margin_sum_length_mismatch() {
        let t = two_by_two([1.0; 4]);
        assert!(margin_sum(&t, &[1.0, 2.0], &Subset::full(2)).is_err());
    }

    #[test]
    fn margin_sum_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let spec = FactorSpec::numbered(&[3, 4, 2]).unwrap();
        let cells: Vec<Cell> = (0..5)
            .map(|_| {
                Cell::new(
                    vec![
                        rng.random_range(0..3),
                        rng.random_range(0..4),
                        rng.random_range(0..2),
                    ],
                    0.0,
                    1.0,
                )
            })
            .collect();
        let t = SparseTable::new(spec, cells).unwrap();
        let values: Vec<f64> = (0..t.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let subset = Subset::new(vec![0, 2]);
        let sums = margin_sum(&t, &values, &subset).unwrap();
        for (key, got) in &sums {
            let mut want = 0.0;
            for (c, v) in t.cells().iter().zip(&values) {
                if c.index.0[0] == key.levels[0] && c.index.0[2] == key.levels[1] {
                    want += v;
                }
            }
            assert_eq!(*got, want);
        }
        let distinct: std::collections::BTreeSet<_> = t
            .cells()
            .iter()
            .map(|c| (c.index.0[0], c.index.0[2]))
            .collect();
        assert_eq!(distinct.len(), sums.len());
    }

    #[test]
    fn grand_mean_examples() {
        let spec = FactorSpec::numbered(&[2]).unwrap();
        let t = SparseTable::new(
            spec.clone(),
            vec![Cell::new(vec![0], 2.0, 3.0), Cell::new(vec![1], 0.0, 1.0)],
        )
        .unwrap();
        assert_eq!(weighted_grand_mean(&t), 1.5);
        let t = SparseTable::new(spec, vec![Cell::new(vec![0], 7.0, 5.0)]).unwrap();
        assert_eq!(weighted_grand_mean(&t), 7.0);
    }

    #[test]
    fn chunked_reduction_is_thread_count_independent() {
        let spec = FactorSpec::numbered(&[7, 11]).unwrap();
        let cells = (0..77u32)
            .map(|i| Cell::new(vec![i % 7, i / 7], (i as f64).sin(), 1.0))
            .collect();
        let t = SparseTable::new(spec, cells).unwrap();
        let idx = MarginIndex::new(&t, &Subset::new(vec![1]));
        let vals = t.responses();
        let a = idx.accumulate_chunked(&vals, 5);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| idx.accumulate_chunked(&vals, 5));
        assert_eq!(a, b);
    }

    fn arb_table() -> impl Strategy<Value = (SparseTable, Vec<f64>)> {
        (1usize..4, 1usize..20)
            .prop_flat_map(|(m, ncell)| {
                let levels = proptest::collection::vec(1u32..5, m);
                (levels, Just(ncell))
            })
            .prop_flat_map(|(levels, ncell)| {
                let lv = levels.clone();
                let cell = lv
                    .iter()
                    .map(|&l| 0..l)
                    .collect::<Vec<_>>()
                    .prop_map(|c| c);
                (
                    Just(levels),
                    proptest::collection::vec((cell, -5.0f64..5.0, 0.1f64..10.0), ncell),
                )
            })
            .prop_map(|(levels, rows)| {
                let counts: Vec<usize> = levels.iter().map(|&l| l as usize).collect();
                let spec = FactorSpec::numbered(&counts).unwrap();
                let cells = rows
                    .into_iter()
                    .map(|(c, y, n)| Cell::new(c, y, n))
                    .collect();
                let t = SparseTable::new(spec, cells).unwrap();
                let vals = t.responses();
                (t, vals)
            })
    }

    proptest! {
        #[test]
        fn full_then_total_equals_empty_subset((t, vals) in arb_table()) {
            let full = margin_sum(&t, &vals, &Subset::full(t.m())).unwrap();
            let total: f64 = full.values().sum();
            let empty = margin_sum(&t, &vals, &Subset::empty()).unwrap();
            prop_assert_eq!(empty.len(), 1);
            let e = *empty.values().next().unwrap();
            prop_assert!((total - e).abs() <= 1e-12 * (1.0 + e.abs()));
        }

        #[test]
        fn partitioned_sums_merge((t, vals) in arb_table(), split in 0usize..20) {
            let subset = Subset::new(vec![0]);
            let whole = margin_sum(&t, &vals, &subset).unwrap();
            let split = split.min(t.len());
            let mut merged: BTreeMap<MarginKey, f64> = BTreeMap::new();
            for part in [(0..split).collect::<Vec<_>>(), (split..t.len()).collect()] {
                if part.is_empty() { continue; }
                let sub = t.select(&part).unwrap();
                let sv: Vec<f64> = part.iter().map(|&p| vals[p]).collect();
                for (k, v) in margin_sum(&sub, &sv, &subset).unwrap() {
                    *merged.entry(k).or_insert(0.0) += v;
                }
            }
            prop_assert_eq!(whole.len(), merged.len());
            for (k, v) in whole {
                prop_assert!((merged[&k] - v).abs() <= 1e-12 * (1.0 + v.abs()));
            }
        }

        #[test]
        fn csv_round_trip((t, _) in arb_table()) {
            let mut buf = Vec::new();
            write_cells(&t, &mut buf).unwrap();
            let back = read_cells(buf.as_slice(), Some(t.spec())).unwrap();
            prop_assert_eq!(back.cells(), t.cells());
        }
    }
}
