//! Saved models: coefficients plus enough metadata to predict anywhere.
//!
//! The file is CSV. Rows whose first field starts with `#` form the header
//! block; after it comes a `order,subset,levels,value` header and one row per
//! stored coefficient, with subsets and level tuples joined by `+`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{invalid, HanovaError, Result};
use crate::solver::{predict_with, CoefficientSet, HanovaFit, Penalty};
use crate::table::{fmt_f64, parse_f64, CellIndex, FactorSpec, Subset};

const MAGIC: &str = "#hanova-model";
const VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq)]
pub struct HanovaModel {
    pub spec: FactorSpec,
    pub grand_mean: f64,
    pub maxk: usize,
    pub lambdas: Vec<Penalty>,
    pub coefficients: Vec<CoefficientSet>,
}

impl HanovaModel {
    pub fn from_fit(fit: &HanovaFit) -> Self {
        Self {
            spec: fit.spec.clone(),
            grand_mean: fit.grand_mean,
            maxk: fit.maxk,
            lambdas: fit.lambdas.clone(),
            coefficients: fit.order_fits.iter().map(|f| f.coefficients.clone()).collect(),
        }
    }

    pub fn predict(&self, index: &CellIndex, order: Option<usize>) -> Result<f64> {
        let sets: Vec<&CoefficientSet> = self.coefficients.iter().collect();
        predict_with(
            &self.spec,
            self.grand_mean,
            &sets,
            index,
            order.unwrap_or(self.maxk),
        )
    }

    /// Prediction at a cell given by level labels, one per factor.
    pub fn predict_labels<S: AsRef<str>>(&self, labels: &[S]) -> Result<f64> {
        if labels.len() != self.spec.m() {
            return invalid(format!(
                "expected {} labels, got {}",
                self.spec.m(),
                labels.len()
            ));
        }
        let coords = labels
            .iter()
            .enumerate()
            .map(|(f, l)| {
                self.spec.ordinal(f, l.as_ref()).ok_or_else(|| {
                    HanovaError::Invalid(format!(
                        "unknown level `{}` of factor {}",
                        l.as_ref(),
                        self.spec.names()[f]
                    ))
                })
            })
            .collect::<Result<Vec<u32>>>()?;
        self.predict(&CellIndex(coords), None)
    }

    pub fn write<W: Write>(&self, writer: W) -> Result<()> {
        let spec = &self.spec;
        for f in 0..spec.m() {
            let bad = std::iter::once(spec.names()[f].as_str())
                .chain(spec.levels(f).iter().map(String::as_str))
                .find(|s| s.contains('+'));
            if let Some(bad) = bad {
                return invalid(format!("`{bad}` contains `+`, which model files reserve"));
            }
        }
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(writer);
        w.write_record([MAGIC, VERSION])?;
        w.write_record(["#maxk".to_string(), self.maxk.to_string()])?;
        w.write_record(["#grand_mean".to_string(), fmt_f64(self.grand_mean)])?;
        let mut row = vec!["#lambda".to_string()];
        row.extend(self.lambdas.iter().map(Penalty::to_string));
        w.write_record(&row)?;
        for f in 0..spec.m() {
            let mut row = vec!["#factor".to_string(), spec.names()[f].clone()];
            row.extend(spec.levels(f).iter().cloned());
            w.write_record(&row)?;
        }
        w.write_record(["order", "subset", "levels", "value"])?;
        for set in &self.coefficients {
            for block in set.blocks() {
                let f = block.subset().factors();
                let subset = f
                    .iter()
                    .map(|&i| spec.names()[i].as_str())
                    .collect::<Vec<_>>()
                    .join("+");
                for (levels, value) in block.entries() {
                    let labels = levels
                        .iter()
                        .zip(f)
                        .map(|(&l, &i)| spec.label(i, l))
                        .collect::<Vec<_>>()
                        .join("+");
                    w.write_record([
                        set.order().to_string(),
                        subset.clone(),
                        labels,
                        fmt_f64(value),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(reader);
        let mut maxk = None;
        let mut grand_mean = None;
        let mut lambdas = None;
        let mut names = Vec::new();
        let mut levels = Vec::new();
        let mut spec: Option<FactorSpec> = None;
        let mut entries: Vec<BTreeMap<Subset, BTreeMap<Vec<u32>, f64>>> = Vec::new();
        let mut seen_magic = false;

        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = rec.position().map_or(i as u64 + 1, |p| p.line());
            let bad = |msg: String| HanovaError::Parse { line, msg };
            let tag = rec.get(0).unwrap_or("");
            if !seen_magic {
                if tag != MAGIC || rec.get(1) != Some(VERSION) {
                    return Err(bad("not a model file (missing `#hanova-model,1`)".into()));
                }
                seen_magic = true;
                continue;
            }
            if tag.starts_with('#') {
                if spec.is_some() {
                    return Err(bad(format!("header row `{tag}` after the coefficients")));
                }
                let fields: Vec<&str> = rec.iter().skip(1).collect();
                match tag {
                    "#maxk" => {
                        let v = fields.first().and_then(|s| s.parse::<usize>().ok());
                        maxk = Some(v.ok_or_else(|| bad("bad maxk".into()))?);
                    }
                    "#grand_mean" => {
                        let v = fields.first().copied().unwrap_or("");
                        grand_mean = Some(parse_f64(v, "grand mean", line)?);
                    }
                    "#lambda" => {
                        lambdas = Some(
                            fields
                                .iter()
                                .map(|s| s.parse::<Penalty>())
                                .collect::<Result<Vec<_>>>()
                                .map_err(|e| bad(e.to_string()))?,
                        );
                    }
                    "#factor" => {
                        let (name, labels) = fields
                            .split_first()
                            .ok_or_else(|| bad("factor row without a name".into()))?;
                        names.push(name.to_string());
                        levels.push(labels.iter().map(|s| s.to_string()).collect());
                    }
                    other => return Err(bad(format!("unknown header row `{other}`"))),
                }
                continue;
            }
            if spec.is_none() {
                if rec.iter().collect::<Vec<_>>() != ["order", "subset", "levels", "value"] {
                    return Err(bad("expected the `order,subset,levels,value` header".into()));
                }
                let s = FactorSpec::new(std::mem::take(&mut names), std::mem::take(&mut levels))
                    .map_err(|e| bad(e.to_string()))?;
                let k = maxk.ok_or_else(|| bad("missing #maxk".into()))?;
                if k == 0 || k > s.m() {
                    return Err(bad(format!("maxk {k} out of range for {} factors", s.m())));
                }
                entries = vec![BTreeMap::new(); k];
                spec = Some(s);
                continue;
            }
            let s = spec.as_ref().expect("spec is set above");
            if rec.len() != 4 {
                return Err(bad(format!("expected 4 fields, found {}", rec.len())));
            }
            let order: usize = rec[0]
                .parse()
                .map_err(|_| bad(format!("bad order `{}`", &rec[0])))?;
            if order == 0 || order > entries.len() {
                return Err(bad(format!("order {order} out of range")));
            }
            let factors = rec[1]
                .split('+')
                .map(|n| {
                    s.factor_position(n)
                        .ok_or_else(|| bad(format!("unknown factor `{n}`")))
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            if factors.len() != order || factors.windows(2).any(|w| w[0] >= w[1]) {
                return Err(bad(format!("subset `{}` is not a valid order-{order} subset", &rec[1])));
            }
            let labels: Vec<&str> = rec[2].split('+').collect();
            if labels.len() != order {
                return Err(bad(format!("level tuple `{}` has the wrong length", &rec[2])));
            }
            let lv = labels
                .iter()
                .zip(&factors)
                .map(|(l, &f)| {
                    s.ordinal(f, l)
                        .ok_or_else(|| bad(format!("unknown level `{l}`")))
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let value = parse_f64(&rec[3], "coefficient", line)?;
            let prev = entries[order - 1]
                .entry(Subset::new(factors))
                .or_default()
                .insert(lv, value);
            if prev.is_some() {
                return Err(bad("duplicate coefficient".into()));
            }
        }

        let spec = spec.ok_or_else(|| HanovaError::Invalid("model file has no coefficients header".into()))?;
        let maxk = entries.len();
        let lambdas = lambdas.ok_or_else(|| HanovaError::Invalid("model file has no #lambda row".into()))?;
        if lambdas.len() != maxk {
            return invalid(format!("{} penalties for maxk = {maxk}", lambdas.len()));
        }
        let grand_mean =
            grand_mean.ok_or_else(|| HanovaError::Invalid("model file has no #grand_mean row".into()))?;
        let coefficients = entries
            .into_iter()
            .enumerate()
            .map(|(i, e)| CoefficientSet::from_entries(&spec, i + 1, e))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec,
            grand_mean,
            maxk,
            lambdas,
            coefficients,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}
