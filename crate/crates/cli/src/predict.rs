use std::collections::BTreeMap;
use std::fs::File;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use hanova::preprocess::{load_variances, read_units, unit_shrinkage};
use hanova::table::fmt_f64;
use hanova::{CellIndex, HanovaModel};

use crate::echo::Echo;
use crate::{distinct, output};

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Model file written by `hanova fit`.
    #[arg(long)]
    model: PathBuf,
    /// Query rows with a column per factor (other columns are carried
    /// through). With --variances, a unit file instead.
    #[arg(long)]
    input: PathBuf,
    /// Output CSV (default: stdout).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Predict from this order of the hierarchy (default: the highest).
    #[arg(long)]
    order: Option<usize>,
    /// Variances sidecar from `hanova preprocess`; switches to shrinking
    /// the unit means in --input toward their predicted cell means.
    #[arg(long)]
    variances: Option<PathBuf>,
}

pub fn run(a: &PredictArgs, threads: usize) -> Result<()> {
    distinct(&[
        ("--model", Some(&a.model)),
        ("--input", Some(&a.input)),
        ("--output", a.output.as_deref()),
        ("--variances", a.variances.as_deref()),
    ])?;
    let model = HanovaModel::load(&a.model)
        .with_context(|| format!("reading model {}", a.model.display()))?;
    if let Some(k) = a.order {
        if k > model.maxk {
            bail!("--order {k} exceeds the model's maxk {}", model.maxk);
        }
    }
    let mut e = Echo::new("predict", threads);
    e.path("--model", &a.model).path("--input", &a.input);
    if let Some(o) = &a.output {
        e.path("--output", o);
    }
    e.maybe("--order", a.order);
    if let Some(v) = &a.variances {
        e.path("--variances", v);
    }
    e.print();
    match &a.variances {
        Some(v) => units(a, &model, v),
        None => queries(a, &model),
    }
}

fn queries(a: &PredictArgs, model: &HanovaModel) -> Result<()> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(&a.input)
        .with_context(|| format!("reading {}", a.input.display()))?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let columns: Vec<usize> = model
        .spec
        .names()
        .iter()
        .map(|name| {
            header
                .iter()
                .position(|h| h == name)
                .with_context(|| format!("query has no column `{name}`"))
        })
        .collect::<Result<_>>()?;

    let mut w = csv::Writer::from_writer(output(a.output.as_deref())?);
    let mut out_header = header.clone();
    out_header.extend(["prediction".into(), "error".into()]);
    w.write_record(&out_header)?;
    for record in rdr.records() {
        let record = record?;
        let mut row: Vec<String> = record.iter().map(str::to_owned).collect();
        row.resize(header.len(), String::new());
        let result = if record.len() != header.len() {
            Err(format!("expected {} fields, found {}", header.len(), record.len()))
        } else {
            let labels: Vec<&str> = columns.iter().map(|&c| &record[c]).collect();
            predict_labels(model, &labels, a.order).map_err(|e| e.to_string())
        };
        match result {
            Ok(v) => row.extend([fmt_f64(v), String::new()]),
            Err(msg) => row.extend([String::new(), msg]),
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn predict_labels(model: &HanovaModel, labels: &[&str], order: Option<usize>) -> hanova::Result<f64> {
    let coords = labels
        .iter()
        .enumerate()
        .map(|(f, l)| {
            model.spec.ordinal(f, l).ok_or_else(|| {
                hanova::HanovaError::Invalid(format!(
                    "unknown level `{l}` of factor {}",
                    model.spec.names()[f]
                ))
            })
        })
        .collect::<hanova::Result<Vec<u32>>>()?;
    model.predict(&CellIndex(coords), order)
}

fn units(a: &PredictArgs, model: &HanovaModel, variances: &std::path::Path) -> Result<()> {
    let uv = load_variances(variances)
        .with_context(|| format!("reading {}", variances.display()))?;
    let records = read_units(File::open(&a.input)?, None)
        .with_context(|| format!("reading {}", a.input.display()))?;
    let spec = records.spec();
    let positions: Vec<usize> = model
        .spec
        .names()
        .iter()
        .map(|name| {
            spec.factor_position(name)
                .with_context(|| format!("unit file has no column `{name}`"))
        })
        .collect::<Result<_>>()?;

    // one prediction per distinct cell; failures are reported per unit
    let mut cells: BTreeMap<CellIndex, std::result::Result<f64, String>> = BTreeMap::new();
    for u in records.units() {
        cells.entry(u.cell.clone()).or_insert_with(|| {
            let labels: Vec<&str> = positions
                .iter()
                .map(|&p| spec.label(p, u.cell.0[p]))
                .collect();
            predict_labels(model, &labels, a.order).map_err(|e| e.to_string())
        });
    }
    let shrunk = unit_shrinkage(&records, &uv, |c| Ok(*cells[c].as_ref().unwrap_or(&f64::NAN)))?;

    let mut w = csv::Writer::from_writer(output(a.output.as_deref())?);
    let mut header: Vec<String> = spec.names().to_vec();
    header.extend(["unit_id", "y", "n_reviews", "cell_estimate", "shrunk", "error"].map(String::from));
    w.write_record(&header)?;
    for (u, s) in records.units().iter().zip(shrunk) {
        let mut row: Vec<String> = (0..spec.m()).map(|f| spec.label(f, u.cell.0[f]).to_owned()).collect();
        row.extend([u.id.clone(), fmt_f64(u.y), fmt_f64(u.n)]);
        match &cells[&u.cell] {
            Ok(mu) => row.extend([fmt_f64(*mu), fmt_f64(s), String::new()]),
            Err(msg) => row.extend([String::new(), String::new(), msg.clone()]),
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
