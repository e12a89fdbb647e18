use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use hanova::eval::{simulate as sim_cells, simulate_units, UnitSimSpec};
use hanova::preprocess::{
    aggregate_cells, estimate_unit_variances, load_reviews, load_units, write_reviews,
    write_units, write_variances, UnitVariances,
};
use hanova::table::{fmt_f64, save_cells};

use crate::echo::Echo;
use crate::{create, distinct, with_suffix, SimArgs};

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    /// Unit file: factor columns, then `unit_id`, `y`, `n_reviews`.
    #[arg(long)]
    units: PathBuf,
    /// Raw ratings: `unit_id`, `rating`.
    #[arg(long)]
    reviews: Option<PathBuf>,
    /// Rating noise variance, if known.
    #[arg(long)]
    sigma_r2: Option<f64>,
    /// Unit variance, if known (requires --sigma-r2).
    #[arg(long)]
    sigma_u2: Option<f64>,
    /// Cell table to write; the variances go to the same path plus
    /// `.variances`.
    #[arg(long)]
    output: PathBuf,
}

pub fn preprocess(a: &PreprocessArgs, threads: usize) -> Result<()> {
    let sidecar = with_suffix(&a.output, ".variances");
    distinct(&[
        ("--units", Some(&a.units)),
        ("--reviews", a.reviews.as_deref()),
        ("--output", Some(&a.output)),
        ("the variances file", Some(&sidecar)),
    ])?;
    let mut units = load_units(&a.units, None).with_context(|| format!("reading {}", a.units.display()))?;
    if let Some(r) = &a.reviews {
        let reviews = load_reviews(r).with_context(|| format!("reading {}", r.display()))?;
        units = units.with_reviews(reviews)?;
    }
    let uv = match (a.sigma_u2, a.sigma_r2) {
        (Some(u), Some(r)) => UnitVariances::supplied(u, r)?,
        (Some(_), None) => bail!("--sigma-u2 needs --sigma-r2"),
        (None, r) => estimate_unit_variances(&units, r)?,
    };

    let mut e = Echo::new("preprocess", threads);
    e.path("--units", &a.units);
    if let Some(r) = &a.reviews {
        e.path("--reviews", r);
    }
    e.maybe("--sigma-r2", a.sigma_r2)
        .maybe("--sigma-u2", a.sigma_u2)
        .path("--output", &a.output)
        .print();

    let table = aggregate_cells(&units, &uv)?;
    save_cells(&table, &a.output)?;
    write_variances(&uv, create(&sidecar)?)?;
    eprintln!(
        "{} units in {} cells; sigma_u2 {} (raw {}), sigma_r2 {}, {}",
        units.units().len(),
        table.len(),
        fmt_f64(uv.sigma_u2),
        fmt_f64(uv.sigma_u2_raw),
        fmt_f64(uv.sigma_r2),
        uv.source
    );
    if uv.single_review_cells > 0 {
        eprintln!(
            "note: {} cells inform sigma_u2 only through single-review units",
            uv.single_review_cells
        );
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    sim: SimArgs,
    /// Which replicate stream of the seed to draw.
    #[arg(long, default_value_t = 0)]
    replicate: usize,
    /// Cell table (or, with --units, the unit file) to write.
    #[arg(long)]
    output: PathBuf,
    /// True means (default: the output path plus `.truth.csv`).
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Simulate units and ratings inside each observed cell instead.
    #[arg(long)]
    units: bool,
    /// Units per cell as `min-max`.
    #[arg(long, default_value = "1-6")]
    units_per_cell: String,
    /// Ratings per unit as `min-max`.
    #[arg(long, default_value = "1-15")]
    reviews_per_unit: String,
    #[arg(long, default_value_t = 0.5)]
    sigma_u: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_r: f64,
    /// Raw ratings file for --units (default: the output path plus
    /// `.reviews.csv`).
    #[arg(long)]
    reviews: Option<PathBuf>,
}

fn range(flag: &str, s: &str) -> Result<(usize, usize)> {
    let parsed = match s.split_once('-') {
        Some((a, b)) => a.trim().parse().ok().zip(b.trim().parse().ok()),
        None => s.trim().parse().ok().map(|v| (v, v)),
    };
    parsed.with_context(|| format!("{flag} must look like `1-6`, got `{s}`"))
}

pub fn simulate(a: &SimulateArgs, threads: usize) -> Result<()> {
    let truth = a.truth.clone().unwrap_or_else(|| with_suffix(&a.output, ".truth.csv"));
    let reviews = a.reviews.clone().unwrap_or_else(|| with_suffix(&a.output, ".reviews.csv"));
    distinct(&[
        ("--output", Some(&a.output)),
        ("--truth", Some(&truth)),
        ("--reviews", a.units.then_some(reviews.as_path())),
    ])?;
    let spec = a.sim.spec(a.replicate + 1)?;

    let mut e = Echo::new("simulate", threads);
    a.sim.echo(&mut e);
    e.opt("--replicate", a.replicate)
        .path("--output", &a.output)
        .path("--truth", &truth);
    if a.units {
        e.flag("--units", true)
            .opt("--units-per-cell", &a.units_per_cell)
            .opt("--reviews-per-unit", &a.reviews_per_unit)
            .opt("--sigma-u", a.sigma_u)
            .opt("--sigma-r", a.sigma_r)
            .path("--reviews", &reviews);
    }
    e.print();

    if !a.units {
        let inst = sim_cells(&spec, a.replicate)?;
        save_cells(&inst.table, &a.output)?;
        let table = &inst.table;
        let mut w = csv::Writer::from_writer(create(&truth)?);
        let mut header: Vec<String> = table.spec().names().to_vec();
        header.push("mu".into());
        header.extend((0..inst.true_effects.len()).map(|j| format!("effect_{j}")));
        w.write_record(&header)?;
        for (i, c) in table.cells().iter().enumerate() {
            let mut row: Vec<String> = c
                .index
                .0
                .iter()
                .enumerate()
                .map(|(f, &l)| table.spec().label(f, l).to_owned())
                .collect();
            row.push(fmt_f64(inst.true_mu[i]));
            row.extend(inst.true_effects.iter().map(|e| fmt_f64(e[i])));
            w.write_record(&row)?;
        }
        w.flush()?;
        return Ok(());
    }

    if !(a.sigma_u >= 0.0 && a.sigma_r >= 0.0 && a.sigma_u.is_finite() && a.sigma_r.is_finite()) {
        bail!("--sigma-u and --sigma-r must be finite and non-negative");
    }
    let unit_spec = UnitSimSpec {
        cells: spec,
        units_per_cell: range("--units-per-cell", &a.units_per_cell)?,
        reviews_per_unit: range("--reviews-per-unit", &a.reviews_per_unit)?,
        sigma_u: a.sigma_u,
        sigma_r: a.sigma_r,
    };
    let inst = simulate_units(&unit_spec, a.replicate)?;
    write_units(&inst.units, create(&a.output)?)?;
    write_reviews(inst.units.reviews(), create(&reviews)?)?;
    let spec = inst.units.spec();
    let mut w = csv::Writer::from_writer(create(&truth)?);
    let mut header: Vec<String> = spec.names().to_vec();
    header.extend(["unit_id".into(), "unit_mean".into(), "cell_mean".into()]);
    w.write_record(&header)?;
    let cell_mu: std::collections::BTreeMap<_, _> =
        inst.cell_index.iter().zip(&inst.true_cell_mu).collect();
    for (u, t) in inst.units.units().iter().zip(&inst.true_unit_means) {
        let mut row: Vec<String> = (0..spec.m()).map(|f| spec.label(f, u.cell.0[f]).to_owned()).collect();
        row.extend([u.id.clone(), fmt_f64(*t), fmt_f64(*cell_mu[&u.cell])]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
