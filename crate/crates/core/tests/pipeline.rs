use hanova::eval::experiment::{run_experiment, ExperimentOptions, Method};
use hanova::eval::{rmse, simulate, simulate_units, SimSpec, UnitSimSpec, WeightScheme};
use hanova::preprocess::{
    aggregate_cells, estimate_unit_variances, load_reviews, load_units, load_variances,
    unit_shrinkage, write_reviews, write_units, write_variances,
};
use hanova::table::{load_cells, save_cells};
use hanova::variance::{empirical_lambdas, VarianceOptions};
use hanova::{fit_hanova, CellIndex, FitOptions, HanovaModel};

#[test]
fn cells_to_model_to_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SimSpec::new(vec![6, 5, 4], vec![1.0, 0.6, 0.3], 0.5);
    spec.weights = WeightScheme::RatioBounded(5.0);
    spec.observation_rate = 0.5;
    spec.seed = 11;
    let inst = simulate(&spec, 0).unwrap();
    let cells = dir.path().join("cells.csv");
    save_cells(&inst.table, &cells).unwrap();

    let table = load_cells(&cells, Some(inst.table.spec())).unwrap();
    assert_eq!(table, inst.table);
    let (_, _, lambdas) =
        empirical_lambdas(&table, spec.sigma2(), None, &VarianceOptions::default()).unwrap();
    let fit = fit_hanova(&table, &lambdas, 3, &FitOptions::default()).unwrap();
    assert!(fit.converged());

    let model_path = dir.path().join("model.csv");
    HanovaModel::from_fit(&fit).save(&model_path).unwrap();
    let model = HanovaModel::load(&model_path).unwrap();
    for coords in [[0u32, 0, 0], [5, 4, 3], [2, 1, 0], [3, 3, 3]] {
        let idx = CellIndex(coords.to_vec());
        for k in 0..=3 {
            assert_eq!(model.predict(&idx, Some(k)).unwrap(), fit.predict(&idx, Some(k)).unwrap());
        }
        let labels: Vec<&str> = coords
            .iter()
            .enumerate()
            .map(|(f, &c)| table.spec().label(f, c))
            .collect();
        assert_eq!(model.predict_labels(&labels).unwrap(), fit.predict(&idx, None).unwrap());
    }

    // shrinkage beats the raw cell means against the truth on observed cells
    let truth: Vec<f64> = table
        .cells()
        .iter()
        .map(|c| inst.true_mu[inst.table.position(&c.index).unwrap()])
        .collect();
    let raw = rmse(&table.responses(), &truth, None).unwrap();
    let shrunk = rmse(fit.fitted(), &truth, None).unwrap();
    assert!(shrunk < raw, "{shrunk} vs {raw}");
}

#[test]
fn units_through_files_and_back_to_units() {
    let dir = tempfile::tempdir().unwrap();
    let mut cells = SimSpec::new(vec![5, 4], vec![1.0, 0.5], 0.0);
    cells.observation_rate = 0.9;
    cells.seed = 21;
    let spec = UnitSimSpec {
        cells,
        units_per_cell: (2, 6),
        reviews_per_unit: (1, 12),
        sigma_u: 0.6,
        sigma_r: 1.2,
    };
    let inst = simulate_units(&spec, 0).unwrap();
    let units_path = dir.path().join("units.csv");
    write_units(&inst.units, std::fs::File::create(&units_path).unwrap()).unwrap();
    let reviews_path = dir.path().join("reviews.csv");
    write_reviews(inst.units.reviews(), std::fs::File::create(&reviews_path).unwrap()).unwrap();
    let units = load_units(&units_path, None)
        .unwrap()
        .with_reviews(load_reviews(&reviews_path).unwrap())
        .unwrap();
    assert_eq!(units.units().len(), inst.units.units().len());

    let uv = estimate_unit_variances(&units, None).unwrap();
    let side = dir.path().join("cells.csv.variances");
    write_variances(&uv, std::fs::File::create(&side).unwrap()).unwrap();
    let uv = load_variances(&side).unwrap();

    let table = aggregate_cells(&units, &uv).unwrap();
    let cells_path = dir.path().join("cells.csv");
    save_cells(&table, &cells_path).unwrap();
    let table = load_cells(&cells_path, Some(units.spec())).unwrap();

    let (_, _, lambdas) = empirical_lambdas(&table, 1.0, None, &VarianceOptions::default()).unwrap();
    let fit = fit_hanova(&table, &lambdas, 2, &FitOptions::default()).unwrap();
    let shrunk = unit_shrinkage(&units, &uv, |c| fit.predict(c, None)).unwrap();
    let raw: Vec<f64> = units.units().iter().map(|u| u.y).collect();
    let truth = &inst.true_unit_means;
    assert!(rmse(&shrunk, truth, None).unwrap() < rmse(&raw, truth, None).unwrap());
}

#[test]
fn experiments_are_reproducible() {
    let mut spec = SimSpec::new(vec![4, 4, 3], vec![1.0, 0.5, 0.2], 0.7);
    spec.replicates = 4;
    spec.seed = 99;
    let methods = [
        Method::Ols { order: 1 },
        Method::HanovaOracle { order: 2 },
        Method::HanovaEmpirical { order: 3, cap: Some(5.0) },
        Method::BayesOracle,
    ];
    let a = run_experiment(&spec, &methods, &ExperimentOptions::default()).unwrap();
    let b = run_experiment(&spec, &methods, &ExperimentOptions::default()).unwrap();
    assert_eq!(a.rmse, b.rmse);
    for r in &a.rmse {
        assert!(r.iter().all(|v| v.is_finite() && *v >= 0.0));
    }
    spec.seed = 100;
    let c = run_experiment(&spec, &methods, &ExperimentOptions::default()).unwrap();
    assert_ne!(a.rmse, c.rmse);
}
