use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hanova::table::load_cells;
use hanova::variance::{empirical_lambdas, VarianceOptions};

fn hanova(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hanova"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = hanova(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_owned()
}

fn simulate(dir: &Path, name: &str, extra: &[&str]) -> String {
    let out = p(dir, name);
    let mut args = vec!["simulate", "--output", &out];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

/// Rows of a CSV as string vectors, header first.
fn rows(path: &str) -> Vec<Vec<String>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_path(path).unwrap();
    r.records().map(|r| r.unwrap().iter().map(str::to_owned).collect()).collect()
}

/// Rows of one `# name` section of a fit report.
fn report_section(path: &str, name: &str) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    let body = text
        .split("# ")
        .find_map(|s| s.strip_prefix(&format!("{name}\n")))
        .unwrap_or_else(|| panic!("no section {name}"));
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(body.trim().as_bytes());
    r.records().map(|r| r.unwrap().iter().map(str::to_owned).collect()).collect()
}

fn f(s: &str) -> f64 {
    s.parse().unwrap()
}

fn config_line(out: &Output) -> Vec<String> {
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().find_map(|l| l.strip_prefix("config: ")).expect("config echo");
    // paths in these tests never need quoting
    line.split(' ').skip(1).map(str::to_owned).collect()
}

#[test]
fn infinite_penalties_predict_the_grand_mean() {
    let dir = tempfile::tempdir().unwrap();
    let cells = simulate(dir.path(), "c.csv", &["--levels", "4,3", "--sigmas", "1,1", "--rate", "0.6", "--weights", "ratio:4"]);
    let model = p(dir.path(), "m.csv");
    ok(&["fit", "--input", &cells, "--output", &model, "--lambda", "inf,inf"]);
    let table = load_cells(&cells, None).unwrap();
    let gm = hanova::table::weighted_grand_mean(&table);

    let query = p(dir.path(), "q.csv");
    // every combination of the observed labels, observed or not
    let spec = table.spec();
    let mut q = String::from("F1,F2\n");
    for a in spec.levels(0) {
        for b in spec.levels(1) {
            q += &format!("{a},{b}\n");
        }
    }
    fs::write(&query, q).unwrap();
    let pred = p(dir.path(), "pred.csv");
    ok(&["predict", "--model", &model, "--input", &query, "--output", &pred]);
    let out = rows(&pred);
    assert_eq!(out[0], ["F1", "F2", "prediction", "error"]);
    assert_eq!(out.len(), 1 + spec.levels(0).len() * spec.levels(1).len());
    assert!(out.len() - 1 > table.len());
    for r in &out[1..] {
        assert!((f(&r[2]) - gm).abs() < 1e-12, "{r:?} vs {gm}");
    }
}

#[test]
fn saturated_fit_reproduces_the_data() {
    let dir = tempfile::tempdir().unwrap();
    let cells = simulate(dir.path(), "c.csv", &["--levels", "3,4", "--sigmas", "1,1,1", "--seed", "5"]);
    let model = p(dir.path(), "m.csv");
    ok(&[
        "fit", "--input", &cells, "--output", &model, "--lambda", "0,0", "--maxk", "2", "--tol", "1e-13",
        "--max-sweeps", "10000",
    ]);
    let pred = p(dir.path(), "pred.csv");
    ok(&["predict", "--model", &model, "--input", &cells, "--output", &pred]);
    let out = rows(&pred);
    assert_eq!(out[0], ["F1", "F2", "y", "n", "prediction", "error"]);
    for r in &out[1..] {
        assert!((f(&r[4]) - f(&r[2])).abs() < 1e-9, "{r:?}");
    }
}

#[test]
fn empirical_mode_uses_the_library_penalties() {
    let dir = tempfile::tempdir().unwrap();
    let cells = simulate(dir.path(), "c.csv", &["--levels", "5,5,4", "--sigmas", "1.5,0.7,0.4", "--noise", "0.8"]);
    let model = p(dir.path(), "m.csv");
    ok(&["fit", "--input", &cells, "--output", &model, "--sigma2", "0.64", "--lambda-mode", "empirical"]);
    let table = load_cells(&cells, None).unwrap();
    let (_, _, expected) = empirical_lambdas(&table, 0.64, None, &VarianceOptions::default()).unwrap();
    let orders = report_section(&format!("{model}.report"), "orders");
    assert_eq!(orders[0][1], "lambda");
    for (row, l) in orders[1..].iter().zip(&expected) {
        assert_eq!(row[1], l.to_string());
    }
    let variance = report_section(&format!("{model}.report"), "variance");
    assert_eq!(variance.len(), 1 + 4);
}

#[test]
fn predictions_match_the_report_and_keep_row_order() {
    let dir = tempfile::tempdir().unwrap();
    let cells = simulate(dir.path(), "c.csv", &["--levels", "6,5,4", "--sigmas", "1,0.5,0.3", "--rate", "0.5", "--seed", "8"]);
    let model = p(dir.path(), "m.csv");
    ok(&["fit", "--input", &cells, "--output", &model, "--lambda", "1,2,inf"]);
    let fitted = report_section(&format!("{model}.report"), "fitted");

    // training cells, an unseen label, and a shuffled 1000-row query
    let query = p(dir.path(), "q.csv");
    let mut q = String::from("F3,id,F1,F2\n");
    let mut expected = Vec::new();
    for (i, r) in fitted[1..].iter().enumerate() {
        q += &format!("{},t{i},{},{}\n", r[2], r[0], r[1]);
        expected.push(Some(r[5].clone()));
    }
    q += "1,bad,7,1\n";
    expected.push(None);
    for i in 0..1000 {
        let (a, b, c) = ((i * 7) % 6 + 1, (i * 3) % 5 + 1, (i * 11) % 4 + 1);
        q += &format!("{c},r{i},{a},{b}\n");
    }
    fs::write(&query, q).unwrap();
    let out = ok(&["predict", "--model", &model, "--input", &query]);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let got: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(got.len(), fitted.len() - 1 + 1 + 1000);
    for (row, want) in got.iter().zip(&expected) {
        match want {
            Some(v) => {
                assert_eq!(&row[4], v.as_str());
                assert_eq!(&row[5], "");
            }
            None => {
                assert_eq!(&row[4], "");
                assert!(row[5].contains("unknown level `7`"), "{row:?}");
            }
        }
    }
    for (i, row) in got[expected.len()..].iter().enumerate() {
        assert_eq!(&row[1], format!("r{i}").as_str());
        assert!(!row[4].is_empty());
    }
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--levels", "5,4,3", "--sigmas", "1,0.5", "--rate", "0.5", "--weights", "ratio:10", "--seed", "17"];
    let a = simulate(dir.path(), "a.csv", &args);
    let b = simulate(dir.path(), "b.csv", &args);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read(format!("{a}.truth.csv")).unwrap(), fs::read(format!("{b}.truth.csv")).unwrap());
    let c = simulate(dir.path(), "c.csv", &[&args[..9], &["18"]].concat());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn lambda_shows_clamped_components_on_a_zero_table() {
    let dir = tempfile::tempdir().unwrap();
    let cells = p(dir.path(), "zero.csv");
    let mut s = String::from("A,B,y,n\n");
    for a in 0..3 {
        for b in 0..3 {
            s += &format!("a{a},b{b},0,1\n");
        }
    }
    fs::write(&cells, s).unwrap();
    let out = ok(&["lambda", "--input", &cells, "--sigma2", "1", "--csv"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().unwrap().clone();
    let clamped = header.iter().position(|h| h == "clamped").unwrap();
    let raw = header.iter().position(|h| h == "sigma2_raw").unwrap();
    let value = header.iter().position(|h| h == "sigma2").unwrap();
    let recs: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(recs.len(), 3);
    assert!(recs.iter().any(|r| &r[clamped] == "true" && f(&r[raw]) < 0.0));
    assert!(recs.iter().all(|r| f(&r[value]) == 0.0));

    // the aligned table carries the same flags
    let out = ok(&["lambda", "--input", &cells, "--sigma2", "1"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("clamped") && text.contains("true"));
}

#[test]
fn unit_pipeline_beats_raw_unit_means() {
    let dir = tempfile::tempdir().unwrap();
    let units = p(dir.path(), "units.csv");
    ok(&[
        "simulate", "--units", "--levels", "6,5", "--sigmas", "1,0.5", "--rate", "0.9", "--seed", "4",
        "--units-per-cell", "2-6", "--reviews-per-unit", "1-12", "--sigma-u", "0.5", "--sigma-r", "1.5",
        "--output", &units,
    ]);
    let cells = p(dir.path(), "cells.csv");
    ok(&["preprocess", "--units", &units, "--reviews", &format!("{units}.reviews.csv"), "--output", &cells]);
    let side = format!("{cells}.variances");
    assert!(fs::read_to_string(&side).unwrap().contains("sigma_u2"));

    // σ² = 1 is implied by the sidecar
    let model = p(dir.path(), "m.csv");
    let fit = ok(&["fit", "--input", &cells, "--output", &model]);
    assert!(config_line(&fit).join(" ").contains("--sigma2 1"));
    let shrunk = p(dir.path(), "shrunk.csv");
    ok(&["predict", "--model", &model, "--input", &units, "--variances", &side, "--output", &shrunk]);

    let truth = rows(&format!("{units}.truth.csv"));
    let out = rows(&shrunk);
    let col = |rows: &[Vec<String>], name: &str| rows[0].iter().position(|h| h == name).unwrap();
    let (ys, ss, ts) = (col(&out, "y"), col(&out, "shrunk"), col(&truth, "unit_mean"));
    let (mut raw, mut reg) = (0.0, 0.0);
    for (o, t) in out[1..].iter().zip(&truth[1..]) {
        assert_eq!(o[2], t[2]);
        raw += (f(&o[ys]) - f(&t[ts])).powi(2);
        reg += (f(&o[ss]) - f(&t[ts])).powi(2);
    }
    assert!(reg < raw, "{reg} vs {raw}");
}

#[test]
fn replaying_the_config_reproduces_the_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cells = simulate(dir.path(), "c.csv", &["--levels", "5,4,3", "--sigmas", "1,0.5,0.3", "--rate", "0.7", "--seed", "2"]);
    let model = p(dir.path(), "m.csv");
    let first = ok(&["fit", "--input", &cells, "--output", &model, "--sigma2", "1", "--lambda-mode", "cv", "--folds", "4"]);
    let report = format!("{model}.report");
    let (m1, r1) = (fs::read(&model).unwrap(), fs::read(&report).unwrap());
    fs::remove_file(&model).unwrap();
    fs::remove_file(&report).unwrap();

    let args = config_line(&first);
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let second = ok(&argv);
    assert_eq!(fs::read(&model).unwrap(), m1);
    assert_eq!(fs::read(&report).unwrap(), r1);
    assert_eq!(config_line(&second), args);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cells = simulate(dir.path(), "c.csv", &["--levels", "6,5", "--sigmas", "0.5,0.3", "--noise", "1.5", "--seed", "9"]);
    let run = |threads: &str| {
        ok(&["cv", "--input", &cells, "--sigma2", "2.25", "--threads", threads, "--seed", "1"]).stdout
    };
    assert_eq!(run("1"), run("4"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = p(dir.path(), "bad.csv");
    fs::write(&bad, "A,y,n\na,1,0\n").unwrap();
    let out = hanova(&["fit", "--input", &bad, "--output", &p(dir.path(), "m.csv"), "--lambda", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let cells = simulate(dir.path(), "c.csv", &["--levels", "6,5,4", "--sigmas", "1,0.5,0.3", "--rate", "0.4", "--seed", "3"]);
    let model = p(dir.path(), "m.csv");
    let common = ["fit", "--input", &cells, "--output", &model, "--lambda", "0.1,0.1,0.1", "--max-sweeps", "1"];
    let loose = hanova(&common);
    assert_eq!(loose.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&loose.stderr).contains("warning"));
    let strict = hanova(&[&common[..], &["--strict"]].concat());
    assert_eq!(strict.status.code(), Some(3));
    assert!(Path::new(&model).exists());

    // conflicting or missing penalty sources
    let empirical = ["fit", "--input", &cells, "--output", &model, "--lambda-mode", "empirical", "--lambda", "1,1,1", "--sigma2", "1"];
    assert_eq!(hanova(&empirical).status.code(), Some(2));
    assert_eq!(hanova(&["fit", "--input", &cells, "--output", &model]).status.code(), Some(2));
    assert_eq!(hanova(&["fit", "--input", &cells, "--output", &cells, "--lambda", "1,1,1"]).status.code(), Some(2));
    assert_eq!(hanova(&["fit", "--input", &cells, "--output", &model, "--lambda", "1,1"]).status.code(), Some(2));

    let corrupt = p(dir.path(), "corrupt.csv");
    fs::write(&corrupt, "not a model\n").unwrap();
    let out = hanova(&["predict", "--model", &corrupt, "--input", &cells]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn experiment_writes_per_replicate_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path(), "exp.csv");
    let summary = p(dir.path(), "sum.csv");
    ok(&[
        "experiment", "--levels", "4,4,3", "--sigmas", "1,0.5", "--noise", "0.5", "--replicates", "3",
        "--methods", "ols-2,hanova-oracle-2,hanova-empirical-2,bayes-oracle", "--lambda-cap", "5",
        "--output", &out, "--summary", &summary,
    ]);
    let r = rows(&out);
    assert_eq!(r[0], ["replicate", "method", "rmse"]);
    assert_eq!(r.len(), 1 + 3 * 4);
    let s = rows(&summary);
    assert_eq!(s.len(), 1 + 4 + 1);
    assert_eq!(s[5][0], "bayes-risk");
}

#[test]
fn hidden_oracle_agrees_with_the_fit() {
    let dir = tempfile::tempdir().unwrap();
    let cells = simulate(dir.path(), "c.csv", &["--levels", "3,3,2", "--sigmas", "2,1,0.5,0.5"]);
    let out = ok(&["oracle", "--input", &cells, "--sigma2", "1", "--components", "4,1,0.25,0.25"]);
    let err = String::from_utf8_lossy(&out.stderr);
    let diff: f64 = err
        .lines()
        .find_map(|l| l.strip_prefix("max |hanova - posterior| = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(diff < 1e-6, "{diff}");
    let help = String::from_utf8(ok(&["--help"]).stdout).unwrap();
    assert!(!help.contains("oracle"));
}
