use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use clr_bench::io::{read_csv, write_dataset, write_json, ModelFile, Provenance, TruthFile};
use clr_bench::sweep::{Aggregate, ResultRecord};
use clr_core::em::{Algorithm, EmConfig};
use clr_core::metrics::acc;
use clr_core::{generate_problem, ClrModel, ProblemSpec};
use nalgebra::{DMatrix, DVector};
use serde_json::Value;

fn clr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clr")).args(args).output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TWO_CELLS: &str = r#"
base_seed = 11
problems_per_cell = 3
[grid]
k = [2]
p = [3, 4]
n_k = [30]
dp = [0.2]
eta = [0.1]
"#;

fn write_toy(dir: &Path, eta: f64) -> (std::path::PathBuf, std::path::PathBuf) {
    let spec = ProblemSpec::balanced(2, 2, 60, 0.2, eta, 5);
    let (ds, gt) = generate_problem(&spec).unwrap();
    let data = dir.join("toy.csv");
    let truth = dir.join("toy.truth.json");
    write_dataset(&data, &ds).unwrap();
    write_json(&truth, &TruthFile::new(&spec, &gt)).unwrap();
    (data, truth)
}

fn sorted_listing(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

#[test]
fn gen_writes_one_dataset_per_replicate_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("g.toml");
    fs::write(&cfg, TWO_CELLS).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&clr(&["gen", "--config", s(&cfg), "--out-dir", s(&a)]));
    ok(&clr(&["gen", "--config", s(&cfg), "--out-dir", s(&b)]));
    let files = sorted_listing(&a);
    let csvs: Vec<&String> = files.iter().filter(|f| f.ends_with("_r0.csv") || f.ends_with("_r1.csv") || f.ends_with("_r2.csv")).collect();
    assert_eq!(csvs.len(), 6);
    let mut seeds: Vec<u64> = files
        .iter()
        .filter(|f| f.ends_with(".truth.json"))
        .map(|f| {
            let t: Value = serde_json::from_str(&fs::read_to_string(a.join(f)).unwrap()).unwrap();
            t["spec"]["seed"].as_u64().unwrap()
        })
        .collect();
    seeds.sort();
    seeds.dedup();
    assert_eq!(seeds.len(), 6);
    assert_eq!(files, sorted_listing(&b));
    for f in &files {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn gen_records_infeasible_cell_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("g.toml");
    fs::write(&cfg, "problems_per_cell = 2\n[grid]\nk = [2, 5]\np = [3]\nn_k = [20]\ndp = [0.2]\neta = [0.1]").unwrap();
    ok(&clr(&["gen", "--config", s(&cfg), "--out-dir", s(dir.path())]));
    let errors = fs::read_to_string(dir.path().join("gen_errors.csv")).unwrap();
    assert_eq!(errors.lines().count(), 3);
    assert!(errors.contains("k5_p3"));
    let csvs = sorted_listing(dir.path()).into_iter().filter(|f| f.starts_with("k2_") && f.ends_with(".csv")).count();
    assert_eq!(csvs, 2);
}

#[test]
fn fit_zero_noise_toy_recovers_truth() {
    let dir = tempfile::tempdir().unwrap();
    let (data, truth) = write_toy(dir.path(), 0.0);
    let out_dir = dir.path().join("fit");
    ok(&clr(&["fit", "--data", s(&data), "--truth", s(&truth), "--seed", "3", "--out-dir", s(&out_dir)]));
    let rec: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("fit.json")).unwrap()).unwrap();
    assert_eq!(rec["k"], 2);
    assert!((rec["acc"].as_f64().unwrap() - 1.0).abs() < 1e-6, "{rec}");
    assert!(out_dir.join("model.json").exists());
    assert!(out_dir.join("density.json").exists());
}

#[test]
fn fit_missing_file_exits_with_two_naming_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = clr(&["fit", "--data", s(&missing), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn fit_same_seed_gives_identical_model_file() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = write_toy(dir.path(), 0.2);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&clr(&["fit", "--data", s(&data), "--k", "2", "--restarts", "2", "--seed", "9", "--out-dir", s(d)]));
    }
    assert_eq!(fs::read(a.join("model.json")).unwrap(), fs::read(b.join("model.json")).unwrap());
    let m: Value = serde_json::from_str(&fs::read_to_string(a.join("model.json")).unwrap()).unwrap();
    assert_eq!(m["beta"].as_array().unwrap().len(), 2);
    assert_eq!(m["beta"][0].as_array().unwrap().len(), 3);
    assert_eq!(m["provenance"]["seed"], 9);
    assert!(m.get("weights").is_none());
}

#[test]
fn fit_failure_is_flagged_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = write_toy(dir.path(), 0.2);
    let out = clr(&["fit", "--data", s(&data), "--k", "500", "--out-dir", s(dir.path())]);
    ok(&out);
    let rec: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("fit.json")).unwrap()).unwrap();
    assert_eq!(rec["failed"], true);
    assert!(rec["error"].as_str().unwrap().contains("K=500"));
}

const SWEEP: &str = r#"
base_seed = 4
problems_per_cell = 3
restarts = [0, 1]
[grid]
k = [2]
p = [2, 3]
n_k = [40]
dp = [0.2]
eta = [0.2]
[em]
max_loop = 80
"#;

#[test]
fn bench_is_reproducible_and_aggregates_match_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.toml");
    fs::write(&cfg, SWEEP).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&clr(&["bench", "--config", s(&cfg), "--out-dir", s(&a), "--workers", "1"]));
    ok(&clr(&["bench", "--config", s(&cfg), "--out-dir", s(&b), "--workers", "3"]));

    let strip = |mut v: Vec<ResultRecord>| {
        v.iter_mut().for_each(|r| r.wall_time = 0.0);
        v
    };
    let ra: Vec<ResultRecord> = read_csv(&a.join("results.csv")).unwrap();
    let rb: Vec<ResultRecord> = read_csv(&b.join("results.csv")).unwrap();
    // 2 cells x 3 replicates x 2 algorithms x 2 restart budgets
    assert_eq!(ra.len(), 24);
    assert_eq!(strip(ra.clone()), strip(rb));
    assert_eq!(fs::read(a.join("aggregates.csv")).unwrap(), fs::read(b.join("aggregates.csv")).unwrap());

    let aggs: Vec<Aggregate> = read_csv(&a.join("aggregates.csv")).unwrap();
    assert_eq!(aggs.len(), 8);
    for g in &aggs {
        let accs: Vec<f64> = ra
            .iter()
            .filter(|r| r.cell_id == g.cell_id && r.algorithm == g.algorithm && r.restarts == g.restarts)
            .filter_map(|r| r.acc)
            .collect();
        assert_eq!(accs.len(), g.n);
        let m = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((m - g.mean_acc.unwrap()).abs() < 1e-12);
        let mut sorted = accs.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(g.median_acc.unwrap(), sorted[1]);
        assert_eq!(g.min_acc.unwrap(), sorted[0]);
        assert_eq!(g.max_acc.unwrap(), sorted[2]);
    }
    let plots = sorted_listing(&a.join("plots"));
    assert_eq!(plots.len(), 1);
    let plot = fs::read_to_string(a.join("plots").join(&plots[0])).unwrap();
    // header + 4 series x 2 p values
    assert_eq!(plot.lines().count(), 9);
    assert!(plot.starts_with("series,p,"));
}

#[test]
fn bench_empty_grid_writes_empty_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.toml");
    fs::write(&cfg, "[grid]\nk = []\np = [3]\nn_k = [10]\ndp = [0.2]\neta = [0.2]").unwrap();
    ok(&clr(&["bench", "--config", s(&cfg), "--out-dir", s(dir.path())]));
    assert_eq!(fs::read_to_string(dir.path().join("results.csv")).unwrap().lines().count(), 1);
    assert_eq!(fs::read_to_string(dir.path().join("aggregates.csv")).unwrap().lines().count(), 1);
}

#[test]
fn bench_unwritable_output_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.toml");
    fs::write(&cfg, "[grid]\nk = []").unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = clr(&["bench", "--config", s(&cfg), "--out-dir", s(&blocker.join("sub"))]);
    assert_eq!(out.status.code(), Some(2));
}

fn write_model(path: &Path, beta: DMatrix<f64>, sigma: Vec<f64>) {
    let k = beta.nrows();
    let model = ClrModel {
        beta,
        sigma: DVector::from_vec(sigma),
        weights: DMatrix::zeros(0, k),
        mix: DVector::from_element(k, 1.0 / k as f64),
    };
    let prov = Provenance {
        algorithm: Algorithm::Em,
        seed: 0,
        restarts: 0,
        config_hash: String::new(),
    };
    write_json(path, &ModelFile::new(&model, prov, false)).unwrap();
}

#[test]
fn metrics_identical_clusters_have_zero_resolvability() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = write_toy(dir.path(), 0.2);
    let model = dir.path().join("m.json");
    write_model(&model, DMatrix::from_row_slice(2, 3, &[0.1, 1.0, 0.5, 0.1, 1.0, 0.5]), vec![0.3, 0.3]);
    let out = clr(&["metrics", "--model", s(&model), "--data", s(&data)]);
    ok(&out);
    let rep: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(rep["r_global"].as_f64().unwrap().abs() < 1e-12);
    assert_eq!(rep["r_pairwise"].as_array().unwrap().len(), 1);
    assert!(rep.get("acc").is_none());
}

#[test]
fn metrics_with_truth_reports_acc() {
    let dir = tempfile::tempdir().unwrap();
    let (data, truth) = write_toy(dir.path(), 0.2);
    let (_, gt) = TruthFile::load(&truth).unwrap();
    let model = dir.path().join("m.json");
    write_model(&model, gt.beta.clone(), gt.sigma.iter().copied().collect());
    let report = dir.path().join("r.json");
    ok(&clr(&["metrics", "--model", s(&model), "--data", s(&data), "--truth", s(&truth), "--out", s(&report)]));
    let rep: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep["acc"].as_f64().unwrap(), acc(&gt.beta, &gt.beta).unwrap());
    assert!(rep["rmse_weighted"].as_f64().unwrap() <= rep["rmse_coerced"].as_f64().unwrap() + 1e-9);
}

#[test]
fn metrics_shape_mismatch_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = write_toy(dir.path(), 0.2);
    let model = dir.path().join("m.json");
    write_model(&model, DMatrix::from_element(2, 5, 0.5), vec![0.3, 0.3]);
    let out = clr(&["metrics", "--model", s(&model), "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn predict_emits_every_cluster_column() {
    let dir = tempfile::tempdir().unwrap();
    let (data, truth) = write_toy(dir.path(), 0.1);
    let fit_dir = dir.path().join("fit");
    ok(&clr(&["fit", "--data", s(&data), "--truth", s(&truth), "--algorithm", "em", "--out-dir", s(&fit_dir)]));
    let x = dir.path().join("x.csv");
    fs::write(&x, "x1,x2\n-2,0.5\n0,0\n1.5,-1\n").unwrap();
    let out_csv = dir.path().join("pred.csv");
    ok(&clr(&[
        "predict",
        "--model",
        s(&fit_dir.join("model.json")),
        "--density",
        s(&fit_dir.join("density.json")),
        "--x",
        s(&x),
        "--out",
        s(&out_csv),
    ]));
    let text = fs::read_to_string(&out_csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "x1,x2,yhat_1,yhat_2,prob_1,prob_2,xp,coerced,weighted,underflow"
    );
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').take(9).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert!((r[4] + r[5] - 1.0).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&r[6]));
        let w = r[4] * r[2] + r[5] * r[3];
        assert!((w - r[8]).abs() < 1e-9);
    }

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "x1\n1\n").unwrap();
    let out = clr(&[
        "predict",
        "--model",
        s(&fit_dir.join("model.json")),
        "--density",
        s(&fit_dir.join("density.json")),
        "--x",
        s(&bad),
        "--out",
        s(&out_csv),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn fit_reads_engine_settings_file() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = write_toy(dir.path(), 0.2);
    let cfg = dir.path().join("em.toml");
    fs::write(&cfg, "k = 3\nmax_loop = 5\ninit = \"random\"").unwrap();
    ok(&clr(&["fit", "--data", s(&data), "--config", s(&cfg), "--out-dir", s(dir.path())]));
    let rec: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("fit.json")).unwrap()).unwrap();
    assert_eq!(rec["k"], 3);
    assert!(rec["iterations"].as_u64().unwrap() <= 5);
    let expected = clr_bench::io::config_hash(&EmConfig {
        k: 3,
        max_loop: 5,
        init: clr_core::em::InitMethod::Random,
        ..Default::default()
    });
    assert_eq!(rec["config_hash"].as_str().unwrap(), expected);
}
