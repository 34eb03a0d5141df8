//! Subcommand bodies, callable without the argument parser.

use std::path::{Path, PathBuf};

use clr_core::em::{fit, Algorithm, EmConfig};
use clr_core::metrics::{acc, resolvability_report, rmse, RmseMode};
use clr_core::predict::{fit_density, predict_rows};
use clr_core::regression::{residuals, reweight};
use clr_core::{generate_problem, ClrModel, Dataset};
use serde::{Deserialize, Serialize};

use crate::config::SweepConfig;
use crate::error::{BenchError, Result};
use crate::io::{self, config_hash, ModelFile, Provenance, TruthFile};
use crate::sweep::{aggregate, fit_metrics, plot_panels, run_sweep, ResultRecord, AGGREGATE_HEADER, PLOT_HEADER, RESULT_HEADER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenError {
    pub cell_id: String,
    pub replicate: usize,
    pub error: String,
}

#[derive(Debug, Default)]
pub struct GenSummary {
    pub datasets: Vec<PathBuf>,
    pub errors: Vec<GenError>,
}

/// Writes `<cell>_r<replicate>.csv` and `.truth.json` per problem plus
/// `gen_errors.csv` listing cells that could not be generated.
pub fn cmd_gen(cfg: &SweepConfig, out_dir: &Path) -> Result<GenSummary> {
    cfg.validate()?;
    io::ensure_dir(out_dir)?;
    let mut summary = GenSummary::default();
    for cell in cfg.cells() {
        for r in 0..cfg.problems_per_cell {
            let seed = cell.problem_seed(cfg.base_seed, r);
            let made = cell
                .spec(seed)
                .and_then(|spec| Ok((generate_problem(&spec)?, spec)));
            match made {
                Ok(((ds, gt), spec)) => {
                    let stem = format!("{}_r{r}", cell.id());
                    let data = out_dir.join(format!("{stem}.csv"));
                    io::write_dataset(&data, &ds)?;
                    io::write_json(&out_dir.join(format!("{stem}.truth.json")), &TruthFile::new(&spec, &gt))?;
                    summary.datasets.push(data);
                }
                Err(e) => summary.errors.push(GenError {
                    cell_id: cell.id(),
                    replicate: r,
                    error: e.to_string(),
                }),
            }
        }
    }
    io::write_csv(&out_dir.join("gen_errors.csv"), &["cell_id", "replicate", "error"], &summary.errors)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub data: String,
    pub algorithm: Algorithm,
    pub k: usize,
    pub seed: u64,
    pub restarts: usize,
    pub config_hash: String,
    pub failed: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub best_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rmse_weighted: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub r_global: Option<f64>,
    #[serde(default)]
    pub r_pairwise: Vec<f64>,
    pub iterations: usize,
    pub restarts_used: usize,
    pub revival_events: usize,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct FitArgs {
    pub data: PathBuf,
    pub truth: Option<PathBuf>,
    pub algorithm: Algorithm,
    pub em: EmConfig,
    pub out_dir: PathBuf,
    /// Store the membership matrix in the model file.
    pub with_weights: bool,
}

/// Fits one dataset; writes `model.json`, `density.json` and `fit.json`.
/// A fit that errors still produces `fit.json` with `failed` set.
pub fn cmd_fit(args: &FitArgs) -> Result<FitRecord> {
    let ds = io::read_dataset(&args.data)?.without_labels();
    let truth = args.truth.as_deref().map(TruthFile::load).transpose()?;
    io::ensure_dir(&args.out_dir)?;
    let em = &args.em;
    let mut rec = FitRecord {
        data: args.data.display().to_string(),
        algorithm: args.algorithm,
        k: em.k,
        seed: em.seed,
        restarts: em.restarts,
        config_hash: config_hash(em),
        failed: true,
        error: None,
        best_error: None,
        acc: None,
        rmse_weighted: None,
        r_global: None,
        r_pairwise: Vec::new(),
        iterations: 0,
        restarts_used: 0,
        revival_events: 0,
        wall_time: 0.0,
    };
    match fit(&ds, args.algorithm, em) {
        Ok(res) => {
            rec.failed = res.failed;
            rec.best_error = Some(res.best_error);
            rec.iterations = res.iterations;
            rec.restarts_used = res.restarts_used;
            rec.revival_events = res.revival_events;
            rec.wall_time = res.wall_time;
            let model = &res.best_model;
            let m = fit_metrics(&ds, model, truth.as_ref().map(|t| &t.1))?;
            rec.acc = m.acc;
            rec.rmse_weighted = m.rmse_weighted;
            rec.r_global = Some(m.r_global);
            rec.r_pairwise = m.r_pairwise;
            let prov = Provenance {
                algorithm: args.algorithm,
                seed: em.seed,
                restarts: em.restarts,
                config_hash: rec.config_hash.clone(),
            };
            io::write_json(&args.out_dir.join("model.json"), &ModelFile::new(model, prov, args.with_weights))?;
            match fit_density(&ds, model) {
                Ok(d) => io::write_json(&args.out_dir.join("density.json"), &d)?,
                Err(e) => rec.error = Some(format!("density: {e}")),
            }
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    io::write_json(&args.out_dir.join("fit.json"), &rec)?;
    Ok(rec)
}

pub struct BenchOutputs {
    pub records: Vec<ResultRecord>,
    pub results: PathBuf,
    pub aggregates: PathBuf,
    pub plots: Vec<PathBuf>,
}

/// Runs the sweep; writes `results.csv`, `aggregates.csv` and `plots/acc_vs_p_<panel>.csv`.
pub fn cmd_bench(cfg: &SweepConfig, out_dir: &Path) -> Result<BenchOutputs> {
    let records = run_sweep(cfg)?;
    io::ensure_dir(out_dir)?;
    let results = out_dir.join("results.csv");
    io::write_csv(&results, RESULT_HEADER, &records)?;
    let aggs = aggregate(&records);
    let aggregates = out_dir.join("aggregates.csv");
    io::write_csv(&aggregates, AGGREGATE_HEADER, &aggs)?;
    let plot_dir = out_dir.join("plots");
    io::ensure_dir(&plot_dir)?;
    let mut plots = Vec::new();
    for (panel, pts) in plot_panels(&cfg.cells(), &aggs) {
        let path = plot_dir.join(format!("acc_vs_p_{panel}.csv"));
        io::write_csv(&path, PLOT_HEADER, &pts)?;
        plots.push(path);
    }
    Ok(BenchOutputs {
        records,
        results,
        aggregates,
        plots,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub p: usize,
    pub n: usize,
    pub r_global: f64,
    pub r_pairwise: Vec<f64>,
    /// Cluster index pairs matching `r_pairwise`.
    pub pair_labels: Vec<(usize, usize)>,
    pub rmse_weighted: f64,
    pub rmse_coerced: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub acc: Option<f64>,
}

/// Memberships stored with the model when they match the dataset, otherwise
/// the Gaussian posterior of each row under the model.
fn model_for_dataset(model: &ClrModel, ds: &Dataset) -> ClrModel {
    if model.weights.nrows() == ds.n() {
        return model.clone();
    }
    let res = residuals(&ds.augmented(), ds.y(), &model.beta);
    ClrModel::new(model.beta.clone(), model.sigma.clone(), reweight(&res, &model.sigma))
}

pub fn cmd_metrics(model_path: &Path, data_path: &Path, truth_path: Option<&Path>) -> Result<MetricsReport> {
    let (_, model) = ModelFile::load(model_path)?;
    let ds = io::read_dataset(data_path)?;
    if ds.p() != model.p() {
        return Err(BenchError::Invalid(format!(
            "model has p={} but {} has p={}",
            model.p(),
            data_path.display(),
            ds.p()
        )));
    }
    let truth = truth_path.map(TruthFile::load).transpose()?;
    let model = model_for_dataset(&model, &ds);
    let rep = resolvability_report(ds.x(), &model.beta, &model.sigma)?;
    let acc = truth.map(|(_, gt)| acc(&model.beta, &gt.beta)).transpose()?;
    Ok(MetricsReport {
        k: model.k(),
        p: model.p(),
        n: ds.n(),
        r_global: rep.r_global,
        r_pairwise: rep.r_pairwise,
        pair_labels: rep.pair_labels,
        rmse_weighted: rmse(&ds, &model, RmseMode::Weighted)?,
        rmse_coerced: rmse(&ds, &model, RmseMode::Coerced)?,
        acc,
    })
}

/// Writes one row per input with every cluster prediction, its probability,
/// XP and both scalar reductions.
pub fn cmd_predict(model_path: &Path, density_path: &Path, x_path: &Path, out: &Path) -> Result<usize> {
    let (_, model) = ModelFile::load(model_path)?;
    let density = io::load_density(density_path)?;
    let x = io::read_x_rows(x_path)?;
    if x.ncols() != model.p() {
        return Err(BenchError::Invalid(format!(
            "{} has {} predictor columns, model expects {}",
            x_path.display(),
            x.ncols(),
            model.p()
        )));
    }
    let preds = predict_rows(&x, &model, &density)?;
    let k = model.k();
    let mut header: Vec<String> = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
    header.extend((1..=k).map(|c| format!("yhat_{c}")));
    header.extend((1..=k).map(|c| format!("prob_{c}")));
    header.extend(["xp", "coerced", "weighted", "underflow"].map(String::from));
    let rows: Vec<Vec<String>> = preds
        .iter()
        .enumerate()
        .map(|(i, pr)| {
            let mut row: Vec<String> = x.row(i).iter().map(|v| v.to_string()).collect();
            row.extend(pr.per_cluster_yhat.iter().map(|v| v.to_string()));
            row.extend(pr.probs.iter().map(|v| v.to_string()));
            row.push(pr.xp.to_string());
            row.push(pr.coerced.to_string());
            row.push(pr.weighted.to_string());
            row.push(pr.underflow.to_string());
            row
        })
        .collect();
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    io::write_csv(out, &header_refs, &rows)?;
    Ok(rows.len())
}
