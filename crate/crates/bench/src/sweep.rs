//! Per-problem runs, the parallel sweep and aggregation.

use std::collections::BTreeMap;
use std::time::Instant;

use clr_core::em::{fit, Algorithm, EmConfig};
use clr_core::metrics::{acc, resolvability_report, rmse, RmseMode};
use clr_core::rng::derive_seed;
use clr_core::stats::{mean, median, percentile};
use clr_core::{generate_problem, Dataset, GroundTruth};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Cell, SweepConfig};
use crate::error::{BenchError, Result};

pub const RESULT_HEADER: &[&str] = &[
    "cell_id",
    "k",
    "p",
    "sizes",
    "dp",
    "eta",
    "delta",
    "corrupt_frac",
    "replicate",
    "seed",
    "algorithm",
    "restarts",
    "acc",
    "rmse_weighted",
    "r_global",
    "r_pairwise",
    "iterations",
    "restarts_used",
    "revival_events",
    "wall_time",
    "failed",
    "error",
];

/// One fit of one generated problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub cell_id: String,
    pub k: usize,
    pub p: usize,
    pub sizes: String,
    pub dp: f64,
    pub eta: f64,
    pub delta: f64,
    pub corrupt_frac: f64,
    pub replicate: usize,
    pub seed: u64,
    pub algorithm: String,
    pub restarts: usize,
    pub acc: Option<f64>,
    pub rmse_weighted: Option<f64>,
    pub r_global: Option<f64>,
    /// Pairwise resolvabilities, descending, `;`-separated.
    pub r_pairwise: String,
    pub iterations: usize,
    pub restarts_used: usize,
    pub revival_events: usize,
    pub wall_time: f64,
    pub failed: bool,
    pub error: String,
}

impl ResultRecord {
    fn blank(cell: &Cell, replicate: usize, seed: u64, algorithm: Algorithm, restarts: usize) -> Self {
        Self {
            cell_id: cell.id(),
            k: cell.k,
            p: cell.p,
            sizes: cell.sizes_label(),
            dp: cell.dp,
            eta: cell.eta,
            delta: cell.delta,
            corrupt_frac: cell.corrupt_frac,
            replicate,
            seed,
            algorithm: algorithm.name().to_string(),
            restarts,
            acc: None,
            rmse_weighted: None,
            r_global: None,
            r_pairwise: String::new(),
            iterations: 0,
            restarts_used: 0,
            revival_events: 0,
            wall_time: 0.0,
            failed: true,
            error: String::new(),
        }
    }
}

/// Fit metrics of one model against its data and truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetrics {
    pub acc: Option<f64>,
    pub rmse_weighted: Option<f64>,
    pub r_global: f64,
    pub r_pairwise: Vec<f64>,
}

pub fn fit_metrics(ds: &Dataset, model: &clr_core::ClrModel, truth: Option<&GroundTruth>) -> Result<FitMetrics> {
    let rep = resolvability_report(ds.x(), &model.beta, &model.sigma)?;
    let acc = truth.map(|gt| acc(&model.beta, &gt.beta)).transpose()?;
    Ok(FitMetrics {
        acc,
        rmse_weighted: rmse(ds, model, RmseMode::Weighted).ok(),
        r_global: rep.r_global,
        r_pairwise: rep.r_pairwise,
    })
}

pub fn join_values(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

/// Engine settings for one run: the shared settings with per-run overrides.
pub fn run_config(base: &EmConfig, k: usize, restarts: usize, problem_seed: u64) -> EmConfig {
    EmConfig {
        k,
        restarts,
        seed: derive_seed(problem_seed, 1),
        ..base.clone()
    }
}

/// Generates one problem and fits it with every algorithm and restart budget.
pub fn run_problem(cfg: &SweepConfig, cell: &Cell, replicate: usize) -> Vec<ResultRecord> {
    let seed = cell.problem_seed(cfg.base_seed, replicate);
    let variants: Vec<(Algorithm, usize)> = cfg
        .algorithms
        .iter()
        .flat_map(|&a| cfg.restarts.iter().map(move |&r| (a, r)))
        .collect();
    let generated = cell
        .spec(seed)
        .and_then(|spec| generate_problem(&spec).map_err(BenchError::from));
    let (ds, gt) = match generated {
        Ok(v) => v,
        Err(e) => {
            return variants
                .iter()
                .map(|&(a, r)| ResultRecord {
                    error: e.to_string(),
                    ..ResultRecord::blank(cell, replicate, seed, a, r)
                })
                .collect()
        }
    };
    let ds = ds.without_labels();
    variants
        .iter()
        .map(|&(alg, r)| {
            let mut rec = ResultRecord::blank(cell, replicate, seed, alg, r);
            let started = Instant::now();
            let em = run_config(&cfg.em, cell.k, r, seed);
            match fit(&ds, alg, &em) {
                Ok(res) => {
                    rec.iterations = res.iterations;
                    rec.restarts_used = res.restarts_used;
                    rec.revival_events = res.revival_events;
                    rec.failed = res.failed;
                    match fit_metrics(&ds, &res.best_model, Some(&gt)) {
                        Ok(m) => {
                            rec.acc = m.acc;
                            rec.rmse_weighted = m.rmse_weighted;
                            rec.r_global = Some(m.r_global);
                            rec.r_pairwise = join_values(&m.r_pairwise);
                        }
                        Err(e) => {
                            rec.failed = true;
                            rec.error = e.to_string();
                        }
                    }
                }
                Err(e) => rec.error = e.to_string(),
            }
            rec.wall_time = started.elapsed().as_secs_f64();
            rec
        })
        .collect()
}

/// Runs the whole sweep on `workers` threads. Records come back in
/// (cell, replicate, algorithm, restarts) order whatever the completion order.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<ResultRecord>> {
    cfg.validate()?;
    let cells = cfg.cells();
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..cfg.problems_per_cell).map(move |r| (c, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| BenchError::Invalid(e.to_string()))?;
    let nested: Vec<Vec<ResultRecord>> =
        pool.install(|| jobs.par_iter().map(|&(c, r)| run_problem(cfg, &cells[c], r)).collect());
    Ok(nested.into_iter().flatten().collect())
}

pub const AGGREGATE_HEADER: &[&str] = &[
    "cell_id",
    "k",
    "p",
    "sizes",
    "dp",
    "eta",
    "delta",
    "corrupt_frac",
    "algorithm",
    "restarts",
    "n",
    "n_failed",
    "mean_acc",
    "median_acc",
    "q10_acc",
    "q25_acc",
    "q75_acc",
    "q90_acc",
    "min_acc",
    "max_acc",
    "mean_r_global",
];

/// ACC summary of one (cell, algorithm, restarts) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub cell_id: String,
    pub k: usize,
    pub p: usize,
    pub sizes: String,
    pub dp: f64,
    pub eta: f64,
    pub delta: f64,
    pub corrupt_frac: f64,
    pub algorithm: String,
    pub restarts: usize,
    /// Records in the group.
    pub n: usize,
    /// Records without an ACC value.
    pub n_failed: usize,
    pub mean_acc: Option<f64>,
    pub median_acc: Option<f64>,
    pub q10_acc: Option<f64>,
    pub q25_acc: Option<f64>,
    pub q75_acc: Option<f64>,
    pub q90_acc: Option<f64>,
    pub min_acc: Option<f64>,
    pub max_acc: Option<f64>,
    pub mean_r_global: Option<f64>,
}

/// Groups by (cell, algorithm, restarts) in first-appearance order.
pub fn aggregate(records: &[ResultRecord]) -> Vec<Aggregate> {
    let mut order: Vec<(String, String, usize)> = Vec::new();
    let mut groups: BTreeMap<(String, String, usize), Vec<&ResultRecord>> = BTreeMap::new();
    for r in records {
        let key = (r.cell_id.clone(), r.algorithm.clone(), r.restarts);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let rs = &groups[&key];
            let first = rs[0];
            let accs: Vec<f64> = rs.iter().filter_map(|r| r.acc).collect();
            let rg: Vec<f64> = rs.iter().filter_map(|r| r.r_global).collect();
            let stat = |f: &dyn Fn(&[f64]) -> f64| (!accs.is_empty()).then(|| f(&accs));
            Aggregate {
                cell_id: first.cell_id.clone(),
                k: first.k,
                p: first.p,
                sizes: first.sizes.clone(),
                dp: first.dp,
                eta: first.eta,
                delta: first.delta,
                corrupt_frac: first.corrupt_frac,
                algorithm: first.algorithm.clone(),
                restarts: first.restarts,
                n: rs.len(),
                n_failed: rs.len() - accs.len(),
                mean_acc: stat(&mean),
                median_acc: stat(&median),
                q10_acc: stat(&|v| percentile(v, 10.0)),
                q25_acc: stat(&|v| percentile(v, 25.0)),
                q75_acc: stat(&|v| percentile(v, 75.0)),
                q90_acc: stat(&|v| percentile(v, 90.0)),
                min_acc: stat(&|v| v.iter().copied().fold(f64::INFINITY, f64::min)),
                max_acc: stat(&|v| v.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
                mean_r_global: (!rg.is_empty()).then(|| mean(&rg)),
            }
        })
        .collect()
}

pub const PLOT_HEADER: &[&str] = &["series", "p", "n", "mean_acc", "median_acc", "q25_acc", "q75_acc"];

/// One point of an ACC-vs-p curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub series: String,
    pub p: usize,
    pub n: usize,
    pub mean_acc: Option<f64>,
    pub median_acc: Option<f64>,
    pub q25_acc: Option<f64>,
    pub q75_acc: Option<f64>,
}

/// ACC-vs-p curves keyed by panel (every cell parameter except p); series
/// are `<algorithm>_r<restarts>`.
pub fn plot_panels(cells: &[Cell], aggs: &[Aggregate]) -> Vec<(String, Vec<PlotPoint>)> {
    let panel_of: BTreeMap<String, String> = cells.iter().map(|c| (c.id(), c.panel_id())).collect();
    let mut panels: BTreeMap<String, Vec<PlotPoint>> = BTreeMap::new();
    for a in aggs {
        let Some(panel) = panel_of.get(&a.cell_id) else { continue };
        panels.entry(panel.clone()).or_default().push(PlotPoint {
            series: format!("{}_r{}", a.algorithm, a.restarts),
            p: a.p,
            n: a.n,
            mean_acc: a.mean_acc,
            median_acc: a.median_acc,
            q25_acc: a.q25_acc,
            q75_acc: a.q75_acc,
        });
    }
    panels
        .into_iter()
        .map(|(k, mut pts)| {
            pts.sort_by(|a, b| a.series.cmp(&b.series).then(a.p.cmp(&b.p)));
            (k, pts)
        })
        .collect()
}
