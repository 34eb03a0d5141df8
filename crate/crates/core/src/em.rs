//! EM fitting loops: plain EM with independent restarts, and the incremental
//! seeded variant that revives collapsed clusters by splitting superclusters
//! and reseeds from the elite archive after each convergence.

use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::elite::{pick_donor, recombine, sigma_for, split_cluster, update_elite, EliteParams, EliteStore, RecombinePath};
use crate::error::{ClrError, Result};
use crate::regression::{
    kmeans_init, random_init, residuals, reweight, sigma_floor, weighted_sse, wls_pretransposed, ClrModel,
};
use crate::rng::{derive_seed, rng_from_seed, ClrRng};
use crate::subspace::{SplitMethod, SplitParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    #[default]
    Kmeans,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Em,
    EmIs,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Em => "em",
            Algorithm::EmIs => "em_is",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = ClrError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "em" => Ok(Algorithm::Em),
            "em_is" | "emis" => Ok(Algorithm::EmIs),
            other => Err(ClrError::InvalidInput(format!("unknown algorithm `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub k: usize,
    pub max_loop: usize,
    /// Convergence window length.
    pub n_c: usize,
    /// Convergence threshold on the mean relative error change.
    pub t_c: f64,
    /// Momentum on the coefficient update; 0 takes the fresh estimate.
    pub zeta: f64,
    /// Clusters whose weight sum falls below this fraction of N have collapsed.
    pub collapse_frac: f64,
    /// Sigma floor relative to std(y).
    pub sigma_floor_rel: f64,
    /// Independent restarts for plain EM; recombination rounds for the seeded variant.
    pub restarts: usize,
    /// Seeded variant stops once the best fit sits at its noise floor
    /// (`best_error / N < (1 + t_c) * sum mix_k sigma_k^2`) without a relative
    /// `t_c` improvement at this many consecutive convergence points. 0 disables.
    pub early_stop_rounds: usize,
    pub init: InitMethod,
    pub seed: u64,
    pub split: SplitParams,
    pub elite: EliteParams,
    /// Keep per-iteration trace records in the result.
    pub record_trace: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            k: 2,
            max_loop: 1000,
            n_c: 7,
            t_c: 1e-2,
            zeta: 0.0,
            collapse_frac: 0.1,
            sigma_floor_rel: 1e-6,
            restarts: 0,
            early_stop_rounds: 2,
            init: InitMethod::Kmeans,
            seed: 0,
            split: SplitParams::default(),
            elite: EliteParams::default(),
            record_trace: false,
        }
    }
}

impl EmConfig {
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        if self.k == 0 {
            return Err(ClrError::InvalidInput("K must be at least 1".into()));
        }
        if ds.n() < self.k {
            return Err(ClrError::InvalidInput(format!("N={} is smaller than K={}", ds.n(), self.k)));
        }
        if self.n_c < 2 {
            return Err(ClrError::InvalidInput("convergence window needs at least 2 entries".into()));
        }
        if !(0.0..1.0).contains(&self.zeta) {
            return Err(ClrError::InvalidInput("momentum must be in [0, 1)".into()));
        }
        if !(self.t_c > 0.0) || !(0.0..1.0).contains(&self.collapse_frac) {
            return Err(ClrError::InvalidInput("invalid convergence or collapse threshold".into()));
        }
        self.split.validate()
    }
}

/// Stopping rule on a full window of recent errors: the errors are no longer
/// strictly decreasing and their mean relative change is below `t_c`.
pub fn converged(window: &[f64], t_c: f64) -> bool {
    if window.len() < 2 {
        return false;
    }
    let strictly_decreasing = window.windows(2).all(|p| p[1] < p[0]);
    let mean_rel = window
        .windows(2)
        .map(|p| (p[1] - p[0]).abs() / p[0].abs().max(f64::EPSILON))
        .sum::<f64>()
        / (window.len() - 1) as f64;
    !strictly_decreasing && mean_rel < t_c
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceState {
    n_c: usize,
    window: VecDeque<f64>,
}

impl ConvergenceState {
    pub fn new(n_c: usize) -> Self {
        Self {
            n_c,
            window: VecDeque::with_capacity(n_c),
        }
    }

    pub fn push(&mut self, e: f64) {
        if self.window.len() == self.n_c {
            self.window.pop_front();
        }
        self.window.push_back(e);
    }

    pub fn window(&self) -> Vec<f64> {
        self.window.iter().copied().collect()
    }

    pub fn is_converged(&self, t_c: f64) -> bool {
        self.window.len() == self.n_c && converged(&self.window(), t_c)
    }

    pub fn reset(&mut self) {
        self.window.clear();
    }
}

/// Clusters whose total weight is below `frac * N`.
pub fn detect_collapse(w: &DMatrix<f64>, frac: f64) -> Vec<usize> {
    let limit = frac * w.nrows() as f64;
    (0..w.ncols()).filter(|&c| w.column(c).sum() < limit).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEvent {
    Revival { cluster: usize, donor: usize, method: SplitMethod },
    RevivalSkipped { cluster: usize },
    Recombination { path: RecombinePath },
    Converged,
    EarlyStop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub error: f64,
    pub best_error: f64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub events: Vec<TraceEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub best_model: ClrModel,
    pub best_error: f64,
    pub error_trace: Vec<f64>,
    pub iterations: usize,
    pub restarts_used: usize,
    pub revival_events: usize,
    pub wall_time: f64,
    /// Set when every cluster went degenerate at some iteration.
    pub failed: bool,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub trace: Vec<TraceRecord>,
    #[serde(skip)]
    pub elite: Option<EliteStore>,
}

/// Shared state of one EM trajectory.
struct Engine<'a> {
    ds: &'a Dataset,
    cfg: &'a EmConfig,
    xt: DMatrix<f64>,
    xt_t: DMatrix<f64>,
    floor: f64,
    beta: DMatrix<f64>,
    w: DMatrix<f64>,
    resid: DMatrix<f64>,
    sigma: DVector<f64>,
    conv: ConvergenceState,
    best: Option<(ClrModel, f64)>,
    trace: Vec<f64>,
    records: Vec<TraceRecord>,
    pending: Vec<TraceEvent>,
    iterations: usize,
    revivals: usize,
    failed: bool,
    elite: Option<EliteStore>,
}

impl<'a> Engine<'a> {
    fn new(ds: &'a Dataset, cfg: &'a EmConfig, init: DMatrix<f64>, rng: &mut ClrRng, keep_elite: bool) -> Result<Self> {
        let (n, k) = (ds.n(), cfg.k);
        if init.shape() != (n, k) {
            return Err(ClrError::ShapeMismatch(format!(
                "initial weights are {:?}, expected ({n}, {k})",
                init.shape()
            )));
        }
        if init.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(ClrError::InvalidInput("initial weights must be finite and non-negative".into()));
        }
        let xt = ds.augmented();
        let xt_t = xt.transpose();
        let floor = sigma_floor(ds.y(), cfg.sigma_floor_rel);
        let ones = vec![1.0; n];
        let global = wls_pretransposed(&xt, &xt_t, ds.y(), &ones).ok();
        let mut beta = DMatrix::zeros(k, xt.ncols());
        for c in 0..k {
            let wc = &init.as_slice()[c * n..(c + 1) * n];
            let b = match wls_pretransposed(&xt, &xt_t, ds.y(), wc) {
                Ok(b) => b,
                Err(_) => {
                    let base = global.clone().unwrap_or_else(|| DVector::zeros(xt.ncols()));
                    let scale = 0.1 * base.norm().max(1.0);
                    base.map(|v| v + scale * rng.sample::<f64, _>(rand_distr::StandardNormal))
                }
            };
            beta.row_mut(c).copy_from(&b.transpose());
        }
        let resid = residuals(&xt, ds.y(), &beta);
        let sigma = sigma_for(&resid, &init, floor);
        Ok(Self {
            ds,
            cfg,
            xt,
            xt_t,
            floor,
            beta,
            w: init,
            resid,
            sigma,
            conv: ConvergenceState::new(cfg.n_c),
            best: None,
            trace: Vec::new(),
            records: Vec::new(),
            pending: Vec::new(),
            iterations: 0,
            revivals: 0,
            failed: false,
            elite: keep_elite.then(|| EliteStore::new(cfg.elite.clone())),
        })
    }

    fn best_error(&self) -> f64 {
        self.best.as_ref().map_or(f64::INFINITY, |b| b.1)
    }

    fn best_at_noise_floor(&self) -> bool {
        self.best.as_ref().is_some_and(|(m, err)| {
            let floor: f64 = m.mix.iter().zip(m.sigma.iter()).map(|(pi, s)| pi * s * s).sum();
            *err / (self.ds.n() as f64) < (1.0 + self.cfg.t_c) * floor
        })
    }

    /// Reweight, WLS, momentum, residuals, scales, error; then bookkeeping.
    fn step(&mut self) -> f64 {
        let n = self.ds.n();
        let k = self.cfg.k;
        self.w = reweight(&self.resid, &self.sigma);
        let mut degenerate = 0;
        for c in 0..k {
            let wc = &self.w.as_slice()[c * n..(c + 1) * n];
            match wls_pretransposed(&self.xt, &self.xt_t, self.ds.y(), wc) {
                Ok(b) => {
                    let z = self.cfg.zeta;
                    for j in 0..b.len() {
                        self.beta[(c, j)] = z * self.beta[(c, j)] + (1.0 - z) * b[j];
                    }
                }
                Err(_) => degenerate += 1,
            }
        }
        if degenerate == k {
            self.failed = true;
        }
        self.resid = residuals(&self.xt, self.ds.y(), &self.beta);
        self.sigma = sigma_for(&self.resid, &self.w, self.floor);
        let err = weighted_sse(&self.resid, &self.w);
        self.iterations += 1;
        self.trace.push(err);
        self.conv.push(err);
        if err < self.best_error() {
            let model = ClrModel::new(self.beta.clone(), self.sigma.clone(), self.w.clone());
            self.best = Some((model, err));
        }
        if let Some(store) = self.elite.as_mut() {
            if store.len() < store.params.capacity || err < store.entries().last().map_or(f64::INFINITY, |e| e.error) {
                let model = ClrModel::new(self.beta.clone(), self.sigma.clone(), self.w.clone());
                update_elite(store, &model, err);
            }
        }
        err
    }

    fn flush_record(&mut self) {
        if self.cfg.record_trace {
            let error = self.trace.last().copied().unwrap_or(f64::NAN);
            self.records.push(TraceRecord {
                iteration: self.iterations,
                error,
                best_error: self.best_error(),
                events: std::mem::take(&mut self.pending),
            });
        } else {
            self.pending.clear();
        }
    }

    /// Hard nearest-residual assignment for `rows`, then fresh scales.
    fn reassign(&mut self, rows: &[usize]) {
        let k = self.cfg.k;
        self.resid = residuals(&self.xt, self.ds.y(), &self.beta);
        for &i in rows {
            let best = (0..k).fold(0, |b, c| if self.resid[(i, c)].abs() < self.resid[(i, b)].abs() { c } else { b });
            for c in 0..k {
                self.w[(i, c)] = if c == best { 1.0 } else { 0.0 };
            }
        }
        self.sigma = sigma_for(&self.resid, &self.w, self.floor);
        self.conv.reset();
    }

    /// Replaces each collapsed cluster by half of a split donor, one at a time.
    fn revive(&mut self, collapsed: &[usize], rng: &mut ClrRng) {
        let n = self.ds.n();
        for &c in collapsed {
            let now_collapsed = detect_collapse(&self.w, self.cfg.collapse_frac);
            if !now_collapsed.contains(&c) {
                continue;
            }
            let sizes: Vec<f64> = (0..self.cfg.k).map(|j| self.w.column(j).sum()).collect();
            let Some(donor) = pick_donor(&sizes, &now_collapsed, rng) else {
                self.pending.push(TraceEvent::RevivalSkipped { cluster: c });
                continue;
            };
            match split_cluster(self.ds, &mut self.beta, &self.w, donor, c, &self.cfg.split, rng) {
                Some((rows, method)) => {
                    let mut affected = rows;
                    // rows the collapsed cluster still held are reassigned too
                    affected.extend((0..n).filter(|&i| self.w[(i, c)] > 0.5));
                    self.reassign(&affected);
                    self.revivals += 1;
                    self.pending.push(TraceEvent::Revival {
                        cluster: c,
                        donor,
                        method,
                    });
                }
                None => self.pending.push(TraceEvent::RevivalSkipped { cluster: c }),
            }
        }
    }

    fn reseed(&mut self, beta: DMatrix<f64>) {
        self.beta = beta;
        let all: Vec<usize> = (0..self.ds.n()).collect();
        self.reassign(&all);
    }

    fn finish(self, restarts_used: usize, started: Instant) -> FitResult {
        let (best_model, best_error) = match self.best {
            Some(b) => b,
            None => {
                let m = ClrModel::new(self.beta.clone(), self.sigma.clone(), self.w.clone());
                let e = weighted_sse(&self.resid, &self.w);
                (m, e)
            }
        };
        FitResult {
            best_model,
            best_error,
            error_trace: self.trace,
            iterations: self.iterations,
            restarts_used,
            revival_events: self.revivals,
            wall_time: started.elapsed().as_secs_f64(),
            failed: self.failed,
            trace: self.records,
            elite: self.elite,
        }
    }
}

/// Initial memberships for a run with the given seed.
pub fn initial_weights(ds: &Dataset, cfg: &EmConfig, seed: u64) -> Result<DMatrix<f64>> {
    match cfg.init {
        InitMethod::Kmeans => kmeans_init(ds, cfg.k, seed),
        InitMethod::Random => Ok(random_init(ds.n(), cfg.k, seed)),
    }
}

/// One plain EM run from the given memberships.
pub fn run_em(ds: &Dataset, cfg: &EmConfig, init: DMatrix<f64>) -> Result<FitResult> {
    cfg.validate(ds)?;
    let started = Instant::now();
    let mut rng = rng_from_seed(derive_seed(cfg.seed, 0xE3));
    let mut eng = Engine::new(ds, cfg, init, &mut rng, false)?;
    while eng.iterations < cfg.max_loop {
        eng.step();
        let done = eng.conv.is_converged(cfg.t_c) || eng.failed;
        if done {
            eng.pending.push(TraceEvent::Converged);
        }
        eng.flush_record();
        if done {
            break;
        }
    }
    Ok(eng.finish(0, started))
}

/// Plain EM with `cfg.restarts` extra independent initializations; the best run wins.
pub fn run_em_restarts(ds: &Dataset, cfg: &EmConfig) -> Result<FitResult> {
    cfg.validate(ds)?;
    let started = Instant::now();
    let mut best: Option<FitResult> = None;
    let mut iterations = 0;
    for r in 0..=cfg.restarts {
        let init = initial_weights(ds, cfg, derive_seed(cfg.seed, r as u64))?;
        let res = run_em(ds, cfg, init)?;
        iterations += res.iterations;
        if best.as_ref().map_or(true, |b| res.best_error < b.best_error) {
            best = Some(res);
        }
    }
    let mut out = best.expect("at least one run");
    out.iterations = iterations;
    out.restarts_used = cfg.restarts;
    out.wall_time = started.elapsed().as_secs_f64();
    Ok(out)
}

/// Seeded EM from the configured initialization.
pub fn run_em_is(ds: &Dataset, cfg: &EmConfig) -> Result<FitResult> {
    cfg.validate(ds)?;
    let init = initial_weights(ds, cfg, derive_seed(cfg.seed, 0))?;
    run_em_is_from(ds, cfg, init)
}

/// Seeded EM from explicit memberships.
pub fn run_em_is_from(ds: &Dataset, cfg: &EmConfig, init: DMatrix<f64>) -> Result<FitResult> {
    cfg.validate(ds)?;
    let started = Instant::now();
    let mut rng = rng_from_seed(derive_seed(cfg.seed, 0xE15));
    let mut eng = Engine::new(ds, cfg, init, &mut rng, true)?;
    let mut perturb_left = cfg.restarts + 1;
    let mut recombinations = 0;
    let mut streak = 0;
    let mut round_best = f64::INFINITY;
    while eng.iterations < cfg.max_loop {
        eng.step();
        if eng.failed {
            eng.flush_record();
            break;
        }
        let collapsed = if cfg.k > 1 { detect_collapse(&eng.w, cfg.collapse_frac) } else { Vec::new() };
        if !collapsed.is_empty() {
            eng.revive(&collapsed, &mut rng);
            eng.flush_record();
            continue;
        }
        if eng.conv.is_converged(cfg.t_c) {
            eng.pending.push(TraceEvent::Converged);
            perturb_left -= 1;
            if perturb_left == 0 {
                eng.flush_record();
                break;
            }
            let best = eng.best_error();
            streak = match (eng.best_at_noise_floor(), best < round_best * (1.0 - cfg.t_c)) {
                (false, _) => 0,
                (true, false) => streak + 1,
                // improved: this point opens a new streak
                (true, true) => 1,
            };
            round_best = round_best.min(best);
            if cfg.early_stop_rounds > 0 && streak >= cfg.early_stop_rounds {
                eng.pending.push(TraceEvent::EarlyStop);
                eng.flush_record();
                break;
            }
            let store = eng.elite.as_ref().expect("seeded engine keeps an elite store");
            match recombine(store, ds, &cfg.split, eng.floor, &mut rng) {
                Ok(rec) => {
                    eng.pending.push(TraceEvent::Recombination { path: rec.path });
                    eng.reseed(rec.beta);
                    recombinations += 1;
                }
                Err(_) => {
                    eng.flush_record();
                    break;
                }
            }
        }
        eng.flush_record();
    }
    Ok(eng.finish(recombinations, started))
}

/// Dispatches on the algorithm with its restart semantics.
pub fn fit(ds: &Dataset, algorithm: Algorithm, cfg: &EmConfig) -> Result<FitResult> {
    match algorithm {
        Algorithm::Em => run_em_restarts(ds, cfg),
        Algorithm::EmIs => run_em_is(ds, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_problem, ProblemSpec};
    use crate::metrics::acc;
    use crate::regression::one_hot;

    #[test]
    fn converged_truth_table() {
        assert!(!converged(&[7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0], 1e-2));
        assert!(converged(&[1.0; 7], 1e-2));
        // one up-tick, mean relative change 5e-3
        let w: [f64; 7] = [1.0, 0.99, 0.98, 0.99, 0.98, 0.97, 0.965];
        let mean_rel: f64 = w.windows(2).map(|p| (p[1] - p[0]).abs() / p[0]).sum::<f64>() / 6.0;
        assert!(mean_rel < 1e-2);
        assert!(converged(&w, 1e-2));
        // up-tick but large changes
        assert!(!converged(&[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0], 1e-2));
        assert!(!converged(&[1.0], 1e-2));
    }

    #[test]
    fn convergence_window_is_bounded() {
        let mut c = ConvergenceState::new(3);
        for e in [5.0, 4.0, 4.0, 4.0, 4.0] {
            c.push(e);
        }
        assert_eq!(c.window(), vec![4.0, 4.0, 4.0]);
        assert!(c.is_converged(1e-2));
        c.reset();
        assert!(!c.is_converged(1e-2));
    }

    #[test]
    fn collapse_examples() {
        let w = one_hot(&[0, 1, 0, 1], 2);
        assert!(detect_collapse(&w, 0.1).is_empty());
        let labels: Vec<usize> = (0..1000).map(|i| if i < 950 { 0 } else { 1 }).collect();
        assert_eq!(detect_collapse(&one_hot(&labels, 2), 0.1), vec![1]);
        let uniform = DMatrix::from_element(30, 3, 1.0 / 3.0);
        assert!(detect_collapse(&uniform, 0.1).is_empty());
    }

    fn truth_init(gt: &crate::dataset::GroundTruth, k: usize) -> DMatrix<f64> {
        let labels: Vec<usize> = gt.labels.iter().map(|&l| l as usize).collect();
        one_hot(&labels, k)
    }

    #[test]
    fn zero_noise_truth_init_is_fixed_point() {
        let (ds, gt) = generate_problem(&ProblemSpec::balanced(2, 2, 100, 0.2, 0.0, 3)).unwrap();
        let cfg = EmConfig { k: 2, ..Default::default() };
        let res = run_em(&ds, &cfg, truth_init(&gt, 2)).unwrap();
        assert!((acc(&res.best_model.beta, &gt.beta).unwrap() - 1.0).abs() < 1e-6);
        assert!(!res.failed);
    }

    #[test]
    fn best_error_is_minimum_of_trace() {
        let (ds, _) = generate_problem(&ProblemSpec::balanced(3, 5, 200, 0.2, 0.2, 4)).unwrap();
        let cfg = EmConfig { k: 3, seed: 4, restarts: 2, ..Default::default() };
        let res = run_em_is(&ds, &cfg).unwrap();
        let min = res.error_trace.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(res.best_error, min);
        assert_eq!(res.best_model.k(), 3);
    }

    #[test]
    fn seeded_matches_plain_without_collapse_or_restarts() {
        let (ds, gt) = generate_problem(&ProblemSpec::balanced(2, 3, 150, 0.2, 0.0, 5)).unwrap();
        let cfg = EmConfig { k: 2, seed: 5, ..Default::default() };
        let init = truth_init(&gt, 2);
        let a = run_em(&ds, &cfg, init.clone()).unwrap();
        let b = run_em_is_from(&ds, &cfg, init).unwrap();
        assert_eq!(b.revival_events, 0);
        assert_eq!(a.error_trace, b.error_trace);
        assert_eq!(a.best_model, b.best_model);
    }

    #[test]
    fn runs_are_deterministic() {
        let (ds, _) = generate_problem(&ProblemSpec::balanced(3, 4, 150, 0.2, 0.2, 6)).unwrap();
        let cfg = EmConfig { k: 3, seed: 77, restarts: 2, ..Default::default() };
        let a = run_em_is(&ds, &cfg).unwrap();
        let b = run_em_is(&ds, &cfg).unwrap();
        assert_eq!(a.error_trace, b.error_trace);
        assert_eq!(a.best_model, b.best_model);
        let c = run_em_restarts(&ds, &cfg).unwrap();
        let d = run_em_restarts(&ds, &cfg).unwrap();
        assert_eq!(c.best_model, d.best_model);
    }

    #[test]
    fn revival_keeps_cluster_count_and_reports_events() {
        let (ds, _) = generate_problem(&ProblemSpec::balanced(3, 6, 300, 0.2, 0.1, 8)).unwrap();
        // start with two clusters sharing everything and one starved cluster
        let n = ds.n();
        let labels: Vec<usize> = (0..n).map(|i| if i < 10 { 2 } else { i % 2 }).collect();
        let cfg = EmConfig { k: 3, seed: 8, ..Default::default() };
        let mut rng = rng_from_seed(8);
        let mut eng = Engine::new(&ds, &cfg, one_hot(&labels, 3), &mut rng, true).unwrap();
        let collapsed = detect_collapse(&eng.w, cfg.collapse_frac);
        assert_eq!(collapsed, vec![2]);
        eng.revive(&collapsed, &mut rng);
        assert_eq!(eng.revivals, 1);
        assert!(matches!(eng.pending[0], TraceEvent::Revival { cluster: 2, .. }));
        assert_eq!(eng.beta.nrows(), 3);
        assert!(eng.w.column(2).sum() >= (ds.p() + 2) as f64);
        assert!(eng.w.row_iter().all(|r| (r.sum() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn seeded_solves_moderate_problem() {
        let (ds, gt) = generate_problem(&ProblemSpec::balanced(3, 10, 500, 0.2, 0.2, 9)).unwrap();
        let cfg = EmConfig { k: 3, seed: 9, ..Default::default() };
        let res = run_em_is(&ds, &cfg).unwrap();
        assert!(acc(&res.best_model.beta, &gt.beta).unwrap() > 0.8);
    }

    #[test]
    fn best_error_trace_is_monotone() {
        let (ds, _) = generate_problem(&ProblemSpec::balanced(2, 4, 200, 0.3, 0.3, 10)).unwrap();
        let cfg = EmConfig { k: 2, seed: 10, restarts: 3, record_trace: true, ..Default::default() };
        let res = run_em_is(&ds, &cfg).unwrap();
        let bests: Vec<f64> = res.trace.iter().map(|r| r.best_error).collect();
        assert!(bests.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn rejects_bad_config() {
        let (ds, _) = generate_problem(&ProblemSpec::balanced(2, 2, 10, 0.2, 0.1, 11)).unwrap();
        let cfg = EmConfig { k: 0, ..Default::default() };
        assert!(run_em_is(&ds, &cfg).is_err());
        let cfg = EmConfig { k: 2, ..Default::default() };
        assert!(run_em(&ds, &cfg, DMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn easy_problem_stops_early_at_noise_floor() {
        let (ds, _) = generate_problem(&ProblemSpec::balanced(2, 3, 300, 0.2, 0.1, 12)).unwrap();
        let cfg = EmConfig { k: 2, seed: 12, restarts: 20, record_trace: true, ..Default::default() };
        let res = run_em_is(&ds, &cfg).unwrap();
        let events: Vec<&TraceEvent> = res.trace.iter().flat_map(|r| &r.events).collect();
        let converged = events.iter().filter(|e| matches!(e, TraceEvent::Converged)).count();
        assert!(matches!(events.last(), Some(TraceEvent::EarlyStop)));
        assert!(converged <= cfg.restarts);

        let off = EmConfig { early_stop_rounds: 0, ..cfg.clone() };
        let res = run_em_is(&ds, &off).unwrap();
        assert!(!res.trace.iter().flat_map(|r| &r.events).any(|e| matches!(e, TraceEvent::EarlyStop)));
    }

}
