//! Archive of the best distinct solutions seen during a fit, and recombination
//! of their clusters into a fresh starting point.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::best_assignment;
use crate::dataset::Dataset;
use crate::error::{ClrError, Result};
use crate::regression::{
    column_means, estimate_sigma, hard_labels, residuals, reweight, wls_pretransposed, weighted_sse, ClrModel,
};
use crate::rng::ClrRng;
use crate::subspace::{propose_split, SplitMethod, SplitParams};

/// Membership above which a row counts as attracted by a cluster.
pub const ATTRACTED_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EliteParams {
    pub capacity: usize,
    /// Solutions whose weight correlation exceeds this are duplicates.
    pub t_s1: f64,
    /// Cluster proposals more similar than this are duplicates.
    pub t_s2: f64,
    /// Minimum cluster size as a fraction of N; `None` means `1/(3K)`.
    pub t_s3: Option<f64>,
    pub max_len: usize,
    /// Point-set overlap that, together with aligned coefficients, marks duplicate proposals.
    pub overlap_with_alignment: f64,
}

impl Default for EliteParams {
    fn default() -> Self {
        Self {
            capacity: 5,
            t_s1: 0.5,
            t_s2: 0.8,
            t_s3: None,
            max_len: 7,
            overlap_with_alignment: 0.5,
        }
    }
}

impl EliteParams {
    pub fn min_size(&self, k: usize) -> f64 {
        self.t_s3.unwrap_or(1.0 / (3.0 * k as f64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EliteEntry {
    pub model: ClrModel,
    pub error: f64,
}

/// Capped archive sorted by ascending error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EliteStore {
    pub params: EliteParams,
    entries: Vec<EliteEntry>,
}

impl EliteStore {
    pub fn new(params: EliteParams) -> Self {
        Self {
            params,
            entries: Vec::new(),
        }
    }

    /// Builds a store from raw entries without de-duplication.
    pub fn from_entries(params: EliteParams, mut entries: Vec<EliteEntry>) -> Self {
        entries.sort_by(|a, b| a.error.total_cmp(&b.error));
        entries.truncate(params.capacity);
        Self { params, entries }
    }

    pub fn entries(&self) -> &[EliteEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn best(&self) -> Option<&EliteEntry> {
        self.entries.first()
    }
}

/// Offers a solution to the store. A candidate correlated with existing entries
/// replaces them only if it beats all of them. Returns whether it was stored.
pub fn update_elite(store: &mut EliteStore, model: &ClrModel, error: f64) -> bool {
    if !error.is_finite() || store.params.capacity == 0 {
        return false;
    }
    let full = store.entries.len() >= store.params.capacity;
    if full && error >= store.entries.last().map_or(f64::INFINITY, |e| e.error) {
        return false;
    }
    let labels = hard_labels(&model.weights);
    let k = model.k();
    let mut correlated = Vec::new();
    for (i, e) in store.entries.iter().enumerate() {
        if correlation_of_labels(&labels, &e.model.hard_labels(), k) > store.params.t_s1 {
            if e.error <= error {
                return false;
            }
            correlated.push(i);
        }
    }
    for &i in correlated.iter().rev() {
        store.entries.remove(i);
    }
    let pos = store.entries.partition_point(|e| e.error <= error);
    store.entries.insert(
        pos,
        EliteEntry {
            model: model.clone(),
            error,
        },
    );
    store.entries.truncate(store.params.capacity);
    true
}

fn correlation_of_labels(a: &[usize], b: &[usize], k: usize) -> f64 {
    if k <= 1 {
        return 1.0;
    }
    let n = a.len();
    let mut conf = DMatrix::zeros(k, k);
    for (&i, &j) in a.iter().zip(b) {
        conf[(i, j)] += 1.0;
    }
    let perm = best_assignment(&conf);
    let matched: f64 = perm.iter().enumerate().map(|(i, &j)| conf[(i, j)]).sum();
    let kf = k as f64;
    // Pearson correlation of two one-hot indicator matrices, each row holding a single one.
    (matched / n as f64 - 1.0 / kf) / (1.0 - 1.0 / kf)
}

/// Pearson correlation of hard-assignment indicators after best cluster alignment.
pub fn weight_correlation(wa: &DMatrix<f64>, wb: &DMatrix<f64>) -> Result<f64> {
    if wa.shape() != wb.shape() {
        return Err(ClrError::ShapeMismatch("weight matrices differ in shape".into()));
    }
    Ok(correlation_of_labels(&hard_labels(wa), &hard_labels(wb), wa.ncols()))
}

/// Rows whose membership in `cluster` exceeds one half.
pub fn attracted_rows(w: &DMatrix<f64>, cluster: usize) -> Vec<usize> {
    (0..w.nrows()).filter(|&i| w[(i, cluster)] > ATTRACTED_WEIGHT).collect()
}

/// Cluster index drawn with probability proportional to `sizes`, skipping `exclude`.
pub fn pick_donor(sizes: &[f64], exclude: &[usize], rng: &mut ClrRng) -> Option<usize> {
    let cand: Vec<usize> = (0..sizes.len()).filter(|c| !exclude.contains(c)).collect();
    let total: f64 = cand.iter().map(|&c| sizes[c].max(0.0)).sum();
    if cand.is_empty() {
        return None;
    }
    if !(total > 0.0) {
        return cand.choose(rng).copied();
    }
    let mut t = rng.gen::<f64>() * total;
    for &c in &cand {
        t -= sizes[c].max(0.0);
        if t < 0.0 {
            return Some(c);
        }
    }
    cand.last().copied()
}

/// Splits `donor` using its attracted rows and writes the pair into rows
/// `donor` and `target` of `beta`. `None` when the donor attracts too few rows.
pub fn split_cluster(
    ds: &Dataset,
    beta: &mut DMatrix<f64>,
    w: &DMatrix<f64>,
    donor: usize,
    target: usize,
    params: &SplitParams,
    rng: &mut ClrRng,
) -> Option<(Vec<usize>, SplitMethod)> {
    let rows = attracted_rows(w, donor);
    if rows.len() < ds.p() + 2 {
        return None;
    }
    let (xs, ys) = ds.select_rows(&rows);
    let b0 = beta.row(donor).transpose();
    let out = propose_split(&xs, &ys, &b0, params, rng);
    beta.row_mut(donor).copy_from(&out.betas[0].transpose());
    beta.row_mut(target).copy_from(&out.betas[1].transpose());
    Some((rows, out.used))
}

fn angle(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 0.0 } else { std::f64::consts::FRAC_PI_2 };
    }
    (a.dot(b) / (na * nb)).clamp(-1.0, 1.0).acos()
}

/// Minimum pairwise angle that counts as distinct.
pub const DISTINCT_ANGLE: f64 = 1e-6;

/// Nudges rows that duplicate an earlier row. Returns the number perturbed.
pub fn separate_duplicates(beta: &mut DMatrix<f64>, rng: &mut ClrRng) -> usize {
    let k = beta.nrows();
    let mut moved = 0;
    for j in 1..k {
        for _ in 0..8 {
            let bj = beta.row(j).transpose();
            let dup = (0..j).any(|i| angle(&beta.row(i).transpose(), &bj) <= DISTINCT_ANGLE);
            if !dup {
                break;
            }
            let mut u = DVector::from_fn(bj.len(), |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            u /= u.norm().max(f64::MIN_POSITIVE);
            let scale = 0.1 * if bj.norm() > 0.0 { bj.norm() } else { 1.0 };
            beta.row_mut(j).copy_from(&(bj + u * scale).transpose());
            moved += 1;
        }
    }
    moved
}

/// One cluster taken out of an archived solution.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub beta: DVector<f64>,
    pub sigma: f64,
    /// Sorted attracted rows.
    pub members: Vec<usize>,
    /// Column weight sum over N.
    pub size: f64,
    pub parent_error: f64,
}

fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Absolute cosine between slope parts of two regression vectors.
fn slope_cosine(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let p = a.len() - 1;
    let (sa, sb) = (a.rows(1, p), b.rows(1, p));
    let d = sa.norm() * sb.norm();
    if d == 0.0 {
        return 1.0;
    }
    (sa.dot(&sb) / d).abs()
}

/// Whether two proposals describe the same cluster.
pub fn redundant(a: &Proposal, b: &Proposal, params: &EliteParams) -> bool {
    let jac = jaccard(&a.members, &b.members);
    jac > params.t_s2 || (slope_cosine(&a.beta, &b.beta) > params.t_s2 && jac > params.overlap_with_alignment)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecombinePath {
    /// One distinct solution: its smallest cluster is replaced by a split.
    SingleSplit,
    /// Too few distinct proposals: the survivors are refit and split up to K.
    RefitAndSplit,
    /// Best of the evaluated K-subsets of proposals.
    Combination,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recombination {
    pub beta: DMatrix<f64>,
    pub path: RecombinePath,
    pub evaluated: usize,
}

/// Keeps the lowest-error member of every group of correlated solutions.
pub fn distinct_entries<'a>(store: &'a EliteStore) -> Vec<&'a EliteEntry> {
    let mut kept: Vec<&EliteEntry> = Vec::new();
    for e in store.entries() {
        let labels = e.model.hard_labels();
        let k = e.model.k();
        if kept
            .iter()
            .all(|o| correlation_of_labels(&labels, &o.model.hard_labels(), k) <= store.params.t_s1)
        {
            kept.push(e);
        }
    }
    kept
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

struct Workspace<'a> {
    ds: &'a Dataset,
    xt: DMatrix<f64>,
    xt_t: DMatrix<f64>,
}

impl<'a> Workspace<'a> {
    fn new(ds: &'a Dataset) -> Self {
        let xt = ds.augmented();
        let xt_t = xt.transpose();
        Self { ds, xt, xt_t }
    }

    /// One reweight and WLS pass; `None` if any cluster is degenerate.
    fn refit(&self, beta: &DMatrix<f64>, sigma: &DVector<f64>) -> Option<(DMatrix<f64>, DMatrix<f64>, f64)> {
        let n = self.ds.n();
        let r = residuals(&self.xt, self.ds.y(), beta);
        let w = reweight(&r, sigma);
        let mut out = beta.clone();
        for c in 0..beta.nrows() {
            let wc = &w.as_slice()[c * n..(c + 1) * n];
            let b = wls_pretransposed(&self.xt, &self.xt_t, self.ds.y(), wc).ok()?;
            out.row_mut(c).copy_from(&b.transpose());
        }
        let r2 = residuals(&self.xt, self.ds.y(), &out);
        let err = weighted_sse(&r2, &w);
        err.is_finite().then_some((out, w, err))
    }

    fn weights_for(&self, beta: &DMatrix<f64>, sigma: &DVector<f64>) -> DMatrix<f64> {
        reweight(&residuals(&self.xt, self.ds.y(), beta), sigma)
    }
}

fn single_split(
    ws: &Workspace,
    entry: &EliteEntry,
    split: &SplitParams,
    rng: &mut ClrRng,
) -> DMatrix<f64> {
    let model = &entry.model;
    let k = model.k();
    let mut beta = model.beta.clone();
    if k < 2 {
        return beta;
    }
    let sizes = column_means(&model.weights);
    let smallest = (0..k).fold(0, |b, c| if sizes[c] < sizes[b] { c } else { b });
    let keep: Vec<usize> = (0..k).filter(|&c| c != smallest).collect();
    let sub_beta = DMatrix::from_fn(keep.len(), beta.ncols(), |i, j| beta[(keep[i], j)]);
    let sub_sigma = DVector::from_fn(keep.len(), |i, _| model.sigma[keep[i]]);
    let sub_w = ws.weights_for(&sub_beta, &sub_sigma);
    let mut w = DMatrix::zeros(ws.ds.n(), k);
    for (i, &c) in keep.iter().enumerate() {
        w.set_column(c, &sub_w.column(i));
    }
    let sub_sizes: Vec<f64> = (0..k).map(|c| w.column(c).sum()).collect();
    if let Some(donor) = pick_donor(&sub_sizes, &[smallest], rng) {
        if split_cluster(ws.ds, &mut beta, &w, donor, smallest, split, rng).is_none() {
            let copy = beta.row(donor).clone_owned();
            beta.row_mut(smallest).copy_from(&copy);
        }
    }
    separate_duplicates(&mut beta, rng);
    beta
}

fn refit_and_split(
    ws: &Workspace,
    props: &[Proposal],
    k: usize,
    split: &SplitParams,
    rng: &mut ClrRng,
) -> DMatrix<f64> {
    let m = props.len();
    let cols = props[0].beta.len();
    let mut beta = DMatrix::zeros(k, cols);
    let mut sigma = DVector::zeros(k);
    for (i, pr) in props.iter().enumerate() {
        beta.row_mut(i).copy_from(&pr.beta.transpose());
        sigma[i] = pr.sigma;
    }
    let sub_sigma = DVector::from_fn(m, |i, _| sigma[i]);
    if let Some((refit, _, _)) = ws.refit(&beta.rows(0, m).into_owned(), &sub_sigma) {
        beta.rows_mut(0, m).copy_from(&refit);
    }
    let n = ws.ds.n();
    for target in m..k {
        let active_b = beta.rows(0, target).into_owned();
        let active_s = DVector::from_fn(target, |i, _| sigma[i]);
        let w_act = ws.weights_for(&active_b, &active_s);
        let mut w = DMatrix::zeros(n, k);
        w.columns_mut(0, target).copy_from(&w_act);
        let sizes: Vec<f64> = (0..target).map(|c| w.column(c).sum()).collect();
        let donor = pick_donor(&sizes, &[], rng).unwrap_or(0);
        if split_cluster(ws.ds, &mut beta, &w, donor, target, split, rng).is_none() {
            let copy = beta.row(donor).clone_owned();
            beta.row_mut(target).copy_from(&copy);
        }
        sigma[target] = sigma[donor];
    }
    separate_duplicates(&mut beta, rng);
    beta
}

/// Proposes new starting coefficients from the archive.
pub fn recombine(
    store: &EliteStore,
    ds: &Dataset,
    split: &SplitParams,
    sigma_floor: f64,
    rng: &mut ClrRng,
) -> Result<Recombination> {
    let params = &store.params;
    let distinct = distinct_entries(store);
    let first = *distinct
        .first()
        .ok_or_else(|| ClrError::InvalidInput("elite store is empty".into()))?;
    let k = first.model.k();
    let ws = Workspace::new(ds);
    if distinct.len() == 1 || k < 2 {
        return Ok(Recombination {
            beta: single_split(&ws, first, split, rng),
            path: RecombinePath::SingleSplit,
            evaluated: 0,
        });
    }

    let mut props: Vec<Proposal> = Vec::new();
    for e in &distinct {
        let sizes = column_means(&e.model.weights);
        for c in 0..k {
            props.push(Proposal {
                beta: e.model.beta.row(c).transpose(),
                sigma: e.model.sigma[c].max(sigma_floor),
                members: attracted_rows(&e.model.weights, c),
                size: sizes[c],
                parent_error: e.error,
            });
        }
    }
    // entries are sorted by error, so earlier proposals come from stronger parents
    let mut kept: Vec<Proposal> = Vec::new();
    for pr in props {
        if !kept.iter().any(|q| redundant(q, &pr, params)) {
            kept.push(pr);
        }
    }
    let min_size = params.min_size(k);
    kept.retain(|p| p.size >= min_size);

    if kept.is_empty() {
        return Ok(Recombination {
            beta: single_split(&ws, first, split, rng),
            path: RecombinePath::SingleSplit,
            evaluated: 0,
        });
    }
    if kept.len() < k {
        return Ok(Recombination {
            beta: refit_and_split(&ws, &kept, k, split, rng),
            path: RecombinePath::RefitAndSplit,
            evaluated: 0,
        });
    }

    let l = kept.len().min(params.max_len.max(k));
    let mut order: Vec<usize> = (0..kept.len()).collect();
    order.shuffle(rng);
    order.truncate(l);
    let cols = kept[0].beta.len();
    let mut best: Option<(f64, DMatrix<f64>)> = None;
    let mut evaluated = 0;
    for combo in combinations(l, k) {
        let beta = DMatrix::from_fn(k, cols, |i, j| kept[order[combo[i]]].beta[j]);
        let sigma = DVector::from_fn(k, |i, _| kept[order[combo[i]]].sigma);
        evaluated += 1;
        if let Some((refit, w, err)) = ws.refit(&beta, &sigma) {
            // a collapsed refit is no better than a degenerate one
            let ok = (0..k).all(|c| w.column(c).sum() > 0.0);
            if ok && best.as_ref().map_or(true, |b| err < b.0) {
                best = Some((err, refit));
            }
        }
    }
    match best {
        Some((_, mut beta)) => {
            separate_duplicates(&mut beta, rng);
            Ok(Recombination {
                beta,
                path: RecombinePath::Combination,
                evaluated,
            })
        }
        None => Ok(Recombination {
            beta: single_split(&ws, first, split, rng),
            path: RecombinePath::SingleSplit,
            evaluated,
        }),
    }
}

/// Sigma per cluster for a fixed assignment.
pub fn sigma_for(res: &DMatrix<f64>, w: &DMatrix<f64>, floor: f64) -> DVector<f64> {
    let n = res.nrows();
    DVector::from_fn(res.ncols(), |c, _| {
        estimate_sigma(&res.as_slice()[c * n..(c + 1) * n], &w.as_slice()[c * n..(c + 1) * n], floor).value
    })
}
