//! E/M primitives shared by both EM flavours: weighted least squares, scale
//! estimation, Gaussian reweighting, k-means initialization and the
//! regression error.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{ClrError, Result};
use crate::rng::rng_from_seed;

/// K regression vectors with scales, memberships and mixing proportions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClrModel {
    /// K x (p+1), row k is `[beta_k0, beta_k]`.
    pub beta: DMatrix<f64>,
    pub sigma: DVector<f64>,
    /// N x K, row-stochastic.
    pub weights: DMatrix<f64>,
    pub mix: DVector<f64>,
}

impl ClrModel {
    pub fn new(beta: DMatrix<f64>, sigma: DVector<f64>, weights: DMatrix<f64>) -> Self {
        let mix = column_means(&weights);
        Self {
            beta,
            sigma,
            weights,
            mix,
        }
    }

    pub fn k(&self) -> usize {
        self.beta.nrows()
    }

    pub fn p(&self) -> usize {
        self.beta.ncols() - 1
    }

    pub fn beta_k(&self, k: usize) -> DVector<f64> {
        self.beta.row(k).transpose()
    }

    /// Hard label per row (argmax of the weights).
    pub fn hard_labels(&self) -> Vec<usize> {
        hard_labels(&self.weights)
    }
}

pub fn column_means(w: &DMatrix<f64>) -> DVector<f64> {
    let n = w.nrows().max(1) as f64;
    DVector::from_iterator(w.ncols(), w.column_iter().map(|c| c.sum() / n))
}

pub fn hard_labels(w: &DMatrix<f64>) -> Vec<usize> {
    w.row_iter()
        .map(|r| {
            let mut best = 0;
            for k in 1..r.len() {
                if r[k] > r[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn one_hot(labels: &[usize], k: usize) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(labels.len(), k);
    for (i, &l) in labels.iter().enumerate() {
        w[(i, l)] = 1.0;
    }
    w
}

/// Residual matrix `y 1^T - Xt beta^T`, N x K.
pub fn residuals(xt: &DMatrix<f64>, y: &DVector<f64>, beta: &DMatrix<f64>) -> DMatrix<f64> {
    let mut r = xt * beta.transpose();
    for mut col in r.column_iter_mut() {
        col.zip_apply(y, |v, yi| *v = yi - *v);
    }
    r
}

/// Minimizes `sum_n w_n (y_n - Xt_n beta)^2`.
pub fn weighted_least_squares(
    xt: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &[f64],
) -> Result<DVector<f64>> {
    let xt_t = xt.transpose();
    wls_pretransposed(xt, &xt_t, y, w)
}

/// Same as [`weighted_least_squares`] with `Xt^T` supplied by the caller.
pub(crate) fn wls_pretransposed(
    xt: &DMatrix<f64>,
    xt_t: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &[f64],
) -> Result<DVector<f64>> {
    let (n, d) = xt.shape();
    if w.len() != n || y.len() != n {
        return Err(ClrError::ShapeMismatch("weights, y and X must share N".into()));
    }
    if w.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(ClrError::InvalidInput("weights must be finite and non-negative".into()));
    }
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(ClrError::DegenerateCluster);
    }
    let wmax = w.iter().cloned().fold(0.0, f64::max);
    let effective = w.iter().filter(|&&v| v > 1e-12 * wmax).count();
    if effective < d {
        return Err(ClrError::DegenerateCluster);
    }

    let mut xtw = xt_t.clone();
    for (mut col, &wi) in xtw.column_iter_mut().zip(w) {
        col *= wi;
    }
    let gram = &xtw * xt;
    let rhs = &xtw * y;
    solve_spd_equilibrated(gram, rhs)
}

/// Solves `G b = r` for symmetric positive definite `G` after scaling it to
/// unit diagonal; near-singular systems are reported as degenerate.
pub(crate) fn solve_spd_equilibrated(gram: DMatrix<f64>, rhs: DVector<f64>) -> Result<DVector<f64>> {
    let d = gram.nrows();
    let mut scale = DVector::zeros(d);
    for i in 0..d {
        let g = gram[(i, i)];
        if g <= 0.0 || !g.is_finite() {
            return Err(ClrError::DegenerateCluster);
        }
        scale[i] = 1.0 / g.sqrt();
    }
    let gs = DMatrix::from_fn(d, d, |i, j| gram[(i, j)] * scale[i] * scale[j]);
    let chol = gs.cholesky().ok_or(ClrError::DegenerateCluster)?;
    let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if min_pivot * min_pivot < 1e-12 {
        return Err(ClrError::DegenerateCluster);
    }
    let rs = rhs.component_mul(&scale);
    let sol = chol.solve(&rs);
    Ok(sol.component_mul(&scale))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaEstimate {
    pub value: f64,
    pub floored: bool,
}

/// Weighted RMS of residuals, floored at `floor`.
pub fn estimate_sigma(residuals: &[f64], w: &[f64], floor: f64) -> SigmaEstimate {
    let (mut num, mut den) = (0.0, 0.0);
    for (&r, &wi) in residuals.iter().zip(w) {
        num += wi * r * r;
        den += wi;
    }
    let raw = if den > 0.0 { (num / den).sqrt() } else { 0.0 };
    if raw.is_finite() && raw >= floor {
        SigmaEstimate {
            value: raw,
            floored: false,
        }
    } else {
        SigmaEstimate {
            value: floor,
            floored: true,
        }
    }
}

/// `sigma_floor_rel * std(y)`, with a tiny absolute fallback for constant y.
pub fn sigma_floor(y: &DVector<f64>, rel: f64) -> f64 {
    let v: Vec<f64> = y.iter().cloned().collect();
    let sd = crate::stats::sample_std(&v);
    (rel * sd).max(f64::MIN_POSITIVE.sqrt())
}

/// Normal-density memberships, row normalized. Rows where every density
/// underflows become uniform.
pub fn reweight(residuals: &DMatrix<f64>, sigma: &DVector<f64>) -> DMatrix<f64> {
    let (n, k) = residuals.shape();
    let mut w = DMatrix::zeros(n, k);
    let inv: Vec<f64> = sigma.iter().map(|s| 1.0 / s).collect();
    let mut row = vec![0.0; k];
    for i in 0..n {
        let mut sum = 0.0;
        for c in 0..k {
            let z = residuals[(i, c)] * inv[c];
            row[c] = inv[c] * (-0.5 * z * z).exp();
            sum += row[c];
        }
        let max = row.iter().cloned().fold(0.0, f64::max);
        if max < f64::MIN_POSITIVE || !sum.is_finite() {
            for c in 0..k {
                w[(i, c)] = 1.0 / k as f64;
            }
        } else {
            for c in 0..k {
                w[(i, c)] = row[c] / sum;
            }
        }
    }
    w
}

/// `sum_n sum_k w_nk (y_n - Xt_n beta_k)^2`.
pub fn regression_error(ds: &Dataset, model: &ClrModel) -> f64 {
    let r = residuals(&ds.augmented(), ds.y(), &model.beta);
    weighted_sse(&r, &model.weights)
}

pub fn weighted_sse(residuals: &DMatrix<f64>, w: &DMatrix<f64>) -> f64 {
    residuals.zip_fold(w, 0.0, |acc, r, wi| acc + wi * r * r)
}

/// Standardized joint `(X, y)` rows, one point per row.
fn standardized_joint(ds: &Dataset) -> Vec<Vec<f64>> {
    let (n, p) = (ds.n(), ds.p());
    let mut cols: Vec<Vec<f64>> = (0..p)
        .map(|j| ds.x().column(j).iter().cloned().collect())
        .collect();
    cols.push(ds.y().iter().cloned().collect());
    for c in cols.iter_mut() {
        let m = crate::stats::mean(c);
        let sd = crate::stats::sample_std(c);
        let s = if sd > 0.0 { 1.0 / sd } else { 1.0 };
        c.iter_mut().for_each(|v| *v = (*v - m) * s);
    }
    (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Hard k-means memberships on the standardized `(X, y)` rows, k-means++
/// seeding and at most 50 Lloyd iterations.
pub fn kmeans_init(ds: &Dataset, k: usize, seed: u64) -> Result<DMatrix<f64>> {
    let n = ds.n();
    if k == 0 || n < k {
        return Err(ClrError::InvalidInput(format!("k-means needs N >= K (N={n}, K={k})")));
    }
    if k == 1 {
        return Ok(DMatrix::from_element(n, 1, 1.0));
    }
    let pts = standardized_joint(ds);
    let mut rng = rng_from_seed(seed);

    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(pts[rng.gen_range(0..n)].clone());
    let mut d2: Vec<f64> = pts.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if t < d {
                    pick = i;
                    break;
                }
                t -= d;
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        centroids.push(pts[next].clone());
        for (i, p) in pts.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }

    let dim = pts[0].len();
    let mut labels = vec![usize::MAX; n];
    for _ in 0..50 {
        let mut changed = false;
        for (i, p) in pts.iter().enumerate() {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (c, cen) in centroids.iter().enumerate() {
                let d = sq_dist(p, cen);
                if d < bd {
                    bd = d;
                    best = c;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in pts.iter().enumerate() {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i]].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed an empty cluster at the point farthest from its centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&pts[a], &centroids[labels[a]])
                            .total_cmp(&sq_dist(&pts[b], &centroids[labels[b]]))
                    })
                    .unwrap();
                counts[labels[far]] -= 1;
                for (s, v) in sums[labels[far]].iter_mut().zip(&pts[far]) {
                    *s -= v;
                }
                labels[far] = c;
                counts[c] = 1;
                sums[c] = pts[far].clone();
                changed = true;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    Ok(one_hot(&labels, k))
}

/// Uniformly random one-hot memberships.
pub fn random_init(n: usize, k: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng_from_seed(seed);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    one_hot(&labels, k)
}
