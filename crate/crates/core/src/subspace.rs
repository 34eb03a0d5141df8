//! Split proposals for a supercluster: whitened principal-component coordinates,
//! hyperplane (K-flat) fitting, the edge-point and center-point split
//! algorithms, and the dispatcher used by cluster revival.
//!
//! A hyperplane in projected coordinates is a `D`-vector `alpha = [a0, a]` with
//! signed distance `a0 + P_i . a` for a projected point `P_i`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ClrError, Result};
use crate::rng::ClrRng;
use crate::stats;

/// Below this the response coefficient of a recovered hyperplane counts as zero.
pub const VERTICAL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TransformContext {
    pub mu_z: DVector<f64>,
    /// Diagonal of the whitening scale (per-column std, 1 for constant columns).
    pub scale: DVector<f64>,
    /// (p+1) x (D-1) retained eigenvectors.
    pub v: DMatrix<f64>,
    pub theta_pca: f64,
    /// Columns of `Z` with zero variance.
    pub constant_columns: Vec<usize>,
}

impl TransformContext {
    /// Projected dimension plus one.
    pub fn d(&self) -> usize {
        self.v.ncols() + 1
    }
}

/// Projects `Z = [xs, ys]` onto whitened principal axes and maps `beta0` along.
pub fn forward_transform(
    xs: &DMatrix<f64>,
    ys: &DVector<f64>,
    beta0: &DVector<f64>,
    theta_pca: f64,
) -> Result<(DMatrix<f64>, DVector<f64>, TransformContext)> {
    let (m, p) = xs.shape();
    if ys.len() != m || beta0.len() != p + 1 {
        return Err(ClrError::ShapeMismatch("xs, ys and beta0 disagree".into()));
    }
    if m < p + 2 {
        return Err(ClrError::InvalidInput(format!("{m} points cannot span {} dimensions", p + 1)));
    }
    let q = p + 1;
    let mut mu = DVector::zeros(q);
    let mut scale = DVector::zeros(q);
    let mut constant_columns = Vec::new();
    let mut zh = DMatrix::zeros(m, q);
    for j in 0..q {
        let col: Vec<f64> = if j < p { xs.column(j).iter().copied().collect() } else { ys.iter().copied().collect() };
        let mean = stats::mean(&col);
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
        let mut sd = var.sqrt();
        if !(sd > 0.0) || sd <= 1e-14 * mean.abs() {
            sd = 1.0;
            constant_columns.push(j);
        }
        mu[j] = mean;
        scale[j] = sd;
        for i in 0..m {
            zh[(i, j)] = (col[i] - mean) / sd;
        }
    }
    let cov = zh.tr_mul(&zh) / m as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lmax = eig.eigenvalues[order[0]];
    if !(lmax > 0.0) {
        return Err(ClrError::DegeneratePoints("all points coincide".into()));
    }
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&i| eig.eigenvalues[i] / lmax >= theta_pca)
        .collect();
    let v = DMatrix::from_fn(q, keep.len(), |r, c| eig.eigenvectors[(r, keep[c])]);
    let pmat = &zh * &v;

    let mut b = beta0.rows(1, p).into_owned().insert_row(p, -1.0);
    let offset = beta0[0] + mu.dot(&b);
    b.component_mul_assign(&scale);
    let a = v.tr_mul(&b);
    let alpha0 = a.insert_row(0, offset);
    let ctx = TransformContext {
        mu_z: mu,
        scale,
        v,
        theta_pca,
        constant_columns,
    };
    Ok((pmat, alpha0, ctx))
}

/// Maps projected hyperplanes back to regression vectors `[beta_0, beta_1..p]`.
pub fn inverse_transform(alphas: &[DVector<f64>], ctx: &TransformContext) -> Result<Vec<DVector<f64>>> {
    let q = ctx.mu_z.len();
    let p = q - 1;
    alphas
        .iter()
        .map(|alpha| {
            if alpha.len() != ctx.d() {
                return Err(ClrError::ShapeMismatch(format!(
                    "alpha has {} entries, context expects {}",
                    alpha.len(),
                    ctx.d()
                )));
            }
            let mut b = &ctx.v * alpha.rows(1, ctx.d() - 1);
            b.component_div_assign(&ctx.scale);
            let by = b[p];
            if by.abs() < VERTICAL_TOL * b.norm().max(f64::MIN_POSITIVE) || by == 0.0 {
                return Err(ClrError::VerticalHyperplane);
            }
            let mut beta = DVector::zeros(q);
            beta[0] = (ctx.mu_z.dot(&b) - alpha[0]) / by;
            for j in 0..p {
                beta[j + 1] = -b[j] / by;
            }
            Ok(beta)
        })
        .collect()
}

/// Signed distance of each row of `pts` to hyperplane `alpha`.
pub fn signed_distances(pts: &DMatrix<f64>, alpha: &DVector<f64>) -> DVector<f64> {
    let d = pts.ncols();
    let mut out = pts * alpha.rows(1, d);
    out.add_scalar_mut(alpha[0]);
    out
}

/// Least-squares hyperplane through `pts` (m x d): unit normal from the smallest
/// covariance eigenvector, offset through the centroid. Returns `(alpha, spread)`.
pub fn kflat_fit(pts: &DMatrix<f64>) -> Result<(DVector<f64>, f64)> {
    let (m, d) = pts.shape();
    if d == 0 || m < d + 1 {
        return Err(ClrError::DegeneratePoints(format!("{m} points in {d} dimensions")));
    }
    let centroid = DVector::from_fn(d, |j, _| pts.column(j).mean());
    let mut c = pts.clone();
    for j in 0..d {
        c.column_mut(j).add_scalar_mut(-centroid[j]);
    }
    let cov = c.tr_mul(&c) / m as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lmax = eig.eigenvalues[order[0]];
    let rank = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > 1e-12 * lmax.max(f64::MIN_POSITIVE))
        .count();
    if !(lmax > 0.0) || rank + 1 < d {
        return Err(ClrError::DegeneratePoints(format!("rank {rank} in {d} dimensions")));
    }
    let normal = eig.eigenvectors.column(order[d - 1]).into_owned();
    let alpha = normal.clone().insert_row(0, -normal.dot(&centroid));
    let dist = signed_distances(pts, &alpha);
    let s = stats::sample_std(dist.as_slice());
    Ok((alpha, if s.is_finite() { s } else { 0.0 }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitParams {
    /// Shortlist percentile bounds for the edge-point search.
    pub f_range: (f64, f64),
    /// Neighborhood size; `None` means projected dimension + 3.
    pub k_nn: Option<usize>,
    pub xi: f64,
    /// Percentile slabs around the median signed distance; the first is the probing slab.
    pub theta_pairs: Vec<(f64, f64)>,
    /// K-flat refinement rounds after the edge-point search.
    pub optimize_steps: usize,
    pub theta_pca: f64,
}

impl Default for SplitParams {
    fn default() -> Self {
        Self {
            f_range: (5.0, 15.0),
            k_nn: None,
            xi: 3.0,
            theta_pairs: vec![(45.0, 55.0), (25.0, 75.0), (5.0, 95.0)],
            optimize_steps: 0,
            theta_pca: 1e-8,
        }
    }
}

impl SplitParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.f_range;
        if !(0.0 < lo && lo <= hi && hi < 100.0) {
            return Err(ClrError::InvalidInput("f_range must satisfy 0 < lo <= hi < 100".into()));
        }
        if self.theta_pairs.is_empty()
            || self
                .theta_pairs
                .iter()
                .any(|&(l, h)| !(0.0 < l && l < 50.0 && 50.0 < h && h < 100.0))
        {
            return Err(ClrError::InvalidInput("every slab needs 0 < low < 50 < high < 100".into()));
        }
        if !(self.xi > 0.0) {
            return Err(ClrError::InvalidInput("xi must be positive".into()));
        }
        Ok(())
    }
}

/// Indices of the `k` rows of `pts` nearest to row `i` (including `i`).
fn nearest(pts: &DMatrix<f64>, i: usize, k: usize) -> Vec<usize> {
    let m = pts.nrows();
    let mut d: Vec<(f64, usize)> = (0..m)
        .map(|j| {
            let mut s = 0.0;
            for c in 0..pts.ncols() {
                let t = pts[(j, c)] - pts[(i, c)];
                s += t * t;
            }
            (s, j)
        })
        .collect();
    let k = k.min(m);
    d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<usize> = d[..k].iter().map(|e| e.1).collect();
    out.sort_unstable();
    out
}

fn rows(pts: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), pts.ncols(), |r, c| pts[(idx[r], c)])
}

fn pair_error(pts: &DMatrix<f64>, a1: &DVector<f64>, a2: &DVector<f64>) -> f64 {
    let d1 = signed_distances(pts, a1);
    let d2 = signed_distances(pts, a2);
    d1.iter().zip(d2.iter()).map(|(u, v)| u.abs().min(v.abs())).sum()
}

/// Few rounds of two-flat alternating assignment and refit.
fn refine_pair(pts: &DMatrix<f64>, mut a1: DVector<f64>, mut a2: DVector<f64>, steps: usize) -> (DVector<f64>, DVector<f64>) {
    for _ in 0..steps {
        let d1 = signed_distances(pts, &a1);
        let d2 = signed_distances(pts, &a2);
        let (g1, g2): (Vec<usize>, Vec<usize>) = (0..pts.nrows()).partition(|&i| d1[i].abs() <= d2[i].abs());
        let f1 = kflat_fit(&rows(pts, &g1));
        let f2 = kflat_fit(&rows(pts, &g2));
        match (f1, f2) {
            (Ok((n1, _)), Ok((n2, _))) => {
                if pair_error(pts, &n1, &n2) < pair_error(pts, &a1, &a2) {
                    a1 = n1;
                    a2 = n2;
                } else {
                    break;
                }
            }
            _ => break,
        }
    }
    (a1, a2)
}

/// Seeds two hyperplanes from neighborhoods of points far from `beta0`.
pub fn edge_point_kflat(
    xs: &DMatrix<f64>,
    ys: &DVector<f64>,
    beta0: &DVector<f64>,
    params: &SplitParams,
    rng: &mut ClrRng,
) -> Result<[DVector<f64>; 2]> {
    params.validate()?;
    let (pts, alpha0, ctx) = forward_transform(xs, ys, beta0, params.theta_pca)?;
    let (m, dim) = pts.shape();
    let k_nn = params.k_nn.unwrap_or(dim + 3).max(dim + 1);
    if m < 2 * k_nn {
        return Err(ClrError::ProposalFailed(format!("{m} points are too few for two neighborhoods of {k_nn}")));
    }
    let f = rng.gen_range(params.f_range.0..=params.f_range.1);
    let dist0: Vec<f64> = signed_distances(&pts, &alpha0).iter().map(|v| v.abs()).collect();
    let cut = stats::percentile(&dist0, 100.0 - f);
    let mut shortlist: Vec<usize> = (0..m).filter(|&i| dist0[i] >= cut).collect();
    let mut in_list = vec![false; m];
    shortlist.iter().for_each(|&i| in_list[i] = true);

    let floor = 1e-9;
    let mut best: Option<(f64, DVector<f64>, DVector<f64>)> = None;
    while !shortlist.is_empty() {
        let s1 = *shortlist.choose(rng).expect("non-empty");
        let nb1 = nearest(&pts, s1, k_nn);
        in_list[s1] = false;
        nb1.iter().for_each(|&i| in_list[i] = false);
        let fit1 = kflat_fit(&rows(&pts, &nb1));
        if let Ok((a1, sd1)) = fit1 {
            let d1 = signed_distances(&pts, &a1);
            let s2 = (0..m).fold(0, |b, i| if d1[i].abs() > d1[b].abs() { i } else { b });
            let nb2 = nearest(&pts, s2, k_nn);
            in_list[s2] = false;
            nb2.iter().for_each(|&i| in_list[i] = false);
            if let Ok((a2, sd2)) = kflat_fit(&rows(&pts, &nb2)) {
                let d2 = signed_distances(&pts, &a2);
                let (t1, t2) = (sd1.max(floor), sd2.max(floor));
                for &i in &shortlist {
                    if (d1[i] / t1).abs().min((d2[i] / t2).abs()) < params.xi {
                        in_list[i] = false;
                    }
                }
                let e: f64 = (0..m).map(|i| d1[i].abs().min(d2[i].abs())).sum();
                if best.as_ref().map_or(true, |b| e < b.0) && inverse_transform(&[a1.clone(), a2.clone()], &ctx).is_ok() {
                    best = Some((e, a1, a2));
                }
            }
        }
        shortlist.retain(|&i| in_list[i]);
    }
    let (_, a1, a2) = best.ok_or_else(|| ClrError::ProposalFailed("no usable edge neighborhood".into()))?;
    let (a1, a2) = refine_pair(&pts, a1, a2, params.optimize_steps);
    let out = inverse_transform(&[a1, a2], &ctx)?;
    Ok([out[0].clone(), out[1].clone()])
}

fn slab(l: &[f64], lo: f64, hi: f64) -> Vec<usize> {
    let a = stats::percentile(l, lo);
    let b = stats::percentile(l, hi);
    (0..l.len()).filter(|&i| l[i] >= a && l[i] <= b).collect()
}

fn candidate(alpha0: &DVector<f64>, v: &DVector<f64>, gamma: f64) -> DVector<f64> {
    let dir = alpha0.rows(1, v.len()) + v * gamma;
    let n = dir.norm();
    dir.insert_row(0, alpha0[0]) / n
}

fn split_objective(pts: &DMatrix<f64>, alpha0: &DVector<f64>, v: &DVector<f64>, gamma: f64) -> f64 {
    let d1 = signed_distances(pts, &candidate(alpha0, v, gamma));
    let d2 = signed_distances(pts, &candidate(alpha0, v, -gamma));
    d1.iter().zip(d2.iter()).map(|(a, b)| a.abs().min(b.abs()).powi(2)).sum()
}

/// Golden-section minimization of `f` on `[a, b]` to relative tolerance `tol`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() <= tol * (a.abs() + b.abs()).max(f64::MIN_POSITIVE) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Number of coarse grid points scanned before the golden-section refinement.
const GAMMA_GRID: usize = 48;

/// Splits `beta0` into `beta0 +/- gamma v` using the thin spread of points near the
/// intersection of the two hidden hyperplanes.
pub fn center_point_split(
    xs: &DMatrix<f64>,
    ys: &DVector<f64>,
    beta0: &DVector<f64>,
    params: &SplitParams,
) -> Result<[DVector<f64>; 2]> {
    params.validate()?;
    let (pts, alpha0, ctx) = forward_transform(xs, ys, beta0, params.theta_pca)?;
    let (m, dim) = pts.shape();
    if dim < 2 {
        return Err(ClrError::ProposalFailed("projected space is one-dimensional".into()));
    }
    let a0 = alpha0.rows(1, dim).into_owned();
    let a0n = a0.norm();
    if !(a0n > 0.0) {
        return Err(ClrError::ProposalFailed("zero projected normal".into()));
    }
    let u0 = &a0 / a0n;
    let l: Vec<f64> = signed_distances(&pts, &alpha0).iter().map(|v| v / a0n).collect();
    let mut q = pts.clone();
    for i in 0..m {
        let li = (0..dim).map(|c| pts[(i, c)] * u0[c]).sum::<f64>();
        for c in 0..dim {
            q[(i, c)] -= li * u0[c];
        }
    }
    let (lo, hi) = params.theta_pairs[0];
    let center = slab(&l, lo, hi);
    if center.len() < dim + 1 {
        return Err(ClrError::ProposalFailed(format!("center slab holds {} points", center.len())));
    }
    let qs = rows(&q, &center);
    let eig = SymmetricEigen::new(qs.tr_mul(&qs));
    let drop = (0..dim)
        .max_by(|&a, &b| {
            let ca = eig.eigenvectors.column(a).dot(&u0).abs();
            let cb = eig.eigenvectors.column(b).dot(&u0).abs();
            ca.total_cmp(&cb)
        })
        .expect("dim >= 2");
    let basis: Vec<usize> = (0..dim).filter(|&c| c != drop).collect();
    let vmat = DMatrix::from_fn(dim, basis.len(), |r, c| eig.eigenvectors[(r, basis[c])]);

    let spreads: Vec<DVector<f64>> = params
        .theta_pairs
        .iter()
        .map(|&(lo, hi)| {
            let idx = slab(&l, lo, hi);
            let proj = rows(&q, &idx) * &vmat;
            DVector::from_fn(basis.len(), |c, _| proj.column(c).norm_squared() / idx.len().max(1) as f64)
        })
        .collect();
    let variation = |c: usize| {
        let vals: Vec<f64> = spreads.iter().map(|s| s[c]).collect();
        let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mn = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        if mx > 0.0 {
            (mx - mn) / mx
        } else {
            0.0
        }
    };
    let col = (0..basis.len())
        .max_by(|&a, &b| variation(a).total_cmp(&variation(b)).then(b.cmp(&a)))
        .expect("basis non-empty");
    let v = vmat.column(col).into_owned();

    let gmax = 10.0 * a0n;
    let obj = |g: f64| split_objective(&pts, &alpha0, &v, g);
    let grid: Vec<f64> = (1..=GAMMA_GRID).map(|i| gmax * i as f64 / GAMMA_GRID as f64).collect();
    let vals: Vec<f64> = grid.iter().map(|&g| obj(g)).collect();
    let bi = (0..grid.len()).fold(0, |b, i| if vals[i] < vals[b] { i } else { b });
    let lo = if bi == 0 { 0.0 } else { grid[bi - 1] };
    let hi = grid[(bi + 1).min(grid.len() - 1)];
    let gamma = golden_section(obj, lo, hi, 1e-3);

    let out = inverse_transform(&[candidate(&alpha0, &v, gamma), candidate(&alpha0, &v, -gamma)], &ctx)?;
    Ok([out[0].clone(), out[1].clone()])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMethod {
    EdgePoint,
    CenterPoint,
    /// Both algorithms failed; the pair is a random perturbation of `beta0`.
    Perturbed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitOutcome {
    pub betas: [DVector<f64>; 2],
    /// Algorithm drawn first.
    pub chosen: SplitMethod,
    /// Algorithm that produced `betas`.
    pub used: SplitMethod,
}

fn perturbed_pair(beta0: &DVector<f64>, rng: &mut ClrRng) -> [DVector<f64>; 2] {
    let n = beta0.len();
    let mut u = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    let un = u.norm();
    if un > 0.0 {
        u /= un;
    } else {
        u[0] = 1.0;
    }
    let norm = beta0.norm();
    let eps = 0.1 * if norm > 0.0 && norm.is_finite() { norm } else { 1.0 };
    let base = beta0.map(|v| if v.is_finite() { v } else { 0.0 });
    [&base + &u * eps, &base - &u * eps]
}

fn finite(pair: &[DVector<f64>; 2]) -> bool {
    pair.iter().all(|b| b.iter().all(|v| v.is_finite()))
}

/// Picks one split algorithm with equal probability, falls back to the other on
/// failure, and to a perturbation of `beta0` when both fail.
pub fn propose_split(
    xs: &DMatrix<f64>,
    ys: &DVector<f64>,
    beta0: &DVector<f64>,
    params: &SplitParams,
    rng: &mut ClrRng,
) -> SplitOutcome {
    let edge_first = rng.gen_bool(0.5);
    let order = if edge_first {
        [SplitMethod::EdgePoint, SplitMethod::CenterPoint]
    } else {
        [SplitMethod::CenterPoint, SplitMethod::EdgePoint]
    };
    for method in order {
        let res = match method {
            SplitMethod::EdgePoint => edge_point_kflat(xs, ys, beta0, params, rng),
            _ => center_point_split(xs, ys, beta0, params),
        };
        if let Ok(pair) = res {
            if finite(&pair) {
                return SplitOutcome {
                    betas: pair,
                    chosen: order[0],
                    used: method,
                };
            }
        }
    }
    SplitOutcome {
        betas: perturbed_pair(beta0, rng),
        chosen: order[0],
        used: SplitMethod::Perturbed,
    }
}
