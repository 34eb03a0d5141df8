//! Model quality metrics: resolvability (global and pairwise), X-predictability,
//! ACC against a known truth, RMSE, and closed-form overlap references for
//! special geometries.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::assignment::best_assignment;
use crate::dataset::{augment, Dataset};
use crate::error::{ClrError, Result};
use crate::predict::{fit_density, predict, ClusterDensityModel};
use crate::regression::ClrModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvabilityReport {
    pub r_global: f64,
    /// One entry per cluster pair, sorted descending.
    pub r_pairwise: Vec<f64>,
    /// Normalization constant of the overlap density.
    pub z_norm: f64,
    pub pair_labels: Vec<(usize, usize)>,
}

/// Overlap `Q` from per-row cluster predictions `m` (N x K).
fn overlap_from_predictions(m: &DMatrix<f64>, sigma: &[f64]) -> f64 {
    let k = sigma.len();
    let inv2: Vec<f64> = sigma.iter().map(|s| 1.0 / (s * s)).collect();
    let s_inv: f64 = inv2.iter().sum();
    let log_geo: f64 = sigma.iter().map(|s| s.ln()).sum::<f64>() / k as f64;
    let lead = (k as f64 / s_inv).sqrt() / log_geo.exp();
    let n = m.nrows();
    let mut acc = 0.0;
    for l in 0..n {
        let mut quad = 0.0;
        let mut lin = 0.0;
        for c in 0..k {
            let v = m[(l, c)];
            quad += v * v * inv2[c];
            lin += v * inv2[c];
        }
        // Exponent is shift invariant; centering the predictions keeps it well conditioned.
        let mean = lin / s_inv;
        let mut centered = 0.0;
        for c in 0..k {
            let d = m[(l, c)] - mean;
            centered += d * d * inv2[c];
        }
        let expo = if centered.is_finite() { centered } else { quad - lin * lin / s_inv };
        acc += (-0.5 * expo).exp();
    }
    lead * acc / n as f64
}

fn check_shapes(x: &DMatrix<f64>, beta: &DMatrix<f64>, sigma: &DVector<f64>) -> Result<()> {
    if beta.ncols() != x.ncols() + 1 {
        return Err(ClrError::ShapeMismatch(format!(
            "beta has {} columns, X needs {}",
            beta.ncols(),
            x.ncols() + 1
        )));
    }
    if sigma.len() != beta.nrows() {
        return Err(ClrError::ShapeMismatch("one sigma per cluster".into()));
    }
    if sigma.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(ClrError::InvalidInput("sigma must be positive and finite".into()));
    }
    Ok(())
}

/// Empirical resolvability over the observed rows of `x` (N x p), clamped to [0, 1].
/// Returns 1 for a single cluster.
pub fn resolvability(x: &DMatrix<f64>, beta: &DMatrix<f64>, sigma: &DVector<f64>) -> Result<f64> {
    check_shapes(x, beta, sigma)?;
    if beta.nrows() < 2 {
        return Ok(1.0);
    }
    let m = augment(x) * beta.transpose();
    Ok(resolvability_of_predictions(&m, sigma.as_slice()))
}

fn resolvability_of_predictions(m: &DMatrix<f64>, sigma: &[f64]) -> f64 {
    (1.0 - overlap_from_predictions(m, sigma)).clamp(0.0, 1.0)
}

/// `Z` such that the overlap of K identical clusters is one.
pub fn normalization_constant(sigma: &[f64]) -> f64 {
    let k = sigma.len() as f64;
    let log_prod: f64 = sigma.iter().map(|s| s.ln()).sum();
    let log_zinv = 0.5 * (k - 2.0) * (2.0 * std::f64::consts::PI).ln() + 0.5 * k.ln() + (k - 1.0) / k * log_prod;
    (-log_zinv).exp()
}

/// Resolvability of every cluster pair, sorted descending.
pub fn pairwise_resolvability(
    x: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    sigma: &DVector<f64>,
) -> Result<Vec<f64>> {
    Ok(resolvability_report(x, beta, sigma)?.r_pairwise)
}

pub fn resolvability_report(
    x: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    sigma: &DVector<f64>,
) -> Result<ResolvabilityReport> {
    check_shapes(x, beta, sigma)?;
    let k = beta.nrows();
    let m = augment(x) * beta.transpose();
    let r_global = if k < 2 { 1.0 } else { resolvability_of_predictions(&m, sigma.as_slice()) };
    let mut pairs = Vec::with_capacity(k * k.saturating_sub(1) / 2);
    for a in 0..k {
        for b in a + 1..k {
            let sub = DMatrix::from_fn(m.nrows(), 2, |i, j| m[(i, if j == 0 { a } else { b })]);
            pairs.push((resolvability_of_predictions(&sub, &[sigma[a], sigma[b]]), (a, b)));
        }
    }
    pairs.sort_by(|p, q| q.0.total_cmp(&p.0).then(p.1.cmp(&q.1)));
    Ok(ResolvabilityReport {
        r_global,
        r_pairwise: pairs.iter().map(|p| p.0).collect(),
        z_norm: normalization_constant(sigma.as_slice()),
        pair_labels: pairs.iter().map(|p| p.1).collect(),
    })
}

/// Normalized-entropy X-predictability of a membership probability vector.
pub fn xp_score(p: &[f64]) -> f64 {
    let k = p.len();
    if k <= 1 {
        return 1.0;
    }
    let plogp: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum();
    (1.0 + plogp / (k as f64).ln()).clamp(0.0, 1.0)
}

/// Denominator used by [`acc`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccNorm {
    /// `||beta_k||` of the matched true cluster.
    #[default]
    PerCluster,
    /// Frobenius norm of the full true coefficient matrix.
    Global,
}

/// Permutation-matched relative coefficient accuracy with per-cluster normalization.
pub fn acc(beta_hat: &DMatrix<f64>, beta_true: &DMatrix<f64>) -> Result<f64> {
    acc_with(beta_hat, beta_true, AccNorm::PerCluster)
}

pub fn acc_with(beta_hat: &DMatrix<f64>, beta_true: &DMatrix<f64>, norm: AccNorm) -> Result<f64> {
    if beta_hat.shape() != beta_true.shape() {
        return Err(ClrError::ShapeMismatch(format!(
            "estimate is {:?}, truth is {:?}",
            beta_hat.shape(),
            beta_true.shape()
        )));
    }
    let k = beta_true.nrows();
    if k == 0 {
        return Err(ClrError::InvalidInput("no clusters".into()));
    }
    let global = beta_true.norm();
    let score = DMatrix::from_fn(k, k, |t, h| {
        let err = (beta_hat.row(h) - beta_true.row(t)).norm();
        let denom = match norm {
            AccNorm::PerCluster => beta_true.row(t).norm(),
            AccNorm::Global => global,
        };
        if denom > 0.0 {
            (1.0 - err / denom).max(0.0)
        } else if err == 0.0 {
            1.0
        } else {
            0.0
        }
    });
    let perm = best_assignment(&score);
    Ok(perm.iter().enumerate().map(|(t, &h)| score[(t, h)]).sum::<f64>() / k as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RmseMode {
    /// Prediction of the most probable cluster.
    Coerced,
    /// Probability-weighted average of cluster predictions.
    Weighted,
}

/// RMSE of X-only predictions, with densities fit from the model's own weights.
pub fn rmse(ds: &Dataset, model: &ClrModel, mode: RmseMode) -> Result<f64> {
    let density = fit_density(ds, model)?;
    rmse_with_density(ds, model, &density, mode)
}

pub fn rmse_with_density(
    ds: &Dataset,
    model: &ClrModel,
    density: &ClusterDensityModel,
    mode: RmseMode,
) -> Result<f64> {
    let x = ds.x();
    let y = ds.y();
    let mut sse = 0.0;
    for i in 0..ds.n() {
        let pr = predict(&x.row(i).transpose(), model, density)?;
        let yhat = match mode {
            RmseMode::Coerced => pr.coerced,
            RmseMode::Weighted => pr.weighted,
        };
        sse += (y[i] - yhat).powi(2);
    }
    Ok((sse / ds.n() as f64).sqrt())
}

/// Geometries with a known overlap value.
#[derive(Debug, Clone, PartialEq)]
pub enum OverlapCase {
    /// Clusters that never share support: overlap 0.
    Disjoint,
    /// Equal noise, distinct lines over a standard normal scalar predictor.
    /// `beta` is K x 2 (intercept, slope).
    EqualSigma { beta: DMatrix<f64>, sigma: f64 },
    /// Two identical hyperplanes with noise ratio `sigma2 / sigma1`.
    SharedBeta { ratio: f64 },
}

/// Reference overlap `Q`; resolvability is `1 - Q`.
pub fn overlap_oracle(case: &OverlapCase) -> Result<f64> {
    match case {
        OverlapCase::Disjoint => Ok(0.0),
        OverlapCase::SharedBeta { ratio } => {
            if !(*ratio > 0.0) || !ratio.is_finite() {
                return Err(ClrError::InvalidInput("noise ratio must be positive".into()));
            }
            Ok((2.0 * ratio / (1.0 + ratio * ratio)).sqrt())
        }
        OverlapCase::EqualSigma { beta, sigma } => {
            if beta.ncols() != 2 || beta.nrows() < 2 {
                return Err(ClrError::InvalidInput("need K >= 2 lines with intercept and slope".into()));
            }
            if !(*sigma > 0.0) {
                return Err(ClrError::InvalidInput("sigma must be positive".into()));
            }
            let k = beta.nrows() as f64;
            let integrand = |x: f64| {
                let m: Vec<f64> = beta.row_iter().map(|b| b[0] + b[1] * x).collect();
                let s: f64 = m.iter().sum();
                let alpha = (m.iter().map(|v| v * v).sum::<f64>() - s * s / k).max(0.0);
                (-alpha / (2.0 * sigma * sigma)).exp() * (-0.5 * x * x).exp()
                    / (2.0 * std::f64::consts::PI).sqrt()
            };
            Ok(simpson(integrand, -10.0, 10.0, 4000))
        }
    }
}

/// Composite Simpson rule with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn normal_x(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng_from_seed(seed);
        DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn identical_clusters_have_zero_resolvability() {
        let x = normal_x(500, 3, 1);
        let beta = DMatrix::from_row_slice(2, 4, &[0.5, 1.0, -2.0, 0.3, 0.5, 1.0, -2.0, 0.3]);
        let r = resolvability(&x, &beta, &DVector::from_vec(vec![0.7, 0.7])).unwrap();
        assert!(r.abs() < 1e-9);
    }

    #[test]
    fn far_parallel_planes_are_resolvable() {
        let x = normal_x(1000, 2, 2);
        let s = 0.3;
        let beta = DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 1.0, 100.0 * s, 1.0, 1.0]);
        let r = resolvability(&x, &beta, &DVector::from_vec(vec![s, s])).unwrap();
        assert!(r >= 0.999);
    }

    #[test]
    fn shared_beta_matches_closed_form() {
        let x = normal_x(10_000, 2, 3);
        let beta = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, -0.5, 1.0, 0.5, -0.5]);
        let r = resolvability(&x, &beta, &DVector::from_vec(vec![1.0, 0.25])).unwrap();
        let q = overlap_oracle(&OverlapCase::SharedBeta { ratio: 0.25 }).unwrap();
        assert!((r - (1.0 - q)).abs() < 2e-2);
        assert!((1.0 - q - 0.3140).abs() < 1e-3);
    }

    #[test]
    fn shared_beta_oracle_limits() {
        assert!((overlap_oracle(&OverlapCase::SharedBeta { ratio: 1.0 }).unwrap() - 1.0).abs() < 1e-15);
        assert!(overlap_oracle(&OverlapCase::SharedBeta { ratio: 1e-8 }).unwrap() < 1e-3);
        assert!(overlap_oracle(&OverlapCase::SharedBeta { ratio: -1.0 }).is_err());
    }

    #[test]
    fn equal_sigma_oracle_identical_lines_is_one() {
        let beta = DMatrix::from_row_slice(2, 2, &[0.3, 1.0, 0.3, 1.0]);
        let q = overlap_oracle(&OverlapCase::EqualSigma { beta, sigma: 0.4 }).unwrap();
        assert!((q - 1.0).abs() < 1e-9);
    }

    #[test]
    fn equal_sigma_oracle_matches_empirical_average() {
        // crossing lines: alpha = (slope difference)^2 x^2 / 2, closed form 1/sqrt(1 + d^2/(2 s^2))
        let beta = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.2]);
        let s = 0.5;
        let q = overlap_oracle(&OverlapCase::EqualSigma { beta, sigma: s }).unwrap();
        let d2 = 0.8f64 * 0.8;
        let exact = 1.0 / (1.0 + d2 / (2.0 * s * s)).sqrt();
        assert!((q - exact).abs() < 1e-9);
    }

    #[test]
    fn pairwise_single_pair_equals_global() {
        let x = normal_x(300, 2, 4);
        let beta = DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let sig = DVector::from_vec(vec![0.5, 0.5]);
        let rep = resolvability_report(&x, &beta, &sig).unwrap();
        assert_eq!(rep.r_pairwise.len(), 1);
        assert!((rep.r_pairwise[0] - rep.r_global).abs() < 1e-15);
        assert_eq!(rep.pair_labels, vec![(0, 1)]);
    }

    #[test]
    fn pairwise_three_clusters_one_duplicate() {
        let x = normal_x(500, 2, 5);
        let beta = DMatrix::from_row_slice(
            3,
            3,
            &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 100.0, 0.0, 1.0],
        );
        let sig = DVector::from_vec(vec![0.2, 0.2, 0.2]);
        let rp = pairwise_resolvability(&x, &beta, &sig).unwrap();
        assert_eq!(rp.len(), 3);
        assert!(rp[0] > 0.999 && rp[1] > 0.999 && rp[2] < 1e-9);
    }

    #[test]
    fn resolvability_is_permutation_and_rotation_invariant() {
        let x = normal_x(400, 3, 6);
        let beta = DMatrix::from_row_slice(
            3,
            4,
            &[0.1, 1.0, 0.2, 0.0, -0.3, 0.0, 1.0, 0.5, 0.2, 0.4, -0.1, 1.0],
        );
        let sig = DVector::from_vec(vec![0.5, 0.3, 0.8]);
        let r = resolvability(&x, &beta, &sig).unwrap();
        let perm = [2usize, 0, 1];
        let bp = DMatrix::from_fn(3, 4, |i, j| beta[(perm[i], j)]);
        let sp = DVector::from_fn(3, |i, _| sig[perm[i]]);
        assert!((resolvability(&x, &bp, &sp).unwrap() - r).abs() < 1e-8);

        let q = normal_x(3, 3, 7).qr().q();
        let xr = &x * &q;
        let mut br = beta.clone();
        let slopes = beta.columns(1, 3) * &q;
        br.columns_mut(1, 3).copy_from(&slopes);
        assert!((resolvability(&xr, &br, &sig).unwrap() - r).abs() < 1e-8);
    }

    #[test]
    fn xp_examples() {
        assert_eq!(xp_score(&[0.0, 1.0, 0.0]), 1.0);
        assert!(xp_score(&[1.0 / 3.0; 3]).abs() < 1e-12);
        assert!((xp_score(&[0.53, 0.36, 0.11]) - 0.138).abs() < 1e-3);
        assert_eq!(xp_score(&[1.0]), 1.0);
    }

    #[test]
    fn xp_decreases_along_mixing_path() {
        let mut last = f64::INFINITY;
        for i in 0..=20 {
            let t = i as f64 / 20.0;
            let p = [1.0 - 2.0 * t / 3.0, t / 3.0, t / 3.0];
            let v = xp_score(&p);
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn acc_examples() {
        let bt = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.6, 0.8]);
        let swapped = DMatrix::from_row_slice(2, 3, &[0.0, 0.6, 0.8, 1.0, 0.0, 0.0]);
        assert_eq!(acc(&swapped, &bt).unwrap(), 1.0);
        assert_eq!(acc(&(&bt * 2.0), &bt).unwrap(), 0.0);
        let half = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.6, 1.3]);
        assert!((acc(&half, &bt).unwrap() - 0.75).abs() < 1e-12);
        assert!(acc(&DMatrix::zeros(3, 3), &bt).is_err());
    }

    #[test]
    fn acc_global_norm_is_not_below_per_cluster() {
        let bt = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0]);
        let bh = DMatrix::from_row_slice(2, 2, &[1.5, 0.0, 0.0, 3.0]);
        assert!(acc_with(&bh, &bt, AccNorm::Global).unwrap() >= acc(&bh, &bt).unwrap());
    }

    #[test]
    fn simpson_integrates_gaussian() {
        let v = simpson(|x| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt(), -10.0, 10.0, 2000);
        assert!((v - 1.0).abs() < 1e-10);
    }
}
