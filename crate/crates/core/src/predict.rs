//! Prediction from a fitted model using only `X`: per-cluster predictions,
//! membership probabilities from per-cluster Gaussian densities of `X`, the
//! coerced and weighted scalar reductions, and the per-point X-predictability.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{ClrError, Result};
use crate::metrics::xp_score;
use crate::regression::ClrModel;

/// Clusters whose total membership weight falls below this are dropped.
pub const MIN_CLUSTER_WEIGHT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Per-cluster weighted Gaussian fit of `X` plus mixing proportions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterDensityModel {
    /// `None` marks a dropped cluster (probability 0).
    pub components: Vec<Option<GaussianComponent>>,
    pub mix: Vec<f64>,
    #[serde(skip)]
    factors: Vec<Option<(Cholesky<f64, Dyn>, f64)>>,
}

impl PartialEq for ClusterDensityModel {
    fn eq(&self, other: &Self) -> bool {
        self.components == other.components && self.mix == other.mix
    }
}

impl ClusterDensityModel {
    pub fn new(components: Vec<Option<GaussianComponent>>, mix: Vec<f64>) -> Result<Self> {
        if components.len() != mix.len() {
            return Err(ClrError::ShapeMismatch("one mixing proportion per component".into()));
        }
        let mut out = Self {
            components,
            mix,
            factors: Vec::new(),
        };
        out.prepare()?;
        Ok(out)
    }

    /// Rebuilds cached factorizations, needed after deserialization.
    pub fn prepare(&mut self) -> Result<()> {
        self.factors = self
            .components
            .iter()
            .map(|c| match c {
                None => Ok(None),
                Some(g) => {
                    let chol = g.cov.clone().cholesky().ok_or_else(|| {
                        ClrError::InvalidInput("component covariance is not positive definite".into())
                    })?;
                    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                    Ok(Some((chol, logdet)))
                }
            })
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> Option<usize> {
        self.components.iter().flatten().next().map(|g| g.mean.len())
    }

    /// `ln(mix_k) + ln N(x; mean_k, cov_k)`; `-inf` for dropped clusters.
    pub fn log_weighted_densities(&self, x: &DVector<f64>) -> Vec<f64> {
        let p = x.len() as f64;
        self.components
            .iter()
            .zip(&self.factors)
            .zip(&self.mix)
            .map(|((c, f), &m)| match (c, f) {
                (Some(g), Some((chol, logdet))) if m > 0.0 => {
                    let d = x - &g.mean;
                    let z = chol.l_dirty().solve_lower_triangular(&d).unwrap_or(d.clone());
                    m.ln() - 0.5 * (z.norm_squared() + logdet + p * (2.0 * std::f64::consts::PI).ln())
                }
                _ => f64::NEG_INFINITY,
            })
            .collect()
    }
}

/// Weighted Gaussian per cluster using the model's memberships as observation weights.
pub fn fit_density(ds: &Dataset, model: &ClrModel) -> Result<ClusterDensityModel> {
    let (n, p, k) = (ds.n(), ds.p(), model.k());
    if model.weights.nrows() != n || model.weights.ncols() != k {
        return Err(ClrError::ShapeMismatch(format!(
            "weights are {}x{}, dataset needs {}x{}",
            model.weights.nrows(),
            model.weights.ncols(),
            n,
            k
        )));
    }
    let x = ds.x();
    let mut comps = Vec::with_capacity(k);
    let mut mix = Vec::with_capacity(k);
    for c in 0..k {
        let w = model.weights.column(c);
        let total = w.sum();
        if total < MIN_CLUSTER_WEIGHT {
            comps.push(None);
            mix.push(0.0);
            continue;
        }
        let mean = x.tr_mul(&w) / total;
        let mut centered = x.clone();
        for i in 0..n {
            let wi = w[i].sqrt();
            for j in 0..p {
                centered[(i, j)] = (centered[(i, j)] - mean[j]) * wi;
            }
        }
        let mut cov = centered.tr_mul(&centered) / total;
        let trace = cov.trace();
        let ridge = if trace > 0.0 { 1e-6 * trace / p as f64 } else { 1e-12 };
        for j in 0..p {
            cov[(j, j)] += ridge;
        }
        comps.push(Some(GaussianComponent { mean, cov }));
        mix.push(total / n as f64);
    }
    let s: f64 = mix.iter().sum();
    if s <= 0.0 {
        return Err(ClrError::InvalidInput("every cluster has negligible weight".into()));
    }
    mix.iter_mut().for_each(|m| *m /= s);
    ClusterDensityModel::new(comps, mix)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub per_cluster_yhat: Vec<f64>,
    pub probs: Vec<f64>,
    pub xp: f64,
    pub coerced: f64,
    pub weighted: f64,
    /// Set when every cluster density underflowed and probabilities fell back to uniform.
    pub underflow: bool,
}

pub fn predict(x: &DVector<f64>, model: &ClrModel, density: &ClusterDensityModel) -> Result<Prediction> {
    let (k, p) = (model.k(), model.p());
    if x.len() != p {
        return Err(ClrError::ShapeMismatch(format!("x has {} entries, model expects {p}", x.len())));
    }
    if density.k() != k {
        return Err(ClrError::ShapeMismatch("density and model disagree on K".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ClrError::InvalidInput("non-finite predictor".into()));
    }
    let yhat: Vec<f64> = (0..k)
        .map(|c| model.beta[(c, 0)] + (0..p).map(|j| model.beta[(c, j + 1)] * x[j]).sum::<f64>())
        .collect();

    let logs = density.log_weighted_densities(x);
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let underflow = !max.is_finite() || max < f64::MIN_POSITIVE.ln();
    let probs: Vec<f64> = if underflow {
        vec![1.0 / k as f64; k]
    } else {
        let e: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    };
    let xp = if underflow { 0.0 } else { xp_score(&probs) };
    let arg = (0..k).fold(0, |b, c| if probs[c] > probs[b] { c } else { b });
    let weighted = probs.iter().zip(&yhat).map(|(p, y)| p * y).sum();
    Ok(Prediction {
        coerced: yhat[arg],
        per_cluster_yhat: yhat,
        probs,
        xp,
        weighted,
        underflow,
    })
}

/// Predict every row of `x` (M x p).
pub fn predict_rows(
    x: &DMatrix<f64>,
    model: &ClrModel,
    density: &ClusterDensityModel,
) -> Result<Vec<Prediction>> {
    x.row_iter()
        .map(|r| predict(&r.transpose(), model, density))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regression::one_hot;
    use crate::rng::rng_from_seed;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn blobs(n_per: usize, seed: u64) -> (Dataset, ClrModel) {
        let mut rng = rng_from_seed(seed);
        let n = 2 * n_per;
        let mut x = DMatrix::zeros(n, 2);
        let mut labels = vec![0usize; n];
        for i in 0..n {
            let c = i / n_per;
            labels[i] = c;
            let off = if c == 0 { -4.0 } else { 4.0 };
            x[(i, 0)] = off + rng.sample::<f64, _>(StandardNormal);
            x[(i, 1)] = rng.sample::<f64, _>(StandardNormal);
        }
        let y = DVector::from_fn(n, |i, _| x[(i, 0)]);
        let ds = Dataset::new(x, y, None).unwrap();
        let beta = DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 1.0, -1.0, 0.5]);
        let model = ClrModel::new(beta, DVector::from_vec(vec![1.0, 1.0]), one_hot(&labels, 2));
        (ds, model)
    }

    #[test]
    fn density_means_near_blob_centers() {
        let (ds, model) = blobs(400, 2);
        let d = fit_density(&ds, &model).unwrap();
        let tol = 3.0 / (400f64).sqrt();
        let g0 = d.components[0].as_ref().unwrap();
        let g1 = d.components[1].as_ref().unwrap();
        assert!((g0.mean[0] + 4.0).abs() < tol && g0.mean[1].abs() < tol);
        assert!((g1.mean[0] - 4.0).abs() < tol && g1.mean[1].abs() < tol);
        assert_eq!(d, fit_density(&ds, &model).unwrap());
    }

    #[test]
    fn single_cluster_probability_is_one() {
        let (ds, _) = blobs(50, 3);
        let model = ClrModel::new(
            DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 0.0]),
            DVector::from_vec(vec![1.0]),
            DMatrix::from_element(100, 1, 1.0),
        );
        let d = fit_density(&ds, &model).unwrap();
        for x in [-3.0, 0.0, 7.0] {
            let pr = predict(&DVector::from_vec(vec![x, 0.0]), &model, &d).unwrap();
            assert_eq!(pr.probs, vec![1.0]);
            assert_eq!(pr.coerced, pr.weighted);
        }
    }

    #[test]
    fn negligible_cluster_is_dropped() {
        let (ds, mut model) = blobs(50, 4);
        model.weights = DMatrix::from_fn(100, 2, |_, c| if c == 0 { 1.0 } else { 0.0 });
        let d = fit_density(&ds, &model).unwrap();
        assert!(d.components[1].is_none());
        let pr = predict(&DVector::from_vec(vec![4.0, 0.0]), &model, &d).unwrap();
        assert_eq!(pr.probs[1], 0.0);
    }

    #[test]
    fn far_point_underflows_to_uniform() {
        let (ds, model) = blobs(50, 5);
        let d = fit_density(&ds, &model).unwrap();
        let pr = predict(&DVector::from_vec(vec![1e6, 1e6]), &model, &d).unwrap();
        assert!(pr.underflow);
        assert_eq!(pr.probs, vec![0.5, 0.5]);
        assert_eq!(pr.xp, 0.0);
    }

    #[test]
    fn prediction_invariants() {
        let (ds, model) = blobs(200, 6);
        let d = fit_density(&ds, &model).unwrap();
        for x0 in [-6.0, -1.0, 0.0, 0.3, 2.0, 6.0] {
            let pr = predict(&DVector::from_vec(vec![x0, 0.2]), &model, &d).unwrap();
            let s: f64 = pr.probs.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            let lo = pr.per_cluster_yhat.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = pr.per_cluster_yhat.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(pr.weighted >= lo - 1e-12 && pr.weighted <= hi + 1e-12);
            if pr.xp == 1.0 {
                assert!((pr.coerced - pr.weighted).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let (ds, model) = blobs(20, 7);
        let d = fit_density(&ds, &model).unwrap();
        assert!(predict(&DVector::from_vec(vec![1.0]), &model, &d).is_err());
    }
}
