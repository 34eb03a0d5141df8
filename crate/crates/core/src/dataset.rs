//! Data containers and the randomized CLR problem generator.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ClrError, Result};
use crate::rng::{derive_seed, rng_from_seed, ClrRng};
use crate::stats;

/// Label used for rows whose response was replaced by corruption.
pub const CORRUPT_LABEL: i32 = -1;

/// Observations `(X, y)` with optional generator labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
    labels: Option<Vec<i32>>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, labels: Option<Vec<i32>>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(ClrError::InvalidInput("dataset needs N >= 1 and p >= 1".into()));
        }
        if x.nrows() != y.len() {
            return Err(ClrError::ShapeMismatch(format!(
                "X has {} rows but y has {} entries",
                x.nrows(),
                y.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != y.len() {
                return Err(ClrError::ShapeMismatch(format!(
                    "{} labels for {} rows",
                    l.len(),
                    y.len()
                )));
            }
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(ClrError::InvalidInput("non-finite entry in dataset".into()));
        }
        Ok(Self { x, y, labels })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn labels(&self) -> Option<&[i32]> {
        self.labels.as_deref()
    }

    pub fn without_labels(&self) -> Self {
        Self {
            x: self.x.clone(),
            y: self.y.clone(),
            labels: None,
        }
    }

    /// `[1, X]`, built on demand.
    pub fn augmented(&self) -> DMatrix<f64> {
        augment(&self.x)
    }

    pub fn select_rows(&self, rows: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
        let x = self.x.select_rows(rows.iter());
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.y[r]));
        (x, y)
    }
}

pub fn augment(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, p) = x.shape();
    DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] })
}

/// Generator parameters for one random CLR problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    #[serde(rename = "K")]
    pub k: usize,
    pub p: usize,
    pub cluster_sizes: Vec<usize>,
    pub dp: f64,
    pub eta: f64,
    #[serde(default)]
    pub delta: f64,
    #[serde(default)]
    pub corrupt_frac: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ProblemSpec {
    pub fn balanced(k: usize, p: usize, n_k: usize, dp: f64, eta: f64, seed: u64) -> Self {
        Self {
            k,
            p,
            cluster_sizes: vec![n_k; k],
            dp,
            eta,
            delta: 0.0,
            corrupt_frac: 0.0,
            seed,
        }
    }

    /// Cluster sizes from proportions of a total, rounding so the sizes sum to `total`.
    pub fn sizes_from_proportions(proportions: &[f64], total: usize) -> Vec<usize> {
        let sum: f64 = proportions.iter().sum();
        let mut sizes: Vec<usize> = proportions
            .iter()
            .map(|q| ((q / sum) * total as f64).floor() as usize)
            .collect();
        let mut short = total - sizes.iter().sum::<usize>();
        let len = sizes.len();
        let mut i = 0;
        while short > 0 {
            sizes[i % len] += 1;
            short -= 1;
            i += 1;
        }
        sizes
    }

    pub fn total_n(&self) -> usize {
        self.cluster_sizes.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(ClrError::InvalidInput("K must be at least 2".into()));
        }
        if self.p < 1 {
            return Err(ClrError::InvalidInput("p must be at least 1".into()));
        }
        if self.cluster_sizes.len() != self.k || self.cluster_sizes.iter().any(|&n| n == 0) {
            return Err(ClrError::InvalidInput(
                "cluster_sizes must hold K positive entries".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dp) {
            return Err(ClrError::InvalidInput("dp must lie in [0, 1)".into()));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(ClrError::InvalidInput("eta must be >= 0".into()));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(ClrError::InvalidInput("delta must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.corrupt_frac) {
            return Err(ClrError::InvalidInput("corrupt_frac must lie in [0, 1)".into()));
        }
        if self.k > self.p {
            return Err(ClrError::DimensionTooSmall {
                k: self.k,
                p: self.p,
            });
        }
        Ok(())
    }
}

/// The true model behind a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// K x (p+1), row k is `[beta_k0, beta_k]`.
    pub beta: DMatrix<f64>,
    pub sigma: DVector<f64>,
    pub labels: Vec<i32>,
}

/// Unit directions with all pairwise dot products equal to `dp`.
///
/// With `K < p` this is `sqrt(dp) u0 + sqrt(1 - dp) e_k` over a random
/// orthonormal frame. With `K == p` no spare axis exists for `u0`, so the
/// Cholesky factor of the target Gram matrix is embedded in the frame instead.
pub fn equiangular_directions(k: usize, p: usize, dp: f64, rng: &mut ClrRng) -> Result<DMatrix<f64>> {
    if k > p {
        return Err(ClrError::DimensionTooSmall { k, p });
    }
    let g = DMatrix::<f64>::from_fn(p, p, |_, _| rng.sample(StandardNormal));
    let q = g.qr().q();
    let mut dirs = DMatrix::<f64>::zeros(k, p);
    if k < p {
        let a = dp.sqrt();
        let b = (1.0 - dp).sqrt();
        for i in 0..k {
            for j in 0..p {
                dirs[(i, j)] = a * q[(j, 0)] + b * q[(j, i + 1)];
            }
        }
    } else {
        let gram = DMatrix::<f64>::from_fn(k, k, |i, j| if i == j { 1.0 } else { dp });
        let l = gram
            .cholesky()
            .ok_or_else(|| ClrError::InvalidInput("dp outside [0,1)".into()))?
            .l();
        for i in 0..k {
            for j in 0..p {
                dirs[(i, j)] = (0..k).map(|c| l[(i, c)] * q[(j, c)]).sum();
            }
        }
    }
    Ok(dirs)
}

fn random_unit(p: usize, rng: &mut ClrRng) -> DVector<f64> {
    loop {
        let v = DVector::<f64>::from_fn(p, |_, _| rng.sample(StandardNormal));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Draw one random CLR problem.
pub fn generate_problem(spec: &ProblemSpec) -> Result<(Dataset, GroundTruth)> {
    spec.validate()?;
    let (k, p) = (spec.k, spec.p);
    let n = spec.total_n();
    let mut rng = rng_from_seed(spec.seed);

    let dirs = equiangular_directions(k, p, spec.dp, &mut rng)?;
    let mut beta = DMatrix::<f64>::zeros(k, p + 1);
    for c in 0..k {
        beta[(c, 0)] = rng.gen_range(-1.0..=1.0);
        for j in 0..p {
            beta[(c, j + 1)] = dirs[(c, j)];
        }
    }

    let centroids: Vec<DVector<f64>> = (0..k)
        .map(|_| {
            if spec.delta > 0.0 {
                random_unit(p, &mut rng) * spec.delta
            } else {
                DVector::zeros(p)
            }
        })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut labels = vec![0i32; n];
    let mut cursor = 0;
    for (c, &size) in spec.cluster_sizes.iter().enumerate() {
        for &row in &order[cursor..cursor + size] {
            labels[row] = c as i32;
        }
        cursor += size;
    }

    let mut x = DMatrix::<f64>::zeros(n, p);
    for i in 0..n {
        let c = labels[i] as usize;
        for j in 0..p {
            let z: f64 = rng.sample(StandardNormal);
            x[(i, j)] = z + centroids[c][j];
        }
    }

    let signal = |i: usize, c: usize| -> f64 {
        beta[(c, 0)] + (0..p).map(|j| x[(i, j)] * beta[(c, j + 1)]).sum::<f64>()
    };

    let mut sigma = DVector::<f64>::zeros(k);
    let mut noise_sd = vec![0.0; k];
    for c in 0..k {
        let vals: Vec<f64> = (0..n)
            .filter(|&i| labels[i] as usize == c)
            .map(|i| signal(i, c))
            .collect();
        let sd = stats::sample_std(&vals);
        noise_sd[c] = spec.eta * sd;
        sigma[c] = noise_sd[c].max(1e-12 * sd.max(1.0));
    }

    let mut y = DVector::<f64>::zeros(n);
    for i in 0..n {
        let c = labels[i] as usize;
        let eps = if noise_sd[c] > 0.0 {
            noise_sd[c] * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        y[i] = signal(i, c) + eps;
    }

    let ds = Dataset::new(x, y, Some(labels.clone()))?;
    let gt = GroundTruth {
        beta,
        sigma,
        labels,
    };
    if spec.corrupt_frac > 0.0 {
        corrupt_rows(&ds, &gt, spec.corrupt_frac, derive_seed(spec.seed, 0xC0_44_07))
    } else {
        Ok((ds, gt))
    }
}

/// Replace the response of `floor(frac * N)` uniformly chosen rows by draws
/// from a normal fit to the remaining responses. Corrupted rows get label -1.
pub fn corrupt_rows(
    ds: &Dataset,
    gt: &GroundTruth,
    frac: f64,
    seed: u64,
) -> Result<(Dataset, GroundTruth)> {
    if !(0.0..1.0).contains(&frac) {
        return Err(ClrError::InvalidInput("corruption fraction must lie in [0, 1)".into()));
    }
    let n = ds.n();
    let m = (frac * n as f64).floor() as usize;
    if m == 0 {
        return Ok((ds.clone(), gt.clone()));
    }
    let mut rng = rng_from_seed(seed);
    let picked = sample(&mut rng, n, m).into_vec();
    let mut hit = vec![false; n];
    for &i in &picked {
        hit[i] = true;
    }
    let clean: Vec<f64> = (0..n)
        .filter(|&i| !hit[i] && gt.labels[i] != CORRUPT_LABEL)
        .map(|i| ds.y[i])
        .collect();
    let mean = stats::mean(&clean);
    let sd = stats::sample_std(&clean);
    let normal = Normal::new(mean, sd.max(f64::MIN_POSITIVE))
        .map_err(|e| ClrError::InvalidInput(e.to_string()))?;

    let mut y = ds.y.clone();
    let mut labels = gt.labels.clone();
    let mut picked_sorted = picked;
    picked_sorted.sort_unstable();
    for &i in &picked_sorted {
        y[i] = normal.sample(&mut rng);
        labels[i] = CORRUPT_LABEL;
    }
    let ds2 = Dataset::new(ds.x.clone(), y, Some(labels.clone()))?;
    let gt2 = GroundTruth {
        beta: gt.beta.clone(),
        sigma: gt.sigma.clone(),
        labels,
    };
    Ok((ds2, gt2))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(k: usize, p: usize, n_k: usize, dp: f64, eta: f64) -> ProblemSpec {
        ProblemSpec::balanced(k, p, n_k, dp, eta, 11)
    }

    #[test]
    fn dataset_rejects_bad_shapes() {
        let x = DMatrix::<f64>::zeros(3, 2);
        assert!(Dataset::new(x.clone(), DVector::zeros(2), None).is_err());
        assert!(Dataset::new(DMatrix::zeros(0, 2), DVector::zeros(0), None).is_err());
        let mut y = DVector::zeros(3);
        y[1] = f64::NAN;
        assert!(Dataset::new(x, y, None).is_err());
    }

    #[test]
    fn two_directions_have_requested_dot_product() {
        let (_, gt) = generate_problem(&spec(2, 5, 500, 0.2, 0.2)).unwrap();
        let b1 = gt.beta.row(0).columns(1, 5).transpose();
        let b2 = gt.beta.row(1).columns(1, 5).transpose();
        assert!((b1.dot(&b2) - 0.2).abs() < 1e-12);
        assert!((b1.norm() - 1.0).abs() < 1e-12);
        assert!((b2.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_dp_gives_orthogonal_directions() {
        let (_, gt) = generate_problem(&spec(3, 6, 50, 0.0, 0.2)).unwrap();
        for i in 0..3 {
            for j in (i + 1)..3 {
                let d: f64 = (1..7).map(|c| gt.beta[(i, c)] * gt.beta[(j, c)]).sum();
                assert!(d.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn square_case_uses_gram_embedding() {
        let mut rng = rng_from_seed(3);
        let d = equiangular_directions(4, 4, 0.3, &mut rng).unwrap();
        let g = &d * d.transpose();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.3 };
                assert!((g[(i, j)] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_noise_is_exact() {
        let (ds, gt) = generate_problem(&spec(3, 4, 40, 0.1, 0.0)).unwrap();
        let xt = ds.augmented();
        for i in 0..ds.n() {
            let c = gt.labels[i] as usize;
            let fit = gt.beta[(c, 0)] + (1..5).map(|j| xt[(i, j)] * gt.beta[(c, j)]).sum::<f64>();
            assert_eq!(ds.y()[i], fit);
        }
        assert!(gt.sigma.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn k_larger_than_p_is_rejected() {
        let err = generate_problem(&spec(4, 3, 10, 0.2, 0.2)).unwrap_err();
        assert_eq!(err, ClrError::DimensionTooSmall { k: 4, p: 3 });
    }

    #[test]
    fn generator_is_deterministic() {
        let s = spec(3, 5, 60, 0.2, 0.3);
        let a = generate_problem(&s).unwrap();
        let b = generate_problem(&s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corruption_flags_exact_count() {
        let mut s = spec(2, 4, 500, 0.2, 0.2);
        s.corrupt_frac = 0.1;
        let (ds, gt) = generate_problem(&s).unwrap();
        let flagged = gt.labels.iter().filter(|&&l| l == CORRUPT_LABEL).count();
        assert_eq!(flagged, 100);
        assert_eq!(ds.labels().unwrap(), gt.labels.as_slice());
    }

    #[test]
    fn zero_corruption_is_identity() {
        let (ds, gt) = generate_problem(&spec(2, 4, 50, 0.2, 0.2)).unwrap();
        let (ds2, gt2) = corrupt_rows(&ds, &gt, 0.0, 5).unwrap();
        assert_eq!(ds, ds2);
        assert_eq!(gt, gt2);
        assert!(corrupt_rows(&ds, &gt, 1.0, 5).is_err());
    }

    #[test]
    fn corrupted_responses_match_clean_moments() {
        let mut s = spec(2, 4, 5000, 0.2, 0.2);
        s.corrupt_frac = 0.5;
        let (ds, gt) = generate_problem(&s).unwrap();
        let (bad, good): (Vec<_>, Vec<_>) =
            (0..ds.n()).partition(|&i| gt.labels[i] == CORRUPT_LABEL);
        let yb: Vec<f64> = bad.iter().map(|&i| ds.y()[i]).collect();
        let yg: Vec<f64> = good.iter().map(|&i| ds.y()[i]).collect();
        let (mb, mg) = (stats::mean(&yb), stats::mean(&yg));
        let (sb, sg) = (stats::sample_std(&yb), stats::sample_std(&yg));
        assert!((mb - mg).abs() <= 0.05 * sg.max(mg.abs()), "means {mb} vs {mg}");
        assert!((sb - sg).abs() <= 0.05 * sg, "stds {sb} vs {sg}");
    }

    #[test]
    fn centered_clusters_without_offset() {
        let (ds, gt) = generate_problem(&spec(2, 3, 2000, 0.2, 0.2)).unwrap();
        for c in 0..2 {
            let rows: Vec<usize> = (0..ds.n()).filter(|&i| gt.labels[i] == c).collect();
            for j in 0..3 {
                let m: f64 = rows.iter().map(|&i| ds.x()[(i, j)]).sum::<f64>() / rows.len() as f64;
                // 5 standard errors
                assert!(m.abs() < 5.0 / (rows.len() as f64).sqrt());
            }
        }
    }

    #[test]
    fn proportions_round_to_total() {
        assert_eq!(ProblemSpec::sizes_from_proportions(&[0.9, 0.1], 1000), vec![900, 100]);
        let s = ProblemSpec::sizes_from_proportions(&[1.0, 1.0, 1.0], 1000);
        assert_eq!(s.iter().sum::<usize>(), 1000);
    }
}
