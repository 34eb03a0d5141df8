//! Best cluster-label matching. Exhaustive for small K, Hungarian beyond.

use nalgebra::DMatrix;

/// Largest K for which every permutation is enumerated.
pub const EXHAUSTIVE_MAX_K: usize = 6;

/// Permutation `perm` maximizing `sum_i score[(i, perm[i])]` for a square score matrix.
pub fn best_assignment(score: &DMatrix<f64>) -> Vec<usize> {
    let k = score.nrows();
    assert_eq!(k, score.ncols(), "score matrix must be square");
    if k <= EXHAUSTIVE_MAX_K {
        exhaustive(score)
    } else {
        let cost = score.map(|v| -v);
        hungarian_min(&cost)
    }
}

pub fn assignment_value(score: &DMatrix<f64>, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| score[(i, j)]).sum()
}

fn exhaustive(score: &DMatrix<f64>) -> Vec<usize> {
    let k = score.nrows();
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = perm.clone();
    let mut best_val = assignment_value(score, &perm);
    // Heap's algorithm
    let mut c = vec![0usize; k];
    let mut i = 0;
    while i < k {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let v = assignment_value(score, &perm);
            if v > best_val {
                best_val = v;
                best.copy_from_slice(&perm);
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

/// Minimum-cost perfect matching (Kuhn-Munkres with potentials), O(K^3).
pub fn hungarian_min(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    let inf = f64::INFINITY;
    // 1-based arrays with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            perm[p[j] - 1] = j - 1;
        }
    }
    perm
}
