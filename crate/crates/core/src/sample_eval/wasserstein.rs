use crate::error::{Error, Result};
use crate::tensor_ad::Tensor;

/// Largest cloud size accepted by [`wasserstein2`].
pub const MAX_W2_POINTS: usize = 4096;

/// Minimum-cost perfect matching for an `n × n` cost given by `cost(i, j)`.
///
/// Shortest augmenting paths with row/column potentials, `O(n³)`. Returns the
/// column assigned to each row.
pub fn min_cost_assignment(n: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    // 1-based internally; index 0 is the virtual source column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|f| *f = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            let ui0 = u[i0];
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - ui0 - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
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
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exact 2-Wasserstein distance between two equal-size point clouds with
/// uniform weights: `sqrt(min_σ mean_i ‖a_i − b_σ(i)‖²)`.
pub fn wasserstein2(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
        return Err(Error::shape("wasserstein2", a.shape(), b.shape()));
    }
    let n = a.rows();
    if n != b.rows() {
        return Err(Error::config(format!(
            "wasserstein2 needs equal sample counts, got {n} and {}",
            b.rows()
        )));
    }
    if n > MAX_W2_POINTS {
        return Err(Error::config(format!(
            "wasserstein2 supports at most {MAX_W2_POINTS} points, got {n}; subsample the clouds"
        )));
    }
    if n == 0 {
        return Ok(0.0);
    }
    a.check_finite("wasserstein2 input")?;
    b.check_finite("wasserstein2 input")?;
    let sigma = min_cost_assignment(n, |i, j| sq_dist(a.row(i), b.row(j)));
    let total: f64 = sigma
        .iter()
        .enumerate()
        .map(|(i, &j)| sq_dist(a.row(i), b.row(j)))
        .sum();
    Ok((total / n as f64).max(0.0).sqrt())
}
