//! Distribution distances over feature sets. Features are rows of an N×d matrix.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::rng::{self, Domain};
use crate::{Error, Result};

fn mean_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mu = x.row_mean().transpose();
    let centered = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n - 1.0);
    // exact symmetry before the eigensolver
    let cov = (&cov + cov.transpose()) * 0.5;
    (mu, cov)
}

fn clamped_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let mut e = SymmetricEigen::new(m.clone());
    e.eigenvalues.apply(|v| *v = v.max(0.0));
    e
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = clamped_eigen(m);
    let s = DMatrix::from_diagonal(&e.eigenvalues.map(f64::sqrt));
    &e.eigenvectors * s * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to the two sets.
///
/// `Tr (Σa Σb)^½` is evaluated as `Tr (√Σa Σb √Σa)^½`, which keeps every
/// square root on a symmetric PSD matrix.
pub fn fhid(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "covariance needs at least two rows, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::ShapeMismatch(format!("feature widths {} and {}", a.ncols(), b.ncols())));
    }
    let d = a.ncols();
    if a.nrows() <= d || b.nrows() <= d {
        log::warn!("DegenerateCovariance: {} and {} rows for {d} features", a.nrows(), b.nrows());
    }
    let (mu_a, cov_a) = mean_cov(a);
    let (mu_b, cov_b) = mean_cov(b);
    let root_a = sqrt_psd(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = clamped_eigen(&inner).eigenvalues.iter().map(|v| v.sqrt()).sum();
    let trace_a: f64 = clamped_eigen(&cov_a).eigenvalues.sum();
    let trace_b: f64 = clamped_eigen(&cov_b).eigenvalues.sum();
    let value = (mu_a - mu_b).norm_squared() + trace_a + trace_b - 2.0 * cross;
    Ok(value.max(0.0))
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased squared MMD averaged over random subsets, cubic polynomial kernel.
///
/// Subset `s` of a set with `n` rows is drawn from a stream keyed on
/// `(seed, n, s)`, so equal-sized sets share indices and the pairs
/// `(a_i, b_i)` enter a U-statistic that excludes `i = j` in every term.
pub fn khid(a: &DMatrix<f64>, b: &DMatrix<f64>, subset_size: usize, n_subsets: usize, seed: u64) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::ShapeMismatch(format!("feature widths {} and {}", a.ncols(), b.ncols())));
    }
    let m = subset_size;
    if m < 2 || m > a.nrows().min(b.nrows()) || n_subsets == 0 {
        return Err(Error::InvalidArgument(format!(
            "subset size {m} must lie in 2..={} with at least one subset",
            a.nrows().min(b.nrows())
        )));
    }
    let rows = |x: &DMatrix<f64>, idx: &[usize]| -> Vec<Vec<f64>> {
        idx.iter().map(|&i| x.row(i).iter().copied().collect()).collect()
    };
    let pick = |n: usize, s: usize| -> Vec<usize> {
        let mut r = rng::stream(seed ^ (n as u64).rotate_left(24), Domain::Metric, s as u64);
        sample(&mut r, n, m).into_vec()
    };
    let estimates: Vec<f64> = (0..n_subsets)
        .into_par_iter()
        .map(|s| {
            let x = rows(a, &pick(a.nrows(), s));
            let y = rows(b, &pick(b.nrows(), s));
            let mut total = 0.0;
            for i in 0..m {
                for j in 0..m {
                    if i != j {
                        total += poly_kernel(&x[i], &x[j]) + poly_kernel(&y[i], &y[j])
                            - poly_kernel(&x[i], &y[j])
                            - poly_kernel(&x[j], &y[i]);
                    }
                }
            }
            total / (m * (m - 1)) as f64
        })
        .collect();
    Ok(estimates.iter().sum::<f64>() / n_subsets as f64)
}

fn dist(x: &DMatrix<f64>, i: usize, y: &DMatrix<f64>, j: usize) -> f64 {
    (0..x.ncols()).map(|c| (x[(i, c)] - y[(j, c)]).powi(2)).sum::<f64>().sqrt()
}

/// Distance from every row to its `k`-th nearest other row.
pub fn knn_radii(x: &DMatrix<f64>, k: usize) -> Vec<f64> {
    (0..x.nrows())
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<f64> = (0..x.nrows()).filter(|&j| j != i).map(|j| dist(x, i, x, j)).collect();
            d.select_nth_unstable_by(k - 1, f64::total_cmp);
            d[k - 1]
        })
        .collect()
}

/// Fraction of `queries` rows inside the union of balls around `support`.
fn coverage(queries: &DMatrix<f64>, support: &DMatrix<f64>, radii: &[f64]) -> f64 {
    let inside = (0..queries.nrows())
        .into_par_iter()
        .filter(|&q| (0..support.nrows()).any(|p| dist(queries, q, support, p) <= radii[p]))
        .count();
    inside as f64 / queries.nrows() as f64
}

/// k-NN manifold precision (generated inside real) and recall (real inside generated).
pub fn precision_recall(real: &DMatrix<f64>, gen: &DMatrix<f64>, k: usize) -> Result<(f64, f64)> {
    if k == 0 || real.nrows() <= k || gen.nrows() <= k {
        return Err(Error::InvalidArgument(format!(
            "precision/recall needs more than k={k} rows in each set ({} and {})",
            real.nrows(),
            gen.nrows()
        )));
    }
    if real.ncols() != gen.ncols() {
        return Err(Error::ShapeMismatch(format!("feature widths {} and {}", real.ncols(), gen.ncols())));
    }
    let precision = coverage(gen, real, &knn_radii(real, k));
    let recall = coverage(real, gen, &knn_radii(gen, k));
    Ok((precision, recall))
}

/// Mean distance over `n_pairs` random pairs of distinct rows.
pub fn diversity(x: &DMatrix<f64>, n_pairs: usize, seed: u64) -> Result<f64> {
    let n = x.nrows();
    if n < 2 || n_pairs == 0 {
        return Err(Error::InvalidArgument(format!("diversity needs two rows and one pair, got {n} rows")));
    }
    let mut r = rng::stream(seed, Domain::Metric, u64::MAX);
    let total: f64 = (0..n_pairs)
        .map(|_| {
            let i = r.random_range(0..n);
            let j = (i + r.random_range(1..n)) % n;
            dist(x, i, x, j)
        })
        .sum();
    Ok(total / n_pairs as f64)
}
