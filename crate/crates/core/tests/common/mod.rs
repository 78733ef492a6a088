#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((m, n), || rng.sample::<f64, _>(StandardNormal))
}

pub fn low_rank(rng: &mut ChaCha8Rng, m: usize, n: usize, rank: usize) -> Array2<f64> {
    gaussian(rng, m, rank).dot(&gaussian(rng, rank, n))
}

pub fn to_nalgebra(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub fn from_nalgebra(a: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), a.ncols()), |(i, j)| a[(i, j)])
}

/// Singular values as square roots of the eigenvalues of the smaller Gram
/// matrix, sorted non-increasing.
pub fn gram_singular_values(a: &Array2<f64>) -> Vec<f64> {
    let m = to_nalgebra(a);
    let gram = if a.nrows() >= a.ncols() {
        m.transpose() * &m
    } else {
        &m * m.transpose()
    };
    let eig = SymmetricEigen::new(gram);
    let mut s: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Truncate-and-rescale computed with nalgebra's SVD and a plain
/// cumulative-sum loop.
pub fn reference_truncate(a: &Array2<f64>, eta: f64) -> (Array2<f64>, usize) {
    let svd = to_nalgebra(a).svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sigma: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();

    let smax = sigma[0];
    let kept: Vec<f64> = sigma
        .iter()
        .copied()
        .filter(|&s| s > 1e-12 * smax)
        .collect();
    let total: f64 = kept.iter().sum();
    let mut r = 0;
    let mut cum = 0.0;
    while r < kept.len() {
        cum += kept[r];
        r += 1;
        if cum / total >= eta / 100.0 - 1e-15 {
            break;
        }
    }
    let nuclear: f64 = sigma.iter().sum();
    let head: f64 = sigma[..r].iter().sum();
    let mut out = DMatrix::<f64>::zeros(a.nrows(), a.ncols());
    for &k in &order[..r] {
        let s = svd.singular_values[k] * nuclear / head;
        out += u.column(k) * vt.row(k) * s;
    }
    (from_nalgebra(&out), r)
}

pub fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}
