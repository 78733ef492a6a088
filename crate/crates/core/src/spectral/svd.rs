//! Thin SVD by Householder QR followed by one-sided (Hestenes) Jacobi.
//!
//! One-sided Jacobi orthogonalizes the columns of `R` by plane rotations
//! until every pair is orthogonal to working precision relative to the
//! column norms. Singular values come out with high relative accuracy and
//! the left vectors stay orthonormal even for tiny singular values, which
//! the nuclear-norm checks downstream rely on.

use ndarray::{Array1, Array2, ArrayBase, Data, Ix2};

use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// `u * diag(sigma) * v^T` of one matrix, thin form.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralDecomposition {
    /// m x k left singular vectors.
    pub u: Array2<f64>,
    /// Non-increasing, non-negative.
    pub sigma: Array1<f64>,
    /// n x k right singular vectors.
    pub v: Array2<f64>,
    pub orig_shape: (usize, usize),
}

impl SpectralDecomposition {
    pub fn rank_capacity(&self) -> usize {
        self.sigma.len()
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma.first().copied().unwrap_or(0.0)
    }

    /// Number of singular values above `1e-12 * sigma_max`.
    pub fn numerical_rank(&self) -> usize {
        numerical_rank(self.sigma.as_slice().unwrap())
    }

    pub fn reconstruct(&self) -> Array2<f64> {
        let scaled = &self.u * &self.sigma;
        scaled.dot(&self.v.t())
    }
}

/// Relative cutoff below which a singular value counts as zero.
pub const ZERO_THRESHOLD: f64 = 1e-12;

pub fn numerical_rank(sigma: &[f64]) -> usize {
    let max = sigma.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sigma.iter().filter(|&&s| s > ZERO_THRESHOLD * max).count()
}

/// Thin SVD with `k = min(m, n)`.
///
/// Signs are fixed so that the largest-magnitude entry of every left
/// singular vector is positive (lowest row index wins ties), which makes the
/// output deterministic.
pub fn svd<S: Data<Elem = f64>>(matrix: &ArrayBase<S, Ix2>) -> Result<SpectralDecomposition> {
    check_finite(matrix)?;
    let (m, n) = matrix.dim();
    if m < n {
        let t = svd(&matrix.t())?;
        return Ok(SpectralDecomposition {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
            orig_shape: (m, n),
        });
    }
    let k = n;
    if k == 0 {
        return Ok(SpectralDecomposition {
            u: Array2::zeros((m, 0)),
            sigma: Array1::zeros(0),
            v: Array2::zeros((n, 0)),
            orig_shape: (m, n),
        });
    }

    let mut qr = Householder::factor(matrix);
    let mut r = qr.take_r();
    let mut v = identity(n);
    jacobi_sweeps(&mut r, n, n, Some(&mut v))?;

    let norms: Vec<f64> = (0..n).map(|j| col_norm(&r, n, j)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    // Left vectors in R-space (n x n, column-major), sorted.
    let mut ur = vec![0.0; n * n];
    let mut vs = vec![0.0; n * n];
    let mut sigma = Array1::zeros(n);
    let mut missing = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        sigma[dst] = s;
        vs[dst * n..(dst + 1) * n].copy_from_slice(&v[src * n..(src + 1) * n]);
        if s > 0.0 {
            for i in 0..n {
                ur[dst * n + i] = r[src * n + i] / s;
            }
        } else {
            missing.push(dst);
        }
    }
    complete_basis(&mut ur, n, &missing);

    let u_cols = qr.apply_q(&ur, n);

    let mut u = Array2::zeros((m, k));
    let mut vm = Array2::zeros((n, k));
    for j in 0..k {
        let col = &u_cols[j * m..(j + 1) * m];
        let mut pivot = 0;
        for i in 1..m {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..m {
            u[[i, j]] = sign * col[i];
        }
        for i in 0..n {
            vm[[i, j]] = sign * vs[j * n + i];
        }
    }

    Ok(SpectralDecomposition {
        u,
        sigma,
        v: vm,
        orig_shape: (m, n),
    })
}

/// Singular values only, non-increasing. Skips all vector bookkeeping.
pub fn singular_values<S: Data<Elem = f64>>(matrix: &ArrayBase<S, Ix2>) -> Result<Vec<f64>> {
    check_finite(matrix)?;
    let (m, n) = matrix.dim();
    if m < n {
        return singular_values(&matrix.t());
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut r = Householder::factor(matrix).take_r();
    jacobi_sweeps(&mut r, n, n, None)?;
    let mut s: Vec<f64> = (0..n).map(|j| col_norm(&r, n, j)).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

fn check_finite<S: Data<Elem = f64>>(matrix: &ArrayBase<S, Ix2>) -> Result<()> {
    if let Some(idx) = matrix.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation {
            tensor: String::new(),
            message: format!("non-finite element at flat index {idx}"),
        });
    }
    Ok(())
}

fn identity(n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    v
}

fn col_norm(a: &[f64], rows: usize, j: usize) -> f64 {
    let col = &a[j * rows..(j + 1) * rows];
    let scale = col.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let ss: f64 = col.iter().map(|x| (x / scale) * (x / scale)).sum();
    scale * ss.sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rotates column pairs of the column-major `rows x n` buffer `a` until all
/// pairs are numerically orthogonal, accumulating rotations into `v`.
fn jacobi_sweeps(a: &mut [f64], rows: usize, n: usize, mut v: Option<&mut Vec<f64>>) -> Result<()> {
    let tol = (rows as f64) * f64::EPSILON;
    let mut sq = vec![0.0; n];
    for _sweep in 0..MAX_SWEEPS {
        for (j, s) in sq.iter_mut().enumerate() {
            let col = &a[j * rows..(j + 1) * rows];
            *s = dot(col, col);
        }
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let (alpha, beta) = (sq[p], sq[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let (head, tail) = a.split_at_mut(q * rows);
                let cp = &mut head[p * rows..(p + 1) * rows];
                let cq = &mut tail[..rows];
                let gamma = dot(cp, cq);
                if gamma.abs() <= tol * alpha.sqrt() * beta.sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + zeta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = c * t;
                for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
                sq[p] = alpha - t * gamma;
                sq[q] = beta + t * gamma;
                if let Some(v) = v.as_deref_mut() {
                    let (head, tail) = v.split_at_mut(q * n);
                    let vp = &mut head[p * n..(p + 1) * n];
                    let vq = &mut tail[..n];
                    for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
                        let (xp, yq) = (*x, *y);
                        *x = c * xp - s * yq;
                        *y = s * xp + c * yq;
                    }
                }
            }
        }
        if !rotated {
            return Ok(());
        }
    }
    Err(Error::Numerical {
        tensor: String::new(),
        message: format!("Jacobi SVD did not converge in {MAX_SWEEPS} sweeps"),
    })
}

/// Fills the listed columns of the column-major `n x n` buffer with unit
/// vectors orthogonal to every other column.
fn complete_basis(u: &mut [f64], n: usize, missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let mut filled: Vec<bool> = vec![true; n];
    for &j in missing {
        filled[j] = false;
    }
    let mut candidate = 0;
    for &j in missing {
        loop {
            assert!(candidate < n, "basis completion ran out of candidates");
            let mut w = vec![0.0; n];
            w[candidate] = 1.0;
            candidate += 1;
            // Two passes of Gram-Schmidt for stability.
            for _ in 0..2 {
                for (c, _) in filled.iter().enumerate().filter(|(_, f)| **f) {
                    let col = &u[c * n..(c + 1) * n];
                    let proj = dot(col, &w);
                    for (wi, ci) in w.iter_mut().zip(col) {
                        *wi -= proj * ci;
                    }
                }
            }
            let norm = dot(&w, &w).sqrt();
            if norm > 0.5 {
                for (dst, wi) in u[j * n..(j + 1) * n].iter_mut().zip(&w) {
                    *dst = wi / norm;
                }
                filled[j] = true;
                break;
            }
        }
    }
}

/// Householder QR of an `m x n` matrix with `m >= n`.
struct Householder {
    m: usize,
    n: usize,
    /// Column-major working copy; R in the upper triangle after factoring.
    a: Vec<f64>,
    /// Reflector k acts on rows k..m as `I - tau v v^T`.
    reflectors: Vec<(Vec<f64>, f64)>,
}

impl Householder {
    fn factor<S: Data<Elem = f64>>(matrix: &ArrayBase<S, Ix2>) -> Self {
        let (m, n) = matrix.dim();
        let mut a = vec![0.0; m * n];
        for ((i, j), &x) in matrix.indexed_iter() {
            a[j * m + i] = x;
        }
        let mut reflectors = Vec::with_capacity(n);
        for k in 0..n {
            let x = &a[k * m + k..(k + 1) * m];
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                reflectors.push((Vec::new(), 0.0));
                continue;
            }
            let mut v = x.to_vec();
            let alpha = if v[0] >= 0.0 { -norm } else { norm };
            v[0] -= alpha;
            let vnorm2: f64 = v.iter().map(|x| x * x).sum();
            if vnorm2 == 0.0 {
                reflectors.push((Vec::new(), 0.0));
                continue;
            }
            let tau = 2.0 / vnorm2;
            for j in k..n {
                let col = &mut a[j * m + k..(j + 1) * m];
                let proj = tau * dot(&v, col);
                for (c, vi) in col.iter_mut().zip(&v) {
                    *c -= proj * vi;
                }
            }
            reflectors.push((v, tau));
        }
        Householder {
            m,
            n,
            a,
            reflectors,
        }
    }

    /// The `n x n` upper-triangular factor, column-major.
    fn take_r(&mut self) -> Vec<f64> {
        let (m, n) = (self.m, self.n);
        let mut r = vec![0.0; n * n];
        for j in 0..n {
            for i in 0..=j {
                r[j * n + i] = self.a[j * m + i];
            }
        }
        r
    }

    /// `Q * [x; 0]` for a column-major `n x cols` block `x`.
    fn apply_q(&self, x: &[f64], cols: usize) -> Vec<f64> {
        let (m, n) = (self.m, self.n);
        let mut out = vec![0.0; m * cols];
        for j in 0..cols {
            out[j * m..j * m + n].copy_from_slice(&x[j * n..(j + 1) * n]);
        }
        for k in (0..n).rev() {
            let (v, tau) = &self.reflectors[k];
            if *tau == 0.0 {
                continue;
            }
            for j in 0..cols {
                let col = &mut out[j * m + k..(j + 1) * m];
                let proj = tau * dot(v, col);
                for (c, vi) in col.iter_mut().zip(v) {
                    *c -= proj * vi;
                }
            }
        }
        out
    }
}
