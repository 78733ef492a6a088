//! Spectral truncation and nuclear-norm restoration of weight matrices.

mod bound;
mod svd;

use ndarray::{Array2, ArrayBase, Data, Ix2};

use crate::error::{Error, Result};

pub use bound::{conflict_bound, ConflictBoundReport};
pub use svd::{numerical_rank, singular_values, svd, SpectralDecomposition, ZERO_THRESHOLD};

/// Smallest `r` whose leading singular values carry at least `eta` percent
/// of the total singular-value mass.
///
/// Values at or below `1e-12 * sigma_max` count as zero, so `eta = 100`
/// yields the numerical rank. Reaching the threshold exactly counts.
pub fn rank_keep(sigma: &[f64], eta: f64) -> Result<usize> {
    if !(eta > 0.0 && eta <= 100.0) {
        return Err(Error::Argument(format!(
            "eta must be in (0, 100], got {eta}"
        )));
    }
    if sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::Argument(
            "singular values must be finite and non-negative".into(),
        ));
    }
    if sigma.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::Argument(
            "singular values must be non-increasing".into(),
        ));
    }
    let significant = numerical_rank(sigma);
    if significant == 0 {
        return Err(Error::Degenerate(
            "rank rule undefined for an all-zero spectrum".into(),
        ));
    }
    let kept = &sigma[..significant];
    let total: f64 = kept.iter().sum();
    let mut cumulative = 0.0;
    for (i, s) in kept.iter().enumerate() {
        cumulative += s;
        // cumulative / total >= eta / 100, without the two divisions
        if cumulative * 100.0 >= eta * total {
            return Ok(i + 1);
        }
    }
    Ok(significant)
}

/// Scales the leading `r` singular values so that their sum equals the sum
/// of all of `sigma`.
pub fn rescale_singular_values(sigma: &[f64], r: usize) -> Result<Vec<f64>> {
    if r == 0 || r > sigma.len() {
        return Err(Error::Argument(format!(
            "rank {r} out of range 1..={}",
            sigma.len()
        )));
    }
    let head: f64 = sigma[..r].iter().sum();
    if head.is_nan() || head <= 0.0 {
        return Err(Error::Argument(
            "leading singular values sum to zero".into(),
        ));
    }
    let total = head + sigma[r..].iter().sum::<f64>();
    let factor = total / head;
    Ok(sigma[..r].iter().map(|s| s * factor).collect())
}

/// `sum_{k < r} u_k * sigma'_k * v_k^T`.
pub fn truncate_reconstruct(
    decomp: &SpectralDecomposition,
    r: usize,
    rescaled_sigma: &[f64],
) -> Result<Array2<f64>> {
    if r == 0 || r > decomp.rank_capacity() {
        return Err(Error::Argument(format!(
            "truncation rank {r} out of range 1..={}",
            decomp.rank_capacity()
        )));
    }
    if rescaled_sigma.len() != r {
        return Err(Error::Argument(format!(
            "expected {r} rescaled singular values, got {}",
            rescaled_sigma.len()
        )));
    }
    let mut left = decomp.u.slice(ndarray::s![.., ..r]).to_owned();
    for (mut col, &s) in left.columns_mut().into_iter().zip(rescaled_sigma) {
        col *= s;
    }
    Ok(left.dot(&decomp.v.slice(ndarray::s![.., ..r]).t()))
}

/// Sum of singular values.
pub fn nuclear_norm<S: Data<Elem = f64>>(matrix: &ArrayBase<S, Ix2>) -> Result<f64> {
    Ok(singular_values(matrix)?.iter().sum())
}

/// Result of running truncate-and-rescale on one matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncatedLayer {
    pub matrix: Array2<f64>,
    /// Kept rank; 0 for an all-zero input, which passes through unchanged.
    pub rank: usize,
    pub nuclear_before: f64,
}

/// SVD, rank rule, rescale and reconstruction for one matrix.
pub fn truncate_and_rescale<S: Data<Elem = f64>>(
    matrix: &ArrayBase<S, Ix2>,
    eta: f64,
) -> Result<TruncatedLayer> {
    let decomp = svd(matrix)?;
    let sigma = decomp.sigma.as_slice().unwrap();
    let nuclear_before = sigma.iter().sum();
    if decomp.numerical_rank() == 0 {
        return Ok(TruncatedLayer {
            matrix: matrix.to_owned(),
            rank: 0,
            nuclear_before,
        });
    }
    let r = rank_keep(sigma, eta)?;
    let rescaled = rescale_singular_values(sigma, r)?;
    Ok(TruncatedLayer {
        matrix: truncate_reconstruct(&decomp, r, &rescaled)?,
        rank: r,
        nuclear_before,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rank_keep_hand_cases() {
        let s = [4.0, 3.0, 2.0, 1.0];
        assert_eq!(rank_keep(&s, 40.0).unwrap(), 1);
        assert_eq!(rank_keep(&s, 70.0).unwrap(), 2);
        assert_eq!(rank_keep(&s, 71.0).unwrap(), 3);
        assert_eq!(rank_keep(&s, 100.0).unwrap(), 4);
        assert_eq!(rank_keep(&[5.0, 2.0, 0.0, 0.0], 100.0).unwrap(), 2);
        assert_eq!(rank_keep(&[5.0, 1e-14], 100.0).unwrap(), 1);
    }

    #[test]
    fn rank_keep_errors() {
        assert!(matches!(
            rank_keep(&[0.0, 0.0], 50.0),
            Err(Error::Degenerate(_))
        ));
        assert!(rank_keep(&[1.0], 0.0).is_err());
        assert!(rank_keep(&[1.0], 100.5).is_err());
        assert!(rank_keep(&[1.0, 2.0], 50.0).is_err());
    }

    #[test]
    fn rescale_hand_cases() {
        let out = rescale_singular_values(&[4.0, 3.0, 2.0, 1.0], 2).unwrap();
        assert!((out[0] - 40.0 / 7.0).abs() < 1e-15);
        assert!((out[1] - 30.0 / 7.0).abs() < 1e-15);
        let s = [0.3, 0.2, 0.1];
        assert_eq!(rescale_singular_values(&s, 3).unwrap(), s.to_vec());
        assert_eq!(
            rescale_singular_values(&[5.0, 0.0, 0.0], 1).unwrap(),
            vec![5.0]
        );
        assert!(rescale_singular_values(&s, 0).is_err());
        assert!(rescale_singular_values(&s, 4).is_err());
    }

    #[test]
    fn truncate_diag_rank_one() {
        let a = array![[4.0, 0.0], [0.0, 3.0]];
        let d = svd(&a).unwrap();
        let sp = rescale_singular_values(d.sigma.as_slice().unwrap(), 1).unwrap();
        let out = truncate_reconstruct(&d, 1, &sp).unwrap();
        assert!((out[[0, 0]] - 7.0).abs() < 1e-14);
        assert_eq!(out[[0, 1]], 0.0);
        assert_eq!(out[[1, 0]], 0.0);
        assert_eq!(out[[1, 1]], 0.0);
        assert!(truncate_reconstruct(&d, 0, &[]).is_err());
        assert!(truncate_reconstruct(&d, 1, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn full_rank_reconstruct_is_identity() {
        let a = array![[1.0, 2.0, -1.0], [0.5, -3.0, 2.0]];
        let d = svd(&a).unwrap();
        let out = truncate_reconstruct(&d, 2, d.sigma.as_slice().unwrap()).unwrap();
        for (x, y) in out.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn nuclear_norm_cases() {
        let d = Array2::from_diag(&array![4.0, 3.0, 2.0, 1.0]);
        assert!((nuclear_norm(&d).unwrap() - 10.0).abs() < 1e-14);
        assert_eq!(nuclear_norm(&Array2::<f64>::zeros((3, 2))).unwrap(), 0.0);
    }

    #[test]
    fn zero_layer_passes_through() {
        let z = Array2::<f64>::zeros((3, 3));
        let out = truncate_and_rescale(&z, 40.0).unwrap();
        assert_eq!(out.rank, 0);
        assert_eq!(out.matrix, z);
    }
}
