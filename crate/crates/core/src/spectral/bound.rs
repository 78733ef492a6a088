use ndarray::{Array1, ArrayBase, Data, Ix2};
use serde::Serialize;

use super::svd::{svd, ZERO_THRESHOLD};
use crate::error::{Error, Result};

/// Interference of `B` on inputs spanned by the right singular vectors of `A`.
///
/// For `x = sum_j alpha_j v_j^A`, `||B x|| <= r_B * beta * sqrt(r_A)` with
/// `beta = max_{i,j} |sigma_i^B alpha_j|`. Truncating `B` to rank `r` lowers
/// the bound to `r * beta * sqrt(r_A)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConflictBoundReport {
    pub rank_a: usize,
    pub rank_b: usize,
    pub beta: f64,
    /// `||B x||_2`.
    pub lhs: f64,
    pub bound: f64,
    pub bound_after_truncation: f64,
}

impl ConflictBoundReport {
    pub fn reduction(&self) -> f64 {
        self.bound - self.bound_after_truncation
    }

    /// `(r_B - r) * beta * sqrt(r_A)` evaluated directly.
    pub fn expected_reduction(&self, trunc_rank: usize) -> f64 {
        (self.rank_b - trunc_rank) as f64 * self.beta * (self.rank_a as f64).sqrt()
    }

    /// Whether `lhs <= bound`, allowing a few ulps for the tight rank-one case.
    pub fn holds(&self) -> bool {
        self.lhs <= self.bound * (1.0 + 8.0 * f64::EPSILON)
    }
}

pub fn conflict_bound<S1, S2>(
    a: &ArrayBase<S1, Ix2>,
    b: &ArrayBase<S2, Ix2>,
    coeffs: &[f64],
    trunc_rank: usize,
) -> Result<ConflictBoundReport>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
{
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "A has {} columns but B has {}",
            a.ncols(),
            b.ncols()
        )));
    }
    if coeffs.iter().any(|c| !c.is_finite()) {
        return Err(Error::Argument("coefficients must be finite".into()));
    }
    let da = svd(a)?;
    let db = svd(b)?;
    let rank_a = da.numerical_rank();
    let rank_b = db.numerical_rank();
    if coeffs.len() != rank_a {
        return Err(Error::Argument(format!(
            "{} coefficients given but A has numerical rank {rank_a} (threshold {ZERO_THRESHOLD:e} * sigma_max)",
            coeffs.len()
        )));
    }
    if trunc_rank > rank_b {
        return Err(Error::Argument(format!(
            "truncation rank {trunc_rank} exceeds rank of B ({rank_b})"
        )));
    }

    let mut x = Array1::<f64>::zeros(a.ncols());
    for (j, &alpha) in coeffs.iter().enumerate() {
        x.scaled_add(alpha, &da.v.column(j));
    }
    let bx = b.dot(&x);
    let lhs = bx.dot(&bx).sqrt();

    let max_coeff = coeffs.iter().fold(0.0f64, |acc, c| acc.max(c.abs()));
    let beta = db
        .sigma
        .iter()
        .take(rank_b)
        .fold(0.0f64, |acc, s| acc.max(s * max_coeff));
    let sqrt_ra = (rank_a as f64).sqrt();
    Ok(ConflictBoundReport {
        rank_a,
        rank_b,
        beta,
        lhs,
        bound: rank_b as f64 * beta * sqrt_ra,
        bound_after_truncation: trunc_rank as f64 * beta * sqrt_ra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn zero_operator() {
        let a = Array2::<f64>::eye(3);
        let b = Array2::<f64>::zeros((2, 3));
        let rep = conflict_bound(&a, &b, &[1.0, 2.0, 3.0], 0).unwrap();
        assert_eq!(rep.lhs, 0.0);
        assert_eq!(rep.bound, 0.0);
        assert!(rep.holds());
    }

    #[test]
    fn identity_pair_hand_values() {
        let i2 = Array2::<f64>::eye(2);
        let rep = conflict_bound(&i2, &i2, &[1.0, 0.0], 1).unwrap();
        assert_eq!((rep.rank_a, rep.rank_b), (2, 2));
        assert!((rep.lhs - 1.0).abs() < 1e-15);
        assert_eq!(rep.beta, 1.0);
        assert!((rep.bound - 2.0 * 2f64.sqrt()).abs() < 1e-15);
        assert!((rep.bound_after_truncation - 2f64.sqrt()).abs() < 1e-15);
        assert!(rep.holds());
    }

    #[test]
    fn rank_one_is_tight() {
        let a = array![[3.0, 0.0], [0.0, 0.0]];
        let rep = conflict_bound(&a, &a, &[2.0], 1).unwrap();
        assert!((rep.lhs - 6.0).abs() < 1e-14);
        assert!((rep.bound - 6.0).abs() < 1e-14);
        assert!(rep.holds());
    }

    #[test]
    fn argument_errors() {
        let a = array![[1.0, 0.0], [0.0, 0.0]];
        assert!(conflict_bound(&a, &a, &[1.0, 1.0], 0).is_err());
        assert!(conflict_bound(&a, &a, &[1.0], 2).is_err());
        let wide = Array2::<f64>::eye(3);
        assert!(conflict_bound(&a, &wide, &[1.0], 0).is_err());
    }
}
