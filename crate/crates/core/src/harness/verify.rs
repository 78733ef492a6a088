//! Runtime self-check of the spectral and merge invariants on random inputs.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::merge::{dare_sparsify, simple_average, star_merge, ties_trim};
use crate::prf;
use crate::spectral::{
    conflict_bound, nuclear_norm, rank_keep, singular_values, svd, truncate_and_rescale,
};
use crate::tensorstore::{from_bytes, to_bytes, DType, Role, TaskVector, Tensor, TensorMap};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub trials: usize,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub trials: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            trials: 50,
        }
    }
}

const TOL: f64 = 1e-9;

fn random_matrix(rng: &mut ChaCha8Rng, max_rows: usize, max_cols: usize) -> Array2<f64> {
    let m = rng.random_range(1..=max_rows);
    let n = rng.random_range(1..=max_cols);
    Array2::from_shape_simple_fn((m, n), || rng.sample::<f64, _>(StandardNormal))
}

fn rel_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let scale = b
        .iter()
        .fold(0.0f64, |s, v| s.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    a.iter()
        .zip(b)
        .fold(0.0f64, |s, (x, y)| s.max((x - y).abs()))
        / scale
}

fn outcome(name: &str, trials: usize, worst: f64, passed: bool) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        passed,
        trials,
        detail: format!("worst={worst:.3e}"),
    }
}

fn exact(name: &str, trials: usize, passed: bool) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        passed,
        trials,
        detail: "exact".into(),
    }
}

fn check_svd(rng: &mut ChaCha8Rng, trials: usize) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let a = random_matrix(rng, 40, 40);
        let d = svd(&a)?;
        worst = worst.max(rel_diff(&d.reconstruct(), &a));
        let k = d.rank_capacity();
        let eye = Array2::<f64>::eye(k);
        worst = worst.max(rel_diff(&d.u.t().dot(&d.u), &eye));
        worst = worst.max(rel_diff(&d.v.t().dot(&d.v), &eye));
        if d.sigma.windows(2).into_iter().any(|w| w[0] < w[1]) || d.sigma.iter().any(|&s| s < 0.0) {
            return Ok(outcome("svd_invariants", trials, f64::INFINITY, false));
        }
    }
    Ok(outcome("svd_invariants", trials, worst, worst <= 1e-10))
}

fn check_nuclear_restoration(rng: &mut ChaCha8Rng, trials: usize) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let a = random_matrix(rng, 48, 48);
        let before = nuclear_norm(&a)?;
        for eta in (1..=10).map(|i| 10.0 * i as f64) {
            let layer = truncate_and_rescale(&a, eta)?;
            let after = nuclear_norm(&layer.matrix)?;
            worst = worst.max((after - before).abs() / before);
        }
    }
    Ok(outcome(
        "nuclear_norm_restoration",
        trials,
        worst,
        worst <= TOL,
    ))
}

fn random_task_vectors(rng: &mut ChaCha8Rng) -> Vec<TaskVector> {
    let tasks = rng.random_range(1..=4);
    let (m, n) = (rng.random_range(1..=12), rng.random_range(1..=12));
    let mut gauss = |shape: &[usize]| {
        let numel = shape.iter().product();
        let values = (0..numel)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::from_vec(DType::F64, shape, values).expect("shape matches")
    };
    (0..tasks)
        .map(|i| {
            TaskVector::from_entries(
                format!("t{i}"),
                [
                    ("a.weight".to_string(), gauss(&[m, n])),
                    ("a.bias".to_string(), gauss(&[m])),
                    ("b.weight".to_string(), gauss(&[n, m])),
                ],
            )
        })
        .collect()
}

fn check_full_mass_degeneracy(rng: &mut ChaCha8Rng, trials: usize) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let tvs = random_task_vectors(rng);
        let star = star_merge(&tvs, 100.0)?;
        let avg = simple_average(&tvs)?;
        for (name, t) in avg.delta.iter() {
            let s = star.delta.get(name).expect("same layers");
            let shape = (t.numel(), 1);
            let to2 = |x: &Tensor| {
                Array2::from_shape_vec(shape, x.values().collect()).expect("numel matches")
            };
            worst = worst.max(rel_diff(&to2(s), &to2(t)));
        }
    }
    Ok(outcome(
        "full_mass_equals_average",
        trials,
        worst,
        worst <= TOL,
    ))
}

fn check_conflict_bound(rng: &mut ChaCha8Rng, trials: usize) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    let mut holds = true;
    for _ in 0..trials {
        let a = Array2::from_shape_simple_fn((16, 16), || rng.sample::<f64, _>(StandardNormal));
        let b = Array2::from_shape_simple_fn((16, 16), || rng.sample::<f64, _>(StandardNormal));
        let coeffs: Vec<f64> = (0..16).map(|_| rng.sample(StandardNormal)).collect();
        for r in 0..=16 {
            let rep = conflict_bound(&a, &b, &coeffs, r)?;
            holds &= rep.holds();
            let expected = rep.expected_reduction(r);
            let scale = rep.bound.max(f64::MIN_POSITIVE);
            worst = worst.max((rep.reduction() - expected).abs() / scale);
        }
    }
    Ok(outcome(
        "conflict_bound",
        trials,
        worst,
        holds && worst <= TOL,
    ))
}

fn check_rank_keep(rng: &mut ChaCha8Rng, trials: usize) -> Result<CheckOutcome> {
    let sigma = [4.0, 3.0, 2.0, 1.0];
    let mut passed = rank_keep(&sigma, 40.0)? == 1
        && rank_keep(&sigma, 70.0)? == 2
        && rank_keep(&sigma, 100.0)? == 4;
    for _ in 0..trials {
        let len = rng.random_range(1..=32);
        let mut s: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..10.0)).collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s[0] += 1.0;
        let mut prev = 0;
        for eta in 1..=100 {
            let r = rank_keep(&s, eta as f64)?;
            passed &= r >= prev && r >= 1;
            prev = r;
        }
    }
    Ok(exact("rank_keep", trials, passed))
}

fn check_values_only_path(rng: &mut ChaCha8Rng, trials: usize) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let a = random_matrix(rng, 32, 32);
        let full = svd(&a)?;
        let values = singular_values(&a)?;
        let scale = full.sigma_max().max(f64::MIN_POSITIVE);
        for (x, y) in full.sigma.iter().zip(&values) {
            worst = worst.max((x - y).abs() / scale);
        }
    }
    Ok(outcome(
        "singular_values_agree",
        trials,
        worst,
        worst <= 1e-10,
    ))
}

fn check_dare(seed: u64) -> Result<CheckOutcome> {
    let n = 100_000;
    let tv = TaskVector::from_entries(
        "d",
        [(
            "w".to_string(),
            Tensor::from_vec(DType::F64, &[n], vec![1.0; n])?,
        )],
    );
    let p = 0.7;
    let a = dare_sparsify(&tv, p, seed)?;
    let b = dare_sparsify(&tv, p, seed)?;
    let zeros = a
        .get("w")
        .expect("layer")
        .values()
        .filter(|&v| v == 0.0)
        .count();
    let frac = zeros as f64 / n as f64;
    let survivors_ok = a
        .get("w")
        .expect("layer")
        .values()
        .all(|v| v == 0.0 || (v - 1.0 / (1.0 - p)).abs() < 1e-12);
    // Five standard deviations of a binomial proportion.
    let slack = 5.0 * (p * (1.0 - p) / n as f64).sqrt();
    let passed = a == b && survivors_ok && (frac - p).abs() <= slack;
    Ok(CheckOutcome {
        name: "dare_statistics".into(),
        passed,
        trials: n,
        detail: format!("zero_fraction={frac:.5}"),
    })
}

fn check_ties_counts(rng: &mut ChaCha8Rng, trials: usize) -> Result<CheckOutcome> {
    let mut passed = true;
    for _ in 0..trials {
        let tv = random_task_vectors(rng).swap_remove(0);
        let k = rng.random_range(1..=100) as f64;
        let trimmed = ties_trim(&tv, k)?;
        let n = tv.numel();
        let expected = ((k * n as f64) / 100.0).ceil() as usize;
        let nonzero: usize = trimmed
            .values
            .iter()
            .map(|(_, t)| t.values().filter(|&v| v != 0.0).count())
            .sum();
        passed &= trimmed.kept == expected.min(n) && nonzero == trimmed.kept;
    }
    Ok(exact("ties_survivor_count", trials, passed))
}

fn check_format_round_trip(rng: &mut ChaCha8Rng, trials: usize) -> Result<CheckOutcome> {
    let mut passed = true;
    for i in 0..trials {
        let mut map = TensorMap::new(format!("m{i}"), Role::Finetuned);
        let a = random_matrix(rng, 8, 8);
        map.insert("f64", Tensor::from_matrix(DType::F64, a.clone()));
        map.insert(
            "f32",
            Tensor::from_matrix(DType::F32, a.mapv(|v| v as f32 as f64)),
        );
        let bytes = to_bytes(&map)?;
        let back = from_bytes(&bytes, "fallback")?;
        passed &= back == map && to_bytes(&back)? == bytes;
    }
    Ok(exact("format_round_trip", trials, passed))
}

/// Runs every check; each gets its own random stream so results do not
/// depend on which other checks ran.
pub fn run_property_suite(options: VerifyOptions) -> Result<Vec<CheckOutcome>> {
    let t = options.trials.max(1);
    let rng = |i: u64| ChaCha8Rng::seed_from_u64(prf::derive_seed(options.seed, i));
    Ok(vec![
        check_svd(&mut rng(0), t)?,
        check_values_only_path(&mut rng(1), t)?,
        check_nuclear_restoration(&mut rng(2), t)?,
        check_full_mass_degeneracy(&mut rng(3), t)?,
        check_conflict_bound(&mut rng(4), t)?,
        check_rank_keep(&mut rng(5), t)?,
        check_dare(options.seed)?,
        check_ties_counts(&mut rng(6), t)?,
        check_format_round_trip(&mut rng(7), t)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_small_run() {
        let out = run_property_suite(VerifyOptions { seed: 3, trials: 5 }).unwrap();
        assert_eq!(out.len(), 9);
        for c in &out {
            assert!(c.passed, "{c:?}");
        }
    }
}
