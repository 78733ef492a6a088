use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::prf;
use crate::tensorstore::{DType, TaskVector, Tensor};

/// Name of the single layer in every synthetic task vector.
pub const SYNTH_LAYER: &str = "synth.weight";

/// Planted low-rank task vectors with additive Gaussian noise.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub num_tasks: usize,
    pub shape: (usize, usize),
    pub planted_rank: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let (m, n) = self.shape;
        if self.num_tasks == 0 || m == 0 || n == 0 {
            return Err(Error::Argument(
                "need at least one task and a non-empty shape".into(),
            ));
        }
        if self.planted_rank > m.min(n) {
            return Err(Error::Argument(format!(
                "planted rank {} exceeds min({m}, {n})",
                self.planted_rank
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Argument(format!(
                "noise sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthTasks {
    pub task_vectors: Vec<TaskVector>,
    /// Noise-free planted matrix behind each task vector.
    pub planted: Vec<Array2<f64>>,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal))
}

/// `L * R / sqrt(rank)` with standard-normal factors, so entries have unit
/// variance whatever the rank.
pub fn planted_low_rank(shape: (usize, usize), rank: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    planted_from(&mut rng, shape, rank)
}

fn planted_from(rng: &mut ChaCha8Rng, (m, n): (usize, usize), rank: usize) -> Array2<f64> {
    if rank == 0 {
        return Array2::zeros((m, n));
    }
    let left = gaussian(rng, (m, rank));
    let right = gaussian(rng, (rank, n));
    left.dot(&right) / (rank as f64).sqrt()
}

/// Deterministic in `spec`: task `i` draws from its own stream derived from
/// `(seed, i)`.
pub fn generate_synth_task_vectors(spec: &SynthSpec) -> Result<SynthTasks> {
    spec.validate()?;
    let mut task_vectors = Vec::with_capacity(spec.num_tasks);
    let mut planted = Vec::with_capacity(spec.num_tasks);
    for i in 0..spec.num_tasks {
        let mut rng = ChaCha8Rng::seed_from_u64(prf::derive_seed(spec.seed, i as u64));
        let truth = planted_from(&mut rng, spec.shape, spec.planted_rank);
        let mut observed = truth.clone();
        if spec.noise_sigma > 0.0 {
            observed += &(gaussian(&mut rng, spec.shape) * spec.noise_sigma);
        }
        task_vectors.push(TaskVector::from_entries(
            format!("synth-{i}"),
            [(
                SYNTH_LAYER.to_string(),
                Tensor::from_matrix(DType::F64, observed),
            )],
        ));
        planted.push(truth);
    }
    Ok(SynthTasks {
        task_vectors,
        planted,
    })
}
