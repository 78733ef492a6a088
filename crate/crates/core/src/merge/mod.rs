//! Merging sets of task vectors into one delta.

mod baselines;
mod dare;
mod star;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prf;
use crate::tensorstore::{
    apply_delta, compute_task_vector, LoraAdapter, Role, TaskVector, Tensor, TensorMap,
};

pub use baselines::{simple_average, task_arithmetic, ties_merge, ties_trim, TrimmedTask};
pub use dare::dare_sparsify;
pub use star::star_merge;

pub const DEFAULT_ETA: f64 = 40.0;
pub const DEFAULT_K_PERCENT: f64 = 20.0;

/// Methods named in the literature that this crate deliberately does not
/// implement.
const OUT_OF_SCOPE: &[&str] = &[
    "metagpt",
    "tall-masks",
    "tall_masks",
    "tallmasks",
    "consensus",
    "emr",
    "emr-merging",
    "emr_merging",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Star,
    SimpleAverage,
    TaskArithmetic,
    Ties,
}

impl MergeMethod {
    pub fn cli_name(self) -> &'static str {
        match self {
            MergeMethod::Star => "star",
            MergeMethod::SimpleAverage => "average",
            MergeMethod::TaskArithmetic => "ta",
            MergeMethod::Ties => "ties",
        }
    }
}

impl FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "star" => Ok(MergeMethod::Star),
            "average" | "simple_average" | "avg" => Ok(MergeMethod::SimpleAverage),
            "ta" | "task_arithmetic" => Ok(MergeMethod::TaskArithmetic),
            "ties" => Ok(MergeMethod::Ties),
            other if OUT_OF_SCOPE.contains(&other) => Err(Error::Argument(format!(
                "method `{s}` is out of scope: MetaGPT, TALL-masks and EMR-Merging are not \
                 implemented; choose one of star, average, ta, ties"
            ))),
            _ => Err(Error::Argument(format!(
                "unknown method `{s}`; choose one of star, average, ta, ties"
            ))),
        }
    }
}

/// Method selector and hyperparameters. DARE, when `drop_p` is set, is
/// applied to every task vector before the selected method runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub method: MergeMethod,
    /// Percentage of singular-value mass kept by STAR, in (0, 100].
    pub eta: f64,
    /// Percentage of entries kept by the TIES trim, in (0, 100].
    pub k_percent: f64,
    /// Task-arithmetic scale; required for that method.
    pub alpha: Option<f64>,
    /// DARE drop probability in [0, 1).
    pub drop_p: Option<f64>,
    pub seed: u64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            method: MergeMethod::Star,
            eta: DEFAULT_ETA,
            k_percent: DEFAULT_K_PERCENT,
            alpha: None,
            drop_p: None,
            seed: 0,
        }
    }
}

impl MergeConfig {
    pub fn star(eta: f64) -> Self {
        MergeConfig {
            eta,
            ..Default::default()
        }
    }

    pub fn simple_average() -> Self {
        MergeConfig {
            method: MergeMethod::SimpleAverage,
            ..Default::default()
        }
    }

    pub fn task_arithmetic(alpha: f64) -> Self {
        MergeConfig {
            method: MergeMethod::TaskArithmetic,
            alpha: Some(alpha),
            ..Default::default()
        }
    }

    pub fn ties(k_percent: f64) -> Self {
        MergeConfig {
            method: MergeMethod::Ties,
            k_percent,
            ..Default::default()
        }
    }

    pub fn with_dare(mut self, drop_p: f64, seed: u64) -> Self {
        self.drop_p = Some(drop_p);
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.method {
            MergeMethod::Star if !(self.eta > 0.0 && self.eta <= 100.0) => {
                return Err(Error::Argument(format!(
                    "eta must be in (0, 100], got {}",
                    self.eta
                )))
            }
            MergeMethod::Ties if !(self.k_percent > 0.0 && self.k_percent <= 100.0) => {
                return Err(Error::Argument(format!(
                    "k must be in (0, 100], got {}",
                    self.k_percent
                )))
            }
            MergeMethod::TaskArithmetic => match self.alpha {
                None => return Err(Error::Argument("task arithmetic requires alpha".into())),
                Some(a) if !a.is_finite() => {
                    return Err(Error::Argument(format!("alpha must be finite, got {a}")))
                }
                _ => {}
            },
            _ => {}
        }
        if let Some(p) = self.drop_p {
            check_drop_p(p)?;
        }
        Ok(())
    }

    /// Short human-readable name used in reports, e.g. `dare(p=0.2)+ties(k=20)`.
    pub fn label(&self) -> String {
        let base = match self.method {
            MergeMethod::Star => format!("star(eta={})", self.eta),
            MergeMethod::SimpleAverage => "average".to_string(),
            MergeMethod::TaskArithmetic => format!("ta(alpha={})", self.alpha.unwrap_or(f64::NAN)),
            MergeMethod::Ties => format!("ties(k={})", self.k_percent),
        };
        match self.drop_p {
            Some(p) => format!("dare(p={p})+{base}"),
            None => base,
        }
    }
}

impl fmt::Display for MergeConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

pub(crate) fn check_drop_p(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "drop probability must be in [0, 1), got {p}"
        )))
    }
}

/// Spectral bookkeeping for one (task, layer) pair processed by STAR.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerDiagnostics {
    pub task: usize,
    pub task_id: String,
    pub layer: String,
    pub rank: usize,
    pub nuclear_before: f64,
    pub nuclear_after: f64,
}

#[derive(Clone, Debug)]
pub struct MergeResult {
    pub delta: TaskVector,
    /// Layer name to the rank kept for each task, in input order (STAR only).
    pub per_layer_ranks: BTreeMap<String, Vec<usize>>,
    pub config: MergeConfig,
    /// Per (task, 2-D layer) nuclear norms before and after processing
    /// (STAR only).
    pub diagnostics: Vec<LayerDiagnostics>,
}

impl MergeResult {
    fn plain(delta: TaskVector, config: MergeConfig) -> Self {
        MergeResult {
            delta,
            per_layer_ranks: BTreeMap::new(),
            config,
            diagnostics: Vec::new(),
        }
    }
}

pub(crate) fn check_inputs(task_vectors: &[TaskVector]) -> Result<&TaskVector> {
    let first = task_vectors
        .first()
        .ok_or_else(|| Error::Argument("at least one task vector is required".into()))?;
    for tv in &task_vectors[1..] {
        first.check_compatible(tv)?;
    }
    Ok(first)
}

/// Element-wise `scale * sum_i tensors_i`, summing in input order.
pub(crate) fn scaled_sum(task_vectors: &[TaskVector], scale: f64, model_id: &str) -> TaskVector {
    let first = &task_vectors[0];
    let entries = first.iter().map(|(name, t0)| {
        let mut acc: ArrayD<f64> = t0.data().clone();
        let mut dtype = t0.dtype();
        for tv in &task_vectors[1..] {
            let t = tv.get(name).expect("checked by check_inputs");
            acc += t.data();
            dtype = dtype.wider(t.dtype());
        }
        acc.mapv_inplace(|v| v * scale);
        (name.to_string(), Tensor::new(dtype, acc))
    });
    TaskVector::from_entries(model_id, entries.collect::<Vec<_>>())
}

/// Element-wise mean, summing in input order and dividing once.
pub(crate) fn mean(task_vectors: &[TaskVector], model_id: &str) -> TaskVector {
    let t = task_vectors.len() as f64;
    let first = &task_vectors[0];
    let entries = first.iter().map(|(name, t0)| {
        let mut acc: ArrayD<f64> = t0.data().clone();
        let mut dtype = t0.dtype();
        for tv in &task_vectors[1..] {
            let x = tv.get(name).expect("checked by check_inputs");
            acc += x.data();
            dtype = dtype.wider(x.dtype());
        }
        acc.mapv_inplace(|v| v / t);
        (name.to_string(), Tensor::new(dtype, acc))
    });
    TaskVector::from_entries(model_id, entries.collect::<Vec<_>>())
}

pub(crate) const MERGED_ID: &str = "merged";

/// Runs the configured method (with optional DARE preprocessing) on task
/// vectors that have already been computed.
pub fn merge_task_vectors(
    task_vectors: &[TaskVector],
    config: &MergeConfig,
) -> Result<MergeResult> {
    config.validate()?;
    check_inputs(task_vectors)?;
    let sparsified;
    let inputs = match config.drop_p {
        Some(p) => {
            sparsified = task_vectors
                .iter()
                .enumerate()
                .map(|(i, tv)| dare_sparsify(tv, p, prf::derive_seed(config.seed, i as u64)))
                .collect::<Result<Vec<_>>>()?;
            &sparsified[..]
        }
        None => task_vectors,
    };
    let mut result = match config.method {
        MergeMethod::Star => star_merge(inputs, config.eta)?,
        MergeMethod::SimpleAverage => simple_average(inputs)?,
        MergeMethod::TaskArithmetic => task_arithmetic(inputs, config.alpha.unwrap())?,
        MergeMethod::Ties => ties_merge(inputs, config.k_percent)?,
    };
    result.config = config.clone();
    Ok(result)
}

/// A fine-tuned model given either as full weights or as LoRA factors.
#[derive(Clone, Debug)]
pub enum FineTuned {
    Dense(TensorMap),
    Lora(LoraAdapter),
}

impl FineTuned {
    pub fn model_id(&self) -> &str {
        match self {
            FineTuned::Dense(m) => m.model_id(),
            FineTuned::Lora(a) => a.model_id(),
        }
    }

    pub fn task_vector(&self, pretrained: &TensorMap) -> Result<TaskVector> {
        match self {
            FineTuned::Dense(m) => compute_task_vector(m, pretrained),
            FineTuned::Lora(a) => a.dense_delta(pretrained),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MergedModel {
    pub model: TensorMap,
    pub result: MergeResult,
}

/// Computes task vectors against `pretrained`, merges them and applies the
/// merged delta.
///
/// LoRA adapters are materialized to dense deltas first; all adapters in one
/// call must target the same set of layers.
pub fn merge(
    pretrained: &TensorMap,
    finetuned: &[FineTuned],
    config: &MergeConfig,
) -> Result<MergedModel> {
    config.validate()?;
    if finetuned.is_empty() {
        return Err(Error::Argument(
            "at least one fine-tuned model is required".into(),
        ));
    }
    let mut lora_targets: Option<(&str, Vec<&str>)> = None;
    for ft in finetuned {
        if let FineTuned::Lora(adapter) = ft {
            let targets: Vec<&str> = adapter.targets().collect();
            match &lora_targets {
                None => lora_targets = Some((adapter.model_id(), targets)),
                Some((first_id, first)) if *first != targets => {
                    return Err(Error::Shape(format!(
                        "adapters `{first_id}` and `{}` target different layers: {first:?} vs {targets:?}",
                        adapter.model_id()
                    )))
                }
                Some(_) => {}
            }
        }
    }
    let task_vectors = finetuned
        .iter()
        .map(|ft| ft.task_vector(pretrained))
        .collect::<Result<Vec<_>>>()?;
    let result = merge_task_vectors(&task_vectors, config)?;
    let mut model = apply_delta(pretrained, &result.delta)?;
    model.set_model_id(MERGED_ID);
    model.set_role(Role::Merged);
    Ok(MergedModel { model, result })
}
