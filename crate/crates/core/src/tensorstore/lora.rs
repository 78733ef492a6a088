//! LoRA factor pairs and their dense materialization.
//!
//! Adapter files use the interchange format with one `{target}.lora_A`
//! (rank x in) and one `{target}.lora_B` (out x rank) tensor per adapted
//! layer, and record the scaling in the header metadata as `lora_alpha`
//! (and optionally `lora_rank`).

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;

use super::{load_checkpoint, DType, Role, TaskVector, Tensor, TensorMap};
use crate::error::{Error, Result};

pub const LORA_A_SUFFIX: &str = ".lora_A";
pub const LORA_B_SUFFIX: &str = ".lora_B";
pub const LORA_ALPHA_KEY: &str = "lora_alpha";
pub const LORA_RANK_KEY: &str = "lora_rank";

#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactorPair {
    a_factor: Array2<f64>,
    b_factor: Array2<f64>,
    alpha: f64,
    target_name: String,
}

impl LoraFactorPair {
    /// `a_factor` is rank x n, `b_factor` is m x rank.
    pub fn new(
        target_name: impl Into<String>,
        a_factor: Array2<f64>,
        b_factor: Array2<f64>,
        alpha: f64,
    ) -> Result<Self> {
        let target_name = target_name.into();
        let rank = a_factor.nrows();
        if b_factor.ncols() != rank {
            return Err(Error::Shape(format!(
                "LoRA `{target_name}`: A has {rank} rows but B has {} columns",
                b_factor.ncols()
            )));
        }
        let (m, n) = (b_factor.nrows(), a_factor.ncols());
        if rank == 0 || rank > m.min(n) {
            return Err(Error::Shape(format!(
                "LoRA `{target_name}`: rank {rank} must be in 1..={}",
                m.min(n)
            )));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::Argument(format!(
                "LoRA `{target_name}`: alpha must be positive, got {alpha}"
            )));
        }
        Ok(LoraFactorPair {
            a_factor,
            b_factor,
            alpha,
            target_name,
        })
    }

    pub fn rank(&self) -> usize {
        self.a_factor.nrows()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn target_name(&self) -> &str {
        &self.target_name
    }

    pub fn a_factor(&self) -> &Array2<f64> {
        &self.a_factor
    }

    pub fn b_factor(&self) -> &Array2<f64> {
        &self.b_factor
    }

    /// Shape of the dense layer this pair perturbs.
    pub fn dense_shape(&self) -> (usize, usize) {
        (self.b_factor.nrows(), self.a_factor.ncols())
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }
}

/// The dense update `(alpha / rank) * B * A`.
pub fn materialize_lora(pair: &LoraFactorPair) -> Result<Array2<f64>> {
    if pair.b_factor.ncols() != pair.a_factor.nrows() {
        return Err(Error::Shape(format!(
            "LoRA `{}`: factor inner dimensions differ",
            pair.target_name
        )));
    }
    Ok(pair.b_factor.dot(&pair.a_factor) * pair.scaling())
}

/// All factor pairs of one fine-tuned model.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    model_id: String,
    pairs: BTreeMap<String, LoraFactorPair>,
}

impl LoraAdapter {
    pub fn new(
        model_id: impl Into<String>,
        pairs: impl IntoIterator<Item = LoraFactorPair>,
    ) -> Self {
        LoraAdapter {
            model_id: model_id.into(),
            pairs: pairs
                .into_iter()
                .map(|p| (p.target_name.clone(), p))
                .collect(),
        }
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn pairs(&self) -> &BTreeMap<String, LoraFactorPair> {
        &self.pairs
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.pairs.keys().map(String::as_str)
    }

    /// Reads factor pairs out of a loaded adapter file.
    pub fn from_tensor_map(map: &TensorMap) -> Result<Self> {
        let meta = map.metadata();
        let alpha: f64 = meta
            .get(LORA_ALPHA_KEY)
            .ok_or_else(|| Error::Validation {
                tensor: "__metadata__".into(),
                message: format!(
                    "adapter `{}` has no `{LORA_ALPHA_KEY}` entry",
                    map.model_id()
                ),
            })?
            .parse()
            .map_err(|e| Error::Validation {
                tensor: "__metadata__".into(),
                message: format!("bad `{LORA_ALPHA_KEY}`: {e}"),
            })?;
        let declared_rank: Option<usize> = match meta.get(LORA_RANK_KEY) {
            None => None,
            Some(r) => Some(r.parse().map_err(|e| Error::Validation {
                tensor: "__metadata__".into(),
                message: format!("bad `{LORA_RANK_KEY}`: {e}"),
            })?),
        };

        let mut pairs = Vec::new();
        for (name, a) in map.iter() {
            let Some(target) = name.strip_suffix(LORA_A_SUFFIX) else {
                if !name.ends_with(LORA_B_SUFFIX) {
                    return Err(Error::Validation {
                        tensor: name.to_string(),
                        message: "adapter tensors must end in .lora_A or .lora_B".into(),
                    });
                }
                continue;
            };
            let b_name = format!("{target}{LORA_B_SUFFIX}");
            let b = map
                .get(&b_name)
                .ok_or_else(|| Error::Shape(format!("`{name}` has no matching `{b_name}`")))?;
            let a = matrix_of(name, a)?;
            let b = matrix_of(&b_name, b)?;
            let pair = LoraFactorPair::new(target, a, b, alpha)?;
            if let Some(r) = declared_rank {
                if pair.rank() != r {
                    return Err(Error::Shape(format!(
                        "LoRA `{target}` has rank {} but metadata declares {r}",
                        pair.rank()
                    )));
                }
            }
            pairs.push(pair);
        }
        for name in map.names() {
            if let Some(target) = name.strip_suffix(LORA_B_SUFFIX) {
                let a_name = format!("{target}{LORA_A_SUFFIX}");
                if !map.contains(&a_name) {
                    return Err(Error::Shape(format!("`{name}` has no matching `{a_name}`")));
                }
            }
        }
        Ok(LoraAdapter::new(map.model_id(), pairs))
    }

    /// Writes the adapter back into interchange form. All pairs must share
    /// one alpha.
    pub fn to_tensor_map(&self, dtype: DType) -> Result<TensorMap> {
        let mut map = TensorMap::new(self.model_id.clone(), Role::Finetuned);
        let mut alpha = None;
        let mut rank = None;
        for (target, pair) in &self.pairs {
            if alpha.is_some_and(|a| a != pair.alpha) {
                return Err(Error::Argument(
                    "adapter pairs use different alpha values".into(),
                ));
            }
            alpha = Some(pair.alpha);
            rank = match rank {
                None => Some(pair.rank()),
                Some(r) if r == pair.rank() => Some(r),
                Some(_) => Some(0),
            };
            map.insert(
                format!("{target}{LORA_A_SUFFIX}"),
                Tensor::from_matrix(dtype, pair.a_factor.clone()),
            );
            map.insert(
                format!("{target}{LORA_B_SUFFIX}"),
                Tensor::from_matrix(dtype, pair.b_factor.clone()),
            );
        }
        if let Some(a) = alpha {
            map.metadata_mut()
                .insert(LORA_ALPHA_KEY.into(), a.to_string());
        }
        if let Some(r) = rank.filter(|&r| r > 0) {
            map.metadata_mut()
                .insert(LORA_RANK_KEY.into(), r.to_string());
        }
        Ok(map)
    }

    /// Dense task vector against `pretrained`: adapted layers get their
    /// materialized update, every other layer a zero delta.
    pub fn dense_delta(&self, pretrained: &TensorMap) -> Result<TaskVector> {
        for (target, pair) in &self.pairs {
            let tensor = pretrained.get(target).ok_or_else(|| {
                Error::Shape(format!(
                    "adapter `{}` targets `{target}`, which the pretrained model lacks",
                    self.model_id
                ))
            })?;
            let (m, n) = pair.dense_shape();
            if tensor.shape() != [m, n] {
                return Err(Error::Shape(format!(
                    "adapter `{}` produces {m}x{n} for `{target}`, pretrained tensor is {:?}",
                    self.model_id,
                    tensor.shape()
                )));
            }
        }
        let mut entries = Vec::with_capacity(pretrained.len());
        for (name, tensor) in pretrained.iter() {
            let delta = match self.pairs.get(name) {
                Some(pair) => Tensor::from_matrix(tensor.dtype(), materialize_lora(pair)?),
                None => Tensor::zeros(tensor.dtype(), tensor.shape()),
            };
            entries.push((name.to_string(), delta));
        }
        let mut map = TensorMap::with_entries(self.model_id.clone(), Role::Delta, entries);
        map.metadata_mut().insert(
            super::BASE_MODEL_KEY.into(),
            pretrained.model_id().to_string(),
        );
        Ok(TaskVector::from_map(map))
    }
}

pub fn load_lora(path: impl AsRef<Path>) -> Result<LoraAdapter> {
    LoraAdapter::from_tensor_map(&load_checkpoint(path)?)
}

fn matrix_of(name: &str, tensor: &Tensor) -> Result<Array2<f64>> {
    tensor.as_matrix().map(|m| m.to_owned()).ok_or_else(|| {
        Error::Shape(format!(
            "`{name}` must be 2-D, has shape {:?}",
            tensor.shape()
        ))
    })
}
