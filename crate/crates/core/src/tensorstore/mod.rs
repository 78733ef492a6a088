//! Named tensor collections, task vectors and the on-disk interchange format.
//!
//! Tensors are held in `f64` regardless of their storage dtype. The dtype tag
//! only decides how values are written back to disk, so an `F32` tensor that
//! is loaded and saved again is bit-identical.

mod format;
mod lora;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use ndarray::{Array2, ArrayD, ArrayView2, Ix2, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{from_bytes, load_checkpoint, save_checkpoint, to_bytes, TensorMeta};
pub use lora::{load_lora, materialize_lora, LoraAdapter, LoraFactorPair};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F64 => "F64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(DType::F32),
            "F64" => Some(DType::F64),
            _ => None,
        }
    }

    /// The dtype able to hold the result of combining `self` and `other`.
    pub fn wider(self, other: DType) -> DType {
        if self == DType::F64 || other == DType::F64 {
            DType::F64
        } else {
            DType::F32
        }
    }
}

/// A dense tensor computed in `f64` and tagged with its storage dtype.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dtype: DType,
    data: ArrayD<f64>,
}

impl Tensor {
    pub fn new(dtype: DType, data: ArrayD<f64>) -> Self {
        Tensor { dtype, data }
    }

    pub fn from_vec(dtype: DType, shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let data = ArrayD::from_shape_vec(IxDyn(shape), values)
            .map_err(|e| Error::Shape(format!("cannot build tensor of shape {shape:?}: {e}")))?;
        Ok(Tensor { dtype, data })
    }

    pub fn from_matrix(dtype: DType, matrix: Array2<f64>) -> Self {
        Tensor {
            dtype,
            data: matrix.into_dyn(),
        }
    }

    pub fn zeros(dtype: DType, shape: &[usize]) -> Self {
        Tensor {
            dtype,
            data: ArrayD::zeros(IxDyn(shape)),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.data.ndim()
    }

    pub fn data(&self) -> &ArrayD<f64> {
        &self.data
    }

    pub fn into_data(self) -> ArrayD<f64> {
        self.data
    }

    /// Row-major view of the tensor as a matrix, if it is 2-D.
    pub fn as_matrix(&self) -> Option<ArrayView2<'_, f64>> {
        self.data.view().into_dimensionality::<Ix2>().ok()
    }

    /// Values in row-major order.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().copied()
    }

    /// Checks that every element is finite, and for `F32` tensors that it
    /// also stays finite after narrowing.
    pub fn check_finite(&self, name: &str) -> Result<()> {
        let bad = match self.dtype {
            DType::F64 => self.data.iter().position(|v| !v.is_finite()),
            DType::F32 => self.data.iter().position(|&v| !(v as f32).is_finite()),
        };
        match bad {
            None => Ok(()),
            Some(idx) => Err(Error::Validation {
                tensor: name.to_string(),
                message: format!("non-finite element at flat index {idx}"),
            }),
        }
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let mut data = self.data.clone();
        data.zip_mut_with(&other.data, |a, &b| *a = f(*a, b));
        Tensor {
            dtype: self.dtype.wider(other.dtype),
            data,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Pretrained,
    Finetuned,
    Delta,
    Merged,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Pretrained => "pretrained",
            Role::Finetuned => "finetuned",
            Role::Delta => "delta",
            Role::Merged => "merged",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pretrained" => Some(Role::Pretrained),
            "finetuned" => Some(Role::Finetuned),
            "delta" => Some(Role::Delta),
            "merged" => Some(Role::Merged),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An ordered collection of named tensors for one model, delta or merge result.
///
/// Iteration order is lexicographic by tensor name; every flat index used by
/// the merge methods follows this order.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorMap {
    model_id: String,
    role: Role,
    entries: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl TensorMap {
    pub fn new(model_id: impl Into<String>, role: Role) -> Self {
        TensorMap {
            model_id: model_id.into(),
            role,
            entries: BTreeMap::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_entries(
        model_id: impl Into<String>,
        role: Role,
        entries: impl IntoIterator<Item = (String, Tensor)>,
    ) -> Self {
        TensorMap {
            model_id: model_id.into(),
            role,
            entries: entries.into_iter().collect(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn set_model_id(&mut self, model_id: impl Into<String>) {
        self.model_id = model_id.into();
    }

    pub fn set_role(&mut self, role: Role) {
        self.role = role;
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    /// Free-form string metadata carried in the file header.
    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.entries.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn entries(&self) -> &BTreeMap<String, Tensor> {
        &self.entries
    }

    pub fn into_entries(self) -> BTreeMap<String, Tensor> {
        self.entries
    }

    /// Total element count across all tensors.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, tensor) in &self.entries {
            if tensor.shape().is_empty() || tensor.shape().contains(&0) {
                return Err(Error::Validation {
                    tensor: name.clone(),
                    message: format!(
                        "shape {:?} must be non-empty with all dims >= 1",
                        tensor.shape()
                    ),
                });
            }
            tensor.check_finite(name)?;
        }
        Ok(())
    }

    /// Fails unless both maps have the same key set and per-key shapes.
    pub fn check_compatible(&self, other: &TensorMap) -> Result<()> {
        let ours: BTreeSet<&str> = self.names().collect();
        let theirs: BTreeSet<&str> = other.names().collect();
        if ours != theirs {
            let only_ours: Vec<&str> = ours.difference(&theirs).copied().collect();
            let only_theirs: Vec<&str> = theirs.difference(&ours).copied().collect();
            return Err(Error::Shape(format!(
                "key sets differ: only in `{}`: {:?}; only in `{}`: {:?}",
                self.model_id, only_ours, other.model_id, only_theirs
            )));
        }
        for (name, tensor) in &self.entries {
            let rhs = &other.entries[name];
            if tensor.shape() != rhs.shape() {
                return Err(Error::Shape(format!(
                    "tensor `{name}` has shape {:?} in `{}` but {:?} in `{}`",
                    tensor.shape(),
                    self.model_id,
                    rhs.shape(),
                    other.model_id
                )));
            }
        }
        Ok(())
    }

    fn zip_with(
        &self,
        other: &TensorMap,
        model_id: String,
        role: Role,
        f: impl Fn(f64, f64) -> f64 + Copy,
    ) -> Result<TensorMap> {
        self.check_compatible(other)?;
        let entries = self
            .entries
            .iter()
            .map(|(name, t)| (name.clone(), t.zip_with(&other.entries[name], f)))
            .collect();
        Ok(TensorMap {
            model_id,
            role,
            entries,
            metadata: BTreeMap::new(),
        })
    }

    /// Applies `f` to every tensor, keeping names and provenance.
    pub fn map_tensors(&self, mut f: impl FnMut(&str, &Tensor) -> Tensor) -> TensorMap {
        TensorMap {
            model_id: self.model_id.clone(),
            role: self.role,
            entries: self
                .entries
                .iter()
                .map(|(name, t)| (name.clone(), f(name, t)))
                .collect(),
            metadata: self.metadata.clone(),
        }
    }

    /// Same keys and shapes, all zeros.
    pub fn zeros_like(&self, model_id: impl Into<String>, role: Role) -> TensorMap {
        TensorMap {
            model_id: model_id.into(),
            role,
            entries: self
                .entries
                .iter()
                .map(|(name, t)| (name.clone(), Tensor::zeros(t.dtype(), t.shape())))
                .collect(),
            metadata: BTreeMap::new(),
        }
    }
}

/// Metadata key recording the model a task vector was taken against.
pub const BASE_MODEL_KEY: &str = "base_model";

/// A difference between a fine-tuned model and its pretrained base.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector {
    map: TensorMap,
}

impl TaskVector {
    /// Wraps `map` as a delta, retagging its role.
    pub fn from_map(mut map: TensorMap) -> Self {
        map.role = Role::Delta;
        TaskVector { map }
    }

    pub fn from_entries(
        model_id: impl Into<String>,
        entries: impl IntoIterator<Item = (String, Tensor)>,
    ) -> Self {
        TaskVector::from_map(TensorMap::with_entries(model_id, Role::Delta, entries))
    }

    pub fn map(&self) -> &TensorMap {
        &self.map
    }

    pub fn into_map(self) -> TensorMap {
        self.map
    }

    pub fn model_id(&self) -> &str {
        &self.map.model_id
    }

    pub fn base_model(&self) -> Option<&str> {
        self.map.metadata.get(BASE_MODEL_KEY).map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.names()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.numel()
    }

    pub fn check_compatible(&self, other: &TaskVector) -> Result<()> {
        self.map.check_compatible(&other.map)
    }
}

/// `finetuned - pretrained`, element-wise.
pub fn compute_task_vector(finetuned: &TensorMap, pretrained: &TensorMap) -> Result<TaskVector> {
    let mut map = finetuned.zip_with(
        pretrained,
        finetuned.model_id.clone(),
        Role::Delta,
        |a, b| a - b,
    )?;
    map.metadata
        .insert(BASE_MODEL_KEY.to_string(), pretrained.model_id.clone());
    Ok(TaskVector { map })
}

/// `pretrained + delta`, element-wise; the result is tagged as merged.
pub fn apply_delta(pretrained: &TensorMap, delta: &TaskVector) -> Result<TensorMap> {
    pretrained.zip_with(
        &delta.map,
        delta.map.model_id.clone(),
        Role::Merged,
        |a, b| a + b,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(id: &str, role: Role, items: &[(&str, &[usize], &[f64])]) -> TensorMap {
        TensorMap::with_entries(
            id,
            role,
            items.iter().map(|(n, s, v)| {
                (
                    n.to_string(),
                    Tensor::from_vec(DType::F64, s, v.to_vec()).unwrap(),
                )
            }),
        )
    }

    #[test]
    fn task_vector_of_identical_models_is_zero() {
        let m = map(
            "a",
            Role::Finetuned,
            &[("w", &[2, 2], &[1.0, -2.0, 3.0, 0.5])],
        );
        let tv = compute_task_vector(&m, &m).unwrap();
        assert!(tv.get("w").unwrap().values().all(|v| v == 0.0));
        assert_eq!(tv.map().role(), Role::Delta);
    }

    #[test]
    fn task_vector_scalar_subtraction() {
        let ft = map("ft", Role::Finetuned, &[("w", &[1], &[3.5])]);
        let pre = map("pre", Role::Pretrained, &[("w", &[1], &[1.25])]);
        let tv = compute_task_vector(&ft, &pre).unwrap();
        assert_eq!(tv.get("w").unwrap().values().next(), Some(2.25));
        assert_eq!(tv.model_id(), "ft");
        assert_eq!(tv.base_model(), Some("pre"));
    }

    #[test]
    fn mismatched_keys_are_named() {
        let ft = map(
            "ft",
            Role::Finetuned,
            &[("w", &[1], &[1.0]), ("extra", &[1], &[1.0])],
        );
        let pre = map(
            "pre",
            Role::Pretrained,
            &[("w", &[1], &[1.0]), ("bias", &[1], &[0.0])],
        );
        let err = compute_task_vector(&ft, &pre).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("extra") && msg.contains("bias"), "{msg}");
        assert_eq!(err.kind(), crate::ErrorKind::Shape);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = map("a", Role::Finetuned, &[("w", &[2], &[1.0, 2.0])]);
        let b = map("b", Role::Pretrained, &[("w", &[1, 2], &[1.0, 2.0])]);
        assert!(compute_task_vector(&a, &b).is_err());
    }

    #[test]
    fn apply_delta_reconstructs_finetuned() {
        let ft = map(
            "ft",
            Role::Finetuned,
            &[("w", &[2, 2], &[0.75, -1.5, 8.0, 2.0])],
        );
        let pre = map(
            "pre",
            Role::Pretrained,
            &[("w", &[2, 2], &[0.25, 0.5, -4.0, 1.0])],
        );
        let tv = compute_task_vector(&ft, &pre).unwrap();
        let back = apply_delta(&pre, &tv).unwrap();
        assert_eq!(back.get("w"), ft.get("w"));
        assert_eq!(back.role(), Role::Merged);
    }

    #[test]
    fn zero_delta_is_identity() {
        let pre = map("pre", Role::Pretrained, &[("w", &[3], &[0.1, 0.2, 0.3])]);
        let zero = TaskVector::from_map(pre.zeros_like("z", Role::Delta));
        let out = apply_delta(&pre, &zero).unwrap();
        assert_eq!(out.get("w"), pre.get("w"));
    }

    #[test]
    fn delta_with_extra_key_rejected() {
        let pre = map("pre", Role::Pretrained, &[("w", &[1], &[0.0])]);
        let delta = TaskVector::from_map(map(
            "d",
            Role::Delta,
            &[("w", &[1], &[1.0]), ("x", &[1], &[1.0])],
        ));
        let err = apply_delta(&pre, &delta).unwrap_err();
        assert!(err.to_string().contains('x'));
    }

    #[test]
    fn mixed_dtypes_widen() {
        let mut a = TensorMap::new("a", Role::Finetuned);
        a.insert("w", Tensor::from_vec(DType::F32, &[1], vec![1.0]).unwrap());
        let mut b = TensorMap::new("b", Role::Pretrained);
        b.insert("w", Tensor::from_vec(DType::F64, &[1], vec![0.5]).unwrap());
        let tv = compute_task_vector(&a, &b).unwrap();
        assert_eq!(tv.get("w").unwrap().dtype(), DType::F64);
    }

    #[test]
    fn validate_rejects_non_finite_and_empty_dims() {
        let mut m = TensorMap::new("m", Role::Pretrained);
        m.insert(
            "nan",
            Tensor::from_vec(DType::F64, &[2], vec![1.0, f64::NAN]).unwrap(),
        );
        let err = m.validate().unwrap_err();
        assert!(err.to_string().contains("nan"));

        let mut m = TensorMap::new("m", Role::Pretrained);
        m.insert("empty", Tensor::zeros(DType::F32, &[0, 3]));
        assert!(m.validate().is_err());

        let mut m = TensorMap::new("m", Role::Pretrained);
        m.insert(
            "big",
            Tensor::from_vec(DType::F32, &[1], vec![1e300]).unwrap(),
        );
        assert!(m.validate().is_err(), "f32 overflow must be caught");
    }
}
