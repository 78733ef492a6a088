use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{check_inputs, mean, LayerDiagnostics, MergeConfig, MergeResult, MERGED_ID};
use crate::error::Result;
use crate::spectral::{nuclear_norm, truncate_and_rescale};
use crate::tensorstore::{TaskVector, Tensor};

/// Spectral truncation and rescale of every 2-D layer of every task vector,
/// followed by a plain average.
///
/// Each matrix keeps the smallest rank holding `eta` percent of its
/// singular-value mass, and the kept singular values are scaled up so the
/// nuclear norm is unchanged. Tensors that are not 2-D are averaged as-is,
/// and all-zero matrices pass through untouched.
pub fn star_merge(task_vectors: &[TaskVector], eta: f64) -> Result<MergeResult> {
    let config = MergeConfig::star(eta);
    config.validate()?;
    check_inputs(task_vectors)?;

    let work: Vec<(usize, &str, &Tensor)> = task_vectors
        .iter()
        .enumerate()
        .flat_map(|(i, tv)| tv.iter().map(move |(name, t)| (i, name, t)))
        .collect();

    let processed: Vec<(Tensor, Option<LayerDiagnostics>)> = work
        .par_iter()
        .map(|&(task, name, tensor)| {
            let Some(matrix) = tensor.as_matrix() else {
                return Ok((tensor.clone(), None));
            };
            let layer = truncate_and_rescale(&matrix, eta).map_err(|e| e.in_tensor(name))?;
            let nuclear_after = if layer.rank == 0 {
                layer.nuclear_before
            } else {
                nuclear_norm(&layer.matrix).map_err(|e| e.in_tensor(name))?
            };
            let diag = LayerDiagnostics {
                task,
                task_id: task_vectors[task].model_id().to_string(),
                layer: name.to_string(),
                rank: layer.rank,
                nuclear_before: layer.nuclear_before,
                nuclear_after,
            };
            Ok((
                Tensor::from_matrix(tensor.dtype(), layer.matrix),
                Some(diag),
            ))
        })
        .collect::<Result<_>>()?;

    let mut per_task: Vec<Vec<(String, Tensor)>> = vec![Vec::new(); task_vectors.len()];
    let mut diagnostics = Vec::new();
    let mut per_layer_ranks: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for ((task, name, _), (tensor, diag)) in work.iter().zip(processed) {
        per_task[*task].push((name.to_string(), tensor));
        if let Some(d) = diag {
            per_layer_ranks
                .entry(d.layer.clone())
                .or_default()
                .push(d.rank);
            diagnostics.push(d);
        }
    }
    let outputs: Vec<TaskVector> = per_task
        .into_iter()
        .zip(task_vectors)
        .map(|(entries, tv)| TaskVector::from_entries(tv.model_id(), entries))
        .collect();

    Ok(MergeResult {
        delta: mean(&outputs, MERGED_ID),
        per_layer_ranks,
        config,
        diagnostics,
    })
}
