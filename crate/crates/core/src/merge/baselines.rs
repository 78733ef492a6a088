use std::cmp::Ordering;

use super::{check_inputs, mean, scaled_sum, MergeConfig, MergeResult, MERGED_ID};
use crate::error::Result;
use crate::tensorstore::{TaskVector, Tensor};

pub fn simple_average(task_vectors: &[TaskVector]) -> Result<MergeResult> {
    check_inputs(task_vectors)?;
    Ok(MergeResult::plain(
        mean(task_vectors, MERGED_ID),
        MergeConfig::simple_average(),
    ))
}

/// `alpha * sum_i delta_i` (a scaled sum, not a mean).
pub fn task_arithmetic(task_vectors: &[TaskVector], alpha: f64) -> Result<MergeResult> {
    let config = MergeConfig::task_arithmetic(alpha);
    config.validate()?;
    check_inputs(task_vectors)?;
    Ok(MergeResult::plain(
        scaled_sum(task_vectors, alpha, MERGED_ID),
        config,
    ))
}

/// A task vector after the TIES magnitude trim.
#[derive(Clone, Debug)]
pub struct TrimmedTask {
    pub values: TaskVector,
    /// Number of entries retained, always `ceil(k% * n)`.
    pub kept: usize,
}

fn keep_count(n: usize, k_percent: f64) -> usize {
    (((k_percent * n as f64) / 100.0).ceil() as usize).min(n)
}

fn flatten(tv: &TaskVector) -> Vec<f64> {
    let mut out = Vec::with_capacity(tv.numel());
    for (_, t) in tv.iter() {
        out.extend(t.values());
    }
    out
}

fn unflatten(template: &TaskVector, flat: &[f64], model_id: &str) -> Result<TaskVector> {
    let mut offset = 0;
    let mut entries = Vec::with_capacity(template.len());
    for (name, t) in template.iter() {
        let n = t.numel();
        let tensor = Tensor::from_vec(t.dtype(), t.shape(), flat[offset..offset + n].to_vec())?;
        entries.push((name.to_string(), tensor));
        offset += n;
    }
    Ok(TaskVector::from_entries(model_id, entries))
}

/// Keeps the `ceil(k% * n)` largest-magnitude entries of the whole task
/// vector and zeroes the rest. Equal magnitudes at the cutoff favour the
/// lower flat index (tensor names in lexicographic order, row-major within).
pub fn ties_trim(tv: &TaskVector, k_percent: f64) -> Result<TrimmedTask> {
    MergeConfig::ties(k_percent).validate()?;
    let flat = flatten(tv);
    let keep = keep_count(flat.len(), k_percent);
    let mut order: Vec<usize> = (0..flat.len()).collect();
    let by_magnitude = |&a: &usize, &b: &usize| -> Ordering {
        flat[b].abs().total_cmp(&flat[a].abs()).then(a.cmp(&b))
    };
    if keep < order.len() && keep > 0 {
        order.select_nth_unstable_by(keep - 1, by_magnitude);
    }
    let mut trimmed = vec![0.0; flat.len()];
    for &i in &order[..keep] {
        trimmed[i] = flat[i];
    }
    Ok(TrimmedTask {
        values: unflatten(tv, &trimmed, tv.model_id())?,
        kept: keep,
    })
}

/// TIES: trim each task vector, elect a sign per entry from the larger of
/// the summed positive and summed negative magnitudes (positive on a tie),
/// then average the surviving values that agree with the elected sign.
pub fn ties_merge(task_vectors: &[TaskVector], k_percent: f64) -> Result<MergeResult> {
    let config = MergeConfig::ties(k_percent);
    config.validate()?;
    let template = check_inputs(task_vectors)?;
    let trimmed: Vec<Vec<f64>> = task_vectors
        .iter()
        .map(|tv| ties_trim(tv, k_percent).map(|t| flatten(&t.values)))
        .collect::<Result<_>>()?;

    let n = template.numel();
    let mut merged = vec![0.0; n];
    for (j, out) in merged.iter_mut().enumerate() {
        let mut pos = 0.0;
        let mut neg = 0.0;
        for task in &trimmed {
            let v = task[j];
            if v > 0.0 {
                pos += v;
            } else if v < 0.0 {
                neg -= v;
            }
        }
        let positive = pos >= neg;
        let mut sum = 0.0;
        let mut count = 0usize;
        for task in &trimmed {
            let v = task[j];
            if (positive && v > 0.0) || (!positive && v < 0.0) {
                sum += v;
                count += 1;
            }
        }
        if count > 0 {
            *out = sum / count as f64;
        }
    }
    let delta = unflatten(template, &merged, MERGED_ID)?;
    Ok(MergeResult::plain(delta, config))
}
