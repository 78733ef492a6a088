use super::check_drop_p;
use crate::error::Result;
use crate::prf;
use crate::tensorstore::{TaskVector, Tensor};

/// DARE: zero each entry with probability `p` and divide survivors by
/// `1 - p`.
///
/// The drop decision for an entry is a pure function of `(seed, tensor name,
/// flat index)`, so the output does not depend on evaluation order.
pub fn dare_sparsify(delta: &TaskVector, p: f64, seed: u64) -> Result<TaskVector> {
    check_drop_p(p)?;
    let keep_scale = 1.0 / (1.0 - p);
    let map = delta.map().map_tensors(|name, tensor| {
        let stream = prf::stream_id(name);
        let mut data = tensor.data().clone();
        for (idx, v) in data.iter_mut().enumerate() {
            if prf::random_unit(seed, stream, idx as u64) < p {
                *v = 0.0;
            } else {
                *v *= keep_scale;
            }
        }
        Tensor::new(tensor.dtype(), data)
    });
    Ok(TaskVector::from_map(map))
}
