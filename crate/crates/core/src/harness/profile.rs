use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::spectral::{rank_keep, singular_values};
use crate::tensorstore::TaskVector;

/// Rank chosen by the mass rule for each 2-D layer of one task vector.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankProfile {
    pub layer_names: Vec<String>,
    pub ranks: Vec<usize>,
    pub eta: f64,
}

impl RankProfile {
    /// `layer_name,rank` rows with a header line.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io_err = |e: csv::Error| Error::Argument(format!("cannot write rank profile: {e}"));
        w.write_record(["layer_name", "rank"]).map_err(io_err)?;
        for (name, rank) in self.layer_names.iter().zip(&self.ranks) {
            w.write_record([name.as_str(), &rank.to_string()])
                .map_err(io_err)?;
        }
        w.flush()
            .map_err(|e| Error::Argument(format!("cannot write rank profile: {e}")))
    }
}

/// All-zero layers report rank 0.
pub fn rank_profile(task_vector: &TaskVector, eta: f64) -> Result<RankProfile> {
    let mut layer_names = Vec::new();
    let mut ranks = Vec::new();
    for (name, tensor) in task_vector.iter() {
        let Some(matrix) = tensor.as_matrix() else {
            continue;
        };
        let sigma = singular_values(&matrix).map_err(|e| e.in_tensor(name))?;
        let rank = match rank_keep(&sigma, eta) {
            Ok(r) => r,
            Err(Error::Degenerate(_)) => 0,
            Err(e) => return Err(e),
        };
        layer_names.push(name.to_string());
        ranks.push(rank);
    }
    Ok(RankProfile {
        layer_names,
        ranks,
        eta,
    })
}
