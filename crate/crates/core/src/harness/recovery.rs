use std::io::Write;

use ndarray::Array2;
use serde::Serialize;

use super::synth::{generate_synth_task_vectors, SynthSpec, SYNTH_LAYER};
use crate::error::{Error, Result};
use crate::merge::{merge_task_vectors, MergeConfig};

/// One point of a decay curve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecoveryRow {
    pub method: String,
    pub num_models: usize,
    /// Frobenius distance between the merged delta and the mean planted matrix.
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecoveryReport {
    pub rows: Vec<RecoveryRow>,
}

impl RecoveryReport {
    /// Errors for `method` ordered by number of merged models.
    pub fn curve(&self, method: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.value)
            .collect()
    }

    /// Mean of the curve over all prefix sizes, or `None` for an unknown label.
    pub fn mean_error(&self, method: &str) -> Option<f64> {
        let curve = self.curve(method);
        (!curve.is_empty()).then(|| curve.iter().sum::<f64>() / curve.len() as f64)
    }

    /// `method,num_models,value` rows with a header line.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let err = |e: csv::Error| Error::Argument(format!("cannot write recovery report: {e}"));
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "num_models", "value"])
            .map_err(err)?;
        for row in &self.rows {
            w.write_record([
                row.method.as_str(),
                &row.num_models.to_string(),
                &row.value.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush()
            .map_err(|e| Error::Argument(format!("cannot write recovery report: {e}")))
    }
}

pub(crate) fn frobenius_distance(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Merges the first `T'` synthetic task vectors for every `T' <= T` with each
/// method and measures the distance to the mean of the matching planted
/// matrices.
pub fn recovery_experiment(spec: &SynthSpec, methods: &[MergeConfig]) -> Result<RecoveryReport> {
    for m in methods {
        m.validate()?;
    }
    let synth = generate_synth_task_vectors(spec)?;
    let mut truth_sum = Array2::<f64>::zeros(spec.shape);
    let truths: Vec<Array2<f64>> = synth
        .planted
        .iter()
        .enumerate()
        .map(|(i, p)| {
            truth_sum += p;
            &truth_sum / (i + 1) as f64
        })
        .collect();

    let mut rows = Vec::with_capacity(methods.len() * spec.num_tasks);
    for config in methods {
        let label = config.label();
        for t in 1..=spec.num_tasks {
            let merged = merge_task_vectors(&synth.task_vectors[..t], config)?;
            let layer = merged
                .delta
                .get(SYNTH_LAYER)
                .expect("synthetic layer present");
            let merged = layer
                .as_matrix()
                .expect("synthetic layer is 2-D")
                .to_owned();
            rows.push(RecoveryRow {
                method: label.clone(),
                num_models: t,
                value: frobenius_distance(&merged, &truths[t - 1]),
            });
        }
    }
    Ok(RecoveryReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f64) -> SynthSpec {
        SynthSpec {
            num_tasks: 3,
            shape: (12, 10),
            planted_rank: 2,
            noise_sigma: noise,
            seed: 11,
        }
    }

    #[test]
    fn single_model_full_mass_hits_noise_floor() {
        let s = spec(0.1);
        let synth = generate_synth_task_vectors(&s).unwrap();
        let observed = synth.task_vectors[0]
            .get(SYNTH_LAYER)
            .unwrap()
            .as_matrix()
            .unwrap()
            .to_owned();
        let floor = frobenius_distance(&observed, &synth.planted[0]);

        let report = recovery_experiment(&s, &[MergeConfig::star(100.0)]).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert!((report.rows[0].value - floor).abs() <= 1e-9 * floor);
    }

    #[test]
    fn noiseless_average_is_exact() {
        let report = recovery_experiment(&spec(0.0), &[MergeConfig::simple_average()]).unwrap();
        for row in &report.rows {
            assert!(row.value < 1e-12, "{row:?}");
        }
    }

    #[test]
    fn deterministic_and_csv() {
        let methods = [MergeConfig::star(40.0), MergeConfig::ties(20.0)];
        let a = recovery_experiment(&spec(0.05), &methods).unwrap();
        let b = recovery_experiment(&spec(0.05), &methods).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.curve("ties(k=20)").len(), 3);
        assert!(a.mean_error("star(eta=40)").is_some());
        assert!(a.mean_error("nope").is_none());

        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.starts_with("method,num_models,value\nstar(eta=40),1,"));
    }
}
