//! Normalized-average metric arithmetic over externally supplied scores.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Accuracy,
    F1,
    Spearman,
}

/// One row of a score file: `task_name,metric_kind,merged,finetuned,pretrained`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task_name: String,
    pub metric_kind: MetricKind,
    #[serde(rename = "merged")]
    pub merged_score: f64,
    #[serde(rename = "finetuned")]
    pub finetuned_score: f64,
    #[serde(rename = "pretrained")]
    pub pretrained_score: f64,
}

impl TaskScore {
    pub fn new(
        task_name: impl Into<String>,
        metric_kind: MetricKind,
        merged_score: f64,
        finetuned_score: f64,
        pretrained_score: f64,
    ) -> Self {
        TaskScore {
            task_name: task_name.into(),
            metric_kind,
            merged_score,
            finetuned_score,
            pretrained_score,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| {
            Err(Error::Argument(format!(
                "task `{}`: {what} score {v} out of range",
                self.task_name
            )))
        };
        if !(self.finetuned_score.is_finite()
            && self.finetuned_score > 0.0
            && self.finetuned_score <= 100.0)
        {
            return bad("fine-tuned", self.finetuned_score);
        }
        if !(self.merged_score.is_finite() && (0.0..=100.0).contains(&self.merged_score)) {
            return bad("merged", self.merged_score);
        }
        if !(self.pretrained_score.is_finite() && (0.0..=100.0).contains(&self.pretrained_score)) {
            return bad("pretrained", self.pretrained_score);
        }
        Ok(())
    }
}

fn mean_ratio(scores: &[TaskScore], numerator: impl Fn(&TaskScore) -> f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Argument("no task scores given".into()));
    }
    let mut sum = 0.0;
    for s in scores {
        s.validate()?;
        sum += numerator(s) / s.finetuned_score;
    }
    Ok(100.0 * sum / scores.len() as f64)
}

/// Mean over tasks of merged / fine-tuned score, as a percentage.
pub fn normalized_average(scores: &[TaskScore]) -> Result<f64> {
    mean_ratio(scores, |s| s.merged_score)
}

/// Mean over tasks of pretrained / fine-tuned score, as a percentage.
pub fn pretrained_baseline(scores: &[TaskScore]) -> Result<f64> {
    mean_ratio(scores, |s| s.pretrained_score)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreSummary {
    pub normalized_average: f64,
    pub pretrained_baseline: f64,
    /// The merged model scores below the unmerged pretrained model, so
    /// merging did not help.
    pub loses_purpose: bool,
}

pub fn summarize(scores: &[TaskScore]) -> Result<ScoreSummary> {
    let normalized_average = normalized_average(scores)?;
    let pretrained_baseline = pretrained_baseline(scores)?;
    Ok(ScoreSummary {
        normalized_average,
        pretrained_baseline,
        loses_purpose: normalized_average < pretrained_baseline,
    })
}

pub fn parse_scores(reader: impl Read) -> Result<Vec<TaskScore>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<TaskScore>().enumerate() {
        let score = row.map_err(|e| Error::Format {
            offset: e.position().map_or(0, |p| p.byte()),
            message: format!("score row {}: {e}", i + 1),
        })?;
        score.validate()?;
        out.push(score);
    }
    Ok(out)
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<TaskScore>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_scores(file)
}
