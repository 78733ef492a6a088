//! Synthetic experiments, metric arithmetic and rank profiling.

pub mod metrics;
pub mod profile;
pub mod recovery;
pub mod synth;
pub mod verify;

pub use metrics::{
    normalized_average, parse_scores, pretrained_baseline, read_scores, summarize, MetricKind,
    ScoreSummary, TaskScore,
};
pub use profile::{rank_profile, RankProfile};
pub use recovery::{recovery_experiment, RecoveryReport, RecoveryRow};
pub use synth::{
    generate_synth_task_vectors, planted_low_rank, SynthSpec, SynthTasks, SYNTH_LAYER,
};
pub use verify::{run_property_suite, CheckOutcome, VerifyOptions};
