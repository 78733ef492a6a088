//! Command-line front end: `merge`, `inspect`, `sweep`, `verify` and `synth`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::{
    self, generate_synth_task_vectors, rank_profile, recovery_experiment, run_property_suite,
    ScoreSummary, SynthSpec, VerifyOptions, SYNTH_LAYER,
};
use crate::merge::{
    self, merge_task_vectors, FineTuned, LayerDiagnostics, MergeConfig, MergeMethod, DEFAULT_ETA,
    DEFAULT_K_PERCENT,
};
use crate::tensorstore::{
    load_checkpoint, load_lora, materialize_lora, save_checkpoint, DType, LoraAdapter, TaskVector,
    Tensor,
};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "SPECMERGE_THREADS";

/// The mass thresholds swept by `sweep`.
pub const SWEEP_ETAS: [f64; 7] = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0];

#[derive(Debug, Parser)]
#[command(
    name = "specmerge",
    version,
    about = "Data-free merging of fine-tuned checkpoints"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Merge fine-tuned checkpoints (or LoRA adapters) into one model.
    Merge(MergeArgs),
    /// Write the per-layer rank profile of one task vector as CSV.
    Inspect(InspectArgs),
    /// Run STAR for eta in {10, 20, ..., 70} and report per-eta diagnostics.
    Sweep(SweepArgs),
    /// Run the spectral and merge property suite.
    Verify(VerifyArgs),
    /// Run the synthetic recovery experiment and write decay curves as CSV.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct MethodArgs {
    /// star, average, ta or ties.
    #[arg(long, default_value = "star")]
    pub method: MergeMethod,
    /// Percentage of singular-value mass kept per matrix.
    #[arg(long, default_value_t = DEFAULT_ETA)]
    pub eta: f64,
    /// Percentage of entries kept by the TIES trim.
    #[arg(long = "k", default_value_t = DEFAULT_K_PERCENT)]
    pub k_percent: f64,
    /// Task-arithmetic scale.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Apply DARE with this drop probability before merging.
    #[arg(long = "dare-p")]
    pub dare_p: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl MethodArgs {
    pub fn config(&self) -> Result<MergeConfig> {
        let config = MergeConfig {
            method: self.method,
            eta: self.eta,
            k_percent: self.k_percent,
            alpha: self.alpha,
            drop_p: self.dare_p,
            seed: self.seed,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Args)]
pub struct InputArgs {
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Fine-tuned checkpoint; repeat for several models.
    #[arg(long = "model")]
    pub models: Vec<PathBuf>,
    /// Read `--model` files as LoRA factor files.
    #[arg(long)]
    pub lora: bool,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[command(flatten)]
    pub method: MethodArgs,
    #[command(flatten)]
    pub inputs: InputArgs,
    /// Merged checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Score CSV for normalized-average reporting.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// JSON diagnostics path (default: `<out>` with a `.diagnostics.json` extension).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub inputs: InputArgs,
    #[arg(long, default_value_t = DEFAULT_ETA)]
    pub eta: f64,
    /// CSV output path (default: standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthOptions {
    #[arg(long, default_value_t = 8)]
    pub tasks: usize,
    #[arg(long, default_value_t = 64)]
    pub rows: usize,
    #[arg(long, default_value_t = 64)]
    pub cols: usize,
    #[arg(long = "planted-rank", default_value_t = 4)]
    pub planted_rank: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SynthOptions {
    fn spec(&self) -> Result<SynthSpec> {
        let spec = SynthSpec {
            num_tasks: self.tasks,
            shape: (self.rows, self.cols),
            planted_rank: self.planted_rank,
            noise_sigma: self.noise,
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Checkpoints to sweep; synthetic task vectors are used when none are given.
    #[command(flatten)]
    pub inputs: InputArgs,
    #[command(flatten)]
    pub synth: SynthOptions,
    #[arg(long = "dare-p")]
    pub dare_p: Option<f64>,
    /// CSV output path (default: standard output).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random instances per check.
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    /// JSON output path for the check outcomes.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub synth: SynthOptions,
    /// Method to compare; repeat for several.
    #[arg(long = "method", default_values = ["star", "average"])]
    pub methods: Vec<MergeMethod>,
    #[arg(long, default_value_t = DEFAULT_ETA)]
    pub eta: f64,
    #[arg(long = "k", default_value_t = DEFAULT_K_PERCENT)]
    pub k_percent: f64,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long = "dare-p")]
    pub dare_p: Option<f64>,
    /// CSV output path (default: standard output).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

impl SynthArgs {
    fn configs(&self) -> Result<Vec<MergeConfig>> {
        self.methods
            .iter()
            .map(|&method| {
                MethodArgs {
                    method,
                    eta: self.eta,
                    k_percent: self.k_percent,
                    alpha: self.alpha,
                    dare_p: self.dare_p,
                    seed: self.synth.seed,
                }
                .config()
            })
            .collect()
    }
}

/// Parses `args`, runs the command and maps the outcome to an exit code:
/// 0 on success, 1 for usage, validation, format and I/O errors, 2 for
/// numerical failures.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            Error::Argument(format!(
                "{THREADS_ENV} must be a positive integer, got `{value}`"
            ))
        })?;
    // Fails only when the global pool already exists, e.g. on a second run in-process.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Merge(args) => run_merge(args),
        Command::Inspect(args) => run_inspect(args),
        Command::Sweep(args) => run_sweep(args),
        Command::Verify(args) => run_verify(args),
        Command::Synth(args) => run_synth(args),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Runs `write` against the file at `path`, or standard output when absent.
fn with_output(
    path: Option<&Path>,
    write: impl FnOnce(&mut dyn Write) -> Result<()>,
) -> Result<()> {
    match path {
        Some(p) => {
            let mut f = create(p)?;
            write(&mut f)?;
            f.flush().map_err(|e| Error::io(p, e))
        }
        None => {
            let mut out = io::stdout().lock();
            write(&mut out)?;
            out.flush().map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value)
        .map_err(|e| Error::Argument(format!("cannot serialize report: {e}")))?;
    f.write_all(b"\n")
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(path, e))
}

fn load_finetuned(inputs: &InputArgs) -> Result<Vec<FineTuned>> {
    inputs
        .models
        .iter()
        .map(|p| {
            Ok(if inputs.lora {
                FineTuned::Lora(load_lora(p)?)
            } else {
                FineTuned::Dense(load_checkpoint(p)?)
            })
        })
        .collect()
}

/// Task vector of an adapter on its targeted layers only.
fn lora_task_vector(adapter: &LoraAdapter) -> Result<TaskVector> {
    let entries = adapter
        .pairs()
        .iter()
        .map(|(name, pair)| {
            Ok((
                name.clone(),
                Tensor::from_matrix(DType::F64, materialize_lora(pair)?),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskVector::from_entries(adapter.model_id(), entries))
}

/// Task vectors against `--pretrained`, or the files themselves read as
/// deltas when no pretrained model is given.
fn load_task_vectors(inputs: &InputArgs) -> Result<Vec<TaskVector>> {
    let finetuned = load_finetuned(inputs)?;
    match &inputs.pretrained {
        Some(p) => {
            let pretrained = load_checkpoint(p)?;
            finetuned
                .iter()
                .map(|ft| ft.task_vector(&pretrained))
                .collect()
        }
        None => finetuned
            .into_iter()
            .map(|ft| match ft {
                FineTuned::Dense(map) => Ok(TaskVector::from_map(map)),
                FineTuned::Lora(adapter) => lora_task_vector(&adapter),
            })
            .collect(),
    }
}

#[derive(Serialize)]
struct MergeReport<'a> {
    method: String,
    config: &'a MergeConfig,
    models: Vec<&'a str>,
    per_layer_ranks: &'a BTreeMap<String, Vec<usize>>,
    layers: &'a [LayerDiagnostics],
    #[serde(skip_serializing_if = "Option::is_none")]
    scores: Option<ScoreSummary>,
}

fn default_report_path(out: &Path) -> PathBuf {
    out.with_extension("diagnostics.json")
}

fn run_merge(args: &MergeArgs) -> Result<()> {
    let config = args.method.config()?;
    let pretrained_path = args
        .inputs
        .pretrained
        .as_ref()
        .ok_or_else(|| Error::Argument("merge requires --pretrained".into()))?;
    if args.inputs.models.is_empty() {
        return Err(Error::Argument(
            "merge requires at least one --model".into(),
        ));
    }
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| default_report_path(&args.out));
    if report_path == args.out {
        return Err(Error::Argument("--report and --out must differ".into()));
    }

    let scores = args.scores.as_ref().map(harness::read_scores).transpose()?;
    let pretrained = load_checkpoint(pretrained_path)?;
    let finetuned = load_finetuned(&args.inputs)?;
    let merged = merge::merge(&pretrained, &finetuned, &config)?;
    save_checkpoint(&merged.model, &args.out)?;

    let report = MergeReport {
        method: config.label(),
        config: &config,
        models: finetuned.iter().map(FineTuned::model_id).collect(),
        per_layer_ranks: &merged.result.per_layer_ranks,
        layers: &merged.result.diagnostics,
        scores: scores.as_deref().map(harness::summarize).transpose()?,
    };
    write_json(&report_path, &report)?;

    println!(
        "merged {} models with {} into {} ({} tensors)",
        finetuned.len(),
        config.label(),
        args.out.display(),
        merged.model.len()
    );
    if let Some(s) = &report.scores {
        println!(
            "normalized average {:.2} vs pretrained baseline {:.2}{}",
            s.normalized_average,
            s.pretrained_baseline,
            if s.loses_purpose {
                " (merged model is below the pretrained baseline)"
            } else {
                ""
            }
        );
    }
    Ok(())
}

fn run_inspect(args: &InspectArgs) -> Result<()> {
    if !(args.eta > 0.0 && args.eta <= 100.0) {
        return Err(Error::Argument(format!(
            "eta must be in (0, 100], got {}",
            args.eta
        )));
    }
    if args.inputs.models.len() != 1 {
        return Err(Error::Argument("inspect takes exactly one --model".into()));
    }
    let tv = load_task_vectors(&args.inputs)?.remove(0);
    let profile = rank_profile(&tv, args.eta)?;
    with_output(args.out.as_deref(), |w| profile.write_csv(w))
}

struct SweepRow {
    eta: f64,
    ranks: Vec<usize>,
    nuclear_before: f64,
    nuclear_after: f64,
    recovery_error: Option<f64>,
}

fn write_sweep_csv(rows: &[SweepRow], out: &mut dyn Write) -> Result<()> {
    let err = |e: csv::Error| Error::Argument(format!("cannot write sweep report: {e}"));
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "eta",
        "mean_rank",
        "min_rank",
        "max_rank",
        "nuclear_before",
        "nuclear_after",
        "recovery_error",
    ])
    .map_err(err)?;
    for row in rows {
        let (mean, min, max) = match (row.ranks.iter().min(), row.ranks.iter().max()) {
            (Some(lo), Some(hi)) => {
                let mean = row.ranks.iter().sum::<usize>() as f64 / row.ranks.len() as f64;
                (mean.to_string(), lo.to_string(), hi.to_string())
            }
            _ => Default::default(),
        };
        w.write_record([
            row.eta.to_string(),
            mean,
            min,
            max,
            row.nuclear_before.to_string(),
            row.nuclear_after.to_string(),
            row.recovery_error
                .map(|v| v.to_string())
                .unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    w.flush()
        .map_err(|e| Error::Argument(format!("cannot write sweep report: {e}")))
}

fn run_sweep(args: &SweepArgs) -> Result<()> {
    if let Some(p) = args.dare_p {
        MergeConfig::star(DEFAULT_ETA).with_dare(p, 0).validate()?;
    }
    let synthetic = args.inputs.models.is_empty();
    let (task_vectors, truth) = if synthetic {
        let synth = generate_synth_task_vectors(&args.synth.spec()?)?;
        let mut truth = synth.planted[0].clone();
        for p in &synth.planted[1..] {
            truth += p;
        }
        truth /= synth.planted.len() as f64;
        (synth.task_vectors, Some(truth))
    } else {
        (load_task_vectors(&args.inputs)?, None)
    };

    let mut rows = Vec::with_capacity(SWEEP_ETAS.len());
    for eta in SWEEP_ETAS {
        let mut config = MergeConfig::star(eta);
        config.drop_p = args.dare_p;
        config.seed = args.synth.seed;
        let result = merge_task_vectors(&task_vectors, &config)?;
        let recovery_error = truth.as_ref().map(|t| {
            let merged = result
                .delta
                .get(SYNTH_LAYER)
                .and_then(Tensor::as_matrix)
                .expect("synthetic layer");
            harness::recovery::frobenius_distance(&merged.to_owned(), t)
        });
        rows.push(SweepRow {
            eta,
            ranks: result.diagnostics.iter().map(|d| d.rank).collect(),
            nuclear_before: result.diagnostics.iter().map(|d| d.nuclear_before).sum(),
            nuclear_after: result.diagnostics.iter().map(|d| d.nuclear_after).sum(),
            recovery_error,
        });
    }
    with_output(args.report.as_deref(), |w| write_sweep_csv(&rows, w))
}

fn run_verify(args: &VerifyArgs) -> Result<()> {
    if args.trials == 0 {
        return Err(Error::Argument("--trials must be positive".into()));
    }
    let outcomes = run_property_suite(VerifyOptions {
        seed: args.seed,
        trials: args.trials,
    })?;
    for c in &outcomes {
        println!(
            "{} {} ({} trials, {})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.trials,
            c.detail
        );
    }
    if let Some(path) = &args.report {
        write_json(path, &outcomes)?;
    }
    let failed = outcomes.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Error::Numerical {
            tensor: "property suite".into(),
            message: format!("{failed} of {} checks failed", outcomes.len()),
        });
    }
    Ok(())
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let configs = args.configs()?;
    let spec = args.synth.spec()?;
    let report = recovery_experiment(&spec, &configs)?;
    with_output(args.report.as_deref(), |w| report.write_csv(w))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("specmerge").chain(args.iter().copied()))
    }

    #[test]
    fn defaults() {
        let cli = parse(&[
            "merge",
            "--pretrained",
            "p",
            "--model",
            "a",
            "--out",
            "o.st",
        ])
        .unwrap();
        let Command::Merge(args) = cli.command else {
            panic!()
        };
        let config = args.method.config().unwrap();
        assert_eq!(config, MergeConfig::star(40.0));
        assert_eq!(config.k_percent, 20.0);
        assert_eq!(
            default_report_path(&args.out),
            PathBuf::from("o.diagnostics.json")
        );
    }

    #[test]
    fn out_of_scope_method_is_a_usage_error() {
        let err = parse(&["merge", "--method", "metagpt", "--out", "o"]).unwrap_err();
        assert!(err.to_string().contains("out of scope"), "{err}");
    }

    #[test]
    fn repeated_models_and_synth_methods() {
        let cli = parse(&["merge", "--model", "a", "--model", "b", "--out", "o"]).unwrap();
        let Command::Merge(args) = cli.command else {
            panic!()
        };
        assert_eq!(args.inputs.models.len(), 2);

        let cli = parse(&["synth"]).unwrap();
        let Command::Synth(args) = cli.command else {
            panic!()
        };
        assert_eq!(
            args.methods,
            vec![MergeMethod::Star, MergeMethod::SimpleAverage]
        );
    }

    #[test]
    fn flag_validation_precedes_io() {
        let cli = parse(&[
            "merge",
            "--method",
            "ta",
            "--pretrained",
            "/nonexistent",
            "--model",
            "x",
            "--out",
            "o",
        ])
        .unwrap();
        let err = run(&cli).unwrap_err();
        assert!(err.to_string().contains("alpha"), "{err}");

        let cli = parse(&[
            "merge",
            "--eta",
            "0",
            "--pretrained",
            "/nonexistent",
            "--model",
            "x",
            "--out",
            "o",
        ])
        .unwrap();
        assert!(matches!(run(&cli).unwrap_err(), Error::Argument(_)));
    }
}
