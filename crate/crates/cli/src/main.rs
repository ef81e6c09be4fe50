//! `sagnet`: generate data, train, evaluate, and run experiment plans.
//!
//! Every subcommand prints one JSON object on success. Failures exit with
//! status 1 and print `{"error": {"kind": ..., "message": ...}}` to stderr.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use sagnet::evaluation::{bias_metrics, cross_domain_accuracy, penultimate_features, proxy_a_distance, ProbeConfig};
use sagnet::experiments::{self, ExperimentKind, ExperimentPlan, RunOptions};
use sagnet::network::{build_model, checkpoint, StageCNNConfig};
use sagnet::synthdata::{self, generate_cue_conflict, generate_dataset, StyleShiftSpec};
use sagnet::training::{train, TrainConfig, Variant};

#[derive(Parser)]
#[command(name = "sagnet", version, about = "Style-agnostic network experiments on synthetic style-shift data")]
struct Cli {
    /// Output root used when a subcommand gets no --out.
    #[arg(long, global = true, env = "SAGNET_OUT", default_value = "sagnet-out")]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the style-shift dataset and cue-conflict stimuli to disk.
    GenData(GenData),
    /// Train one model on the source domains.
    Train(TrainArgs),
    /// Evaluate a trained model: accuracies, shape bias, proxy A-distance.
    Evaluate(Evaluate),
    /// Run (or resume) an experiment plan.
    RunPlan(RunPlan),
    /// Aggregate records from one or more plan directories.
    Summarize(Summarize),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// JSON style-shift spec; the built-in one when absent.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Dataset seed (ignored with --spec).
    #[arg(long, default_value_t = 11)]
    data_seed: u64,
    /// Samples per class and domain (ignored with --spec).
    #[arg(long, default_value_t = 100)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 0)]
    target_domain: usize,
    /// Single-source training domain; all non-target domains when absent.
    #[arg(long)]
    source_domain: Option<usize>,
    #[arg(long, default_value_t = 4)]
    stimuli_per_pair: usize,
}

impl DataArgs {
    fn spec(&self) -> Result<StyleShiftSpec, CliError> {
        let spec = match &self.spec {
            Some(p) => serde_json::from_str(&read_text(p)?)?,
            None => StyleShiftSpec::new(7, 4, self.samples_per_class, self.data_seed),
        };
        spec.validate().map_err(CliError::from_display("data"))?;
        Ok(spec)
    }
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0.1)]
    lambda_adv: f64,
    #[arg(long, default_value_t = 0.01)]
    lambda_unl: f64,
    /// Randomization stage (number of stages in the feature extractor).
    #[arg(long, default_value_t = 3)]
    stage: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// full, no_cbl, no_asbl or baseline.
    #[arg(long, default_value = "full")]
    variant: String,
    #[arg(long, default_value_t = 1200)]
    iters: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Comma-separated channels per stage.
    #[arg(long, default_value = "8,16,32,32", value_delimiter = ',')]
    channels: Vec<usize>,
    /// Also train on unlabeled images of the target domain.
    #[arg(long)]
    unlabeled: bool,
    #[arg(long, default_value_t = 10)]
    log_every: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Evaluate {
    /// Directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunPlan {
    /// Plan file; a desk-scale plan of --kind when absent.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, default_value = "bias_sweep")]
    kind: String,
    /// Replace the plan's grid values.
    #[arg(long, value_delimiter = ',')]
    lambda_adv: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    stage: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    variant: Option<Vec<String>>,
    #[arg(long)]
    target_domain: Option<usize>,
    /// `i/n`: run every n-th cell starting at i.
    #[arg(long)]
    shard: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Summarize {
    /// Plan directories holding records.jsonl.
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
struct CliError {
    kind: &'static str,
    message: String,
}

impl CliError {
    fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    fn from_display<E: std::fmt::Display>(kind: &'static str) -> impl Fn(E) -> Self {
        move |e| Self::new(kind, e.to_string())
    }
}

macro_rules! cli_error_from {
    ($($ty:ty => $kind:literal),* $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                Self::new($kind, e.to_string())
            }
        })*
    };
}

cli_error_from! {
    std::io::Error => "io",
    serde_json::Error => "json",
    sagnet::synthdata::DataError => "data",
    sagnet::network::NetworkError => "network",
    sagnet::training::TrainError => "train",
    sagnet::evaluation::EvalError => "evaluate",
    sagnet::experiments::ExperimentError => "experiment",
}

/// Everything needed to rebuild the data a model was trained on.
#[derive(Serialize, Deserialize)]
struct RunInfo {
    spec: StyleShiftSpec,
    target_domain: usize,
    source_domain: Option<usize>,
    stimuli_per_pair: usize,
    network: StageCNNConfig,
    train: TrainConfig,
    unlabeled: bool,
}

const RUN_FILE: &str = "run.json";
const MODEL_FILE: &str = "model.ckpt";
const TRACE_FILE: &str = "trace.jsonl";

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))
}

fn out_dir(explicit: &Option<PathBuf>, root: &Path, name: &str) -> Result<PathBuf, CliError> {
    let dir = explicit.clone().unwrap_or_else(|| root.join(name));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn gen_data(args: &GenData, root: &Path) -> Result<Value, CliError> {
    let dir = out_dir(&args.out, root, "data")?;
    let spec = args.data.spec()?;
    fs::write(dir.join("spec.json"), serde_json::to_string_pretty(&spec)?)?;
    let mut files = Vec::new();
    for d in 0..spec.num_style_domains {
        let splits = generate_dataset(&spec, &[d])?;
        for (name, set) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
            let path = dir.join(format!("domain{d}_{name}.bin"));
            synthdata::save_set(set, &path)?;
            files.push(json!({ "path": path, "images": set.len(), "domain": d, "split": name }));
        }
    }
    let stimuli = generate_cue_conflict(&spec, args.data.stimuli_per_pair)?;
    let path = dir.join("stimuli.bin");
    synthdata::save_set(&stimuli, &path)?;
    files.push(json!({ "path": path, "images": stimuli.len(), "split": "cue_conflict" }));
    Ok(json!({ "out": dir, "files": files }))
}

fn holdout(info: &RunInfo) -> Result<synthdata::Holdout, CliError> {
    Ok(match info.source_domain {
        Some(s) => synthdata::single_source(&info.spec, s, info.target_domain)?,
        None => synthdata::holdout_domain(&info.spec, info.target_domain)?,
    })
}

fn train_cmd(args: &TrainArgs, root: &Path) -> Result<Value, CliError> {
    let dir = out_dir(&args.out, root, "train")?;
    let variant: Variant = args.variant.parse()?;
    let network = StageCNNConfig {
        num_stages: args.channels.len(),
        channels: args.channels.clone(),
        randomization_stage: args.stage,
        ..StageCNNConfig::default()
    };
    let config = TrainConfig {
        lambda_adv: args.lambda_adv,
        lambda_unl: args.lambda_unl,
        lr: args.lr,
        batch_size: args.batch_size,
        total_iters: args.iters,
        seed: args.seed,
        variant,
        log_every: args.log_every,
        ..TrainConfig::default()
    };
    let info = RunInfo {
        spec: args.data.spec()?,
        target_domain: args.data.target_domain,
        source_domain: args.data.source_domain,
        stimuli_per_pair: args.data.stimuli_per_pair,
        network,
        train: config,
        unlabeled: args.unlabeled,
    };
    let h = holdout(&info)?;
    let mut model = build_model::<f32>(&info.network, args.seed)?;
    let mut trace = fs::File::create(dir.join(TRACE_FILE))?;
    let unlabeled = args.unlabeled.then_some(&h.target.train);
    let reports = train(&mut model, &h.source.train, unlabeled, &info.train, Some(&mut trace))?;
    checkpoint::save(&model, &dir.join(MODEL_FILE))?;
    fs::write(dir.join(RUN_FILE), serde_json::to_string_pretty(&info)?)?;
    Ok(json!({
        "out": dir,
        "iterations": info.train.total_iters,
        "final": reports.last(),
    }))
}

fn evaluate(args: &Evaluate, root: &Path) -> Result<Value, CliError> {
    let info: RunInfo = serde_json::from_str(&read_text(&args.run.join(RUN_FILE))?)?;
    let model = checkpoint::load::<f32>(&args.run.join(MODEL_FILE))?;
    let h = holdout(&info)?;
    let stimuli = generate_cue_conflict(&info.spec, info.stimuli_per_pair)?;
    let bias = bias_metrics(&model, &stimuli)?;
    let fa = penultimate_features(&model, &h.source.test.images)?;
    let fb = penultimate_features(&model, &h.target.test.images)?;
    let disc = proxy_a_distance(&fa, &fb, &ProbeConfig::default())?;
    let report = json!({
        "run": args.run,
        "in_domain_accuracy": cross_domain_accuracy(&model, &h.source.test)?,
        "target_accuracy": cross_domain_accuracy(&model, &h.target.test)?,
        "bias": bias,
        "d_a": disc.d_a,
        "discrepancy": disc,
        "inference_params": model.inference_param_count(),
        "inference_mults": model.inference_mults_per_image()?,
    });
    let dir = out_dir(&args.out, root, "evaluate")?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

fn parse_shard(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::new("usage", format!("--shard expects i/n, got {s:?}"));
    let (i, n) = s.split_once('/').ok_or_else(bad)?;
    Ok((i.trim().parse().map_err(|_| bad())?, n.trim().parse().map_err(|_| bad())?))
}

fn run_plan(args: &RunPlan, root: &Path) -> Result<Value, CliError> {
    let mut plan = match &args.plan {
        Some(p) => ExperimentPlan::load(p)?,
        None => {
            let kind: ExperimentKind = args.kind.parse()?;
            ExperimentPlan::desk(kind, root.join(&args.kind))
        }
    };
    if let Some(v) = &args.lambda_adv {
        plan.grid.lambda_adv = v.clone();
    }
    if let Some(v) = &args.stage {
        plan.grid.stages = v.clone();
    }
    if let Some(v) = &args.seed {
        plan.grid.seeds = v.clone();
    }
    if let Some(v) = &args.variant {
        plan.grid.variants = v.iter().map(|s| s.parse()).collect::<Result<_, _>>()?;
    }
    if let Some(t) = args.target_domain {
        plan.data.target_domain = t;
    }
    if let Some(o) = &args.out {
        plan.out_dir = o.clone();
    }
    let options = RunOptions {
        shard: args.shard.as_deref().map(parse_shard).transpose()?,
    };
    let outcome = experiments::run_plan(&plan, &options)?;
    Ok(json!({
        "out": plan.out_dir,
        "cells": plan.cells().len(),
        "records": outcome.records.len(),
        "new_records": outcome.new_records,
        "failures": outcome.failures,
    }))
}

fn summarize(args: &Summarize, root: &Path) -> Result<Value, CliError> {
    let mut records = Vec::new();
    for d in &args.dirs {
        records.extend(experiments::load_records(d)?);
    }
    let summary = experiments::summarize(&records);
    let dir = out_dir(&args.out, root, "summary")?;
    experiments::write_summary(&summary, &dir)?;
    Ok(json!({
        "out": dir,
        "records": records.len(),
        "rows": summary.rows.len(),
        "trends": summary.trends,
        "comparisons": summary.comparisons,
    }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let root = cli.out_root.as_path();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a, root),
        Command::Train(a) => train_cmd(a, root),
        Command::Evaluate(a) => evaluate(a, root),
        Command::RunPlan(a) => run_plan(a, root),
        Command::Summarize(a) => summarize(a, root),
    };
    match result {
        Ok(v) => {
            // A closed pipe (`sagnet ... | head`) is not a failure of the command.
            let _ = writeln!(std::io::stdout(), "{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": e.kind, "message": e.message } }));
            ExitCode::FAILURE
        }
    }
}
