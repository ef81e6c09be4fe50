//! Experiment plans: grids of training runs over `lambda_adv`, randomization
//! stage, variant and seed. Each cell generates (or reuses) the data, trains,
//! evaluates and appends one JSON record to an append-only log, so a plan can
//! be interrupted and resumed.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::evaluation::{
    bias_metrics, cross_domain_accuracy, penultimate_features, proxy_a_distance, EvalError, ProbeConfig,
};
use crate::network::{build_model, NetworkError, StageCNNConfig};
use crate::synthdata::{
    generate_cue_conflict, holdout_domain, single_source, DataError, Holdout, StimulusSet, StyleShiftSpec,
};
use crate::training::{train, StepReport, TrainConfig, TrainError, Variant};

pub const SCHEMA_VERSION: u32 = 1;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const FAILURES_FILE: &str = "failures.jsonl";
pub const PLAN_FILE: &str = "plan.json";
pub const TRACE_DIR: &str = "traces";

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

// ---------------------------------------------------------------- plans

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    BiasSweep,
    StageAblation,
    MultiSourceDg,
    SingleSourceDg,
    UnlabeledExtension,
    ComponentAblation,
}

impl std::str::FromStr for ExperimentKind {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
            .map_err(|_| ExperimentError::Plan(format!("unknown experiment kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lambda_adv: Vec<f64>,
    pub stages: Vec<usize>,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    /// Whether cells also train on unlabeled target images.
    #[serde(default = "labeled_only")]
    pub unlabeled: Vec<bool>,
}

fn labeled_only() -> Vec<bool> {
    vec![false]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPlan {
    pub spec: StyleShiftSpec,
    pub target_domain: usize,
    /// Single-source training domain; all non-target domains when absent.
    #[serde(default)]
    pub source_domain: Option<usize>,
    pub stimuli_per_pair: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub schema_version: u32,
    pub name: String,
    pub kind: ExperimentKind,
    pub grid: Grid,
    pub data: DataPlan,
    /// `randomization_stage` is overridden per cell.
    pub network: StageCNNConfig,
    /// `lambda_adv`, `variant` and `seed` are overridden per cell; `seed` here
    /// is the base from which cell seeds are derived.
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub out_dir: PathBuf,
}

/// Settings that run a cell in 10-20 s on one CPU core.
pub fn desk_network() -> StageCNNConfig {
    StageCNNConfig {
        channels: vec![8, 16, 32, 32],
        ..StageCNNConfig::default()
    }
}

pub fn desk_train() -> TrainConfig {
    TrainConfig {
        lr: 0.01,
        batch_size: 64,
        total_iters: 1200,
        log_every: 10,
        ..TrainConfig::default()
    }
}

pub fn desk_data() -> DataPlan {
    DataPlan {
        spec: StyleShiftSpec::new(7, 4, 100, 11),
        target_domain: 0,
        source_domain: None,
        stimuli_per_pair: 4,
    }
}

impl ExperimentPlan {
    /// Desk-scale default plan for `kind`.
    pub fn desk(kind: ExperimentKind, out_dir: impl Into<PathBuf>) -> Self {
        use ExperimentKind::*;
        let seeds: Vec<u64> = (0..5).collect();
        let grid = |lambda_adv: Vec<f64>, stages: Vec<usize>, variants: Vec<Variant>, unlabeled: Vec<bool>| Grid {
            lambda_adv,
            stages,
            seeds: seeds.clone(),
            variants,
            unlabeled,
        };
        let mut data = desk_data();
        let grid = match kind {
            BiasSweep => grid(vec![0.0, 0.1, 1.0], vec![3], vec![Variant::Baseline, Variant::Full], labeled_only()),
            StageAblation => grid(vec![0.1], vec![1, 2, 3], vec![Variant::Full], labeled_only()),
            MultiSourceDg => grid(vec![0.1], vec![3], vec![Variant::Baseline, Variant::Full], labeled_only()),
            SingleSourceDg => {
                data.source_domain = Some(1);
                grid(vec![0.1], vec![3], vec![Variant::Baseline, Variant::Full], labeled_only())
            }
            UnlabeledExtension => grid(vec![0.1], vec![3], vec![Variant::Full], vec![false, true]),
            ComponentAblation => grid(
                vec![0.1],
                vec![3],
                vec![Variant::Baseline, Variant::NoCbl, Variant::NoAsbl, Variant::Full],
                labeled_only(),
            ),
        };
        Self {
            schema_version: SCHEMA_VERSION,
            name: serde_json::to_value(kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            kind,
            grid,
            data,
            network: desk_network(),
            train: desk_train(),
            probe: ProbeConfig::default(),
            out_dir: out_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Plan(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} (expected {SCHEMA_VERSION})", self.schema_version));
        }
        let g = &self.grid;
        if g.lambda_adv.is_empty() || g.stages.is_empty() || g.seeds.is_empty() || g.variants.is_empty() || g.unlabeled.is_empty() {
            return bad("every grid axis needs at least one value".into());
        }
        if let Some(l) = g.lambda_adv.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return bad(format!("lambda_adv {l} must be finite and >= 0"));
        }
        for &stage in &g.stages {
            StageCNNConfig {
                randomization_stage: stage,
                ..self.network.clone()
            }
            .validate()?;
        }
        self.data.spec.validate()?;
        let domains = self.data.spec.num_style_domains;
        if self.data.target_domain >= domains {
            return Err(DataError::UnknownDomain(self.data.target_domain).into());
        }
        if let Some(s) = self.data.source_domain {
            if s >= domains || s == self.data.target_domain {
                return bad(format!("source domain {s} must differ from the target and exist"));
            }
        }
        if self.data.stimuli_per_pair == 0 {
            return bad("stimuli_per_pair must be positive".into());
        }
        if self.network.num_classes != self.data.spec.num_content_classes {
            return bad("network and data disagree on the class count".into());
        }
        self.train.validate()?;
        Ok(())
    }

    /// Grid cells in a fixed order. Variants without a style branch ignore
    /// `lambda_adv` and appear once at `lambda_adv = 0`.
    pub fn cells(&self) -> Vec<Cell> {
        let g = &self.grid;
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for &stage in &g.stages {
            for &variant in &g.variants {
                let lambdas: Vec<f64> = if variant.style_branch() { g.lambda_adv.clone() } else { vec![0.0] };
                for &lambda_adv in &lambdas {
                    for &unlabeled in &g.unlabeled {
                        for &seed in &g.seeds {
                            let cell = Cell::new(variant, lambda_adv, stage, unlabeled, seed, self.train.seed);
                            if seen.insert(cell.id.clone()) {
                                out.push(cell);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let plan: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        plan.validate()?;
        Ok(plan)
    }
}

/// One run of the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub id: String,
    pub variant: Variant,
    pub lambda_adv: f64,
    pub stage: usize,
    pub unlabeled: bool,
    /// Repetition index from the grid.
    pub seed: u64,
    /// Seed for initialization, batching and randomization.
    pub derived_seed: u64,
}

impl Cell {
    pub fn new(variant: Variant, lambda_adv: f64, stage: usize, unlabeled: bool, seed: u64, base_seed: u64) -> Self {
        // `+ 0.0` folds -0 into 0 so ids and group keys agree.
        let lambda_adv = if variant.style_branch() { lambda_adv + 0.0 } else { 0.0 };
        let unl = if unlabeled { "-unl" } else { "" };
        Self {
            id: format!("{variant}-lam{lambda_adv}-st{stage}{unl}-s{seed}"),
            variant,
            lambda_adv,
            stage,
            unlabeled,
            seed,
            derived_seed: derive_seed(base_seed, seed),
        }
    }
}

/// SplitMix64 of the base seed and the repetition. Depends only on the
/// repetition, so cells that differ in `lambda_adv`, stage or variant share
/// initialization and batch order and can be compared pairwise.
pub fn derive_seed(base: u64, repetition: u64) -> u64 {
    let mut z = base ^ repetition.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------- records

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalLosses {
    pub l_c: f64,
    pub l_s: f64,
    pub l_adv: f64,
    pub l_unl: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema_version: u32,
    pub plan: String,
    pub cell_id: String,
    pub variant: Variant,
    pub lambda_adv: f64,
    pub stage: usize,
    pub unlabeled: bool,
    pub seed: u64,
    pub derived_seed: u64,
    pub target_domain: usize,
    pub in_domain_accuracy: f64,
    pub target_accuracy: f64,
    pub shape_accuracy: f64,
    pub texture_accuracy: f64,
    pub shape_bias: Option<f64>,
    pub texture_bias: Option<f64>,
    pub d_a: f64,
    pub final_losses: FinalLosses,
    /// Mean logged consistency loss over the first and last tenth of training.
    pub consistency_early: Option<f64>,
    pub consistency_late: Option<f64>,
    pub inference_params: usize,
    pub inference_mults: u64,
    /// Loss trace, relative to the plan's output directory.
    pub trace: String,
}

impl MetricsRecord {
    pub fn check(&self) -> Result<()> {
        let fractions = [
            self.in_domain_accuracy,
            self.target_accuracy,
            self.shape_accuracy,
            self.texture_accuracy,
            self.shape_bias.unwrap_or(0.0),
            self.texture_bias.unwrap_or(0.0),
        ];
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(ExperimentError::Plan(format!("{}: fraction outside [0, 1]", self.cell_id)));
        }
        if !(0.0..=2.0).contains(&self.d_a) {
            return Err(ExperimentError::Plan(format!("{}: d_A {} outside [0, 2]", self.cell_id, self.d_a)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub schema_version: u32,
    pub cell_id: String,
    pub error: String,
}

// ---------------------------------------------------------------- running

/// Data shared by every cell of a plan.
pub struct PlanData {
    pub holdout: Holdout,
    pub stimuli: StimulusSet,
}

pub fn prepare_data(plan: &ExperimentPlan) -> Result<PlanData> {
    let d = &plan.data;
    let holdout = match d.source_domain {
        Some(s) => single_source(&d.spec, s, d.target_domain)?,
        None => holdout_domain(&d.spec, d.target_domain)?,
    };
    let stimuli = generate_cue_conflict(&d.spec, d.stimuli_per_pair)?;
    Ok(PlanData { holdout, stimuli })
}

fn window_mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Trains and evaluates one cell. The trace is returned, not written.
pub fn run_cell(plan: &ExperimentPlan, cell: &Cell, data: &PlanData) -> Result<(MetricsRecord, Vec<StepReport>)> {
    let net = StageCNNConfig {
        randomization_stage: cell.stage,
        ..plan.network.clone()
    };
    let config = TrainConfig {
        lambda_adv: cell.lambda_adv,
        variant: cell.variant,
        seed: cell.derived_seed,
        ..plan.train.clone()
    };
    let mut model = build_model::<f32>(&net, cell.derived_seed)?;
    let h = &data.holdout;
    let unlabeled = cell.unlabeled.then_some(&h.target.train);
    let reports = train(&mut model, &h.source.train, unlabeled, &config, None)?;

    let bias = bias_metrics(&model, &data.stimuli)?;
    let fa = penultimate_features(&model, &h.source.test.images)?;
    let fb = penultimate_features(&model, &h.target.test.images)?;
    let disc = proxy_a_distance(&fa, &fb, &plan.probe)?;

    let unl: Vec<f64> = reports.iter().filter_map(|r| r.l_unl).collect();
    let tenth = unl.len().div_ceil(10);
    let last = reports.last().cloned().unwrap_or_default();
    let record = MetricsRecord {
        schema_version: SCHEMA_VERSION,
        plan: plan.name.clone(),
        cell_id: cell.id.clone(),
        variant: cell.variant,
        lambda_adv: cell.lambda_adv,
        stage: cell.stage,
        unlabeled: cell.unlabeled,
        seed: cell.seed,
        derived_seed: cell.derived_seed,
        target_domain: h.target_domain,
        in_domain_accuracy: cross_domain_accuracy(&model, &h.source.test)?,
        target_accuracy: cross_domain_accuracy(&model, &h.target.test)?,
        shape_accuracy: bias.shape_accuracy,
        texture_accuracy: bias.texture_accuracy,
        shape_bias: bias.shape_bias,
        texture_bias: bias.texture_bias,
        d_a: disc.d_a,
        final_losses: FinalLosses {
            l_c: last.l_c,
            l_s: last.l_s,
            l_adv: last.l_adv,
            l_unl: last.l_unl,
        },
        consistency_early: window_mean(&unl[..tenth]),
        consistency_late: window_mean(&unl[unl.len() - tenth..]),
        inference_params: model.inference_param_count(),
        inference_mults: model.inference_mults_per_image()?,
        trace: format!("{TRACE_DIR}/{}.jsonl", cell.id),
    };
    record.check()?;
    Ok((record, reports))
}

/// Runs `plan` with its default data, training and evaluation settings for a
/// single variant at the plan's first `lambda_adv` and stage.
pub fn component_ablation(plan: &ExperimentPlan, variant: &str, seed: u64) -> Result<MetricsRecord> {
    let variant: Variant = variant.parse()?;
    plan.validate()?;
    let cell = Cell::new(variant, plan.grid.lambda_adv[0], plan.grid.stages[0], false, seed, plan.train.seed);
    let data = prepare_data(plan)?;
    Ok(run_cell(plan, &cell, &data)?.0)
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// `(index, count)`: run only cells whose position modulo `count` equals
    /// `index`, so several processes can share one plan directory.
    pub shard: Option<(usize, usize)>,
}

#[derive(Clone, Debug, Default)]
pub struct PlanOutcome {
    /// Every completed record in the output directory after this run.
    pub records: Vec<MetricsRecord>,
    pub new_records: usize,
    pub failures: Vec<CellFailure>,
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

/// Appends one JSON line under an exclusive lock, as a single write.
pub fn append_line<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut line = serde_json::to_vec(value)?;
    line.push(b'\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.lock()?;
    let res = f.write_all(&line).and_then(|_| f.sync_data());
    f.unlock()?;
    Ok(res?)
}

/// Reads a JSON-lines file. An unterminated final line (an interrupted
/// append) is ignored; any other malformed line is an error.
pub fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    let mut reader = BufReader::new(f);
    let mut buf = String::new();
    loop {
        buf.clear();
        if reader.read_line(&mut buf)? == 0 {
            break;
        }
        let complete = buf.ends_with('\n');
        let line = buf.trim();
        if line.is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            Err(_) if !complete => break,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

pub fn load_records(dir: &Path) -> Result<Vec<MetricsRecord>> {
    read_lines(&dir.join(RECORDS_FILE))
}

/// Executes every cell of `plan` that has no record yet. Failed cells are
/// logged to the failures file and retried on the next run.
pub fn run_plan(plan: &ExperimentPlan, options: &RunOptions) -> Result<PlanOutcome> {
    plan.validate()?;
    if let Some((i, n)) = options.shard {
        if n == 0 || i >= n {
            return Err(ExperimentError::Plan(format!("bad shard {i}/{n}")));
        }
    }
    let dir = &plan.out_dir;
    fs::create_dir_all(dir.join(TRACE_DIR))?;
    let plan_path = dir.join(PLAN_FILE);
    if plan_path.exists() {
        let existing: ExperimentPlan = serde_json::from_str(&fs::read_to_string(&plan_path)?)?;
        if &existing != plan {
            return Err(ExperimentError::Plan(format!(
                "{} holds a different plan; use a fresh output directory",
                dir.display()
            )));
        }
    } else {
        plan.save(&plan_path)?;
    }

    let done: HashSet<String> = load_records(dir)?.into_iter().map(|r| r.cell_id).collect();
    let todo: Vec<Cell> = plan
        .cells()
        .into_iter()
        .enumerate()
        .filter(|(pos, _)| options.shard.is_none_or(|(i, n)| pos % n == i))
        .map(|(_, c)| c)
        .filter(|c| !done.contains(&c.id))
        .collect();

    let mut outcome = PlanOutcome::default();
    if !todo.is_empty() {
        let data = prepare_data(plan)?;
        for cell in &todo {
            match run_cell(plan, cell, &data) {
                Ok((record, reports)) => {
                    let mut trace = Vec::new();
                    for r in &reports {
                        serde_json::to_writer(&mut trace, r)?;
                        trace.push(b'\n');
                    }
                    write_atomic(&dir.join(&record.trace), &trace)?;
                    append_line(&dir.join(RECORDS_FILE), &record)?;
                    outcome.new_records += 1;
                }
                Err(e) => {
                    let failure = CellFailure {
                        schema_version: SCHEMA_VERSION,
                        cell_id: cell.id.clone(),
                        error: e.to_string(),
                    };
                    append_line(&dir.join(FAILURES_FILE), &failure)?;
                    outcome.failures.push(failure);
                }
            }
        }
    }
    outcome.records = load_records(dir)?;
    Ok(outcome)
}

// ---------------------------------------------------------------- summaries

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    InDomainAccuracy,
    TargetAccuracy,
    ShapeBias,
    DA,
}

impl Metric {
    pub fn of(self, r: &MetricsRecord) -> Option<f64> {
        match self {
            Metric::InDomainAccuracy => Some(r.in_domain_accuracy),
            Metric::TargetAccuracy => Some(r.target_accuracy),
            Metric::ShapeBias => r.shape_bias,
            Metric::DA => Some(r.d_a),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; absent with fewer than two values.
    pub std: Option<f64>,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = if n == 0 { f64::NAN } else { values.iter().sum::<f64>() / n as f64 };
        let std = (n >= 2).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
        Self { mean, std, n }
    }
}

/// One-sided sign test for positive differences; zero differences are
/// dropped, `p = P(X >= positive)` for `X ~ Binomial(positive + negative, 1/2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub positive: usize,
    pub negative: usize,
    pub ties: usize,
    pub p_value: f64,
}

pub fn sign_test(diffs: &[f64]) -> SignTest {
    let positive = diffs.iter().filter(|d| **d > 0.0).count();
    let negative = diffs.iter().filter(|d| **d < 0.0).count();
    let ties = diffs.len() - positive - negative;
    let n = positive + negative;
    let mut p = 0.0;
    let mut c = 1.0f64;
    for k in 0..=n {
        if k >= positive {
            p += c;
        }
        c = c * (n - k) as f64 / (k + 1) as f64;
    }
    SignTest {
        positive,
        negative,
        ties,
        p_value: if n == 0 { 1.0 } else { p / 2f64.powi(n as i32) },
    }
}

/// Cell coordinates without the seed; `lambda_bits` orders like the value
/// because `lambda_adv >= 0`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct GroupKey {
    variant: String,
    stage: usize,
    unlabeled: bool,
    lambda_bits: u64,
}

impl GroupKey {
    fn of(r: &MetricsRecord) -> Self {
        Self {
            variant: r.variant.to_string(),
            stage: r.stage,
            unlabeled: r.unlabeled,
            lambda_bits: r.lambda_adv.to_bits(),
        }
    }

    fn series(&self) -> (String, usize, bool) {
        (self.variant.clone(), self.stage, self.unlabeled)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub lambda_adv: f64,
    pub stage: usize,
    pub unlabeled: bool,
    pub seeds: Vec<u64>,
    pub in_domain_accuracy: Stat,
    pub target_accuracy: Stat,
    pub shape_bias: Stat,
    pub d_a: Stat,
    /// Set when the row has too few seeds for a standard deviation.
    pub flag: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Increasing,
    Decreasing,
}

/// Monotone trend of one metric across the `lambda_adv` values of a series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendTest {
    pub metric: Metric,
    pub direction: Direction,
    pub variant: String,
    pub stage: usize,
    pub unlabeled: bool,
    pub lambda_adv: Vec<f64>,
    pub means: Vec<f64>,
    pub strictly_ordered: bool,
    /// Over every seed and adjacent pair of `lambda_adv` values.
    pub sign: SignTest,
    pub passes: bool,
}

/// `variant` against a reference row at the same stage, paired by seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: Metric,
    pub variant: String,
    pub lambda_adv: f64,
    pub reference_variant: String,
    pub reference_lambda_adv: f64,
    pub stage: usize,
    pub unlabeled: bool,
    pub reference_unlabeled: bool,
    /// Mean of `variant - reference` over paired seeds.
    pub mean_difference: f64,
    /// Sign test in the direction in which the metric improves.
    pub sign: SignTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub rows: Vec<SummaryRow>,
    pub trends: Vec<TrendTest>,
    pub comparisons: Vec<Comparison>,
}

pub const TREND_ALPHA: f64 = 0.05;

type Groups = BTreeMap<GroupKey, BTreeMap<u64, MetricsRecord>>;

fn paired(a: &BTreeMap<u64, MetricsRecord>, b: &BTreeMap<u64, MetricsRecord>, metric: Metric) -> Vec<f64> {
    a.iter()
        .filter_map(|(seed, ra)| {
            let rb = b.get(seed)?;
            Some(metric.of(ra)? - metric.of(rb)?)
        })
        .collect()
}

fn stat(group: &BTreeMap<u64, MetricsRecord>, metric: Metric) -> Stat {
    let v: Vec<f64> = group.values().filter_map(|r| metric.of(r)).collect();
    Stat::of(&v)
}

/// Aggregates per cell, trend tests across `lambda_adv` (shape bias
/// increasing, d_A decreasing) and paired comparisons against the baseline
/// and, for unlabeled cells, against their labeled-only twins. Records are
/// keyed by cell and seed before any arithmetic, so the result does not
/// depend on input order; a repeated cell id keeps its first occurrence in
/// that key order.
pub fn summarize(records: &[MetricsRecord]) -> Summary {
    let mut groups: Groups = BTreeMap::new();
    let mut sorted: Vec<&MetricsRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.cell_id, serde_json::to_string(a).unwrap_or_default())
            .cmp(&(&b.cell_id, serde_json::to_string(b).unwrap_or_default()))
    });
    for r in sorted {
        groups.entry(GroupKey::of(r)).or_default().entry(r.seed).or_insert_with(|| r.clone());
    }

    let rows: Vec<SummaryRow> = groups
        .iter()
        .map(|(k, g)| {
            let n = g.len();
            SummaryRow {
                variant: k.variant.clone(),
                lambda_adv: f64::from_bits(k.lambda_bits),
                stage: k.stage,
                unlabeled: k.unlabeled,
                seeds: g.keys().copied().collect(),
                in_domain_accuracy: stat(g, Metric::InDomainAccuracy),
                target_accuracy: stat(g, Metric::TargetAccuracy),
                shape_bias: stat(g, Metric::ShapeBias),
                d_a: stat(g, Metric::DA),
                flag: (n < 2).then(|| format!("{n} seed(s): no standard deviation")),
            }
        })
        .collect();

    let mut series: BTreeMap<(String, usize, bool), Vec<&GroupKey>> = BTreeMap::new();
    for k in groups.keys() {
        series.entry(k.series()).or_default().push(k);
    }
    let mut trends = Vec::new();
    for ((variant, stage, unlabeled), keys) in &series {
        if keys.len() < 2 {
            continue;
        }
        for (metric, direction) in [(Metric::ShapeBias, Direction::Increasing), (Metric::DA, Direction::Decreasing)] {
            let means: Vec<f64> = keys.iter().map(|k| stat(&groups[*k], metric).mean).collect();
            let sign_of = |d: f64| if direction == Direction::Increasing { d } else { -d };
            let strictly_ordered = means.windows(2).all(|w| sign_of(w[1] - w[0]) > 0.0);
            let diffs: Vec<f64> = keys
                .windows(2)
                .flat_map(|w| paired(&groups[w[1]], &groups[w[0]], metric))
                .map(sign_of)
                .collect();
            let sign = sign_test(&diffs);
            trends.push(TrendTest {
                metric,
                direction,
                variant: variant.clone(),
                stage: *stage,
                unlabeled: *unlabeled,
                lambda_adv: keys.iter().map(|k| f64::from_bits(k.lambda_bits)).collect(),
                means,
                strictly_ordered,
                passes: strictly_ordered && sign.p_value < TREND_ALPHA,
                sign,
            });
        }
    }

    let baseline = Variant::Baseline.to_string();
    let mut comparisons = Vec::new();
    for (k, g) in &groups {
        let mut refs: Vec<GroupKey> = Vec::new();
        if k.variant != baseline {
            refs.push(GroupKey {
                variant: baseline.clone(),
                stage: k.stage,
                unlabeled: k.unlabeled,
                lambda_bits: 0f64.to_bits(),
            });
        }
        if k.unlabeled {
            refs.push(GroupKey {
                unlabeled: false,
                ..k.clone()
            });
        }
        for r in refs {
            let Some(rg) = groups.get(&r) else { continue };
            for (metric, higher_is_better) in [(Metric::TargetAccuracy, true), (Metric::DA, false)] {
                let diffs = paired(g, rg, metric);
                if diffs.is_empty() {
                    continue;
                }
                let oriented: Vec<f64> = diffs.iter().map(|d| if higher_is_better { *d } else { -d }).collect();
                comparisons.push(Comparison {
                    metric,
                    variant: k.variant.clone(),
                    lambda_adv: f64::from_bits(k.lambda_bits),
                    reference_variant: r.variant.clone(),
                    reference_lambda_adv: f64::from_bits(r.lambda_bits),
                    stage: k.stage,
                    unlabeled: k.unlabeled,
                    reference_unlabeled: r.unlabeled,
                    mean_difference: diffs.iter().sum::<f64>() / diffs.len() as f64,
                    sign: sign_test(&oriented),
                });
            }
        }
    }

    Summary {
        schema_version: SCHEMA_VERSION,
        rows,
        trends,
        comparisons,
    }
}

#[derive(Serialize)]
struct CsvRow<'a> {
    variant: &'a str,
    lambda_adv: f64,
    stage: usize,
    unlabeled: bool,
    n: usize,
    in_domain_mean: f64,
    in_domain_std: Option<f64>,
    target_mean: f64,
    target_std: Option<f64>,
    shape_bias_mean: f64,
    shape_bias_std: Option<f64>,
    d_a_mean: f64,
    d_a_std: Option<f64>,
    flag: &'a str,
}

#[derive(Serialize)]
struct PlotPoint {
    x: f64,
    mean: f64,
    std: Option<f64>,
}

#[derive(Serialize)]
struct PlotSeries {
    metric: Metric,
    variant: String,
    stage: usize,
    unlabeled: bool,
    x_label: &'static str,
    points: Vec<PlotPoint>,
}

/// Writes `summary.csv` (one row per cell), `plot.json` (one series per
/// metric, variant, stage and unlabeled flag, x = `lambda_adv`) and
/// `summary.json` (the full summary) into `dir`.
pub fn write_summary(summary: &Summary, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &summary.rows {
        w.serialize(CsvRow {
            variant: &r.variant,
            lambda_adv: r.lambda_adv,
            stage: r.stage,
            unlabeled: r.unlabeled,
            n: r.seeds.len(),
            in_domain_mean: r.in_domain_accuracy.mean,
            in_domain_std: r.in_domain_accuracy.std,
            target_mean: r.target_accuracy.mean,
            target_std: r.target_accuracy.std,
            shape_bias_mean: r.shape_bias.mean,
            shape_bias_std: r.shape_bias.std,
            d_a_mean: r.d_a.mean,
            d_a_std: r.d_a.std,
            flag: r.flag.as_deref().unwrap_or(""),
        })
        .map_err(|e| ExperimentError::Plan(e.to_string()))?;
    }
    let csv = w.into_inner().map_err(|e| ExperimentError::Plan(e.to_string()))?;
    write_atomic(&dir.join("summary.csv"), &csv)?;

    let mut series: BTreeMap<(String, usize, bool), Vec<&SummaryRow>> = BTreeMap::new();
    for r in &summary.rows {
        series.entry((r.variant.clone(), r.stage, r.unlabeled)).or_default().push(r);
    }
    let mut plot = Vec::new();
    for ((variant, stage, unlabeled), rows) in &series {
        for metric in [Metric::InDomainAccuracy, Metric::TargetAccuracy, Metric::ShapeBias, Metric::DA] {
            let points = rows
                .iter()
                .map(|r| {
                    let s = match metric {
                        Metric::InDomainAccuracy => &r.in_domain_accuracy,
                        Metric::TargetAccuracy => &r.target_accuracy,
                        Metric::ShapeBias => &r.shape_bias,
                        Metric::DA => &r.d_a,
                    };
                    PlotPoint {
                        x: r.lambda_adv,
                        mean: s.mean,
                        std: s.std,
                    }
                })
                .collect();
            plot.push(PlotSeries {
                metric,
                variant: variant.clone(),
                stage: *stage,
                unlabeled: *unlabeled,
                x_label: "lambda_adv",
                points,
            });
        }
    }
    let plot = serde_json::json!({ "schema_version": SCHEMA_VERSION, "series": plot });
    write_atomic(&dir.join("plot.json"), serde_json::to_string_pretty(&plot)?.as_bytes())?;
    write_atomic(&dir.join("summary.json"), serde_json::to_string_pretty(summary)?.as_bytes())?;
    Ok(())
}
