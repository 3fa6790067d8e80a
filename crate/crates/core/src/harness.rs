//! Experiment orchestration: pre-training, fine-tuning with trajectory
//! statistics, evaluation, and the learning-rate grid runner.
//!
//! The pipeline for one grid cell is always
//!
//! ```text
//! train (epochs * batches)          -> baseline weights
//! finetune (K updates + statistics) -> final weights + snapshot
//! per method: resample + evaluate   -> one CSV row each
//! ```
//!
//! so every method inside a cell shares the identical pre-trained model
//! and the identical fine-tuning trajectory. Cell seeds derive from
//! `(base_seed, [l1_index, l2_index, repeat])`, which makes any single
//! cell reproducible in isolation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batches_per_epoch, BatchPlan, BatchStream, Dataset, MnistData};
use crate::error::{Error, Result};
use crate::nn::{Model, ModelSpec, Phase};
use crate::optim::{AdamConfig, Optimizer};
use crate::resample::{build_members, resample_mean, Combine, EnsembleSpec, ResampleMethod};
use crate::rng::{derive_seed, rng_from_seed};
use crate::stats::{StatsSnapshot, WelfordAccumulator};
use crate::tensor::ParamStore;

// Purpose tags for deriving per-stage seeds from a run seed.
const TAG_INIT: u64 = 1;
const TAG_TRAIN_SHUFFLE: u64 = 2;
const TAG_TRAIN_DROPOUT: u64 = 3;
const TAG_FT_SHUFFLE: u64 = 4;
const TAG_FT_DROPOUT: u64 = 5;
const TAG_ENSEMBLE: u64 = 6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularization {
    #[default]
    Dropout,
    None,
}

impl Regularization {
    pub fn label(self) -> &'static str {
        match self {
            Regularization::Dropout => "dropout",
            Regularization::None => "none",
        }
    }

    pub fn uses_dropout(self) -> bool {
        self == Regularization::Dropout
    }
}

/// Optimizer selection for one stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerSpec {
    Sgd { learning_rate: f64 },
    Adam {
        #[serde(flatten)]
        config: AdamConfig,
    },
}

impl OptimizerSpec {
    pub fn adam_default() -> Self {
        OptimizerSpec::Adam { config: AdamConfig::default() }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerSpec::Sgd { .. } => "sgd",
            OptimizerSpec::Adam { .. } => "adam",
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match self {
            OptimizerSpec::Sgd { learning_rate } => *learning_rate,
            OptimizerSpec::Adam { config } => config.learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.learning_rate();
        if !lr.is_finite() || lr <= 0.0 {
            return Err(Error::Config(format!(
                "{} learning rate must be positive, got {lr}",
                self.name()
            )));
        }
        if let OptimizerSpec::Adam { config } = self {
            config.validate()?;
        }
        Ok(())
    }

    fn build(&self, params: &ParamStore<f32>) -> Result<Optimizer<f32>> {
        match self {
            OptimizerSpec::Sgd { learning_rate } => Optimizer::sgd(*learning_rate),
            OptimizerSpec::Adam { config } => Optimizer::adam(*config, params),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainSettings {
    pub optimizer: OptimizerSpec,
    pub epochs: u32,
    pub batch_size: usize,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FinetuneSettings {
    pub optimizer: OptimizerSpec,
    /// Number of mini-batch updates K; the statistics see exactly K
    /// post-update weight vectors.
    pub updates: u32,
    pub batch_size: usize,
}

fn run_steps(
    model: &Model,
    params: &mut ParamStore<f32>,
    optimizer: &mut Optimizer<f32>,
    stream: &mut BatchStream<'_>,
    steps: u64,
    dropout_seed: u64,
    train_dropout: bool,
    mut after_step: impl FnMut(&ParamStore<f32>) -> Result<()>,
) -> Result<()> {
    let mut dropout_rng = rng_from_seed(dropout_seed);
    for step in 0..steps {
        let (images, labels) = stream.next_batch();
        let phase = Phase::Train;
        let rng = if train_dropout { Some(&mut dropout_rng) } else { None };
        // dropout layers are only present when regularization asks for
        // them, so a None rng is fine for the no-dropout variants
        let out = model.forward_backward(params, &images, &labels, phase, rng)?;
        if !out.loss.is_finite() {
            return Err(Error::Run(format!(
                "loss became non-finite at step {step} (epoch {})",
                stream.epoch()
            )));
        }
        optimizer.step(params, out.grads.as_ref().unwrap())?;
        after_step(params)?;
    }
    if !params.all_finite() {
        return Err(Error::Run("parameters non-finite after training".into()));
    }
    Ok(())
}

/// Pre-train from a fresh initialization. `epochs == 0` returns the
/// initialization untouched. All randomness (init, shuffles, dropout)
/// derives from `seed`.
pub fn train(
    model: &Model,
    settings: &TrainSettings,
    data: &Dataset,
    seed: u64,
) -> Result<ParamStore<f32>> {
    if settings.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut params = model.init_params::<f32>(derive_seed(seed, &[TAG_INIT]));
    if settings.epochs == 0 {
        return Ok(params);
    }
    let mut optimizer = settings.optimizer.build(&params)?;
    let mut stream = BatchStream::new(
        data,
        BatchPlan { batch_size: settings.batch_size, seed: derive_seed(seed, &[TAG_TRAIN_SHUFFLE]) },
    )?;
    let steps = settings.epochs as u64 * batches_per_epoch(data.len(), settings.batch_size) as u64;
    run_steps(
        model,
        &mut params,
        &mut optimizer,
        &mut stream,
        steps,
        derive_seed(seed, &[TAG_TRAIN_DROPOUT]),
        model.has_dropout(),
        |_| Ok(()),
    )?;
    Ok(params)
}

/// Fine-tune `base` for K updates, feeding every post-update weight vector
/// into a Welford accumulator. The starting point itself is not part of
/// the statistics, so the snapshot has count == K and, with a zero
/// learning rate, mean == base and stddev == 0.
pub fn finetune_with_stats(
    model: &Model,
    base: &ParamStore<f32>,
    settings: &FinetuneSettings,
    data: &Dataset,
    seed: u64,
) -> Result<(ParamStore<f32>, StatsSnapshot<f32>)> {
    if settings.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    if settings.updates == 0 {
        return Err(Error::Config("fine-tuning needs at least one update".into()));
    }
    let mut params = base.clone();
    let mut optimizer = settings.optimizer.build(&params)?;
    let mut stream = BatchStream::new(
        data,
        BatchPlan { batch_size: settings.batch_size, seed: derive_seed(seed, &[TAG_FT_SHUFFLE]) },
    )?;
    let mut acc = WelfordAccumulator::for_params(&params);
    run_steps(
        model,
        &mut params,
        &mut optimizer,
        &mut stream,
        settings.updates as u64,
        derive_seed(seed, &[TAG_FT_DROPOUT]),
        model.has_dropout(),
        |p| acc.update(p),
    )?;
    let snapshot = acc.snapshot::<f32>()?;
    Ok((params, snapshot))
}

/// Accuracy of an ensemble (one or more weight sets) on `data`,
/// probability-averaged. Chunks the dataset to bound activation memory;
/// chunking does not change the result.
pub fn evaluate_accuracy(
    model: &Model,
    members: &[&ParamStore<f32>],
    data: &Dataset,
    combine: Combine,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    const CHUNK: usize = 256;
    let mut correct = 0usize;
    let mut at = 0usize;
    while at < data.len() {
        let n = CHUNK.min(data.len() - at);
        let idx: Vec<u32> = (at..at + n).map(|i| i as u32).collect();
        let (images, labels) = data.gather(&idx);
        let probs = crate::resample::ensemble_predict(model, members, &images, combine)?;
        correct += crate::nn::count_correct(&probs, &labels)?;
        at += n;
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Evaluation methods a grid can request per cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Pre-trained weights, untouched.
    Baseline,
    /// Weights after the K fine-tuning updates.
    Finetuned,
    /// Trajectory mean reassignment.
    Mean,
    /// k Gaussian draws around the trajectory mean, probability-averaged.
    Ensemble { k: usize },
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Finetuned => "finetuned",
            Method::Mean => "mean",
            Method::Ensemble { .. } => "ensemble",
        }
    }

    /// Member count reported in the `ensemble_k` column; single-model
    /// methods count as 1.
    pub fn ensemble_k(self) -> usize {
        match self {
            Method::Ensemble { k } => k,
            _ => 1,
        }
    }

    /// Collapsed name used in the summary CSV, e.g. `ensemble3`.
    pub fn summary_label(self) -> String {
        match self {
            Method::Ensemble { k } => format!("ensemble{k}"),
            other => other.label().to_string(),
        }
    }
}

/// One stage of the grid: optimizer kind plus the learning rates to sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridStage {
    pub optimizer: OptimizerKind,
    /// Swept learning rates. May be omitted for adam, which then runs once
    /// at its default rate.
    #[serde(default)]
    pub learning_rates: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl GridStage {
    /// The effective learning-rate list after defaulting.
    pub fn rates(&self) -> Vec<f64> {
        if self.learning_rates.is_empty() && self.optimizer == OptimizerKind::Adam {
            vec![AdamConfig::default().learning_rate]
        } else {
            self.learning_rates.clone()
        }
    }

    pub fn spec_for(&self, lr: f64) -> OptimizerSpec {
        match self.optimizer {
            OptimizerKind::Sgd => OptimizerSpec::Sgd { learning_rate: lr },
            OptimizerKind::Adam => {
                OptimizerSpec::Adam { config: AdamConfig { learning_rate: lr, ..AdamConfig::default() } }
            }
        }
    }
}

fn default_model() -> String {
    "lenet".to_string()
}

fn default_epochs() -> u32 {
    2
}

fn default_updates() -> u32 {
    500
}

fn default_batch_size() -> usize {
    128
}

fn default_repeats() -> u32 {
    10
}

/// Full description of a learning-rate grid experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridConfig {
    /// Short name prefixed to every cell's config_id. No commas.
    pub id: String,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default)]
    pub regularization: Regularization,
    pub train: GridStage,
    pub finetune: GridStage,
    #[serde(default = "default_epochs")]
    pub epochs: u32,
    #[serde(default = "default_updates")]
    pub updates: u32,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_repeats")]
    pub repeats: u32,
    pub methods: Vec<Method>,
    pub base_seed: u64,
    #[serde(default)]
    pub combine: Combine,
}

impl GridConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let config: GridConfig =
            serde_json::from_str(json).map_err(|e| Error::Config(format!("grid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.contains(',') || self.id.chars().any(|c| c.is_whitespace()) {
            return Err(Error::Config(format!(
                "grid id `{}` must be non-empty without commas or whitespace",
                self.id
            )));
        }
        ModelSpec::by_name(&self.model, self.regularization.uses_dropout())?;
        if self.methods.is_empty() {
            return Err(Error::Config("grid requests no methods".into()));
        }
        for m in &self.methods {
            if let Method::Ensemble { k: 0 } = m {
                return Err(Error::Config("ensemble method with k = 0".into()));
            }
        }
        if self.epochs == 0 {
            return Err(Error::Config("grid epochs must be >= 1".into()));
        }
        if self.updates == 0 {
            return Err(Error::Config("grid updates must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("grid batch size must be >= 1".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("grid repeats must be >= 1".into()));
        }
        for (stage, rates) in [("train", self.train.rates()), ("finetune", self.finetune.rates())] {
            if rates.is_empty() {
                return Err(Error::Config(format!("{stage} stage has no learning rates")));
            }
            if let Some(&bad) = rates.iter().find(|r| !r.is_finite() || **r <= 0.0) {
                return Err(Error::Config(format!("{stage} learning rate {bad} must be positive")));
            }
        }
        Ok(())
    }

    /// Shrunk copy for pipeline verification: at most 1 epoch, 100
    /// updates, 2 repeats. Learning rates and methods are untouched.
    pub fn smoke_variant(&self) -> GridConfig {
        GridConfig {
            epochs: self.epochs.min(1),
            updates: self.updates.min(100),
            repeats: self.repeats.min(2),
            ..self.clone()
        }
    }

    fn cell_id(&self, lr_train: f64, lr_finetune: f64) -> String {
        format!("{}:l1={lr_train}:l2={lr_finetune}", self.id)
    }
}

/// Execution knobs that do not alter results except `smoke`, which zeroes
/// the wall_seconds column so reruns are byte-identical.
#[derive(Clone, Copy, Debug)]
pub struct GridOptions {
    pub threads: usize,
    pub smoke: bool,
    pub progress: bool,
    /// Per-cell wall-clock budget; a cell that exceeds it is recorded as a
    /// failure and the grid moves on.
    pub cell_budget_secs: Option<f64>,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions { threads: 1, smoke: false, progress: false, cell_budget_secs: None }
    }
}

/// One CSV row: a (cell, seed, method) accuracy measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub config_id: String,
    pub optimizer_train: &'static str,
    pub optimizer_finetune: &'static str,
    pub regularization: &'static str,
    pub lr_train: f64,
    pub lr_finetune: f64,
    pub seed: u64,
    pub method: Method,
    pub test_accuracy: f64,
    pub wall_seconds: f64,
}

/// A cell that could not produce rows (divergence, budget, ...).
#[derive(Clone, Debug)]
pub struct CellFailure {
    pub config_id: String,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct RunReport {
    pub rows: Vec<RunRow>,
    pub failures: Vec<CellFailure>,
}

/// Aggregate of one (cell, method) group over its repeats.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub config_id: String,
    pub method: String,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub n: usize,
}

impl RunReport {
    pub const RESULTS_HEADER: &'static str = "config_id,optimizer_train,optimizer_finetune,regularization,lr_train,lr_finetune,seed,method,ensemble_k,test_accuracy,wall_seconds";
    pub const SUMMARY_HEADER: &'static str = "config_id,method,mean_accuracy,std_accuracy,n";

    pub fn results_csv(&self) -> String {
        let mut out = String::from(Self::RESULTS_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{:.6},{:.3}",
                r.config_id,
                r.optimizer_train,
                r.optimizer_finetune,
                r.regularization,
                r.lr_train,
                r.lr_finetune,
                r.seed,
                r.method.label(),
                r.method.ensemble_k(),
                r.test_accuracy,
                r.wall_seconds
            )
            .unwrap();
        }
        out
    }

    /// Mean and sample standard deviation per (cell, method), in first
    /// appearance order.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut order: Vec<(String, String)> = Vec::new();
        let mut buckets: Vec<Vec<f64>> = Vec::new();
        for r in &self.rows {
            let key = (r.config_id.clone(), r.method.summary_label());
            match order.iter().position(|k| *k == key) {
                Some(i) => buckets[i].push(r.test_accuracy),
                None => {
                    order.push(key);
                    buckets.push(vec![r.test_accuracy]);
                }
            }
        }
        order
            .into_iter()
            .zip(buckets)
            .map(|((config_id, method), accs)| {
                let n = accs.len();
                let mean = accs.iter().sum::<f64>() / n as f64;
                let std = if n > 1 {
                    (accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1) as f64)
                        .sqrt()
                } else {
                    0.0
                };
                Aggregate { config_id, method, mean_accuracy: mean, std_accuracy: std, n }
            })
            .collect()
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(Self::SUMMARY_HEADER);
        out.push('\n');
        for a in self.aggregates() {
            writeln!(
                out,
                "{},{},{:.6},{:.6},{}",
                a.config_id, a.method, a.mean_accuracy, a.std_accuracy, a.n
            )
            .unwrap();
        }
        out
    }

    /// Write `results.csv` and `summary.csv` under `out_dir`.
    pub fn write_csv_files(&self, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let results = out_dir.join("results.csv");
        let summary = out_dir.join("summary.csv");
        std::fs::write(&results, self.results_csv()).map_err(|e| Error::io(&results, e))?;
        std::fs::write(&summary, self.summary_csv()).map_err(|e| Error::io(&summary, e))?;
        Ok((results, summary))
    }
}

struct CellSpec {
    l1_idx: usize,
    l2_idx: usize,
    repeat: u32,
}

/// Seed of the cell at learning-rate indices (l1, l2), repeat r.
pub fn cell_seed(base_seed: u64, l1_idx: usize, l2_idx: usize, repeat: u32) -> u64 {
    derive_seed(base_seed, &[l1_idx as u64, l2_idx as u64, repeat as u64])
}

/// Everything a single cell produces before methods are evaluated.
pub struct CellModels {
    pub baseline: ParamStore<f32>,
    pub finetuned: ParamStore<f32>,
    pub snapshot: StatsSnapshot<f32>,
}

/// Train + fine-tune one cell. Shared by the grid runner and by callers
/// that want to inspect cells directly.
pub fn run_cell_models(
    model: &Model,
    config: &GridConfig,
    data: &MnistData,
    lr_train: f64,
    lr_finetune: f64,
    seed: u64,
) -> Result<CellModels> {
    let train_settings = TrainSettings {
        optimizer: config.train.spec_for(lr_train),
        epochs: config.epochs,
        batch_size: config.batch_size,
    };
    train_settings.optimizer.validate()?;
    let baseline = train(model, &train_settings, &data.train, seed)?;

    let ft_settings = FinetuneSettings {
        optimizer: config.finetune.spec_for(lr_finetune),
        updates: config.updates,
        batch_size: config.batch_size,
    };
    ft_settings.optimizer.validate()?;
    let (finetuned, snapshot) = finetune_with_stats(model, &baseline, &ft_settings, &data.train, seed)?;
    Ok(CellModels { baseline, finetuned, snapshot })
}

/// Accuracy of one method given the cell's models. Ensemble member i draws
/// with seed derived from `(seed, [TAG_ENSEMBLE, i])`.
pub fn evaluate_method(
    model: &Model,
    cell: &CellModels,
    method: Method,
    data: &MnistData,
    seed: u64,
    combine: Combine,
) -> Result<f64> {
    match method {
        Method::Baseline => evaluate_accuracy(model, &[&cell.baseline], &data.test, combine),
        Method::Finetuned => evaluate_accuracy(model, &[&cell.finetuned], &data.test, combine),
        Method::Mean => {
            let mean = resample_mean(&cell.finetuned, &cell.snapshot)?;
            evaluate_accuracy(model, &[&mean], &data.test, combine)
        }
        Method::Ensemble { k } => {
            let spec = EnsembleSpec {
                method: ResampleMethod::Gaussian,
                k,
                seed: derive_seed(seed, &[TAG_ENSEMBLE]),
            };
            let members = build_members(&cell.finetuned, &cell.snapshot, &spec)?;
            let refs: Vec<&ParamStore<f32>> = members.iter().collect();
            evaluate_accuracy(model, &refs, &data.test, combine)
        }
    }
}

fn run_cell(
    model: &Model,
    config: &GridConfig,
    data: &MnistData,
    cell: &CellSpec,
    options: &GridOptions,
) -> std::result::Result<Vec<RunRow>, CellFailure> {
    let lr_train = config.train.rates()[cell.l1_idx];
    let lr_finetune = config.finetune.rates()[cell.l2_idx];
    let seed = cell_seed(config.base_seed, cell.l1_idx, cell.l2_idx, cell.repeat);
    let config_id = config.cell_id(lr_train, lr_finetune);
    let fail = |message: String| CellFailure { config_id: config_id.clone(), seed, message };

    let started = Instant::now();
    let over_budget = |stage: &str| -> Option<CellFailure> {
        options.cell_budget_secs.and_then(|budget| {
            let elapsed = started.elapsed().as_secs_f64();
            (elapsed > budget).then(|| {
                fail(format!("cell exceeded {budget:.0}s budget after {stage} ({elapsed:.0}s)"))
            })
        })
    };

    let models = run_cell_models(model, config, data, lr_train, lr_finetune, seed)
        .map_err(|e| fail(e.to_string()))?;
    if let Some(f) = over_budget("fine-tuning") {
        return Err(f);
    }

    let mut rows = Vec::with_capacity(config.methods.len());
    for &method in &config.methods {
        let accuracy = evaluate_method(model, &models, method, data, seed, config.combine)
            .map_err(|e| fail(e.to_string()))?;
        rows.push(RunRow {
            config_id: config_id.clone(),
            optimizer_train: config.train.spec_for(lr_train).name(),
            optimizer_finetune: config.finetune.spec_for(lr_finetune).name(),
            regularization: config.regularization.label(),
            lr_train,
            lr_finetune,
            seed,
            method,
            test_accuracy: accuracy,
            wall_seconds: 0.0,
        });
        if let Some(f) = over_budget(method.label()) {
            return Err(f);
        }
    }
    // whole-cell wall time, repeated on each of the cell's rows;
    // zeroed in smoke mode so identical runs emit identical bytes
    let wall = if options.smoke { 0.0 } else { started.elapsed().as_secs_f64() };
    for row in &mut rows {
        row.wall_seconds = wall;
    }
    Ok(rows)
}

/// Run the full grid: every (train lr, finetune lr, repeat) cell, every
/// method. Failed cells are recorded and skipped, the rest of the grid
/// continues. Rows come out in deterministic grid order regardless of
/// thread count.
pub fn run_experiment_grid(
    config: &GridConfig,
    data: &MnistData,
    options: &GridOptions,
) -> Result<RunReport> {
    config.validate()?;
    let config = if options.smoke { config.smoke_variant() } else { config.clone() };
    let model = Model::new(ModelSpec::by_name(
        &config.model,
        config.regularization.uses_dropout(),
    )?)?;

    let mut cells = Vec::new();
    for l1_idx in 0..config.train.rates().len() {
        for l2_idx in 0..config.finetune.rates().len() {
            for repeat in 0..config.repeats {
                cells.push(CellSpec { l1_idx, l2_idx, repeat });
            }
        }
    }

    let total = cells.len();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<std::result::Result<Vec<RunRow>, CellFailure>>>> =
        Mutex::new((0..total).map(|_| None).collect());
    let workers = options.threads.max(1).min(total.max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= total {
                    break;
                }
                let cell = &cells[i];
                let outcome = run_cell(&model, &config, data, cell, options);
                if options.progress {
                    let state = match &outcome {
                        Ok(rows) => format!(
                            "ok ({})",
                            rows.iter()
                                .map(|r| format!("{} {:.4}", r.method.summary_label(), r.test_accuracy))
                                .collect::<Vec<_>>()
                                .join(", ")
                        ),
                        Err(f) => format!("FAILED: {}", f.message),
                    };
                    eprintln!(
                        "[grid {}] cell {}/{total} l1={} l2={} repeat={} {state}",
                        config.id,
                        i + 1,
                        config.train.rates()[cell.l1_idx],
                        config.finetune.rates()[cell.l2_idx],
                        cell.repeat,
                    );
                }
                results.lock().unwrap()[i] = Some(outcome);
            });
        }
    });

    let mut report = RunReport::default();
    for slot in results.into_inner().unwrap() {
        match slot.expect("all cells visited") {
            Ok(rows) => report.rows.extend(rows),
            Err(failure) => report.failures.push(failure),
        }
    }
    Ok(report)
}

/// Single-run configuration consumed by the train/finetune subcommands.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default)]
    pub regularization: Regularization,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub train: RunTrainStage,
    pub finetune: RunFinetuneStage,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunTrainStage {
    pub optimizer: OptimizerSpec,
    #[serde(default = "default_epochs")]
    pub epochs: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunFinetuneStage {
    pub optimizer: OptimizerSpec,
    #[serde(default = "default_updates")]
    pub updates: u32,
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let config: RunConfig =
            serde_json::from_str(json).map_err(|e| Error::Config(format!("run config: {e}")))?;
        config.train.optimizer.validate()?;
        config.finetune.optimizer.validate()?;
        if config.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(config)
    }

    pub fn build_model(&self) -> Result<Model> {
        Model::new(ModelSpec::by_name(&self.model, self.regularization.uses_dropout())?)
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            optimizer: self.train.optimizer,
            epochs: self.train.epochs,
            batch_size: self.batch_size,
        }
    }

    pub fn finetune_settings(&self) -> FinetuneSettings {
        FinetuneSettings {
            optimizer: self.finetune.optimizer,
            updates: self.finetune.updates,
            batch_size: self.batch_size,
        }
    }
}
