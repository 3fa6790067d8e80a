//! Command-line front end: data fetching, single train/finetune/resample
//! runs with checkpoint files, evaluation, and the full experiment grid.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use wsf_core::checkpoint::{
    load_param_store, load_snapshot, save_param_store, save_snapshot,
};
use wsf_core::data::{fetch_mnist, load_mnist, DEFAULT_BASE_URL};
use wsf_core::harness::{
    evaluate_accuracy, finetune_with_stats, run_experiment_grid, train, GridConfig, GridOptions,
    RunConfig,
};
use wsf_core::resample::{resample_gaussian, resample_mean, Combine};
use wsf_core::{Error, ParamStore, Result};

#[derive(Parser)]
#[command(
    name = "wsf",
    version,
    about = "Train small convnets, track weight-trajectory statistics, and resample improved models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataDir {
    /// Directory holding the four decompressed MNIST IDX files.
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Download the MNIST archives, verify checksums, and unpack them.
    FetchData {
        #[command(flatten)]
        data: DataDir,
        /// Mirror to download from.
        #[arg(long, default_value = DEFAULT_BASE_URL)]
        base_url: String,
    },
    /// Pre-train a model from scratch and write a weight checkpoint.
    Train {
        /// Run configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        data: DataDir,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fine-tune a checkpoint, accumulating per-parameter mean and
    /// standard deviation over the update trajectory.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        data: DataDir,
        /// Checkpoint to start from.
        #[arg(long)]
        base: PathBuf,
        /// Where the fine-tuned weights go.
        #[arg(long)]
        out: PathBuf,
        /// Where the trajectory statistics go.
        #[arg(long)]
        stats_out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build new weights from trajectory statistics: either the mean, or
    /// one Gaussian draw around it.
    Resample {
        /// Checkpoint providing the non-trainable state and layout.
        #[arg(long)]
        base: PathBuf,
        /// Statistics file written by `finetune`.
        #[arg(long)]
        stats: PathBuf,
        #[arg(long, value_enum, default_value_t = ResampleArg::Mean)]
        method: ResampleArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report test-set accuracy of one checkpoint, or of an ensemble when
    /// several are given.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        data: DataDir,
        /// One or more weight checkpoints; multiple files form an ensemble.
        #[arg(long, required = true, num_args = 1..)]
        weights: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = CombineArg::Probabilities)]
        combine: CombineArg,
    },
    /// Run a learning-rate grid and write results.csv plus summary.csv.
    Grid {
        /// Grid configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        data: DataDir,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Shrink to at most 1 epoch, 100 updates, 2 repeats, and zero the
        /// wall_seconds column so reruns are byte-identical.
        #[arg(long)]
        smoke: bool,
        /// Worker threads; results are identical for any value.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Log each finished cell to stderr.
        #[arg(long)]
        progress: bool,
        /// Abort any cell that runs longer than this many seconds.
        #[arg(long)]
        cell_budget_secs: Option<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ResampleArg {
    Mean,
    Gaussian,
}

#[derive(Clone, Copy, ValueEnum)]
enum CombineArg {
    Probabilities,
    Logits,
}

impl From<CombineArg> for Combine {
    fn from(arg: CombineArg) -> Combine {
        match arg {
            CombineArg::Probabilities => Combine::Probabilities,
            CombineArg::Logits => Combine::Logits,
        }
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn metadata(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::FetchData { data, base_url } => {
            fetch_mnist(&data.data_dir, &base_url)?;
            let mnist = load_mnist(&data.data_dir)?;
            println!(
                "ready: {} training and {} test samples in {}",
                mnist.train.len(),
                mnist.test.len(),
                data.data_dir.display()
            );
        }
        Command::Train { config, data, out, seed } => {
            let config = RunConfig::from_json(&read_to_string(&config)?)?;
            let model = config.build_model()?;
            let mnist = load_mnist(&data.data_dir)?;
            let params = train(&model, &config.train_settings(), &mnist.train, seed)?;
            save_param_store(
                &out,
                &params,
                &metadata(&[
                    ("stage", "train".into()),
                    ("model", config.model.clone()),
                    ("optimizer", config.train.optimizer.name().into()),
                    ("seed", seed.to_string()),
                ]),
            )?;
            let acc = evaluate_accuracy(&model, &[&params], &mnist.test, Combine::Probabilities)?;
            println!("trained {}: test accuracy {acc:.4} -> {}", config.model, out.display());
        }
        Command::Finetune { config, data, base, out, stats_out, seed } => {
            let config = RunConfig::from_json(&read_to_string(&config)?)?;
            let model = config.build_model()?;
            let mnist = load_mnist(&data.data_dir)?;
            let (params, _) = load_param_store::<f32>(&base)?;
            model.check_params(&params)?;
            let (finetuned, snapshot) =
                finetune_with_stats(&model, &params, &config.finetune_settings(), &mnist.train, seed)?;
            let meta = metadata(&[
                ("stage", "finetune".into()),
                ("model", config.model.clone()),
                ("optimizer", config.finetune.optimizer.name().into()),
                ("seed", seed.to_string()),
            ]);
            save_param_store(&out, &finetuned, &meta)?;
            save_snapshot(&stats_out, &snapshot, &meta)?;
            let acc = evaluate_accuracy(&model, &[&finetuned], &mnist.test, Combine::Probabilities)?;
            println!(
                "fine-tuned for {} updates: test accuracy {acc:.4} -> {} (stats -> {})",
                snapshot.count(),
                out.display(),
                stats_out.display()
            );
        }
        Command::Resample { base, stats, method, seed, out } => {
            let (params, _) = load_param_store::<f32>(&base)?;
            let (snapshot, _) = load_snapshot::<f32>(&stats)?;
            let (resampled, stage) = match method {
                ResampleArg::Mean => (resample_mean(&params, &snapshot)?, "resample-mean"),
                ResampleArg::Gaussian => {
                    (resample_gaussian(&params, &snapshot, seed)?, "resample-gaussian")
                }
            };
            save_param_store(
                &out,
                &resampled,
                &metadata(&[("stage", stage.into()), ("seed", seed.to_string())]),
            )?;
            println!("{stage} -> {}", out.display());
        }
        Command::Eval { config, data, weights, combine } => {
            let config = RunConfig::from_json(&read_to_string(&config)?)?;
            let model = config.build_model()?;
            let mnist = load_mnist(&data.data_dir)?;
            let mut members: Vec<ParamStore<f32>> = Vec::with_capacity(weights.len());
            for path in &weights {
                let (params, _) = load_param_store::<f32>(path)?;
                model.check_params(&params)?;
                members.push(params);
            }
            let refs: Vec<&ParamStore<f32>> = members.iter().collect();
            let acc = evaluate_accuracy(&model, &refs, &mnist.test, combine.into())?;
            println!("{acc:.6}");
        }
        Command::Grid { config, data, out_dir, smoke, threads, progress, cell_budget_secs } => {
            let config = GridConfig::from_json(&read_to_string(&config)?)?;
            let mnist = load_mnist(&data.data_dir)?;
            let options = GridOptions { threads, smoke, progress, cell_budget_secs };
            let report = run_experiment_grid(&config, &mnist, &options)?;
            let (results, summary) = report.write_csv_files(&out_dir)?;
            print!("{}", report.summary_csv());
            eprintln!(
                "wrote {} rows to {} (summary: {})",
                report.rows.len(),
                results.display(),
                summary.display()
            );
            for failure in &report.failures {
                eprintln!(
                    "cell failed: {} seed {}: {}",
                    failure.config_id, failure.seed, failure.message
                );
            }
            if report.rows.is_empty() {
                return Err(Error::Run("every grid cell failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
