//! Command-line interface: train, eval, predict, gradcheck, synth and
//! export, wired through one JSON run config with flag overrides.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use arsrank::checkpoint::{Checkpoint, CheckpointError};
use arsrank::config::{load_run_config, resolve_seed, ConfigError, LoadedConfig, RunConfig};
use arsrank::dataset::{
    level_histogram, load_dataset, load_dataset_permissive, save_dataset, synthesize_toy_dataset,
    DataError,
};
use arsrank::encoder::{EmbeddingStore, EncoderError};
use arsrank::trainer::{
    self, evaluate, export_embeddings, gradcheck, predict_to_csv, BackendChoice, EpochRecord,
    EvalReport, GradcheckConfig, StepRecord, TrainError, TrainLog,
};

#[derive(Parser)]
#[command(name = "arsrank", version, about = "Train and run an attentive relevance scorer for multiple-choice QA")]
struct Cli {
    /// JSON run-config file; flags override file values
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Master seed (precedence: this flag, config file, $ARSRANK_SEED)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Increase log verbosity (-v info, -vv debug)
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes a checkpoint and a JSONL metrics log
    Train {
        /// Labeled training dataset (JSONL)
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
        /// Embedding store (JSONL), required for the precomputed backend
        #[arg(long, value_name = "FILE")]
        store: Option<PathBuf>,
        /// Directory receiving model.ckpt and metrics.jsonl
        #[arg(long, value_name = "DIR")]
        checkpoint_dir: Option<PathBuf>,
        /// Metrics log path (default: <checkpoint_dir>/metrics.jsonl)
        #[arg(long, value_name = "FILE")]
        metrics: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Evaluate a checkpoint on a labeled dataset
    Eval {
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        store: Option<PathBuf>,
        /// Where to write the JSON report
        #[arg(long, value_name = "FILE", default_value = "eval_report.json")]
        report: PathBuf,
    },
    /// Write ranked predictions for a dataset (labels optional) as CSV
    Predict {
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        store: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        output: Option<PathBuf>,
    },
    /// Compare analytic gradients of the total loss with finite differences
    Gradcheck {
        /// Embedding dimension (<= 8)
        #[arg(long, default_value_t = 4)]
        dim: usize,
        /// Latent dimension of the scoring head (<= 8)
        #[arg(long, default_value_t = 4)]
        latent_dim: usize,
        /// Items per synthetic batch (<= 4)
        #[arg(long, default_value_t = 2)]
        batch_size: usize,
        /// Number of consecutive seeds to check, starting at the master seed
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Generate a synthetic learnable dataset
    Synth {
        #[arg(long, default_value_t = 500)]
        items: usize,
        #[arg(long, value_name = "FILE")]
        output: Option<PathBuf>,
    },
    /// Export toy-encoder embeddings for a dataset in store format
    Export {
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        output: Option<PathBuf>,
    },
}

/// Errors bucketed by exit code: 1 config, 2 data, 3 numerical.
#[derive(Debug)]
enum CliError {
    Config(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::Config(_) | TrainError::BackendMismatch(_) | TrainError::Checkpoint(_) => {
                CliError::Config(e.to_string())
            }
            TrainError::Data(_) | TrainError::Encoder(_) | TrainError::Io { .. } => {
                CliError::Data(e.to_string())
            }
            TrainError::NonFiniteLoss { .. }
            | TrainError::Optim(_)
            | TrainError::Loss(_)
            | TrainError::Ars(_) => CliError::Numerical(e.to_string()),
        }
    }
}

fn config_keys_help() -> String {
    let defaults = serde_json::to_string_pretty(&RunConfig::default()).expect("defaults serialize");
    format!(
        "CONFIG FILE: a JSON object with the keys below (all optional; flags win).\n\
         Defaults:\n{defaults}\n\nSeed fallback: the {} environment variable.",
        arsrank::config::SEED_ENV
    )
}

fn main() -> ExitCode {
    let command = Cli::command().after_help(config_keys_help());
    let cli = match Cli::from_arg_matches(&command.get_matches()) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };

    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::from_env(env_logger::Env::default())
        .filter_level(level)
        .init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn require_path(
    flag: Option<PathBuf>,
    from_config: Option<&PathBuf>,
    name: &'static str,
) -> Result<PathBuf, CliError> {
    flag.or_else(|| from_config.cloned())
        .ok_or_else(|| CliError::Config(format!("missing required path: {name} (flag or config)")))
}

fn load_store_if_needed(
    backend: BackendChoice,
    flag: Option<PathBuf>,
    loaded: &LoadedConfig,
) -> Result<Option<EmbeddingStore>, CliError> {
    if backend != BackendChoice::Precomputed {
        return Ok(None);
    }
    let path = require_path(flag, loaded.config.paths.embedding_store.as_ref(), "embedding store")?;
    Ok(Some(EmbeddingStore::load(&path)?))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let loaded = load_run_config(cli.config.as_deref())?;
    let seed = resolve_seed(cli.seed, &loaded)?;

    match cli.command {
        Command::Train { data, store, checkpoint_dir, metrics, epochs, batch_size } => {
            let mut config = loaded.config.train.clone();
            config.seed = seed;
            if let Some(epochs) = epochs {
                config.epochs = epochs;
            }
            if let Some(batch_size) = batch_size {
                config.batch_size = batch_size;
            }
            if let Some(dir) = checkpoint_dir {
                config.checkpoint_dir = dir;
            }

            let data_path = require_path(data, loaded.config.paths.train_data.as_ref(), "training data")?;
            let items = load_dataset(&data_path)?;
            let hist = level_histogram(&items);
            log::info!("loaded {} items from {}: {:?}", items.len(), data_path.display(), hist);

            let store = load_store_if_needed(config.backend, store, &loaded)?;
            let outcome = trainer::train(&config, &items, store.as_ref())?;

            std::fs::create_dir_all(&config.checkpoint_dir).map_err(|e| {
                CliError::Config(format!("cannot create {}: {e}", config.checkpoint_dir.display()))
            })?;
            let ckpt_path = config.checkpoint_dir.join("model.ckpt");
            outcome.checkpoint.save(&ckpt_path)?;
            let metrics_path = metrics
                .or(loaded.config.paths.metrics.clone())
                .unwrap_or_else(|| config.checkpoint_dir.join("metrics.jsonl"));
            write_metrics(&outcome.log, &metrics_path)?;

            let last = outcome.log.epochs.last().expect("at least one epoch");
            println!(
                "trained {} epochs ({} steps); final mean loss {:.6}, train accuracy {:.4}",
                config.epochs, outcome.checkpoint.step, last.mean_loss, last.train_accuracy
            );
            println!("checkpoint: {}", ckpt_path.display());
            println!("metrics:    {}", metrics_path.display());
            Ok(())
        }

        Command::Eval { checkpoint, data, store, report } => {
            let ckpt_path = require_path(checkpoint, loaded.config.paths.checkpoint.as_ref(), "checkpoint")?;
            let ckpt = Checkpoint::load(&ckpt_path)?;
            let data_path = require_path(data, loaded.config.paths.eval_data.as_ref(), "eval data")?;
            let items = load_dataset(&data_path)?;
            let store = load_store_if_needed(ckpt.config.backend, store, &loaded)?;
            let eval = evaluate(&ckpt.params, &ckpt.config, &items, store.as_ref())?;
            print_eval_table(&eval);
            let json = serde_json::to_string_pretty(&eval)
                .map_err(|e| CliError::Data(format!("cannot serialize report: {e}")))?;
            std::fs::write(&report, json)
                .map_err(|e| CliError::Data(format!("cannot write {}: {e}", report.display())))?;
            println!("report written to {}", report.display());
            Ok(())
        }

        Command::Predict { checkpoint, data, store, output } => {
            let ckpt_path = require_path(checkpoint, loaded.config.paths.checkpoint.as_ref(), "checkpoint")?;
            let ckpt = Checkpoint::load(&ckpt_path)?;
            let data_path = require_path(data, loaded.config.paths.predict_data.as_ref(), "predict data")?;
            let items = load_dataset_permissive(&data_path)?;
            let store = load_store_if_needed(ckpt.config.backend, store, &loaded)?;
            let out = output
                .or(loaded.config.paths.output.clone())
                .unwrap_or_else(|| PathBuf::from("predictions.csv"));
            predict_to_csv(&ckpt.params, &ckpt.config, &items, store.as_ref(), &out)?;
            println!("predictions for {} items written to {}", items.len(), out.display());
            Ok(())
        }

        Command::Gradcheck { dim, latent_dim, batch_size, seeds } => {
            if dim > 8 || latent_dim > 8 || batch_size > 4 || batch_size == 0 || seeds == 0 {
                return Err(CliError::Config(
                    "gradcheck bounds: dim <= 8, latent_dim <= 8, 1 <= batch_size <= 4, seeds >= 1".into(),
                ));
            }
            let mut worst: Option<trainer::GradcheckReport> = None;
            for offset in 0..seeds {
                let cfg = GradcheckConfig {
                    latent_dim,
                    embedding_dim: dim,
                    batch_size,
                    seed: seed.wrapping_add(offset),
                    ..GradcheckConfig::default()
                };
                let report = gradcheck(&cfg)?;
                println!(
                    "seed {}: max relative error {:.3e} over {} coordinates ({})",
                    report.seed,
                    report.max_rel_error,
                    report.coords_checked,
                    if report.pass { "pass" } else { "FAIL" }
                );
                if worst.as_ref().is_none_or(|w| report.max_rel_error > w.max_rel_error) {
                    worst = Some(report);
                }
            }
            let worst = worst.expect("at least one seed");
            if worst.pass {
                println!("gradcheck passed: max relative error {:.3e}", worst.max_rel_error);
                Ok(())
            } else {
                Err(CliError::Numerical(format!(
                    "gradient check failed: max relative error {:.3e} at {}[{}] (seed {})",
                    worst.max_rel_error, worst.worst_tensor, worst.worst_index, worst.seed
                )))
            }
        }

        Command::Synth { items, output } => {
            if items == 0 {
                return Err(CliError::Config("--items must be at least 1".into()));
            }
            let out = output
                .or(loaded.config.paths.output.clone())
                .unwrap_or_else(|| PathBuf::from("synthetic.jsonl"));
            let dataset = synthesize_toy_dataset(items, seed);
            save_dataset(&out, &dataset)?;
            println!("wrote {} synthetic items to {} ({:?})", items, out.display(), level_histogram(&dataset));
            Ok(())
        }

        Command::Export { checkpoint, data, output } => {
            let ckpt_path = require_path(checkpoint, loaded.config.paths.checkpoint.as_ref(), "checkpoint")?;
            let ckpt = Checkpoint::load(&ckpt_path)?;
            let data_path = require_path(data, loaded.config.paths.predict_data.as_ref(), "dataset")?;
            let items = load_dataset_permissive(&data_path)?;
            let out = output
                .or(loaded.config.paths.output.clone())
                .unwrap_or_else(|| PathBuf::from("embeddings.jsonl"));
            export_embeddings(&ckpt.params, &items, &out)?;
            println!("embeddings for {} items written to {}", items.len(), out.display());
            Ok(())
        }
    }
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum MetricLine<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
}

/// Chronological JSONL: the steps of each epoch, then its summary line.
fn write_metrics(log: &TrainLog, path: &Path) -> Result<(), CliError> {
    let io_err = |e: std::io::Error| CliError::Data(format!("cannot write {}: {e}", path.display()));
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for epoch in &log.epochs {
        for step in log.steps.iter().filter(|s| s.epoch == epoch.epoch) {
            let line = serde_json::to_string(&MetricLine::Step(step)).expect("record serializes");
            writeln!(out, "{line}").map_err(io_err)?;
        }
        let line = serde_json::to_string(&MetricLine::Epoch(epoch)).expect("record serializes");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

fn print_eval_table(report: &EvalReport) {
    println!("{:<14} {:>8} {:>8} {:>10}", "level", "correct", "total", "accuracy");
    for (level, stats) in &report.per_level {
        println!(
            "{:<14} {:>8} {:>8} {:>10.4}",
            level.to_string(),
            stats.correct,
            stats.total,
            stats.accuracy
        );
    }
    println!(
        "{:<14} {:>8} {:>8} {:>10.4}",
        "overall", report.correct, report.total, report.overall_accuracy
    );
}
