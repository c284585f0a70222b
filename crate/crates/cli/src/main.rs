//! `twinvote`: generate synthetic data, train supervised or low-shot twin
//! models, fine-tune them with veto self-training and evaluate checkpoints.
//!
//! Every training subcommand takes an optional `--config` file (flat TOML)
//! and per-key flags that override it.

mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use twinvote_core::data::{write_index, IndexRecord, Partition};
use twinvote_core::experiment::{
    build_dataset, evaluate_model, run_lowshot, run_ovv, run_supervised, synthetic_pools, ExperimentConfig,
    ExperimentError, Mode,
};
use twinvote_core::model::{ModelError, TwinModel};
use twinvote_core::ovv::{DecisionSink, JsonlSink, NullSink};
use twinvote_core::train::TrainError;

#[derive(Parser, Debug)]
#[command(name = "twinvote", version, about = "Low-shot twin networks with one-vote-veto self-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset as an index plus raw feature files.
    GenSynthetic {
        /// Destination directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train the single-branch supervised baseline.
    TrainSupervised(RunArgs),
    /// Train the twin network on sampled pairs.
    TrainLowshot(RunArgs),
    /// Fine-tune a pretrained twin network with veto self-training.
    OvvFinetune(RunArgs),
    /// Score a checkpoint on one split.
    Evaluate(RunArgs),
}

/// Config file plus per-key overrides. Flag names are the config keys with
/// dashes.
#[derive(Args, Debug, Default, Serialize)]
struct RunArgs {
    /// Flat TOML file with any subset of the keys below.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    index: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    train_fraction: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    val_fraction: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    test_fraction: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    one_per_patient: Option<bool>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    synthetic_n0: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    synthetic_n1: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    synthetic_dim: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    synthetic_separation: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    synthetic_noise: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    synthetic_patients_per_class: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    synthetic_unlabeled: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    synthetic_val: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    synthetic_test: Option<usize>,

    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    hidden: Option<Vec<usize>>,
    /// Embedding distance: vad or vsd.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    phi: Option<String>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    learning_rate: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    decay_epoch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    decay_factor: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    max_epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    patience: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pairs_per_epoch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    balance_pairs: Option<bool>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    kappa1: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    kappa2: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    m: Option<usize>,
    /// all-confident or any-confident.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    veto_quantifier: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    require_consensus_match: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    ovv_epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    ovv_learning_rate: Option<f64>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<PathBuf>,
    /// train, val or test.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    eval_split: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    bootstrap_samples: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    write_decision_log: Option<bool>,
}

/// Failure classes, each with its own exit code.
#[derive(Debug, Clone, Copy)]
enum Category {
    Config,
    Data,
    Checkpoint,
    Training,
    Io,
}

impl Category {
    fn name(self) -> &'static str {
        match self {
            Category::Config => "config",
            Category::Data => "data",
            Category::Checkpoint => "checkpoint",
            Category::Training => "training",
            Category::Io => "io",
        }
    }

    fn exit_code(self) -> u8 {
        match self {
            Category::Config => 3,
            Category::Data => 4,
            Category::Checkpoint => 5,
            Category::Training => 6,
            Category::Io => 7,
        }
    }
}

struct Failure {
    category: Category,
    error: anyhow::Error,
}

type CliResult<T> = Result<T, Failure>;

trait Categorize<T> {
    fn category(self, category: Category) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Categorize<T> for Result<T, E> {
    fn category(self, category: Category) -> CliResult<T> {
        self.map_err(|e| Failure {
            category,
            error: e.into(),
        })
    }
}

fn classify(e: ExperimentError) -> Failure {
    let category = match &e {
        ExperimentError::Config(_) | ExperimentError::Train(TrainError::Config(_)) => Category::Config,
        ExperimentError::Data(_) | ExperimentError::Train(TrainError::Data(_)) => Category::Data,
        ExperimentError::Model(ModelError::Dim { .. }) => Category::Data,
        ExperimentError::Model(_) => Category::Checkpoint,
        _ => Category::Training,
    };
    Failure {
        category,
        error: e.into(),
    }
}

/// Layers the file config and flag overrides over the defaults.
fn resolve_config(args: &RunArgs, mode: Mode) -> CliResult<ExperimentConfig> {
    let mut table = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))
                .category(Category::Config)?;
            toml::from_str::<toml::Table>(&text)
                .with_context(|| format!("parsing config {}", path.display()))
                .category(Category::Config)?
        }
        None => toml::Table::new(),
    };
    let overrides = toml::Table::try_from(args).category(Category::Config)?;
    table.extend(overrides);
    table.insert("mode".into(), toml::Value::String(mode_name(mode).into()));
    let cfg: ExperimentConfig = table.try_into().context("invalid configuration").category(Category::Config)?;
    cfg.validate().map_err(classify)?;
    Ok(cfg)
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Supervised => "supervised",
        Mode::Lowshot => "lowshot",
        Mode::Ovv => "ovv",
        Mode::Eval => "eval",
    }
}

fn prepare_output(cfg: &ExperimentConfig) -> CliResult<()> {
    fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))
        .category(Category::Io)?;
    let text = toml::to_string(cfg).category(Category::Io)?;
    fs::write(cfg.output_dir.join("config.toml"), text).category(Category::Io)
}

fn load_checkpoint(path: &Path) -> CliResult<TwinModel> {
    let bytes = fs::read(path)
        .with_context(|| format!("missing checkpoint {}", path.display()))
        .category(Category::Checkpoint)?;
    TwinModel::from_checkpoint(&bytes)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .category(Category::Checkpoint)
}

fn gen_synthetic(out: &Path, args: &RunArgs) -> CliResult<()> {
    let cfg = resolve_config(args, Mode::Lowshot)?;
    let pools = synthetic_pools(&cfg).map_err(classify)?;
    let mut records = Vec::new();
    for (partition, samples) in pools {
        for s in samples {
            records.push(IndexRecord {
                id: s.id.clone(),
                path: PathBuf::from("features").join(format!("{}.bin", s.id)),
                features: s.features,
                label: (partition != Partition::Unlabeled).then_some(s.label),
                patient_id: s.patient_id,
                partition: Some(partition),
            });
        }
    }
    let index = write_index(out, &records).category(Category::Io)?;
    println!("{}", index.display());
    Ok(())
}

fn train(mode: Mode, args: &RunArgs) -> CliResult<()> {
    let cfg = resolve_config(args, mode)?;
    let data = build_dataset(&cfg).map_err(classify)?;
    prepare_output(&cfg)?;
    let run = match mode {
        Mode::Supervised => run_supervised(&cfg, &data),
        _ => run_lowshot(&cfg, &data),
    }
    .map_err(classify)?;
    let dir = &cfg.output_dir;
    output::write_checkpoint(dir, &run.outcome.model).category(Category::Io)?;
    output::write_train_history(dir, &run.outcome.history).category(Category::Io)?;
    output::write_reports(dir, &[("val", &run.reports.val), ("test", &run.reports.test)], Some(&run.pairs))
        .category(Category::Io)?;
    println!(
        "best epoch {} of {}; test auroc {}",
        run.outcome.best_epoch,
        run.outcome.history.len(),
        output::fmt_opt(run.reports.test.auroc)
    );
    Ok(())
}

fn ovv(args: &RunArgs) -> CliResult<()> {
    let cfg = resolve_config(args, Mode::Ovv)?;
    let pretrained = load_checkpoint(cfg.checkpoint.as_deref().expect("validated"))?;
    let data = build_dataset(&cfg).map_err(classify)?;
    if data.unlabeled.len() < cfg.m {
        return Err(anyhow!("unlabeled pool has {} samples, fewer than m = {}", data.unlabeled.len(), cfg.m))
            .category(Category::Data);
    }
    prepare_output(&cfg)?;
    let dir = &cfg.output_dir;
    let run = if cfg.write_decision_log {
        let file = fs::File::create(dir.join("decisions.jsonl")).category(Category::Io)?;
        let mut sink = JsonlSink(std::io::BufWriter::new(file));
        let run = run_ovv(&cfg, &data, pretrained, &mut sink as &mut dyn DecisionSink).map_err(classify)?;
        std::io::Write::flush(&mut sink.0).category(Category::Io)?;
        run
    } else {
        run_ovv(&cfg, &data, pretrained, &mut NullSink).map_err(classify)?
    };
    output::write_checkpoint(dir, &run.outcome.model).category(Category::Io)?;
    output::write_ovv_history(dir, &run.outcome.history).category(Category::Io)?;
    output::write_reports(dir, &[("val", &run.reports.val), ("test", &run.reports.test)], None)
        .category(Category::Io)?;
    println!(
        "best epoch {} of {}; validation fsc {} -> {}",
        run.outcome.best_epoch,
        run.outcome.history.len(),
        output::fmt_opt(run.outcome.initial_fsc),
        output::fmt_opt(run.outcome.history[run.outcome.best_epoch].target_fsc)
    );
    Ok(())
}

fn evaluate(args: &RunArgs) -> CliResult<()> {
    let cfg = resolve_config(args, Mode::Eval)?;
    let model = load_checkpoint(cfg.checkpoint.as_deref().expect("validated"))?;
    let data = build_dataset(&cfg).map_err(classify)?;
    let samples = data.split(cfg.eval_split);
    if samples.is_empty() {
        return Err(anyhow!("split {} is empty", cfg.eval_split.as_str())).category(Category::Data);
    }
    prepare_output(&cfg)?;
    let seed = twinvote_core::train::derive_seed(cfg.seed, 7);
    let report = evaluate_model(&model, &samples, cfg.bootstrap_samples, seed).map_err(classify)?;
    output::write_reports(&cfg.output_dir, &[(cfg.eval_split.as_str(), &report)], None).category(Category::Io)?;
    println!("{} auroc {}", cfg.eval_split.as_str(), output::fmt_opt(report.auroc));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let line = serde_json::json!({ "error": "usage", "message": e.to_string().trim() });
            eprintln!("{line}");
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::GenSynthetic { out, run } => gen_synthetic(out, run),
        Command::TrainSupervised(args) => train(Mode::Supervised, args),
        Command::TrainLowshot(args) => train(Mode::Lowshot, args),
        Command::OvvFinetune(args) => ovv(args),
        Command::Evaluate(args) => evaluate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let line = serde_json::json!({
                "error": f.category.name(),
                "message": format!("{:#}", f.error),
            });
            eprintln!("{line}");
            ExitCode::from(f.category.exit_code())
        }
    }
}
