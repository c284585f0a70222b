//! Experiment orchestration: a flat configuration, dataset assembly and the
//! supervised, low-shot, self-training and evaluation runs. File output is
//! left to the caller.

use std::collections::HashMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    count_pairs, gen_synthetic, load_index, select_one_per_patient, split_by_patient, DataError, LabeledSample,
    Partition, SyntheticSpec, UnlabeledSample,
};
use crate::loss::DEFAULT_LAMBDA;
use crate::metrics::{evaluate_scores, MetricReport, MetricsError, MIN_RESAMPLES};
use crate::model::{ModelConfig, ModelError, Phi, TwinModel};
use crate::optim::SgdConfig;
use crate::ovv::{DecisionSink, OvvConfig, VetoQuantifier};
use crate::train::{
    derive_seed, train_lowshot, train_ovv, train_supervised, OvvOutcome, OvvTrainConfig, TrainConfig, TrainError,
    TrainOutcome,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Supervised,
    Lowshot,
    Ovv,
    Eval,
}

/// Every knob of a run. Keys are flat so the whole thing fits in one
/// key-value file; any key may be omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    pub output_dir: PathBuf,

    /// Index file of a prepared dataset; synthetic data is generated when
    /// absent.
    pub index: Option<PathBuf>,
    /// Patient-level split for labeled index rows without a split column.
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Keep a single sample per patient in the training set.
    pub one_per_patient: bool,

    pub synthetic_n0: usize,
    pub synthetic_n1: usize,
    pub synthetic_dim: usize,
    pub synthetic_separation: f64,
    pub synthetic_noise: f64,
    pub synthetic_patients_per_class: usize,
    /// Sizes of the generated pools; class ratio follows n0:n1.
    pub synthetic_unlabeled: usize,
    pub synthetic_val: usize,
    pub synthetic_test: usize,

    pub hidden: Vec<usize>,
    pub phi: Phi,

    pub lambda: f64,
    pub learning_rate: f64,
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub pairs_per_epoch: usize,
    pub balance_pairs: bool,

    pub kappa1: usize,
    pub kappa2: f64,
    pub m: usize,
    pub veto_quantifier: VetoQuantifier,
    pub require_consensus_match: bool,
    pub ovv_epochs: usize,
    /// Fine-tuning learning rate; `learning_rate` when unset.
    pub ovv_learning_rate: Option<f64>,

    /// Pretrained model for `ovv`, model to score for `eval`.
    pub checkpoint: Option<PathBuf>,
    pub eval_split: Partition,
    pub bootstrap_samples: usize,
    pub write_decision_log: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Lowshot,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            index: None,
            train_fraction: 0.6,
            val_fraction: 0.2,
            test_fraction: 0.2,
            one_per_patient: true,
            synthetic_n0: 995,
            synthetic_n1: 152,
            synthetic_dim: 16,
            synthetic_separation: 3.0,
            synthetic_noise: 1.0,
            synthetic_patients_per_class: 1000,
            synthetic_unlabeled: 10_000,
            synthetic_val: 1000,
            synthetic_test: 2000,
            hidden: vec![32, 16],
            phi: Phi::Vad,
            lambda: DEFAULT_LAMBDA,
            learning_rate: 0.001,
            decay_epoch: 100,
            decay_factor: 0.98,
            max_epochs: 200,
            patience: 30,
            batch_size: 32,
            pairs_per_epoch: 2048,
            balance_pairs: false,
            kappa1: 0,
            kappa2: 0.01,
            m: 20,
            veto_quantifier: VetoQuantifier::AllConfident,
            require_consensus_match: false,
            ovv_epochs: 10,
            ovv_learning_rate: None,
            checkpoint: None,
            eval_split: Partition::Test,
            bootstrap_samples: 1000,
            write_decision_log: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let err = |m: String| Err(ExperimentError::Config(m));
        if matches!(self.mode, Mode::Ovv | Mode::Eval) && self.checkpoint.is_none() {
            return err(format!("mode {:?} requires `checkpoint`", self.mode));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return err("`hidden` needs at least one non-zero layer width".into());
        }
        if self.index.is_none() {
            if self.synthetic_val == 0 || self.synthetic_test == 0 {
                return err("synthetic_val and synthetic_test must be positive".into());
            }
            if self.mode == Mode::Ovv && self.synthetic_unlabeled < self.m {
                return err(format!("synthetic_unlabeled must be at least m = {}", self.m));
            }
        }
        if self.bootstrap_samples != 0 && self.bootstrap_samples < MIN_RESAMPLES {
            return err(format!(
                "bootstrap_samples must be 0 (no interval) or at least {MIN_RESAMPLES}, got {}",
                self.bootstrap_samples
            ));
        }
        self.train_config().validate()?;
        self.ovv_train_config().ovv.validate().map_err(TrainError::from)?;
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            decay_epoch: self.decay_epoch,
            decay_factor: self.decay_factor,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            max_epochs: self.max_epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            pairs_per_epoch: self.pairs_per_epoch,
            balance_pairs: self.balance_pairs,
            lambda: self.lambda,
            sgd: self.sgd(),
            seed: derive_seed(self.seed, 101),
        }
    }

    pub fn ovv_train_config(&self) -> OvvTrainConfig {
        OvvTrainConfig {
            max_epochs: self.ovv_epochs,
            patience: self.patience,
            sgd: SgdConfig {
                learning_rate: self.ovv_learning_rate.unwrap_or(self.learning_rate),
                ..self.sgd()
            },
            ovv: OvvConfig {
                kappa1: self.kappa1,
                kappa2: self.kappa2,
                m: self.m,
                veto_quantifier: self.veto_quantifier,
                require_consensus_match: self.require_consensus_match,
            },
            seed: derive_seed(self.seed, 103),
        }
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden: self.hidden.clone(),
            phi: self.phi,
        }
    }

    pub fn synthetic_spec(&self, seed: u64, n0: usize, n1: usize) -> SyntheticSpec {
        SyntheticSpec {
            seed,
            n0,
            n1,
            dim: self.synthetic_dim,
            separation: self.synthetic_separation,
            noise: self.synthetic_noise,
            patients_per_class: self.synthetic_patients_per_class,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<LabeledSample>,
    pub val: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub unlabeled: Vec<UnlabeledSample>,
}

impl Dataset {
    pub fn input_dim(&self) -> Option<usize> {
        self.train
            .first()
            .or(self.val.first())
            .or(self.test.first())
            .map(|s| s.features.len())
            .or(self.unlabeled.first().map(|s| s.features.len()))
    }

    pub fn split(&self, which: Partition) -> Vec<LabeledSample> {
        match which {
            Partition::Train => self.train.clone(),
            Partition::Validation => self.val.clone(),
            Partition::Test => self.test.clone(),
            Partition::Unlabeled => Vec::new(),
        }
    }
}

/// `(n0, n1)` for a pool of `total` samples at the ratio `n0 : n1`, with at
/// least one sample of each class.
fn scaled_counts(total: usize, n0: usize, n1: usize) -> (usize, usize) {
    let pos = ((total as f64) * n1 as f64 / (n0 + n1) as f64).round() as usize;
    let pos = pos.clamp(1, total.saturating_sub(1).max(1));
    (total.saturating_sub(pos).max(1), pos)
}

/// The four synthetic pools with their partitions: training (exactly
/// `n0 + n1`), validation, test and unlabeled. Pools come from independent
/// generator seeds, so ids never collide across pools.
pub fn synthetic_pools(cfg: &ExperimentConfig) -> Result<Vec<(Partition, Vec<LabeledSample>)>, ExperimentError> {
    let (n0, n1) = (cfg.synthetic_n0, cfg.synthetic_n1);
    let pool = |stream: u64, total: usize| {
        let (a, b) = scaled_counts(total, n0, n1);
        gen_synthetic(&cfg.synthetic_spec(derive_seed(cfg.seed, stream), a, b))
    };
    let mut pools = vec![
        (Partition::Train, gen_synthetic(&cfg.synthetic_spec(derive_seed(cfg.seed, 1), n0, n1))?),
        (Partition::Validation, pool(2, cfg.synthetic_val)?),
        (Partition::Test, pool(3, cfg.synthetic_test)?),
    ];
    if cfg.synthetic_unlabeled > 0 {
        pools.push((Partition::Unlabeled, pool(4, cfg.synthetic_unlabeled)?));
    }
    Ok(pools)
}

fn synthetic_dataset(cfg: &ExperimentConfig) -> Result<Dataset, ExperimentError> {
    let mut data = Dataset::default();
    for (partition, samples) in synthetic_pools(cfg)? {
        match partition {
            Partition::Train => data.train = samples,
            Partition::Validation => data.val = samples,
            Partition::Test => data.test = samples,
            Partition::Unlabeled => data.unlabeled = samples.iter().map(LabeledSample::without_label).collect(),
        }
    }
    Ok(data)
}

fn index_dataset(cfg: &ExperimentConfig, path: &std::path::Path) -> Result<Dataset, ExperimentError> {
    let records = load_index(path, 2)?;
    let mut data = Dataset::default();
    let mut unassigned = Vec::new();
    for r in &records {
        match (r.partition, r.labeled()) {
            (Some(Partition::Unlabeled), _) => data.unlabeled.push(r.unlabeled()),
            (Some(Partition::Train), Some(s)) => data.train.push(s),
            (Some(Partition::Validation), Some(s)) => data.val.push(s),
            (Some(Partition::Test), Some(s)) => data.test.push(s),
            (None, Some(s)) => unassigned.push(s),
            // unlabeled rows are only accepted with an explicit split
            (_, None) => data.unlabeled.push(r.unlabeled()),
        }
    }
    if !unassigned.is_empty() {
        let fractions = [cfg.train_fraction, cfg.val_fraction, cfg.test_fraction];
        let split = split_by_patient(&unassigned, fractions, derive_seed(cfg.seed, 5))?;
        let mut by_id: HashMap<String, LabeledSample> = unassigned.into_iter().map(|s| (s.id.clone(), s)).collect();
        let [train, val, test] = split.partitions();
        for (ids, out) in [(train, &mut data.train), (val, &mut data.val), (test, &mut data.test)] {
            out.extend(ids.iter().filter_map(|id| by_id.remove(id)));
        }
    }
    Ok(data)
}

/// Loads or generates the data a run needs, then applies the
/// one-sample-per-patient reduction to the training split.
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset, ExperimentError> {
    let mut data = match &cfg.index {
        Some(path) => index_dataset(cfg, path)?,
        None => synthetic_dataset(cfg)?,
    };
    if cfg.one_per_patient {
        data.train = select_one_per_patient(&data.train, derive_seed(cfg.seed, 6));
    }
    Ok(data)
}

/// How many pairs the training set offers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCountReport {
    pub samples: u64,
    /// All unordered pairs.
    pub all_pairs: u64,
    /// Pairs left after removing same-patient pairs.
    pub cross_patient_pairs: u64,
}

pub fn pair_count_report(samples: &[LabeledSample]) -> PairCountReport {
    let mut per_patient: HashMap<&str, u64> = HashMap::new();
    for s in samples {
        *per_patient.entry(&s.patient_id).or_default() += 1;
    }
    let n = samples.len() as u64;
    let same: u64 = per_patient.values().map(|&k| count_pairs(k)).sum();
    PairCountReport {
        samples: n,
        all_pairs: count_pairs(n),
        cross_patient_pairs: count_pairs(n) - same,
    }
}

pub fn evaluate_model(
    model: &TwinModel,
    samples: &[LabeledSample],
    bootstrap_samples: usize,
    seed: u64,
) -> Result<MetricReport, ExperimentError> {
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.features.as_slice()).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let scores = model.predict_proba(&rows)?;
    Ok(evaluate_scores(&labels, &scores, bootstrap_samples, seed)?)
}

/// Reports on the validation and test splits.
#[derive(Debug, Clone)]
pub struct Reports {
    pub val: MetricReport,
    pub test: MetricReport,
}

fn reports(cfg: &ExperimentConfig, model: &TwinModel, data: &Dataset) -> Result<Reports, ExperimentError> {
    let seed = derive_seed(cfg.seed, 7);
    Ok(Reports {
        val: evaluate_model(model, &data.val, cfg.bootstrap_samples, seed)?,
        test: evaluate_model(model, &data.test, cfg.bootstrap_samples, seed)?,
    })
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub outcome: TrainOutcome,
    pub reports: Reports,
    pub pairs: PairCountReport,
}

fn initial_model(cfg: &ExperimentConfig, data: &Dataset) -> Result<TwinModel, ExperimentError> {
    let dim = data
        .input_dim()
        .ok_or_else(|| ExperimentError::Config("dataset is empty".into()))?;
    Ok(TwinModel::new(cfg.model_config(dim), derive_seed(cfg.seed, 102))?)
}

/// Single-branch baseline on the training split.
pub fn run_supervised(cfg: &ExperimentConfig, data: &Dataset) -> Result<TrainRun, ExperimentError> {
    let outcome = train_supervised(initial_model(cfg, data)?, &data.train, &data.val, &cfg.train_config())?;
    Ok(TrainRun {
        reports: reports(cfg, &outcome.model, data)?,
        outcome,
        pairs: pair_count_report(&data.train),
    })
}

/// Twin training on pairs from the training split. Starts from the same
/// initial weights as [`run_supervised`] for a given seed.
pub fn run_lowshot(cfg: &ExperimentConfig, data: &Dataset) -> Result<TrainRun, ExperimentError> {
    let outcome = train_lowshot(initial_model(cfg, data)?, &data.train, &data.val, &cfg.train_config())?;
    Ok(TrainRun {
        reports: reports(cfg, &outcome.model, data)?,
        outcome,
        pairs: pair_count_report(&data.train),
    })
}

#[derive(Debug, Clone)]
pub struct OvvRun {
    pub outcome: OvvOutcome,
    pub reports: Reports,
}

/// Self-training from `pretrained`, voting with the training split as
/// references over the unlabeled pool.
pub fn run_ovv(
    cfg: &ExperimentConfig,
    data: &Dataset,
    pretrained: TwinModel,
    sink: &mut dyn DecisionSink,
) -> Result<OvvRun, ExperimentError> {
    if let Some(dim) = data.input_dim() {
        if dim != pretrained.config().input_dim {
            return Err(ModelError::Dim {
                expected: pretrained.config().input_dim,
                found: dim,
            }
            .into());
        }
    }
    let outcome = train_ovv(pretrained, &data.train, &data.unlabeled, &data.val, &cfg.ovv_train_config(), sink)?;
    Ok(OvvRun {
        reports: reports(cfg, &outcome.model, data)?,
        outcome,
    })
}
