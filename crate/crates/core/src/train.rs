//! Training loops: a single-branch supervised baseline, low-shot twin
//! training on sampled pairs, and veto-filtered self-training. All three
//! keep the model with the best validation F-score and stop early once it
//! has not improved for `patience` epochs.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Graph;
use crate::data::{make_ssl_batches, sample_pairs, DataError, LabeledSample, UnlabeledSample};
use crate::loss::{weight_cla, ClassCounts, LossError, LossWeights, DEFAULT_LAMBDA};
use crate::metrics::{basic_metrics, confusion, MetricsError};
use crate::model::{ModelError, TwinModel};
use crate::optim::{sgd_step, OptimError, SgdConfig};
use crate::ovv::{ovv_epoch, promote_reference, DecisionSink, EpochStats, ModelRoles, OvvConfig, OvvError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Ovv(#[from] OvvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Index of the first strict maximum; a missing score ranks below any
/// present one.
pub fn best_index(history: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, Option<f64>)> = None;
    for (k, &v) in history.iter().enumerate() {
        let better = match best {
            None => true,
            Some((_, b)) => match (v, b) {
                (Some(v), Some(b)) => v > b,
                (Some(_), None) => true,
                _ => false,
            },
        };
        if better {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k)
}

/// Stop once the best score lies more than `patience` epochs back. Equal
/// scores do not count as improvement.
pub fn early_stopper(history: &[Option<f64>], patience: usize) -> StopDecision {
    match best_index(history) {
        Some(best) if history.len() - 1 - best > patience => StopDecision::Stop,
        _ => StopDecision::Continue,
    }
}

/// Validation F-score at threshold 0.5.
pub fn validation_fsc(model: &TwinModel, samples: &[LabeledSample]) -> Result<Option<f64>, TrainError> {
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.features.as_slice()).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let scores = model.predict_proba(&rows)?;
    Ok(basic_metrics(&confusion(&labels, &scores, 0.5)?).fsc)
}

/// Per-epoch seed, independent across `(seed, stream)`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    /// Samples (supervised) or pairs (low-shot) per gradient step.
    pub batch_size: usize,
    /// Pairs drawn afresh every low-shot epoch.
    pub pairs_per_epoch: usize,
    pub balance_pairs: bool,
    pub lambda: f64,
    pub sgd: SgdConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            patience: 30,
            batch_size: 32,
            pairs_per_epoch: 2048,
            balance_pairs: false,
            lambda: DEFAULT_LAMBDA,
            sgd: SgdConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("max_epochs and batch_size must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(TrainError::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        self.sgd.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_fsc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the best validation epoch.
    pub model: TwinModel,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Shared epoch loop: `step` runs one epoch and returns its mean loss.
fn fit<F>(
    mut model: TwinModel,
    val: &[LabeledSample],
    cfg: &TrainConfig,
    mut step: F,
) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(&mut TwinModel, usize) -> Result<f64, TrainError>,
{
    cfg.validate()?;
    let mut history = Vec::new();
    let mut scores = Vec::new();
    let mut best = model.clone();
    let mut stopped_early = false;
    for epoch in 0..cfg.max_epochs {
        let train_loss = step(&mut model, epoch)?;
        let val_fsc = validation_fsc(&model, val)?;
        scores.push(val_fsc);
        history.push(EpochRecord {
            epoch,
            learning_rate: cfg.sgd.lr_at(epoch),
            train_loss,
            val_fsc,
        });
        if best_index(&scores) == Some(epoch) {
            best = model.clone();
        }
        if early_stopper(&scores, cfg.patience) == StopDecision::Stop {
            stopped_early = epoch + 1 < cfg.max_epochs;
            break;
        }
    }
    Ok(TrainOutcome {
        model: best,
        best_epoch: best_index(&scores).unwrap_or(0),
        history,
        stopped_early,
    })
}

fn apply_gradients(
    model: &mut TwinModel,
    g: &Graph,
    pv: &crate::model::ParamVars,
    loss: crate::autodiff::Var,
    sgd: &SgdConfig,
    epoch: usize,
) -> Result<f64, TrainError> {
    let value = g.value(loss).item().unwrap_or(f64::NAN);
    let mut grads = g.backward(loss).map_err(ModelError::from)?;
    let grads = model.params().collect_grads(pv.as_slice(), &mut grads);
    sgd_step(model.params_mut(), &grads, sgd, epoch)?;
    Ok(value)
}

/// Backbone plus classification head on single samples, class-weighted
/// cross-entropy, shuffled minibatches. The similarity head is untouched.
pub fn train_supervised(
    model: TwinModel,
    train: &[LabeledSample],
    val: &[LabeledSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let counts = ClassCounts::from_labels(train.iter().map(|s| s.label), 2)?;
    let omega = weight_cla(&counts)?;
    fit(model, val, cfg, |model, epoch| {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64)));
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let x: Vec<&[f64]> = chunk.iter().map(|&k| train[k].features.as_slice()).collect();
            let y: Vec<usize> = chunk.iter().map(|&k| train[k].label).collect();
            let mut g = Graph::new();
            let pv = model.register(&mut g);
            let loss = model.classification_loss_graph(&mut g, &pv, &x, &y, omega)?;
            total += apply_gradients(model, &g, &pv, loss, &cfg.sgd, epoch)?;
            steps += 1;
        }
        Ok(total / steps.max(1) as f64)
    })
}

/// Twin training on cross-patient pairs resampled every epoch, minimizing
/// the combined classification and similarity loss.
pub fn train_lowshot(
    model: TwinModel,
    train: &[LabeledSample],
    val: &[LabeledSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let counts = ClassCounts::from_labels(train.iter().map(|s| s.label), 2)?;
    let weights = LossWeights::from_counts(&counts, cfg.lambda)?;
    fit(model, val, cfg, |model, epoch| {
        let batch = sample_pairs(train, cfg.pairs_per_epoch, derive_seed(cfg.seed, epoch as u64), cfg.balance_pairs)?;
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in batch.pairs.chunks(cfg.batch_size) {
            let xi: Vec<&[f64]> = chunk.iter().map(|p| train[p.i].features.as_slice()).collect();
            let xj: Vec<&[f64]> = chunk.iter().map(|p| train[p.j].features.as_slice()).collect();
            let yi: Vec<usize> = chunk.iter().map(|p| train[p.i].label).collect();
            let yj: Vec<usize> = chunk.iter().map(|p| train[p.j].label).collect();
            let mut g = Graph::new();
            let pv = model.register(&mut g);
            let loss = model.pair_loss_graph(&mut g, &pv, &xi, &xj, &yi, &yj, &weights)?;
            total += apply_gradients(model, &g, &pv, loss, &cfg.sgd, epoch)?;
            steps += 1;
        }
        Ok(total / steps.max(1) as f64)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OvvTrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub sgd: SgdConfig,
    pub ovv: OvvConfig,
    pub seed: u64,
}

impl Default for OvvTrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 50,
            patience: 30,
            sgd: SgdConfig::default(),
            ovv: OvvConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OvvEpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub stats: EpochStats,
    /// Accepted pseudo labels over targets seen.
    pub acceptance_rate: f64,
    pub target_fsc: Option<f64>,
    pub reference_fsc: Option<f64>,
    pub promoted: bool,
}

#[derive(Debug, Clone)]
pub struct OvvOutcome {
    /// Target weights from the best validation epoch.
    pub model: TwinModel,
    pub best_epoch: usize,
    /// Validation F-score of the pretrained model.
    pub initial_fsc: Option<f64>,
    pub history: Vec<OvvEpochRecord>,
    pub stopped_early: bool,
}

/// Self-training from a pretrained twin model. Each epoch runs one veto
/// pass over the unlabeled pool, then promotes the target to reference if
/// it validates strictly better.
pub fn train_ovv(
    pretrained: TwinModel,
    labeled: &[LabeledSample],
    unlabeled: &[UnlabeledSample],
    val: &[LabeledSample],
    cfg: &OvvTrainConfig,
    sink: &mut dyn DecisionSink,
) -> Result<OvvOutcome, TrainError> {
    if cfg.max_epochs == 0 {
        return Err(TrainError::Config("max_epochs must be at least 1".into()));
    }
    cfg.sgd.validate()?;
    cfg.ovv.validate()?;
    let initial_fsc = validation_fsc(&pretrained, val)?;
    let mut reference_fsc = initial_fsc;
    let mut roles = ModelRoles::from_pretrained(pretrained);
    let mut best = roles.target.clone();
    let mut scores = Vec::new();
    let mut history = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..cfg.max_epochs {
        let batches = make_ssl_batches(labeled, unlabeled, cfg.ovv.m, derive_seed(cfg.seed, epoch as u64))?;
        let stats = ovv_epoch(&mut roles, batches, &cfg.ovv, &cfg.sgd, epoch, sink)?;
        let target_fsc = validation_fsc(&roles.target, val)?;
        let fsc_before = reference_fsc;
        let promoted = promote_reference(&mut roles, reference_fsc, target_fsc);
        if promoted {
            reference_fsc = target_fsc;
        }
        let seen = stats.accepted + stats.rejected;
        history.push(OvvEpochRecord {
            epoch,
            learning_rate: cfg.sgd.lr_at(epoch),
            stats,
            acceptance_rate: if seen == 0 { 0.0 } else { stats.accepted as f64 / seen as f64 },
            target_fsc,
            reference_fsc: fsc_before,
            promoted,
        });
        scores.push(target_fsc);
        if best_index(&scores) == Some(epoch) {
            best = roles.target.clone();
        }
        if early_stopper(&scores, cfg.patience) == StopDecision::Stop {
            stopped_early = epoch + 1 < cfg.max_epochs;
            break;
        }
    }
    Ok(OvvOutcome {
        model: best,
        best_epoch: best_index(&scores).unwrap_or(0),
        initial_fsc,
        history,
        stopped_early,
    })
}
