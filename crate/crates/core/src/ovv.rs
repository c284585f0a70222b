//! One-vote-veto self-training.
//!
//! A frozen *reference* model labels unlabeled *targets*. A target's own
//! prediction becomes its pseudo label only if it is confident and the
//! labeled references of the same batch, voting through the similarity
//! head, agree with each other (at most `kappa1` dissenters) and are
//! themselves confident. Only references whose own prediction is within
//! `kappa2` of their ground truth may vote. Each batch's accepted targets,
//! plus the qualified references, fine-tune the *target* model for one step.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Graph;
use crate::data::SslBatch;
use crate::loss::{weight_cla, ClassCounts};
use crate::model::{ModelError, TwinModel};
use crate::optim::{sgd_step, OptimError, SgdConfig};

#[derive(Debug, Error)]
pub enum OvvError {
    #[error("invalid self-training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("decision log: {0}")]
    Log(#[from] std::io::Error),
}

/// How the vote-confidence condition quantifies over the votes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum VetoQuantifier {
    /// Every vote must be confident.
    #[default]
    AllConfident,
    /// At least one vote must be confident.
    AnyConfident,
}

impl std::str::FromStr for VetoQuantifier {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all-confident" | "all" => Ok(Self::AllConfident),
            "any-confident" | "any" => Ok(Self::AnyConfident),
            other => Err(format!("unknown veto quantifier {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OvvConfig {
    /// Tolerated number of dissenting voters.
    pub kappa1: usize,
    /// Confidence margin, in (0, 0.5).
    pub kappa2: f64,
    /// References (and targets) per batch.
    pub m: usize,
    pub veto_quantifier: VetoQuantifier,
    /// Also require the vote majority to agree with the self-prediction.
    pub require_consensus_match: bool,
}

impl Default for OvvConfig {
    fn default() -> Self {
        Self {
            kappa1: 0,
            kappa2: 0.01,
            m: 20,
            veto_quantifier: VetoQuantifier::AllConfident,
            require_consensus_match: false,
        }
    }
}

impl OvvConfig {
    pub fn validate(&self) -> Result<(), OvvError> {
        if !(self.kappa2 > 0.0 && self.kappa2 < 0.5) {
            return Err(OvvError::Config(format!("kappa2 must lie in (0, 0.5), got {}", self.kappa2)));
        }
        if self.m == 0 {
            return Err(OvvError::Config("m must be at least 1".into()));
        }
        Ok(())
    }
}

/// `1` iff `p > 0.5`.
pub fn delta_threshold(p: f64) -> usize {
    usize::from(p > 0.5)
}

/// Positive-class probability of a target inferred from a reference:
/// `|p_r - q|`.
pub fn contrastive_prob(p_r: f64, q: f64) -> f64 {
    (p_r - q).abs()
}

/// Label of a target inferred from a reference: the reference's label,
/// flipped when the pair looks dissimilar.
pub fn contrastive_label(p_r: f64, q: f64) -> usize {
    delta_threshold(p_r) ^ delta_threshold(q)
}

pub fn qualify_reference(p_r: f64, y_r: usize, kappa2: f64) -> bool {
    (p_r - y_r as f64).abs() < kappa2
}

pub fn target_confident(p_t: f64, kappa2: f64) -> bool {
    (p_t - 0.5).abs() > 0.5 - kappa2
}

/// Votes of the qualified references on one target.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VoteRecord {
    /// Contrastive labels.
    pub v1: Vec<usize>,
    /// Contrastive probabilities.
    pub v2: Vec<f64>,
}

impl VoteRecord {
    pub fn push(&mut self, p_r: f64, q: f64) {
        self.v1.push(contrastive_label(p_r, q));
        self.v2.push(contrastive_prob(p_r, q));
    }

    /// Number of qualified voters.
    pub fn w(&self) -> usize {
        self.v1.len()
    }

    pub fn positive_votes(&self) -> usize {
        self.v1.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    /// The target's own prediction is not confident.
    NotConfident,
    NoQualifiedVoters,
    /// More than `kappa1` voters dissent from the majority.
    VoteSplit,
    /// The confidence condition on the contrastive probabilities failed.
    UnconfidentVote,
    ConsensusMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Accept(usize),
    Reject(RejectReason),
}

impl Decision {
    pub fn is_accept(&self) -> bool {
        matches!(self, Decision::Accept(_))
    }
}

/// Accept/veto decision for a target that already passed its own
/// confidence test.
pub fn decide_pseudo_label(votes: &VoteRecord, self_label: usize, cfg: &OvvConfig) -> Decision {
    let w = votes.w();
    if w == 0 {
        return Decision::Reject(RejectReason::NoQualifiedVoters);
    }
    let positives = votes.positive_votes();
    let mostly_negative = positives <= cfg.kappa1;
    let mostly_positive = positives + cfg.kappa1 >= w;
    if !(mostly_negative || mostly_positive) {
        return Decision::Reject(RejectReason::VoteSplit);
    }
    let confident = |v: &f64| (v - 0.5).abs() > 0.5 - cfg.kappa2;
    let votes_confident = match cfg.veto_quantifier {
        VetoQuantifier::AllConfident => votes.v2.iter().all(confident),
        VetoQuantifier::AnyConfident => votes.v2.iter().any(confident),
    };
    if !votes_confident {
        return Decision::Reject(RejectReason::UnconfidentVote);
    }
    if cfg.require_consensus_match {
        let agrees = if self_label == 1 { mostly_positive } else { mostly_negative };
        if !agrees {
            return Decision::Reject(RejectReason::ConsensusMismatch);
        }
    }
    Decision::Accept(self_label)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    GroundTruth,
    Pseudo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry<'a> {
    pub id: &'a str,
    pub features: &'a [f64],
    pub label: usize,
    pub origin: Origin,
}

/// Fine-tuning pool keyed by sample id. A ground-truth entry replaces a
/// pseudo entry with the same id; nothing else overwrites.
#[derive(Debug, Default)]
pub struct PseudoLabelPool<'a> {
    entries: Vec<PoolEntry<'a>>,
    by_id: HashMap<&'a str, usize>,
}

impl<'a> PseudoLabelPool<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, entry: PoolEntry<'a>) {
        match self.by_id.get(entry.id) {
            Some(&k) => {
                if self.entries[k].origin == Origin::Pseudo && entry.origin == Origin::GroundTruth {
                    self.entries[k] = entry;
                }
            }
            None => {
                self.by_id.insert(entry.id, self.entries.len());
                self.entries.push(entry);
            }
        }
    }

    pub fn entries(&self) -> &[PoolEntry<'a>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn counts(&self) -> ClassCounts {
        let mut c = vec![0, 0];
        for e in &self.entries {
            c[e.label.min(1)] += 1;
        }
        ClassCounts(c)
    }
}

#[derive(Debug, Clone)]
pub struct ModelRoles {
    /// Frozen voter and pseudo-labeler.
    pub reference: TwinModel,
    /// Model being fine-tuned.
    pub target: TwinModel,
}

impl ModelRoles {
    pub fn from_pretrained(model: TwinModel) -> Self {
        Self {
            reference: model.clone(),
            target: model,
        }
    }
}

/// Replaces the reference with the target when the target's validation
/// F-score is strictly higher. A missing score never wins.
pub fn promote_reference(roles: &mut ModelRoles, reference_fsc: Option<f64>, target_fsc: Option<f64>) -> bool {
    let better = match (target_fsc, reference_fsc) {
        (Some(t), Some(r)) => t > r,
        (Some(_), None) => true,
        _ => false,
    };
    if better {
        roles.reference = roles.target.clone();
    }
    better
}

/// One line of the decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Batch {
        epoch: usize,
        batch: usize,
        reference_ids: Vec<String>,
        reference_p: Vec<f64>,
        reference_y: Vec<usize>,
        qualified: Vec<bool>,
    },
    Target {
        epoch: usize,
        batch: usize,
        target_id: String,
        p: f64,
        self_label: usize,
        confident: bool,
        /// Dissimilarity to every reference, in batch order; empty when the
        /// target was not confident.
        q: Vec<f64>,
        w: usize,
        sum_v1: usize,
        accepted: bool,
        reason: Option<RejectReason>,
    },
}

pub trait DecisionSink {
    fn record(&mut self, entry: LogEntry) -> std::io::Result<()>;
}

/// Discards everything.
pub struct NullSink;

impl DecisionSink for NullSink {
    fn record(&mut self, _: LogEntry) -> std::io::Result<()> {
        Ok(())
    }
}

impl DecisionSink for Vec<LogEntry> {
    fn record(&mut self, entry: LogEntry) -> std::io::Result<()> {
        self.push(entry);
        Ok(())
    }
}

/// Writes one JSON object per line.
pub struct JsonlSink<W: Write>(pub W);

impl<W: Write> DecisionSink for JsonlSink<W> {
    fn record(&mut self, entry: LogEntry) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.0, &entry)?;
        self.0.write_all(b"\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EpochStats {
    pub batches: usize,
    pub pair_evaluations: usize,
    pub qualified_references: usize,
    pub confident_targets: usize,
    pub accepted: usize,
    pub accepted_positive: usize,
    pub rejected: usize,
    pub skipped_batches: usize,
    pub steps: usize,
    pub pool_samples: usize,
}

/// Runs the reference model over one batch and decides every target.
/// Returns the per-batch pool and logs each decision.
fn vote_batch<'a>(
    reference: &TwinModel,
    batch: &SslBatch<'a>,
    cfg: &OvvConfig,
    epoch: usize,
    batch_no: usize,
    stats: &mut EpochStats,
    sink: &mut dyn DecisionSink,
) -> Result<PseudoLabelPool<'a>, OvvError> {
    let refs: Vec<&[f64]> = batch.references.iter().map(|r| r.features.as_slice()).collect();
    let targets: Vec<&[f64]> = batch.targets.iter().map(|t| t.features.as_slice()).collect();
    let h_ref = reference.embed(&refs)?;
    let h_tgt = reference.embed(&targets)?;
    let p_ref = reference.classify_embeddings(&h_ref)?;
    let p_tgt = reference.classify_embeddings(&h_tgt)?;
    let q = reference.similarity_matrix(&h_ref, &h_tgt)?;
    stats.pair_evaluations += refs.len() * targets.len();

    let qualified: Vec<bool> = batch
        .references
        .iter()
        .zip(&p_ref)
        .map(|(r, &p)| qualify_reference(p, r.label, cfg.kappa2))
        .collect();
    stats.qualified_references += qualified.iter().filter(|&&b| b).count();
    sink.record(LogEntry::Batch {
        epoch,
        batch: batch_no,
        reference_ids: batch.references.iter().map(|r| r.id.clone()).collect(),
        reference_p: p_ref.clone(),
        reference_y: batch.references.iter().map(|r| r.label).collect(),
        qualified: qualified.clone(),
    })?;

    let mut pool = PseudoLabelPool::new();
    let mut any_confident = false;
    for (t_idx, target) in batch.targets.iter().enumerate() {
        let p = p_tgt[t_idx];
        let self_label = delta_threshold(p);
        let confident = target_confident(p, cfg.kappa2);
        let mut votes = VoteRecord::default();
        let decision = if confident {
            any_confident = true;
            stats.confident_targets += 1;
            for (r_idx, _) in qualified.iter().enumerate().filter(|(_, &ok)| ok) {
                votes.push(p_ref[r_idx], q[r_idx][t_idx]);
            }
            decide_pseudo_label(&votes, self_label, cfg)
        } else {
            Decision::Reject(RejectReason::NotConfident)
        };
        match decision {
            Decision::Accept(label) => {
                stats.accepted += 1;
                stats.accepted_positive += label;
                pool.insert(PoolEntry {
                    id: &target.id,
                    features: &target.features,
                    label,
                    origin: Origin::Pseudo,
                });
            }
            Decision::Reject(_) => stats.rejected += 1,
        }
        sink.record(LogEntry::Target {
            epoch,
            batch: batch_no,
            target_id: target.id.clone(),
            p,
            self_label,
            confident,
            q: if confident { (0..refs.len()).map(|r| q[r][t_idx]).collect() } else { Vec::new() },
            w: votes.w(),
            sum_v1: votes.positive_votes(),
            accepted: decision.is_accept(),
            reason: match decision {
                Decision::Reject(r) => Some(r),
                Decision::Accept(_) => None,
            },
        })?;
    }
    // qualified references join the pool as soon as any target is examined
    if any_confident {
        for (r, _) in batch.references.iter().zip(&qualified).filter(|(_, &ok)| ok) {
            pool.insert(PoolEntry {
                id: &r.id,
                features: &r.features,
                label: r.label,
                origin: Origin::GroundTruth,
            });
        }
    }
    Ok(pool)
}

fn finetune_step(
    model: &mut TwinModel,
    pool: &PseudoLabelPool<'_>,
    sgd: &SgdConfig,
    epoch: usize,
) -> Result<(), OvvError> {
    let omega = weight_cla(&pool.counts()).expect("non-empty pool");
    let x: Vec<&[f64]> = pool.entries().iter().map(|e| e.features).collect();
    let y: Vec<usize> = pool.entries().iter().map(|e| e.label).collect();
    let mut g = Graph::new();
    let pv = model.register(&mut g);
    let loss = model.classification_loss_graph(&mut g, &pv, &x, &y, omega)?;
    let mut grads = g.backward(loss).map_err(ModelError::from)?;
    let grads = model.params().collect_grads(pv.as_slice(), &mut grads);
    sgd_step(model.params_mut(), &grads, sgd, epoch)?;
    Ok(())
}

/// One pass over `batches`: vote with the reference model, then take one
/// fine-tuning step on the target model per non-empty batch pool. The
/// reference model is never modified here.
pub fn ovv_epoch<'a>(
    roles: &mut ModelRoles,
    batches: impl IntoIterator<Item = SslBatch<'a>>,
    cfg: &OvvConfig,
    sgd: &SgdConfig,
    epoch: usize,
    sink: &mut dyn DecisionSink,
) -> Result<EpochStats, OvvError> {
    cfg.validate()?;
    let mut stats = EpochStats::default();
    for (batch_no, batch) in batches.into_iter().enumerate() {
        stats.batches += 1;
        let pool = vote_batch(&roles.reference, &batch, cfg, epoch, batch_no, &mut stats, sink)?;
        if pool.is_empty() {
            stats.skipped_batches += 1;
            continue;
        }
        stats.pool_samples += pool.len();
        finetune_step(&mut roles.target, &pool, sgd, epoch)?;
        stats.steps += 1;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(kappa1: usize, kappa2: f64) -> OvvConfig {
        OvvConfig {
            kappa1,
            kappa2,
            ..OvvConfig::default()
        }
    }

    fn votes(v1: &[usize], v2: &[f64]) -> VoteRecord {
        VoteRecord {
            v1: v1.to_vec(),
            v2: v2.to_vec(),
        }
    }

    #[test]
    fn delta_examples() {
        assert_eq!(delta_threshold(0.7), 1);
        assert_eq!(delta_threshold(0.5), 0);
        assert_eq!(delta_threshold(0.0), 0);
    }

    #[test]
    fn contrastive_examples() {
        assert_eq!(contrastive_prob(1.0, 0.0), 1.0);
        assert!((contrastive_prob(0.9, 0.85) - 0.05).abs() < 1e-15);
        assert_eq!(contrastive_prob(0.4, 0.4), 0.0);
        assert_eq!(contrastive_label(0.9, 0.2), 1);
        assert_eq!(contrastive_label(0.9, 0.8), 0);
        assert_eq!(contrastive_label(0.9, 0.85), 0);
        assert_eq!(delta_threshold(contrastive_prob(0.9, 0.85)), 0);
        // label and thresholded probability can disagree
        assert_eq!(contrastive_label(0.6, 0.3), 1);
        assert_eq!(delta_threshold(contrastive_prob(0.6, 0.3)), 0);
    }

    #[test]
    fn contrastive_closed_forms_on_grid() {
        for a in 0..=40 {
            for b in 0..=40 {
                let (p, q) = (a as f64 / 40.0, b as f64 / 40.0);
                assert_eq!(contrastive_prob(p, q), (p - q).abs());
                let expect = (i32::from(p > 0.5) - i32::from(q > 0.5)).unsigned_abs() as usize;
                assert_eq!(contrastive_label(p, q), expect);
            }
        }
    }

    #[test]
    fn qualification_examples() {
        assert!(qualify_reference(0.995, 1, 0.01));
        for k2 in [0.01, 0.2, 0.49] {
            assert!(!qualify_reference(0.5, 0, k2));
        }
        assert!(!qualify_reference(0.75, 1, 0.25));
        assert!(qualify_reference(0.76, 1, 0.25));
    }

    #[test]
    fn confidence_examples() {
        assert!(target_confident(0.992, 0.01));
        assert!(target_confident(0.008, 0.01));
        assert!(!target_confident(0.5, 0.49));
        assert!(!target_confident(0.75, 0.25));
    }

    #[test]
    fn decision_examples() {
        let conf = [0.999, 0.998, 0.9995];
        assert_eq!(decide_pseudo_label(&votes(&[0, 0, 0], &conf), 0, &cfg(0, 0.01)), Decision::Accept(0));
        assert_eq!(
            decide_pseudo_label(&votes(&[0, 0, 1], &conf), 0, &cfg(0, 0.01)),
            Decision::Reject(RejectReason::VoteSplit)
        );
        assert_eq!(decide_pseudo_label(&votes(&[0, 0, 1], &conf), 0, &cfg(1, 0.01)), Decision::Accept(0));
        assert_eq!(
            decide_pseudo_label(&votes(&[], &[]), 1, &cfg(2, 0.3)),
            Decision::Reject(RejectReason::NoQualifiedVoters)
        );
    }

    #[test]
    fn quantifier_and_consensus_modes() {
        let v = votes(&[1, 1], &[0.999, 0.6]);
        assert_eq!(
            decide_pseudo_label(&v, 1, &cfg(0, 0.01)),
            Decision::Reject(RejectReason::UnconfidentVote)
        );
        let any = OvvConfig {
            veto_quantifier: VetoQuantifier::AnyConfident,
            ..cfg(0, 0.01)
        };
        assert_eq!(decide_pseudo_label(&v, 1, &any), Decision::Accept(1));
        // unanimous positive votes, self-prediction negative
        let strict = OvvConfig {
            require_consensus_match: true,
            ..any
        };
        assert_eq!(
            decide_pseudo_label(&v, 0, &strict),
            Decision::Reject(RejectReason::ConsensusMismatch)
        );
        assert_eq!(decide_pseudo_label(&v, 0, &any), Decision::Accept(0));
    }

    #[test]
    fn raising_kappa1_never_vetoes_more() {
        let conf = vec![0.999; 5];
        for mask in 0u32..32 {
            let v1: Vec<usize> = (0..5).map(|b| ((mask >> b) & 1) as usize).collect();
            let v = votes(&v1, &conf);
            let mut accepted = false;
            for k1 in 0..5 {
                let now = decide_pseudo_label(&v, 0, &cfg(k1, 0.01)).is_accept();
                assert!(!(accepted && !now), "mask {mask} kappa1 {k1}");
                accepted = now;
            }
        }
    }

    #[test]
    fn raising_kappa2_never_disqualifies() {
        for a in 0..=100 {
            let p = a as f64 / 100.0;
            for y in [0, 1] {
                let mut qualified = false;
                for k in 1..50 {
                    let now = qualify_reference(p, y, k as f64 / 100.0);
                    assert!(!(qualified && !now));
                    qualified = now;
                }
            }
        }
    }

    #[test]
    fn pool_prefers_ground_truth() {
        let f = [0.0];
        let mut pool = PseudoLabelPool::new();
        pool.insert(PoolEntry { id: "a", features: &f, label: 1, origin: Origin::Pseudo });
        pool.insert(PoolEntry { id: "a", features: &f, label: 0, origin: Origin::GroundTruth });
        pool.insert(PoolEntry { id: "a", features: &f, label: 1, origin: Origin::Pseudo });
        pool.insert(PoolEntry { id: "b", features: &f, label: 1, origin: Origin::GroundTruth });
        pool.insert(PoolEntry { id: "b", features: &f, label: 0, origin: Origin::GroundTruth });
        assert_eq!(pool.len(), 2);
        assert_eq!(pool.entries()[0].label, 0);
        assert_eq!(pool.entries()[0].origin, Origin::GroundTruth);
        assert_eq!(pool.entries()[1].label, 1);
        assert_eq!(pool.counts(), ClassCounts::binary(1, 1));
    }

    #[test]
    fn config_validation() {
        assert!(OvvConfig::default().validate().is_ok());
        assert!(cfg(0, 0.5).validate().is_err());
        assert!(cfg(0, 0.0).validate().is_err());
        let zero_m = OvvConfig { m: 0, ..OvvConfig::default() };
        assert!(zero_m.validate().is_err());
    }

    #[test]
    fn log_entries_serialize_as_tagged_lines() {
        let mut sink = JsonlSink(Vec::new());
        sink.record(LogEntry::Target {
            epoch: 1,
            batch: 2,
            target_id: "t".into(),
            p: 0.25,
            self_label: 0,
            confident: false,
            q: vec![],
            w: 0,
            sum_v1: 0,
            accepted: false,
            reason: Some(RejectReason::NotConfident),
        })
        .unwrap();
        let text = String::from_utf8(sink.0).unwrap();
        assert!(text.starts_with("{\"kind\":\"target\""));
        assert!(text.contains("\"reason\":\"not_confident\""));
        let back: LogEntry = serde_json::from_str(text.trim()).unwrap();
        assert!(matches!(back, LogEntry::Target { batch: 2, .. }));
    }
}
