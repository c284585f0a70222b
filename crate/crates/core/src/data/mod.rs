//! Samples, synthetic data, file ingestion, patient-aware splitting and the
//! samplers that feed twin training and self-training.

mod index;
mod pairs;
mod split;
mod ssl;
mod synthetic;

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use index::{load_index, read_feature_file, write_index, write_raw_features, IndexRecord, Partition};
pub use pairs::{count_pairs, sample_pairs, PairBatch, SamplePair};
pub use split::{split_by_patient, SplitSpec};
pub use ssl::{make_ssl_batches, SslBatch, SslBatches};
pub use synthetic::{gen_synthetic, SyntheticSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("line {line}: label out of range: {label} (classes: {classes})")]
    LabelOutOfRange { line: u64, label: i64, classes: usize },
    #[error("duplicate id: {0}")]
    DuplicateId(String),
    #[error("feature file {}: {reason}", path.display())]
    FeatureFile { path: PathBuf, reason: String },
    #[error("feature dimension mismatch: expected {expected}, found {found} (sample {id})")]
    FeatureDim {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),
    #[error("{patients} patients cannot fill {partitions} partitions")]
    TooFewPatients { patients: usize, partitions: usize },
    #[error("no legal pair: every sample shares a single patient")]
    NoLegalPair,
    #[error("batch half-size {m} exceeds pool sizes (labeled {labeled}, unlabeled {unlabeled})")]
    BatchTooLarge {
        m: usize,
        labeled: usize,
        unlabeled: usize,
    },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

/// A labeled feature vector. Label 0 is the healthy majority class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub id: String,
    pub features: Vec<f64>,
    pub label: usize,
    pub patient_id: String,
}

/// A sample whose label is not available to training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledSample {
    pub id: String,
    pub features: Vec<f64>,
    pub patient_id: String,
}

impl LabeledSample {
    pub fn without_label(&self) -> UnlabeledSample {
        UnlabeledSample {
            id: self.id.clone(),
            features: self.features.clone(),
            patient_id: self.patient_id.clone(),
        }
    }
}

pub fn class_counts(samples: &[LabeledSample], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for s in samples {
        if let Some(c) = counts.get_mut(s.label) {
            *c += 1;
        }
    }
    counts
}

/// Keeps one uniformly chosen sample per patient. Output is ordered by
/// patient id.
pub fn select_one_per_patient(samples: &[LabeledSample], seed: u64) -> Vec<LabeledSample> {
    let mut by_patient: BTreeMap<&str, Vec<&LabeledSample>> = BTreeMap::new();
    for s in samples {
        by_patient.entry(&s.patient_id).or_default().push(s);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    by_patient
        .into_values()
        .map(|group| group[rng.random_range(0..group.len())].clone())
        .collect()
}
