//! Class-imbalance weights and the weighted cross-entropy losses used to
//! train the twin network and to fine-tune it on pseudo-labeled pools.
//!
//! Binary labels are `0` (healthy, majority) and `1` (positive, minority).
//! The pair losses take the pair's two labels, the per-input probabilities
//! `p_i`, `p_j` and the pair dissimilarity `q`; `q` close to 1 means the
//! two inputs belong to different classes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower clamp applied to probabilities before taking logs; the upper clamp
/// is `1 - PROB_EPSILON`.
pub const PROB_EPSILON: f64 = 1e-12;

/// Default balance between classification and similarity terms.
pub const DEFAULT_LAMBDA: f64 = 0.3;

const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("class counts total {total}, need at least {needed}")]
    TooFewSamples { total: usize, needed: usize },
    #[error("expected {expected} classes, got {found}")]
    ClassCount { expected: usize, found: usize },
    #[error("{what} sums to {sum}, expected 1")]
    NotNormalized { what: &'static str, sum: f64 },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{labels} labels but {probs} probabilities")]
    LengthMismatch { labels: usize, probs: usize },
    #[error("empty batch")]
    EmptyBatch,
}

pub fn clamp_probability(p: f64) -> f64 {
    p.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON)
}

/// Per-class sample counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts(pub Vec<usize>);

impl ClassCounts {
    pub fn binary(n0: usize, n1: usize) -> Self {
        Self(vec![n0, n1])
    }

    pub fn from_labels(labels: impl IntoIterator<Item = usize>, classes: usize) -> Result<Self, LossError> {
        let mut counts = vec![0; classes];
        for label in labels {
            *counts
                .get_mut(label)
                .ok_or(LossError::LabelOutOfRange { label, classes })? += 1;
        }
        Ok(Self(counts))
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    fn expect_classes(&self, k: usize) -> Result<(), LossError> {
        if self.0.len() != k {
            return Err(LossError::ClassCount {
                expected: k,
                found: self.0.len(),
            });
        }
        Ok(())
    }
}

/// Weights for the combined twin loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cla: f64,
    pub sim: f64,
    pub lambda: f64,
}

impl LossWeights {
    pub fn from_counts(counts: &ClassCounts, lambda: f64) -> Result<Self, LossError> {
        Ok(Self {
            cla: weight_cla(counts)?,
            sim: weight_sim(counts)?,
            lambda,
        })
    }
}

/// Share of majority-class samples, `n0 / (n0 + n1)`. It multiplies the
/// positive-class log terms, so the rarer class gets the larger weight.
pub fn weight_cla(counts: &ClassCounts) -> Result<f64, LossError> {
    counts.expect_classes(2)?;
    let (n0, n1) = (counts.0[0] as f64, counts.0[1] as f64);
    if n0 + n1 == 0.0 {
        return Err(LossError::TooFewSamples { total: 0, needed: 1 });
    }
    if counts.0[0] == 0 || counts.0[1] == 0 {
        log::warn!("single-class counts {:?}: classification weight is degenerate", counts.0);
    }
    Ok(n0 / (n0 + n1))
}

/// Probability that a uniformly drawn unordered pair is same-class:
/// `(n0(n0-1) + n1(n1-1)) / (N(N-1))`.
pub fn weight_sim(counts: &ClassCounts) -> Result<f64, LossError> {
    counts.expect_classes(2)?;
    let total = counts.total();
    if total < 2 {
        return Err(LossError::TooFewSamples { total, needed: 2 });
    }
    let same: f64 = counts.0.iter().map(|&n| (n as f64) * (n as f64 - 1.0)).sum();
    let n = total as f64;
    Ok(same / (n * (n - 1.0)))
}

fn label_value(y: usize) -> f64 {
    debug_assert!(y <= 1, "binary label expected, got {y}");
    y as f64
}

/// Weighted binary cross-entropy of one pair's two classification outputs.
pub fn loss_cla(labels: (usize, usize), p: (f64, f64), omega_cla: f64) -> f64 {
    let (yi, yj) = (label_value(labels.0), label_value(labels.1));
    let (pi, pj) = (clamp_probability(p.0), clamp_probability(p.1));
    -(omega_cla * (yi * pi.ln() + yj * pj.ln())
        + (1.0 - omega_cla) * ((1.0 - yi) * (1.0 - pi).ln() + (1.0 - yj) * (1.0 - pj).ln()))
}

/// Weighted cross-entropy of the pair dissimilarity `q` against
/// `|y_i - y_j|`.
pub fn loss_sim(labels: (usize, usize), q: f64, omega_sim: f64) -> f64 {
    let differ = (label_value(labels.0) - label_value(labels.1)).abs();
    let q = clamp_probability(q);
    -(omega_sim * differ * q.ln() + (1.0 - omega_sim) * (1.0 - differ) * (1.0 - q).ln())
}

/// `lambda * loss_cla + loss_sim`
pub fn loss_combined(labels: (usize, usize), p: (f64, f64), q: f64, weights: &LossWeights) -> f64 {
    weights.lambda * loss_cla(labels, p, weights.cla) + loss_sim(labels, q, weights.sim)
}

/// Batch-averaged weighted binary cross-entropy, with the same per-sample
/// weighting as [`loss_cla`].
pub fn loss_finetune(labels: &[usize], p: &[f64], omega_cla: f64) -> Result<f64, LossError> {
    if labels.len() != p.len() {
        return Err(LossError::LengthMismatch {
            labels: labels.len(),
            probs: p.len(),
        });
    }
    if labels.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let total: f64 = labels
        .iter()
        .zip(p)
        .map(|(&y, &p)| {
            let (y, p) = (label_value(y), clamp_probability(p));
            -(omega_cla * y * p.ln() + (1.0 - omega_cla) * (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / labels.len() as f64)
}

// Three-class variants. Classes are indexed 0..3; each class carries a
// secondary code s = (0, 1, 3) so that |s_i - s_j| identifies which pair of
// classes a sample pair spans.

const SECONDARY_CODE: [i64; 3] = [0, 1, 3];

/// Index (0..4) of the pair case: 0 for classes {0,1}, 1 for {1,2}, 2 for
/// {0,2}, 3 for a same-class pair.
pub fn similarity_case(ri: usize, rj: usize) -> Result<usize, LossError> {
    for &r in &[ri, rj] {
        if r >= 3 {
            return Err(LossError::LabelOutOfRange { label: r, classes: 3 });
        }
    }
    let diff = (SECONDARY_CODE[ri] - SECONDARY_CODE[rj]).unsigned_abs() as usize;
    Ok(if diff == 0 { 3 } else { diff - 1 })
}

/// `(N - n_e) / (2N)` per class; sums to one for three classes.
pub fn weight_cla_multiclass(counts: &ClassCounts) -> Result<[f64; 3], LossError> {
    counts.expect_classes(3)?;
    let n = counts.total() as f64;
    if n == 0.0 {
        return Err(LossError::TooFewSamples { total: 0, needed: 1 });
    }
    Ok(std::array::from_fn(|e| (n - counts.0[e] as f64) / (2.0 * n)))
}

/// Per-case similarity weights, indexed like [`similarity_case`]:
/// one minus the prevalence of the case among all unordered pairs.
pub fn weight_sim_multiclass(counts: &ClassCounts) -> Result<[f64; 4], LossError> {
    counts.expect_classes(3)?;
    let total = counts.total();
    if total < 2 {
        return Err(LossError::TooFewSamples { total, needed: 2 });
    }
    let [n1, n2, n3] = [0, 1, 2].map(|e| counts.0[e] as f64);
    let n = total as f64;
    let pairs = n * (n - 1.0);
    let same = n1 * (n1 - 1.0) + n2 * (n2 - 1.0) + n3 * (n3 - 1.0);
    Ok([
        1.0 - 2.0 * n1 * n2 / pairs,
        1.0 - 2.0 * n2 * n3 / pairs,
        1.0 - 2.0 * n1 * n3 / pairs,
        1.0 - same / pairs,
    ])
}

fn check_normalized(what: &'static str, v: &[f64]) -> Result<(), LossError> {
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE || v.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(LossError::NotNormalized { what, sum });
    }
    Ok(())
}

/// Three-class classification loss over one pair; `p_i` and `p_j` are
/// softmax outputs.
pub fn loss_cla_multiclass(
    labels: (usize, usize),
    p_i: &[f64; 3],
    p_j: &[f64; 3],
    omega: &[f64; 3],
) -> Result<f64, LossError> {
    check_normalized("p_i", p_i)?;
    check_normalized("p_j", p_j)?;
    for &r in &[labels.0, labels.1] {
        if r >= 3 {
            return Err(LossError::LabelOutOfRange { label: r, classes: 3 });
        }
    }
    Ok(-(omega[labels.0] * clamp_probability(p_i[labels.0]).ln()
        + omega[labels.1] * clamp_probability(p_j[labels.1]).ln()))
}

/// Three-class similarity loss; `q` is a softmax over the four pair cases.
pub fn loss_sim_multiclass(
    labels: (usize, usize),
    q: &[f64; 4],
    omega: &[f64; 4],
) -> Result<f64, LossError> {
    check_normalized("q", q)?;
    let c = similarity_case(labels.0, labels.1)?;
    Ok(-omega[c] * clamp_probability(q[c]).ln())
}
