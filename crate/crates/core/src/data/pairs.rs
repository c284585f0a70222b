use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, LabeledSample};

/// Number of unordered pairs among `n` samples, before any exclusion.
pub fn count_pairs(n: u64) -> u64 {
    if n < 2 {
        0
    } else {
        n * (n - 1) / 2
    }
}

/// Indices into the sample slice a batch was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplePair {
    pub i: usize,
    pub j: usize,
    pub same_class: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PairBatch {
    pub pairs: Vec<SamplePair>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

const REJECTION_TRIES: usize = 64;

struct PairSampler {
    patient: Vec<u32>,
    same: Vec<Vec<usize>>,
    other: Vec<Vec<usize>>,
    all: Vec<usize>,
}

impl PairSampler {
    fn new(samples: &[LabeledSample]) -> Self {
        let mut ids: HashMap<&str, u32> = HashMap::new();
        let patient = samples
            .iter()
            .map(|s| {
                let next = ids.len() as u32;
                *ids.entry(s.patient_id.as_str()).or_insert(next)
            })
            .collect();
        let classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
        let mut same = vec![Vec::new(); classes];
        for (k, s) in samples.iter().enumerate() {
            same[s.label].push(k);
        }
        let other = (0..classes)
            .map(|c| (0..samples.len()).filter(|&k| samples[k].label != c).collect())
            .collect();
        Self {
            patient,
            same,
            other,
            all: (0..samples.len()).collect(),
        }
    }

    fn distinct_patients(&self) -> usize {
        let mut p = self.patient.clone();
        p.sort_unstable();
        p.dedup();
        p.len()
    }

    /// Uniform draw from `pool` restricted to patients other than `i`'s.
    fn partner(&self, rng: &mut ChaCha8Rng, i: usize, pool: &[usize]) -> Option<usize> {
        if pool.is_empty() {
            return None;
        }
        let pi = self.patient[i];
        for _ in 0..REJECTION_TRIES {
            let j = pool[rng.random_range(0..pool.len())];
            if self.patient[j] != pi {
                return Some(j);
            }
        }
        let legal: Vec<usize> = pool.iter().copied().filter(|&j| self.patient[j] != pi).collect();
        (!legal.is_empty()).then(|| legal[rng.random_range(0..legal.len())])
    }
}

/// Draws `batch_pairs` cross-patient pairs. With `balance`, each pair is
/// same-class or different-class with probability one half whenever both
/// kinds exist for the first member.
pub fn sample_pairs(
    samples: &[LabeledSample],
    batch_pairs: usize,
    seed: u64,
    balance: bool,
) -> Result<PairBatch, DataError> {
    let sampler = PairSampler::new(samples);
    if sampler.distinct_patients() < 2 {
        return Err(DataError::NoLegalPair);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(batch_pairs);
    while pairs.len() < batch_pairs {
        let i = rng.random_range(0..samples.len());
        let label = samples[i].label;
        let j = if balance {
            let want_same = rng.random_bool(0.5);
            let (first, second) = if want_same {
                (&sampler.same[label], &sampler.other[label])
            } else {
                (&sampler.other[label], &sampler.same[label])
            };
            sampler
                .partner(&mut rng, i, first)
                .or_else(|| sampler.partner(&mut rng, i, second))
        } else {
            sampler.partner(&mut rng, i, &sampler.all)
        };
        // j is None only when every other sample belongs to i's patient
        if let Some(j) = j {
            pairs.push(SamplePair {
                i,
                j,
                same_class: label == samples[j].label,
            });
        }
    }
    Ok(PairBatch { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(labels: &[usize], patients: &[&str]) -> Vec<LabeledSample> {
        labels
            .iter()
            .zip(patients)
            .enumerate()
            .map(|(k, (&label, &p))| LabeledSample {
                id: format!("s{k}"),
                features: vec![k as f64],
                label,
                patient_id: p.to_string(),
            })
            .collect()
    }

    #[test]
    fn count_pairs_examples() {
        assert_eq!(count_pairs(1147), 657_231);
        assert_eq!(count_pairs(4), 6);
        assert_eq!(count_pairs(2), 1);
        assert_eq!(count_pairs(1), 0);
        assert_eq!(count_pairs(0), 0);
    }

    #[test]
    fn count_pairs_matches_enumeration() {
        for n in 0..=200u64 {
            let mut brute = 0;
            for i in 0..n {
                for j in (i + 1)..n {
                    let _ = (i, j);
                    brute += 1;
                }
            }
            assert_eq!(count_pairs(n), brute, "n = {n}");
        }
    }

    #[test]
    fn single_patient_has_no_pair() {
        let s = samples(&[0, 1], &["p", "p"]);
        assert!(matches!(sample_pairs(&s, 3, 0, false), Err(DataError::NoLegalPair)));
        assert!(matches!(sample_pairs(&s, 3, 0, true), Err(DataError::NoLegalPair)));
    }

    #[test]
    fn uniform_labels_are_all_same_class() {
        let s = samples(&[1, 1, 1, 1], &["a", "b", "c", "d"]);
        for balance in [false, true] {
            let b = sample_pairs(&s, 50, 3, balance).unwrap();
            assert_eq!(b.len(), 50);
            assert!(b.pairs.iter().all(|p| p.same_class));
        }
    }

    #[test]
    fn seeded_draws_repeat() {
        let s = samples(&[0, 1, 0, 1, 0], &["a", "b", "c", "a", "b"]);
        assert_eq!(sample_pairs(&s, 40, 11, true).unwrap(), sample_pairs(&s, 40, 11, true).unwrap());
        assert_ne!(sample_pairs(&s, 40, 11, true).unwrap(), sample_pairs(&s, 40, 12, true).unwrap());
    }

    #[test]
    fn never_pairs_a_patient_with_itself() {
        // heavy patient overlap: one patient owns most samples
        let labels: Vec<usize> = (0..40).map(|k| usize::from(k % 7 == 0)).collect();
        let patients: Vec<String> =
            (0..40).map(|k| if k < 34 { "big".to_string() } else { format!("p{k}") }).collect();
        let refs: Vec<&str> = patients.iter().map(String::as_str).collect();
        let s = samples(&labels, &refs);
        for (seed, balance) in [(1, true), (2, false)] {
            let batch = sample_pairs(&s, 10_000, seed, balance).unwrap();
            assert_eq!(batch.len(), 10_000);
            for p in &batch.pairs {
                assert_ne!(s[p.i].patient_id, s[p.j].patient_id);
                assert_eq!(p.same_class, s[p.i].label == s[p.j].label);
            }
        }
    }

    #[test]
    fn balance_evens_out_pair_kinds() {
        let labels: Vec<usize> = (0..100).map(|k| usize::from(k < 10)).collect();
        let patients: Vec<String> = (0..100).map(|k| format!("p{k}")).collect();
        let refs: Vec<&str> = patients.iter().map(String::as_str).collect();
        let s = samples(&labels, &refs);
        let balanced = sample_pairs(&s, 20_000, 4, true).unwrap();
        let frac = balanced.pairs.iter().filter(|p| p.same_class).count() as f64 / 20_000.0;
        assert!((frac - 0.5).abs() < 0.02, "same-class share {frac}");
        let plain = sample_pairs(&s, 20_000, 4, false).unwrap();
        let frac = plain.pairs.iter().filter(|p| p.same_class).count() as f64 / 20_000.0;
        assert!(frac > 0.75, "same-class share {frac}");
    }
}
