use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, LabeledSample};

/// Patient-disjoint partition of sample ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl SplitSpec {
    pub fn partitions(&self) -> [&[String]; 3] {
        [&self.train, &self.validation, &self.test]
    }
}

/// Allocates whole patients to train/validation/test in the requested
/// proportions (largest-remainder rounding over the patient count). Every
/// partition with a positive fraction receives at least one patient.
pub fn split_by_patient(
    samples: &[LabeledSample],
    fractions: [f64; 3],
    seed: u64,
) -> Result<SplitSpec, DataError> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(DataError::InvalidFractions(format!("{fractions:?} outside [0, 1]")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidFractions(format!("{fractions:?} sum to {total}")));
    }

    let mut patients: Vec<&str> = samples
        .iter()
        .map(|s| s.patient_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let needed = fractions.iter().filter(|&&f| f > 0.0).count();
    if patients.len() < needed {
        return Err(DataError::TooFewPatients {
            patients: patients.len(),
            partitions: needed,
        });
    }
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let counts = allocate(patients.len(), fractions);
    let mut assignment: HashMap<&str, usize> = HashMap::with_capacity(patients.len());
    let mut start = 0;
    for (part, &count) in counts.iter().enumerate() {
        for p in &patients[start..start + count] {
            assignment.insert(p, part);
        }
        start += count;
    }

    let mut parts: [Vec<String>; 3] = Default::default();
    for s in samples {
        parts[assignment[s.patient_id.as_str()]].push(s.id.clone());
    }
    let [train, validation, test] = parts;
    Ok(SplitSpec {
        train,
        validation,
        test,
    })
}

fn allocate(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let exact = fractions.map(|f| f * n as f64);
    let mut counts = exact.map(|e| e.floor() as usize);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    for i in 0..3 {
        if fractions[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    counts
}
