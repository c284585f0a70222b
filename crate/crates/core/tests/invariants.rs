use std::collections::{HashMap, HashSet};

use proptest::prelude::*;

use twinvote_core::data::{count_pairs, sample_pairs, split_by_patient, LabeledSample};
use twinvote_core::loss::{loss_cla, loss_combined, loss_sim, weight_cla, weight_sim, ClassCounts, LossWeights};
use twinvote_core::metrics::{basic_metrics, confusion, roc_and_auroc};
use twinvote_core::model::{ModelConfig, Phi, TwinModel};
use twinvote_core::ovv::{decide_pseudo_label, qualify_reference, OvvConfig, VoteRecord};
use twinvote_core::train::{early_stopper, StopDecision};

fn cohort(spec: &[(usize, usize)]) -> Vec<LabeledSample> {
    spec.iter()
        .enumerate()
        .map(|(k, &(patient, label))| LabeledSample {
            id: format!("s{k}"),
            features: vec![k as f64],
            label,
            patient_id: format!("p{patient}"),
        })
        .collect()
}

fn cohort_strategy() -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((0usize..40, 0usize..2), 2..150)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn splits_are_patient_disjoint_and_exhaustive(spec in cohort_strategy(), w in (0.1f64..1.0, 0.0f64..1.0, 0.0f64..1.0), seed in any::<u64>()) {
        let samples = cohort(&spec);
        prop_assume!(spec.iter().map(|s| s.0).collect::<HashSet<_>>().len() >= 3);
        let total = w.0 + w.1 + w.2;
        let split = split_by_patient(&samples, [w.0 / total, w.1 / total, w.2 / total], seed).unwrap();
        let patient_of: HashMap<&str, &str> = samples.iter().map(|s| (s.id.as_str(), s.patient_id.as_str())).collect();
        let mut seen = HashSet::new();
        let mut owner: HashMap<&str, usize> = HashMap::new();
        for (part, ids) in split.partitions().iter().enumerate() {
            for id in ids.iter() {
                prop_assert!(seen.insert(id.as_str()), "{id} in two partitions");
                let patient = patient_of[id.as_str()];
                prop_assert_eq!(*owner.entry(patient).or_insert(part), part);
            }
        }
        prop_assert_eq!(seen.len(), samples.len());
    }

    #[test]
    fn pairs_never_share_a_patient(spec in cohort_strategy(), seed in any::<u64>(), balance in any::<bool>()) {
        let samples = cohort(&spec);
        let patients: HashSet<usize> = spec.iter().map(|s| s.0).collect();
        prop_assume!(patients.len() >= 2);
        let batch = sample_pairs(&samples, 120, seed, balance).unwrap();
        prop_assert_eq!(batch.len(), 120);
        for p in &batch.pairs {
            prop_assert_ne!(&samples[p.i].patient_id, &samples[p.j].patient_id);
            prop_assert_eq!(p.same_class, samples[p.i].label == samples[p.j].label);
        }
    }

    #[test]
    fn losses_are_non_negative(
        y in (0usize..2, 0usize..2),
        p in (0.0f64..=1.0, 0.0f64..=1.0),
        q in 0.0f64..=1.0,
        counts in (0usize..500, 0usize..500),
        lambda in 0.0f64..3.0,
    ) {
        prop_assume!(counts.0 + counts.1 >= 2);
        let c = ClassCounts::binary(counts.0, counts.1);
        let weights = LossWeights::from_counts(&c, lambda).unwrap();
        prop_assert!((0.0..=1.0).contains(&weights.cla) && (0.0..=1.0).contains(&weights.sim));
        prop_assert!(loss_cla(y, p, weights.cla) >= 0.0);
        prop_assert!(loss_sim(y, q, weights.sim) >= 0.0);
        prop_assert!(loss_combined(y, p, q, &weights) >= 0.0);
        let sim_only = LossWeights { lambda: 0.0, ..weights };
        prop_assert_eq!(loss_combined(y, p, q, &sim_only), loss_sim(y, q, weights.sim));
    }

    #[test]
    fn half_weight_is_half_the_plain_cross_entropy(y in (0usize..2, 0usize..2), p in (0.001f64..0.999, 0.001f64..0.999)) {
        let bce = |y: usize, p: f64| if y == 1 { -p.ln() } else { -(1.0 - p).ln() };
        let plain = bce(y.0, p.0) + bce(y.1, p.1);
        prop_assert!((loss_cla(y, p, 0.5) - plain / 2.0).abs() < 1e-12);
    }

    #[test]
    fn more_tolerance_never_turns_accept_into_veto(
        votes in prop::collection::vec((0usize..2, 0.0f64..=1.0), 0..8),
        kappa1 in 0usize..5,
        kappa2 in 0.001f64..0.499,
        self_label in 0usize..2,
    ) {
        let record = VoteRecord {
            v1: votes.iter().map(|v| v.0).collect(),
            v2: votes.iter().map(|v| v.1).collect(),
        };
        let strict = OvvConfig { kappa1, kappa2, ..OvvConfig::default() };
        let loose = OvvConfig { kappa1: kappa1 + 1, ..strict };
        if decide_pseudo_label(&record, self_label, &strict).is_accept() {
            prop_assert!(decide_pseudo_label(&record, self_label, &loose).is_accept());
        }
    }

    #[test]
    fn qualification_is_monotone_in_kappa2(p in 0.0f64..=1.0, y in 0usize..2, k in 0.001f64..0.49, dk in 0.0f64..0.01) {
        if qualify_reference(p, y, k) {
            prop_assert!(qualify_reference(p, y, k + dk));
        }
    }

    #[test]
    fn stopper_counts_epochs_since_the_first_best(
        history in prop::collection::vec(prop::option::weighted(0.9, (0u8..5).prop_map(|v| v as f64 / 4.0)), 1..60),
        patience in 0usize..10,
    ) {
        let mut best: Option<(usize, f64)> = None;
        for (k, v) in history.iter().enumerate() {
            if let Some(v) = *v {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((k, v));
                }
            }
        }
        let since = history.len() - 1 - best.map_or(0, |b| b.0);
        let want = if since > patience { StopDecision::Stop } else { StopDecision::Continue };
        prop_assert_eq!(early_stopper(&history, patience), want);
    }

    #[test]
    fn auroc_ignores_monotone_transforms(data in prop::collection::vec((0usize..2, -5.0f64..5.0), 2..200)) {
        let labels: Vec<usize> = data.iter().map(|d| d.0).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let scores: Vec<f64> = data.iter().map(|d| d.1).collect();
        let (roc, auc) = roc_and_auroc(&labels, &scores).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|s| 1.0 / (1.0 + (-s).exp())).collect();
        let shifted: Vec<f64> = scores.iter().map(|s| 3.0 * s + 1.0).collect();
        prop_assert!((roc_and_auroc(&labels, &squashed).unwrap().1 - auc).abs() < 1e-12);
        prop_assert!((roc_and_auroc(&labels, &shifted).unwrap().1 - auc).abs() < 1e-12);
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((roc_and_auroc(&labels, &flipped).unwrap().1 - (1.0 - auc)).abs() < 1e-12);

        prop_assert_eq!(roc.points.first().copied(), Some((0.0, 0.0)));
        prop_assert_eq!(roc.points.last().copied(), Some((1.0, 1.0)));
        for w in roc.points.windows(2) {
            prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        }
    }

    #[test]
    fn basic_metrics_stay_in_range(data in prop::collection::vec((0usize..2, 0.0f64..1.0), 1..300)) {
        let labels: Vec<usize> = data.iter().map(|d| d.0).collect();
        let scores: Vec<f64> = data.iter().map(|d| d.1).collect();
        let c = confusion(&labels, &scores, 0.5).unwrap();
        prop_assert_eq!(c.total(), labels.len());
        let m = basic_metrics(&c);
        for v in [m.acc, m.pre, m.rec, m.spe, m.fsc, m.iou].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if let Some(mcc) = m.mcc {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&mcc));
        }
    }

    #[test]
    fn twin_branches_share_weights(seed in any::<u64>(), xi in prop::collection::vec(-3.0f64..3.0, 4), xj in prop::collection::vec(-3.0f64..3.0, 4), vsd in any::<bool>()) {
        let phi = if vsd { Phi::Vsd } else { Phi::Vad };
        let model = TwinModel::new(ModelConfig { input_dim: 4, hidden: vec![6, 3], phi }, seed).unwrap();
        let (pi, pj, q) = model.forward_pair(&xi, &xj).unwrap();
        let (pj2, pi2, q2) = model.forward_pair(&xj, &xi).unwrap();
        prop_assert_eq!((pi, pj), (pi2, pj2));
        prop_assert_eq!(q, q2);
        prop_assert!(pi > 0.0 && pi < 1.0 && q > 0.0 && q < 1.0);

        let restored = TwinModel::from_checkpoint(&model.to_checkpoint()).unwrap();
        prop_assert_eq!(restored.forward_pair(&xi, &xj).unwrap(), (pi, pj, q));
    }
}

#[test]
fn count_pairs_matches_enumeration() {
    for n in 0..=200u64 {
        let mut brute = 0;
        for i in 0..n {
            for _ in i + 1..n {
                brute += 1;
            }
        }
        assert_eq!(count_pairs(n), brute, "n = {n}");
    }
}

#[test]
fn omega_weights_at_the_low_shot_counts() {
    let c = ClassCounts::binary(995, 152);
    assert!((weight_cla(&c).unwrap() - 0.867480).abs() < 5e-7);
    assert!((weight_sim(&c).unwrap() - 0.769883).abs() < 5e-7);
}

#[test]
fn mcc_vanishes_for_label_independent_predictions() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let n = 10_000;
    let labels: Vec<usize> = (0..n).map(|_| usize::from(rng.random_bool(0.2))).collect();
    let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let m = basic_metrics(&confusion(&labels, &scores, 0.5).unwrap());
    assert!(m.mcc.unwrap().abs() < 0.05, "{:?}", m.mcc);
}
