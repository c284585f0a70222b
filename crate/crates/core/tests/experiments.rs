use twinvote_core::data::LabeledSample;
use twinvote_core::experiment::{
    build_dataset, evaluate_model, pair_count_report, run_lowshot, run_supervised, ExperimentConfig,
};
use twinvote_core::model::TwinModel;
use twinvote_core::train::{derive_seed, validation_fsc};

fn config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        synthetic_n0: 200,
        synthetic_n1: 50,
        synthetic_dim: 6,
        synthetic_separation: 4.0,
        synthetic_unlabeled: 0,
        synthetic_val: 200,
        synthetic_test: 400,
        hidden: vec![12, 6],
        max_epochs: 30,
        pairs_per_epoch: 512,
        learning_rate: 0.05,
        bootstrap_samples: 0,
        ..ExperimentConfig::default()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn separable_data_is_learned() {
    let aucs: Vec<f64> = (0..5)
        .map(|seed| {
            let cfg = config(seed);
            let data = build_dataset(&cfg).unwrap();
            run_supervised(&cfg, &data).unwrap().reports.test.auroc.unwrap()
        })
        .collect();
    assert!(median(aucs.clone()) >= 0.95, "{aucs:?}");
}

#[test]
fn classification_head_is_untouched_without_its_loss() {
    let cfg = ExperimentConfig { lambda: 0.0, ..config(0) };
    let data = build_dataset(&cfg).unwrap();
    let run = run_lowshot(&cfg, &data).unwrap();
    let initial = TwinModel::new(cfg.model_config(cfg.synthetic_dim), derive_seed(cfg.seed, 102)).unwrap();
    let trained = run.outcome.model.params();
    for (name, t) in initial.params().iter() {
        let moved = trained.get(name).unwrap() != t;
        assert_eq!(moved, !name.starts_with("cls."), "{name}");
    }
}

#[test]
fn overlapping_classes_score_at_chance() {
    let cfg = ExperimentConfig { synthetic_separation: 0.0, max_epochs: 10, ..config(3) };
    let data = build_dataset(&cfg).unwrap();
    let auc = run_lowshot(&cfg, &data).unwrap().reports.test.auroc.unwrap();
    assert!((auc - 0.5).abs() < 0.1, "{auc}");
}

#[test]
fn evaluation_reproduces_the_selection_score() {
    let cfg = config(1);
    let data = build_dataset(&cfg).unwrap();
    let run = run_lowshot(&cfg, &data).unwrap();
    let logged = run.outcome.history[run.outcome.best_epoch].val_fsc;
    assert_eq!(validation_fsc(&run.outcome.model, &data.val).unwrap(), logged);
    assert_eq!(run.reports.val.basic.fsc, logged);
    let again = evaluate_model(&run.outcome.model, &data.val, 0, 0).unwrap();
    assert_eq!(again.auroc, run.reports.val.auroc);
}

#[test]
fn single_class_split_has_no_auroc() {
    let cfg = config(2);
    let data = build_dataset(&cfg).unwrap();
    let run = run_supervised(&cfg, &data).unwrap();
    let negatives: Vec<LabeledSample> = data.test.iter().filter(|s| s.label == 0).cloned().collect();
    let report = evaluate_model(&run.outcome.model, &negatives, 1000, 0).unwrap();
    assert_eq!(report.auroc, None);
    assert_eq!(report.auroc_ci, None);
    assert!(report.auroc_absent_reason.is_some());
}

#[test]
fn low_shot_subset_pair_count() {
    let cfg = ExperimentConfig {
        synthetic_n0: 995,
        synthetic_n1: 152,
        synthetic_dim: 2,
        synthetic_unlabeled: 0,
        synthetic_val: 10,
        synthetic_test: 10,
        ..ExperimentConfig::default()
    };
    let data = build_dataset(&cfg).unwrap();
    let report = pair_count_report(&data.train);
    assert_eq!((report.samples, report.all_pairs), (1147, 657_231));
    assert_eq!(report.cross_patient_pairs, report.all_pairs);
}

#[test]
fn reruns_are_identical() {
    let cfg = ExperimentConfig { max_epochs: 5, ..config(4) };
    let data = build_dataset(&cfg).unwrap();
    let a = run_lowshot(&cfg, &data).unwrap();
    let b = run_lowshot(&cfg, &data).unwrap();
    assert_eq!(a.outcome.model.to_checkpoint(), b.outcome.model.to_checkpoint());
    assert_eq!(a.reports.test.records(), b.reports.test.records());
}
