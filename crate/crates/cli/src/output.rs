//! Run artifacts. Nothing here records wall-clock time, so identical runs
//! produce identical files.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use twinvote_core::experiment::PairCountReport;
use twinvote_core::metrics::MetricReport;
use twinvote_core::model::TwinModel;
use twinvote_core::train::{EpochRecord, OvvEpochRecord};

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_checkpoint(dir: &Path, model: &TwinModel) -> io::Result<()> {
    fs::write(dir.join("model.ckpt"), model.to_checkpoint())
}

/// `metrics.csv` (split, metric, value) and `metrics.jsonl` (one report
/// per split).
pub fn write_reports(dir: &Path, reports: &[(&str, &MetricReport)], pairs: Option<&PairCountReport>) -> io::Result<()> {
    let mut csv = String::from("split,metric,value\n");
    let mut jsonl = String::new();
    if let Some(p) = pairs {
        for (k, v) in [("samples", p.samples), ("all_pairs", p.all_pairs), ("cross_patient_pairs", p.cross_patient_pairs)] {
            writeln!(csv, "train,{k},{v}").unwrap();
        }
    }
    for (split, report) in reports {
        for (k, v) in report.records() {
            writeln!(csv, "{split},{k},{v}").unwrap();
        }
        let mut value = serde_json::to_value(report).map_err(io::Error::other)?;
        value["split"] = serde_json::Value::String(split.to_string());
        jsonl.push_str(&value.to_string());
        jsonl.push('\n');
    }
    fs::write(dir.join("metrics.csv"), csv)?;
    fs::write(dir.join("metrics.jsonl"), jsonl)
}

pub fn write_train_history(dir: &Path, history: &[EpochRecord]) -> io::Result<()> {
    let mut csv = String::from("epoch,learning_rate,train_loss,val_fsc\n");
    for r in history {
        writeln!(csv, "{},{},{},{}", r.epoch, r.learning_rate, r.train_loss, fmt_opt(r.val_fsc)).unwrap();
    }
    fs::write(dir.join("history.csv"), csv)
}

/// `history.csv` with the per-epoch vote counts and `acceptance.csv`, the
/// acceptance-rate curve.
pub fn write_ovv_history(dir: &Path, history: &[OvvEpochRecord]) -> io::Result<()> {
    let mut csv = String::from(
        "epoch,learning_rate,batches,steps,qualified_references,confident_targets,accepted,accepted_positive,rejected,target_fsc,reference_fsc,promoted\n",
    );
    let mut curve = String::from("epoch,targets,accepted,acceptance_rate\n");
    for r in history {
        let s = &r.stats;
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.learning_rate,
            s.batches,
            s.steps,
            s.qualified_references,
            s.confident_targets,
            s.accepted,
            s.accepted_positive,
            s.rejected,
            fmt_opt(r.target_fsc),
            fmt_opt(r.reference_fsc),
            r.promoted
        )
        .unwrap();
        writeln!(curve, "{},{},{},{}", r.epoch, s.accepted + s.rejected, s.accepted, r.acceptance_rate).unwrap();
    }
    fs::write(dir.join("history.csv"), csv)?;
    fs::write(dir.join("acceptance.csv"), curve)
}
