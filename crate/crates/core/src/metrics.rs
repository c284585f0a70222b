//! Binary-classifier evaluation.
//!
//! A sample is predicted positive when its score is strictly greater than
//! the threshold. Ratios whose denominator is zero are reported as `None`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{labels} labels but {scores} scores")]
    LengthMismatch { labels: usize, scores: usize },
    #[error("label {0} is not binary")]
    InvalidLabel(usize),
    #[error("need at least one positive and one negative sample (positives {positives}, negatives {negatives})")]
    SingleClass { positives: usize, negatives: usize },
    #[error("specificity target {0} outside [0, 1]")]
    InvalidTarget(f64),
    #[error("at least {min} bootstrap resamples required, got {got}")]
    TooFewResamples { min: usize, got: usize },
    #[error("bootstrap could not draw a two-class resample after {0} attempts")]
    DegenerateResamples(usize),
}

fn check_inputs(labels: &[usize], scores: &[f64]) -> Result<(usize, usize), MetricsError> {
    if labels.len() != scores.len() {
        return Err(MetricsError::LengthMismatch {
            labels: labels.len(),
            scores: scores.len(),
        });
    }
    let mut pos = 0;
    for &y in labels {
        match y {
            0 => {}
            1 => pos += 1,
            other => return Err(MetricsError::InvalidLabel(other)),
        }
    }
    Ok((pos, labels.len() - pos))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

pub fn confusion(labels: &[usize], scores: &[f64], threshold: f64) -> Result<Confusion, MetricsError> {
    check_inputs(labels, scores)?;
    let mut c = Confusion::default();
    for (&y, &s) in labels.iter().zip(scores) {
        match (y == 1, s > threshold) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BasicMetrics {
    pub acc: Option<f64>,
    pub pre: Option<f64>,
    pub rec: Option<f64>,
    pub spe: Option<f64>,
    pub fsc: Option<f64>,
    pub mcc: Option<f64>,
    pub iou: Option<f64>,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

pub fn basic_metrics(c: &Confusion) -> BasicMetrics {
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let pre = ratio(tp, tp + fp);
    let rec = ratio(tp, tp + fn_);
    let fsc = match (pre, rec) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    let mcc_den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    BasicMetrics {
        acc: ratio(tp + tn, tp + tn + fp + fn_),
        pre,
        rec,
        spe: ratio(tn, tn + fp),
        fsc,
        mcc: ratio(tp * tn - fp * fn_, mcc_den),
        // Jaccard index of predicted and actual positives
        iou: ratio(tp, tp + fp + fn_),
    }
}

/// `(FPR, TPR)` points from the highest threshold down to the lowest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
}

/// Sweeps every distinct score as a threshold; the area uses the trapezoid
/// rule, so tied positive/negative scores earn half credit.
pub fn roc_and_auroc(labels: &[usize], scores: &[f64]) -> Result<(RocCurve, f64), MetricsError> {
    let (positives, negatives) = check_inputs(labels, scores)?;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass { positives, negatives });
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (p, n) = (positives as f64, negatives as f64);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if labels[order[k]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let (x0, y0) = *points.last().unwrap();
        let (x1, y1) = (fp as f64 / n, tp as f64 / p);
        area += (x1 - x0) * (y0 + y1) / 2.0;
        points.push((x1, y1));
    }
    Ok((RocCurve { points }, area))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub sensitivity: f64,
    pub specificity: f64,
    pub threshold: f64,
    pub confusion: Confusion,
}

/// The smallest observed score `t` whose rule `score > t` reaches the
/// requested specificity, and the sensitivity there.
pub fn sensitivity_at_specificity(
    labels: &[usize],
    scores: &[f64],
    target: f64,
) -> Result<OperatingPoint, MetricsError> {
    if !(0.0..=1.0).contains(&target) {
        return Err(MetricsError::InvalidTarget(target));
    }
    let (positives, negatives) = check_inputs(labels, scores)?;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass { positives, negatives });
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // walk thresholds upward; after consuming every score equal to t, the
    // consumed samples are exactly those predicted negative at t
    let (mut tn, mut fn_) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let t = scores[order[k]];
        while k < order.len() && scores[order[k]] == t {
            if labels[order[k]] == 1 {
                fn_ += 1;
            } else {
                tn += 1;
            }
            k += 1;
        }
        let specificity = tn as f64 / negatives as f64;
        if specificity >= target {
            let tp = positives - fn_;
            return Ok(OperatingPoint {
                sensitivity: tp as f64 / positives as f64,
                specificity,
                threshold: t,
                confusion: Confusion {
                    tp,
                    tn,
                    fp: negatives - tn,
                    fn_,
                },
            });
        }
    }
    unreachable!("the largest score always yields specificity 1")
}

pub const MIN_RESAMPLES: usize = 100;
const RESAMPLE_RETRIES: usize = 1000;

/// Percentile bootstrap 95% interval of `statistic`. Each resample draws
/// from its own ChaCha stream of the master seed; resamples where the
/// statistic is undefined are redrawn.
pub fn bootstrap_ci_with<F>(
    labels: &[usize],
    scores: &[f64],
    n_boot: usize,
    seed: u64,
    statistic: F,
) -> Result<(f64, f64), MetricsError>
where
    F: Fn(&[usize], &[f64]) -> Option<f64>,
{
    check_inputs(labels, scores)?;
    if n_boot < MIN_RESAMPLES {
        return Err(MetricsError::TooFewResamples {
            min: MIN_RESAMPLES,
            got: n_boot,
        });
    }
    let n = labels.len();
    let mut stats = Vec::with_capacity(n_boot);
    let (mut ys, mut ss) = (vec![0usize; n], vec![0.0; n]);
    for b in 0..n_boot {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64);
        let mut value = None;
        for _ in 0..RESAMPLE_RETRIES {
            for k in 0..n {
                let pick = rng.random_range(0..n);
                ys[k] = labels[pick];
                ss[k] = scores[pick];
            }
            value = statistic(&ys, &ss);
            if value.is_some() {
                break;
            }
        }
        stats.push(value.ok_or(MetricsError::DegenerateResamples(RESAMPLE_RETRIES))?);
    }
    stats.sort_by(f64::total_cmp);
    Ok((quantile(&stats, 0.025), quantile(&stats, 0.975)))
}

pub fn bootstrap_ci(labels: &[usize], scores: &[f64], n_boot: usize, seed: u64) -> Result<(f64, f64), MetricsError> {
    bootstrap_ci_with(labels, scores, n_boot, seed, |y, s| roc_and_auroc(y, s).ok().map(|(_, a)| a))
}

/// Linear interpolation between order statistics of a sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Everything reported for one model on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: usize,
    pub threshold: f64,
    pub confusion: Confusion,
    pub basic: BasicMetrics,
    pub auroc: Option<f64>,
    pub auroc_ci: Option<(f64, f64)>,
    /// Why AUROC (and everything derived from the ranking) is missing.
    pub auroc_absent_reason: Option<String>,
    pub sen_at_spe90: Option<f64>,
    pub sen_at_spe95: Option<f64>,
}

impl MetricReport {
    /// Flat `(key, value)` view; absent values are empty strings.
    pub fn records(&self) -> Vec<(&'static str, String)> {
        let f = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        vec![
            ("samples", self.samples.to_string()),
            ("tp", self.confusion.tp.to_string()),
            ("tn", self.confusion.tn.to_string()),
            ("fp", self.confusion.fp.to_string()),
            ("fn", self.confusion.fn_.to_string()),
            ("acc", f(self.basic.acc)),
            ("pre", f(self.basic.pre)),
            ("rec", f(self.basic.rec)),
            ("spe", f(self.basic.spe)),
            ("fsc", f(self.basic.fsc)),
            ("mcc", f(self.basic.mcc)),
            ("iou", f(self.basic.iou)),
            ("auroc", f(self.auroc)),
            ("auroc_ci_low", f(self.auroc_ci.map(|c| c.0))),
            ("auroc_ci_high", f(self.auroc_ci.map(|c| c.1))),
            ("sen_at_spe90", f(self.sen_at_spe90)),
            ("sen_at_spe95", f(self.sen_at_spe95)),
        ]
    }
}

/// Full metric suite at threshold 0.5. `n_boot == 0` skips the interval.
pub fn evaluate_scores(labels: &[usize], scores: &[f64], n_boot: usize, seed: u64) -> Result<MetricReport, MetricsError> {
    let threshold = 0.5;
    let c = confusion(labels, scores, threshold)?;
    let mut report = MetricReport {
        samples: labels.len(),
        threshold,
        confusion: c,
        basic: basic_metrics(&c),
        auroc: None,
        auroc_ci: None,
        auroc_absent_reason: None,
        sen_at_spe90: None,
        sen_at_spe95: None,
    };
    match roc_and_auroc(labels, scores) {
        Ok((_, auc)) => {
            report.auroc = Some(auc);
            if n_boot > 0 {
                report.auroc_ci = Some(bootstrap_ci(labels, scores, n_boot, seed)?);
            }
            report.sen_at_spe90 = Some(sensitivity_at_specificity(labels, scores, 0.90)?.sensitivity);
            report.sen_at_spe95 = Some(sensitivity_at_specificity(labels, scores, 0.95)?.sensitivity);
        }
        Err(e @ MetricsError::SingleClass { .. }) => report.auroc_absent_reason = Some(e.to_string()),
        Err(e) => return Err(e),
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(labels: &[usize], scores: &[f64]) -> f64 {
        let pos: Vec<f64> = labels.iter().zip(scores).filter(|(y, _)| **y == 1).map(|(_, s)| *s).collect();
        let neg: Vec<f64> = labels.iter().zip(scores).filter(|(y, _)| **y == 0).map(|(_, s)| *s).collect();
        let mut credit = 0.0;
        for p in &pos {
            for n in &neg {
                credit += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        credit / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn confusion_examples() {
        let c = confusion(&[1, 0], &[0.9, 0.1], 0.5).unwrap();
        assert_eq!(c, Confusion { tp: 1, tn: 1, fp: 0, fn_: 0 });
        let c = confusion(&[1, 0, 1], &[0.0; 3], 0.5).unwrap();
        assert_eq!((c.tp, c.fp), (0, 0));
        let c = confusion(&[1, 0], &[1.0, 1.0], 1.0).unwrap();
        assert_eq!((c.tp, c.fp), (0, 0));
        assert!(confusion(&[1], &[0.2, 0.3], 0.5).is_err());
        assert!(confusion(&[2], &[0.2], 0.5).is_err());
    }

    #[test]
    fn basic_examples() {
        let m = basic_metrics(&Confusion { tp: 1, tn: 1, fp: 0, fn_: 0 });
        assert_eq!((m.acc, m.fsc, m.mcc), (Some(1.0), Some(1.0), Some(1.0)));
        // PRE = 0.5, REC = 1
        let m = basic_metrics(&Confusion { tp: 1, tn: 3, fp: 1, fn_: 0 });
        assert_eq!(m.pre, Some(0.5));
        assert_eq!(m.rec, Some(1.0));
        assert!((m.fsc.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.iou, Some(0.5));
        let m = basic_metrics(&Confusion { tp: 0, tn: 5, fp: 0, fn_: 0 });
        assert_eq!((m.pre, m.rec, m.fsc), (None, None, None));
        assert_eq!(m.mcc, None);
        let m = basic_metrics(&Confusion { tp: 0, tn: 5, fp: 2, fn_: 3 });
        assert_eq!(m.fsc, Some(0.0));
    }

    #[test]
    fn auroc_examples() {
        let (_, a) = roc_and_auroc(&[1, 1, 0, 0], &[0.9, 0.8, 0.1, 0.2]).unwrap();
        assert_eq!(a, 1.0);
        let (_, a) = roc_and_auroc(&[1, 1, 0, 0], &[0.8, 0.4, 0.6, 0.2]).unwrap();
        assert_eq!(a, 0.75);
        let (curve, a) = roc_and_auroc(&[1, 0, 1, 0, 0], &[0.3; 5]).unwrap();
        assert_eq!(a, 0.5);
        assert_eq!(curve.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert!(matches!(
            roc_and_auroc(&[1, 1], &[0.2, 0.3]),
            Err(MetricsError::SingleClass { .. })
        ));
    }

    #[test]
    fn operating_points() {
        let op = sensitivity_at_specificity(&[1, 1, 0, 0, 0], &[0.9, 0.8, 0.1, 0.2, 0.3], 0.95).unwrap();
        assert_eq!(op.sensitivity, 1.0);
        assert_eq!(op.threshold, 0.3);

        // nine of ten negatives at or below 0.5, one above
        let mut labels = vec![0; 10];
        let mut scores = vec![0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.5, 0.8];
        labels.extend([1, 1, 1, 1]);
        scores.extend([0.45, 0.6, 0.7, 0.9]);
        let op = sensitivity_at_specificity(&labels, &scores, 0.90).unwrap();
        assert_eq!(op.threshold, 0.5);
        assert_eq!(op.specificity, 0.9);
        assert_eq!(op.sensitivity, 0.75);
        assert_eq!(op.confusion, Confusion { tp: 3, tn: 9, fp: 1, fn_: 1 });

        // ties: the smallest qualifying threshold wins
        let op = sensitivity_at_specificity(&[0, 0, 1, 1], &[0.5, 0.5, 0.5, 0.9], 0.9).unwrap();
        assert_eq!(op.threshold, 0.5);
        assert_eq!(op.sensitivity, 0.5);

        assert!(sensitivity_at_specificity(&[1, 1], &[0.1, 0.2], 0.9).is_err());
        assert!(sensitivity_at_specificity(&[1, 0], &[0.1, 0.2], 1.5).is_err());
    }

    #[test]
    fn bootstrap_examples() {
        let labels = [1, 1, 1, 0, 0, 0, 0];
        let scores = [0.9, 0.8, 0.7, 0.3, 0.2, 0.1, 0.0];
        assert_eq!(bootstrap_ci(&labels, &scores, 200, 1).unwrap(), (1.0, 1.0));
        let scores = [0.9, 0.2, 0.7, 0.3, 0.8, 0.1, 0.0];
        let a = bootstrap_ci(&labels, &scores, 300, 5).unwrap();
        assert_eq!(a, bootstrap_ci(&labels, &scores, 300, 5).unwrap());
        assert!(a.0 <= a.1);
        assert!(bootstrap_ci(&labels, &scores, 10, 5).is_err());
    }

    #[test]
    fn report_with_single_class() {
        let r = evaluate_scores(&[0, 0, 0], &[0.1, 0.7, 0.2], 100, 0).unwrap();
        assert_eq!(r.auroc, None);
        assert!(r.auroc_absent_reason.is_some());
        assert_eq!(r.confusion.fp, 1);
        let r = evaluate_scores(&[0, 1, 0, 1], &[0.1, 0.7, 0.2, 0.4], 100, 0).unwrap();
        assert_eq!(r.auroc, Some(1.0));
        assert_eq!(r.auroc_ci, Some((1.0, 1.0)));
        assert!(r.records().iter().any(|(k, v)| *k == "auroc_ci_low" && v == "1"));
    }

    proptest! {
        #[test]
        fn trapezoid_matches_pair_counting(
            data in proptest::collection::vec((0usize..2, 0u8..20), 2..120)
        ) {
            let labels: Vec<usize> = data.iter().map(|d| d.0).collect();
            let scores: Vec<f64> = data.iter().map(|d| d.1 as f64 / 19.0).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let (curve, a) = roc_and_auroc(&labels, &scores).unwrap();
            prop_assert!((a - brute_auc(&labels, &scores)).abs() < 1e-12);
            for w in curve.points.windows(2) {
                prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            }
            prop_assert_eq!(*curve.points.last().unwrap(), (1.0, 1.0));
            // strictly monotone transform leaves the ranking alone
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            let (_, b) = roc_and_auroc(&labels, &warped).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn metrics_in_range(tp in 0usize..50, tn in 0usize..50, fp in 0usize..50, fn_ in 0usize..50) {
            let m = basic_metrics(&Confusion { tp, tn, fp, fn_ });
            for v in [m.acc, m.pre, m.rec, m.spe, m.fsc, m.iou].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if let Some(mcc) = m.mcc {
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&mcc));
            }
        }
    }
}
