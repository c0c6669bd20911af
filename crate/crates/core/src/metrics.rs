//! Evaluation of uncertainty scores against correctness labels.
//!
//! Labels are booleans where `true` marks an unreliable answer (the positive
//! class for AUROC and F1). A sample is predicted unreliable when its score is
//! strictly above the threshold.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{min_max_normalize, NormalizationStats};
use crate::types::{DatasetSplit, Judgment, Method, ScoreSet};

/// id -> unreliable.
pub type Labels = BTreeMap<String, bool>;

pub fn labels_from_judgments(judgments: &[Judgment]) -> Labels {
    judgments
        .iter()
        .map(|j| (j.id.clone(), j.is_unreliable()))
        .collect()
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("AUROC undefined on one class")]
    SingleClass,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("no samples to evaluate")]
    Empty,
    #[error("score {value} outside [0,1]; normalize before computing ECE")]
    OutOfUnitRange { value: f64 },
    #[error("non-finite score {value}")]
    NonFinite { value: f64 },
    #[error("number of bins must be at least 1")]
    NoBins,
    #[error("no score for id: {0}")]
    MissingScore(String),
    #[error("no label for id: {0}")]
    MissingLabel(String),
    #[error("costs must be non-negative")]
    NegativeCost,
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<(), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(&value) = scores.iter().find(|s| s.is_nan()) {
        return Err(MetricError::NonFinite { value });
    }
    Ok(())
}

/// Probability that a random (unreliable, reliable) pair is ordered with the
/// unreliable sample scored higher; ties count one half.
///
/// Counts pairs per tie group after sorting, in exact integer arithmetic.
pub fn auroc(scores: &[f64], unreliable: &[bool]) -> Result<f64, MetricError> {
    check_lengths(scores, unreliable)?;
    let n_pos = unreliable.iter().filter(|&&u| u).count() as u128;
    let n_neg = unreliable.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the number of correctly ordered pairs.
    let mut doubled_wins: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let pos_here = order[start..end].iter().filter(|&&i| unreliable[i]).count() as u128;
        let neg_here = (end - start) as u128 - pos_here;
        doubled_wins += 2 * pos_here * neg_below + pos_here * neg_here;
        neg_below += neg_here;
        start = end;
    }
    Ok(doubled_wins as f64 / (2 * n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(with = "float_or_inf")]
    pub tau: f64,
}

pub fn f1(scores: &[f64], unreliable: &[bool], tau: f64) -> Result<F1Score, MetricError> {
    check_lengths(scores, unreliable)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&s, &u) in scores.iter().zip(unreliable) {
        match (s > tau, u) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(F1Score {
        precision,
        recall,
        f1,
        tau,
    })
}

/// Threshold candidates: `-inf`, the midpoints between adjacent distinct
/// scores, and `+inf`, in ascending order.
pub fn threshold_candidates(scores: &[f64]) -> Vec<f64> {
    let mut unique: Vec<f64> = scores.to_vec();
    unique.sort_by(f64::total_cmp);
    unique.dedup();
    let mut out = Vec::with_capacity(unique.len() + 1);
    out.push(f64::NEG_INFINITY);
    for pair in unique.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        let mid = lo + (hi - lo) / 2.0;
        // Adjacent floats: the midpoint may round up onto `hi`.
        out.push(if mid < hi { mid } else { lo });
    }
    out.push(f64::INFINITY);
    out
}

/// Threshold maximizing F1 on the given (development) samples; ties go to the
/// smallest threshold.
pub fn select_threshold(scores: &[f64], unreliable: &[bool]) -> Result<f64, MetricError> {
    check_lengths(scores, unreliable)?;
    let n_pos = unreliable.iter().filter(|&&u| u).count();
    if n_pos == 0 || n_pos == unreliable.len() {
        return Err(MetricError::SingleClass);
    }
    let mut best = (f64::NEG_INFINITY, -1.0);
    for tau in threshold_candidates(scores) {
        let score = f1(scores, unreliable, tau)?.f1;
        if score > best.1 {
            best = (tau, score);
        }
    }
    Ok(best.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Mean confidence in the bin; 0 when empty.
    pub conf: f64,
    /// Fraction of reliable samples in the bin; 0 when empty.
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub value: f64,
    pub bins: Vec<CalibrationBin>,
}

impl CalibrationTable {
    /// Plot-ready CSV: `bin_lo,bin_hi,count,confidence,accuracy`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count,confidence,accuracy\n");
        for b in &self.bins {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                b.lo, b.hi, b.count, b.conf, b.acc
            ));
        }
        out
    }
}

/// Index of the equal-width bin holding `conf`: bins are `(lo, hi]` except the
/// first, which is `[0, hi]`.
pub fn bin_index(conf: f64, bins: usize) -> usize {
    let m = bins as f64;
    let lo = |k: usize| k as f64 / m;
    let mut k = ((conf * m).ceil() as usize).saturating_sub(1).min(bins - 1);
    while k > 0 && conf <= lo(k) {
        k -= 1;
    }
    while k + 1 < bins && conf > lo(k + 1) {
        k += 1;
    }
    k
}

/// Expected calibration error with confidence `1 - uncertainty` and accuracy
/// the fraction of reliable samples.
pub fn ece(
    uncertainty: &[f64],
    unreliable: &[bool],
    bins: usize,
) -> Result<CalibrationTable, MetricError> {
    check_lengths(uncertainty, unreliable)?;
    if bins == 0 {
        return Err(MetricError::NoBins);
    }
    if uncertainty.is_empty() {
        return Err(MetricError::Empty);
    }
    if let Some(&value) = uncertainty.iter().find(|u| !(0.0..=1.0).contains(*u)) {
        return Err(MetricError::OutOfUnitRange { value });
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut reliable = vec![0usize; bins];
    for (&u, &bad) in uncertainty.iter().zip(unreliable) {
        let conf = 1.0 - u;
        let k = bin_index(conf, bins);
        count[k] += 1;
        conf_sum[k] += conf;
        reliable[k] += usize::from(!bad);
    }
    let n = uncertainty.len() as f64;
    let mut value = 0.0;
    let table = (0..bins)
        .map(|k| {
            let (conf, acc) = if count[k] == 0 {
                (0.0, 0.0)
            } else {
                let c = count[k] as f64;
                (conf_sum[k] / c, reliable[k] as f64 / c)
            };
            value += count[k] as f64 / n * (acc - conf).abs();
            CalibrationBin {
                lo: k as f64 / bins as f64,
                hi: (k + 1) as f64 / bins as f64,
                count: count[k],
                conf,
                acc,
            }
        })
        .collect();
    Ok(CalibrationTable { value, bins: table })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionCosts {
    /// Cost of flagging a reliable sample as unreliable.
    pub lambda_01: f64,
    /// Cost of passing an unreliable sample as reliable.
    pub lambda_10: f64,
    #[serde(with = "float_or_inf")]
    pub tau: f64,
}

/// Mean cost incurred by thresholding the scores at `costs.tau`.
pub fn decision_risk(
    scores: &[f64],
    unreliable: &[bool],
    costs: &DecisionCosts,
) -> Result<f64, MetricError> {
    check_lengths(scores, unreliable)?;
    if costs.lambda_01 < 0.0 || costs.lambda_10 < 0.0 {
        return Err(MetricError::NegativeCost);
    }
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    let total: f64 = scores
        .iter()
        .zip(unreliable)
        .map(|(&s, &bad)| match (bad, s > costs.tau) {
            (false, true) => costs.lambda_01,
            (true, false) => costs.lambda_10,
            _ => 0.0,
        })
        .sum();
    Ok(total / scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    #[serde(with = "float_or_inf")]
    pub tau: f64,
    pub lambda_01: f64,
    pub lambda_10: f64,
    pub value: f64,
}

/// Scores and labels for `ids`, in the iteration order of `ids`.
pub fn aligned<'a>(
    scores: &ScoreSet,
    labels: &Labels,
    ids: impl IntoIterator<Item = &'a String>,
) -> Result<(Vec<f64>, Vec<bool>), MetricError> {
    let mut s = Vec::new();
    let mut l = Vec::new();
    for id in ids {
        s.push(
            scores
                .get(id)
                .ok_or_else(|| MetricError::MissingScore(id.clone()))?,
        );
        l.push(
            *labels
                .get(id)
                .ok_or_else(|| MetricError::MissingLabel(id.clone()))?,
        );
    }
    Ok((s, l))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdChoice {
    /// Maximize F1 on the development split.
    #[default]
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub bins: usize,
    pub tau: ThresholdChoice,
    pub lambda_01: f64,
    pub lambda_10: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bins: 10,
            tau: ThresholdChoice::Auto,
            lambda_01: 1.0,
            lambda_10: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub auroc: f64,
    pub f1: f64,
    pub ece: f64,
    pub risk: f64,
}

impl Summary {
    fn minus(&self, other: &Summary) -> Summary {
        Summary {
            auroc: self.auroc - other.auroc,
            f1: self.f1 - other.f1,
            ece: self.ece - other.ece,
            risk: self.risk - other.risk,
        }
    }
}

/// Side-by-side comparison: baseline, corrected, and corrected minus baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub vanilla: Summary,
    pub corrected: Summary,
    pub improvement: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub n_dev: usize,
    pub n_test: usize,
    pub auroc: f64,
    pub f1: F1Score,
    pub ece: CalibrationTable,
    pub risk: RiskReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<NormalizationStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deltas: Option<Deltas>,
}

impl EvalReport {
    pub fn summary(&self) -> Summary {
        Summary {
            auroc: self.auroc,
            f1: self.f1.f1,
            ece: self.ece.value,
            risk: self.risk.value,
        }
    }

    /// Attach deltas against a baseline report.
    pub fn with_baseline(mut self, baseline: &EvalReport) -> Self {
        let corrected = self.summary();
        let vanilla = baseline.summary();
        self.deltas = Some(Deltas {
            vanilla,
            corrected,
            improvement: corrected.minus(&vanilla),
        });
        self
    }
}

/// Evaluate one score set on the test split, with the F1/risk threshold chosen
/// on the dev split. Scores that are not already probabilities are min-max
/// normalized over dev and test together first.
pub fn evaluate(
    scores: &ScoreSet,
    labels: &Labels,
    split: &DatasetSplit,
    config: &EvalConfig,
) -> Result<EvalReport, crate::Error> {
    let eval_ids: BTreeSet<&String> = split.evaluation_ids().collect();
    for id in &eval_ids {
        if scores.get(id).is_none() {
            return Err(MetricError::MissingScore((*id).clone()).into());
        }
    }
    let restricted = scores.restrict(eval_ids.iter().copied());
    let (scores, normalization) = if restricted.normalized {
        (restricted, None)
    } else {
        let (normalized, stats) = min_max_normalize(&restricted)?;
        (normalized, Some(stats))
    };

    let (test_scores, test_labels) = aligned(&scores, labels, &split.test_ids)?;
    let tau = match config.tau {
        ThresholdChoice::Fixed(tau) => tau,
        ThresholdChoice::Auto => {
            let (dev_scores, dev_labels) = aligned(&scores, labels, &split.dev_ids)?;
            select_threshold(&dev_scores, &dev_labels)?
        }
    };
    let costs = DecisionCosts {
        lambda_01: config.lambda_01,
        lambda_10: config.lambda_10,
        tau,
    };
    Ok(EvalReport {
        method: scores.method,
        n_dev: split.dev_ids.len(),
        n_test: split.test_ids.len(),
        auroc: auroc(&test_scores, &test_labels)?,
        f1: f1(&test_scores, &test_labels, tau)?,
        ece: ece(&test_scores, &test_labels, config.bins)?,
        risk: RiskReport {
            tau,
            lambda_01: costs.lambda_01,
            lambda_10: costs.lambda_10,
            value: decision_risk(&test_scores, &test_labels, &costs)?,
        },
        normalization,
        deltas: None,
    })
}

/// JSON has no infinities; thresholds at the sentinels are written as the
/// strings `"inf"` and `"-inf"`.
pub mod float_or_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *value == f64::INFINITY {
            s.serialize_str("inf")
        } else if *value == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else {
            s.serialize_f64(*value)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!("bad threshold '{other}'"))),
            },
        }
    }
}
