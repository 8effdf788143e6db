//! Benchmark metrics: preference accuracy with and without ties,
//! distorted/normal recognition precision-recall-F1, and the reasoning-sample
//! filter.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::reward::Preference;
use crate::taxonomy::{bbox_iou, BoundingBox, DistortionLabel, FrameAnnotation, LabelSet};

pub const DEFAULT_TIE_THRESHOLD: f64 = 0.25;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BenchError {
    #[error("length mismatch: {0} predictions vs {1} ground truths")]
    LengthMismatch(usize, usize),
    #[error("nothing to evaluate")]
    Empty,
    #[error("every ground-truth pair is a tie; accuracy without ties is undefined")]
    NoDecisivePairs,
}

/// Tie when the scores differ by less than `tie_threshold`; exact equality
/// is always a tie.
pub fn preference_from_scores(s_a: f64, s_b: f64, tie_threshold: f64) -> Preference {
    if s_a == s_b || (s_a - s_b).abs() < tie_threshold {
        Preference::Tie
    } else if s_a > s_b {
        Preference::AWins
    } else {
        Preference::BWins
    }
}

fn check_lengths(a: usize, b: usize) -> Result<(), BenchError> {
    if a != b {
        return Err(BenchError::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(BenchError::Empty);
    }
    Ok(())
}

/// Fraction of exact three-way matches.
pub fn accuracy_with_tie(preds: &[Preference], gts: &[Preference]) -> Result<f64, BenchError> {
    check_lengths(preds.len(), gts.len())?;
    let hits = preds.iter().zip(gts).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Forced two-way accuracy over pairs whose ground truth is not a tie. A
/// predicted score tie counts as a miss.
pub fn accuracy_without_tie(scores: &[(f64, f64)], gts: &[Preference]) -> Result<f64, BenchError> {
    if scores.len() != gts.len() {
        return Err(BenchError::LengthMismatch(scores.len(), gts.len()));
    }
    let mut decisive = 0usize;
    let mut hits = 0usize;
    for (&(a, b), gt) in scores.iter().zip(gts) {
        let correct = match gt {
            Preference::Tie => continue,
            Preference::AWins => a > b,
            Preference::BWins => b > a,
        };
        decisive += 1;
        hits += correct as usize;
    }
    if decisive == 0 {
        return Err(BenchError::NoDecisivePairs);
    }
    Ok(hits as f64 / decisive as f64)
}

/// Number of decisive (non-tie) ground-truth pairs.
pub fn decisive_count(gts: &[Preference]) -> usize {
    gts.iter().filter(|g| **g != Preference::Tie).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Same matrix with the positive class swapped.
    pub fn flipped(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }
}

/// Confusion matrices with "distorted" and "normal" as the positive class.
pub fn recognition_confusion(
    preds: &[LabelSet],
    gts: &[LabelSet],
) -> Result<(ConfusionCounts, ConfusionCounts), BenchError> {
    if preds.len() != gts.len() {
        return Err(BenchError::LengthMismatch(preds.len(), gts.len()));
    }
    let mut distorted = ConfusionCounts::default();
    for (p, g) in preds.iter().zip(gts) {
        match (!p.is_clean(), !g.is_clean()) {
            (true, true) => distorted.tp += 1,
            (true, false) => distorted.fp += 1,
            (false, true) => distorted.fn_ += 1,
            (false, false) => distorted.tn += 1,
        }
    }
    Ok((distorted, distorted.flipped()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean; 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Every 0/0 is taken as 0.
pub fn precision_recall_f1(c: &ConfusionCounts) -> PrecisionRecall {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    PrecisionRecall {
        precision,
        recall,
        f1: f1_score(precision, recall),
    }
}

/// A synthesized reasoning sample awaiting filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct CotCandidate {
    pub frame_id: String,
    pub labels: LabelSet,
    pub regions: BTreeMap<DistortionLabel, Vec<BoundingBox>>,
    pub reasoning: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CotVerdict {
    pub keep: bool,
    pub reasons: Vec<String>,
}

/// Keep a candidate iff its labels equal the ground truth and every
/// ground-truth box is matched by a same-label predicted box with
/// IoU ≥ `iou_threshold`.
pub fn filter_cot(
    candidate: &CotCandidate,
    gt: &FrameAnnotation,
    iou_threshold: f64,
) -> CotVerdict {
    let mut reasons = Vec::new();
    if !candidate.labels.same_labels(gt.labels()) {
        reasons.push("label-set mismatch".to_string());
    }
    for (label, gt_boxes) in gt.boxes() {
        let predicted = candidate
            .regions
            .get(label)
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        for (k, g) in gt_boxes.iter().enumerate() {
            let best = predicted.iter().map(|p| bbox_iou(p, g)).fold(0.0, f64::max);
            if best < iou_threshold {
                reasons.push(format!(
                    "region miss: {label} box {k} best IoU {best:.4} < {iou_threshold}"
                ));
            }
        }
    }
    CotVerdict {
        keep: reasons.is_empty(),
        reasons,
    }
}
