//! Subject aggregation, ROC AUC and the binary metric suite. MCI is the
//! positive class throughout.

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};

/// Subject score threshold at or above which the subject is called MCI.
pub const DECISION_THRESHOLD: f64 = 0.5;

/// Mean clip probability and the resulting label.
pub fn aggregate_subject(clip_scores: &[f64]) -> Result<(f64, Label)> {
    if clip_scores.is_empty() {
        return Err(Error::InvalidArgument("subject has no clip scores".into()));
    }
    let score = clip_scores.iter().sum::<f64>() / clip_scores.len() as f64;
    Ok((score, predict(score)))
}

pub fn predict(score: f64) -> Label {
    if score >= DECISION_THRESHOLD {
        Label::Mci
    } else {
        Label::Nc
    }
}

/// A rate as a percentage with two decimals, ties rounded away from zero.
pub fn percent(rate: f64) -> f64 {
    (rate * 10_000.0).round() / 100.0
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(predicted: &[Label], truth: &[Label]) -> Self {
        let mut c = Confusion::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            match (t, p) {
                (Label::Mci, Label::Mci) => c.tp += 1,
                (Label::Nc, Label::Mci) => c.fp += 1,
                (Label::Nc, Label::Nc) => c.tn += 1,
                (Label::Mci, Label::Nc) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }

    /// `2TP / (2TP + FP + FN)`, equal to the harmonic mean of precision and
    /// recall wherever both are defined.
    pub fn f1(&self) -> Option<f64> {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Area under the ROC curve by trapezoidal integration over every distinct
/// score threshold. `None` unless both classes are present.
pub fn roc_auc(scores: &[f64], truth: &[Label]) -> Option<f64> {
    let pos = truth.iter().filter(|&&l| l == Label::Mci).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 || scores.len() != truth.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            match truth[order[i]] {
                Label::Mci => tp += 1,
                Label::Nc => fp += 1,
            }
            i += 1;
        }
        let tpr = tp as f64 / pos as f64;
        let fpr = fp as f64 / neg as f64;
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Some(area)
}

/// Subject-level metrics for one fold (`fold` set) or pooled (`fold` null),
/// with optional clip-level accuracy and AUC.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fold: Option<usize>,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub clip_accuracy: Option<f64>,
    pub clip_auc: Option<f64>,
    pub n_subjects: usize,
    pub n_clips: usize,
    pub confusion: Confusion,
}

/// Metrics from subject scores; clip-level fields are left empty.
pub fn compute_metrics(scores: &[f64], truth: &[Label]) -> Result<MetricsReport> {
    if scores.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            truth.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "compute_metrics" });
    }
    let predicted: Vec<Label> = scores.iter().map(|&s| predict(s)).collect();
    let confusion = Confusion::from_predictions(&predicted, truth);
    Ok(MetricsReport {
        fold: None,
        accuracy: confusion.accuracy(),
        f1: confusion.f1(),
        auc: roc_auc(scores, truth),
        sensitivity: confusion.sensitivity(),
        specificity: confusion.specificity(),
        clip_accuracy: None,
        clip_auc: None,
        n_subjects: scores.len(),
        n_clips: 0,
        confusion,
    })
}

/// Per-clip prediction kept for pooling and reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipPrediction {
    pub subject_id: String,
    pub clip_index: usize,
    pub label: Label,
    pub probability: f64,
}

/// Per-subject aggregate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectPrediction {
    pub subject_id: String,
    pub label: Label,
    pub score: f64,
    pub predicted: Label,
    pub n_clips: usize,
}

/// Groups clips by subject (in first-seen order) and aggregates each group.
pub fn aggregate_clips(clips: &[ClipPrediction]) -> Result<Vec<SubjectPrediction>> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: std::collections::HashMap<&str, (Label, Vec<f64>)> = Default::default();
    for c in clips {
        let entry = groups.entry(&c.subject_id).or_insert_with(|| {
            order.push(&c.subject_id);
            (c.label, Vec::new())
        });
        if entry.0 != c.label {
            return Err(Error::InvalidArgument(format!(
                "subject {} has clips with both labels",
                c.subject_id
            )));
        }
        entry.1.push(c.probability);
    }
    order
        .into_iter()
        .map(|id| {
            let (label, scores) = &groups[id];
            let (score, predicted) = aggregate_subject(scores)?;
            Ok(SubjectPrediction {
                subject_id: id.to_string(),
                label: *label,
                score,
                predicted,
                n_clips: scores.len(),
            })
        })
        .collect()
}

/// Subject metrics plus clip accuracy and AUC from per-clip predictions.
pub fn report_from_clips(fold: Option<usize>, clips: &[ClipPrediction]) -> Result<MetricsReport> {
    let subjects = aggregate_clips(clips)?;
    let scores: Vec<f64> = subjects.iter().map(|s| s.score).collect();
    let truth: Vec<Label> = subjects.iter().map(|s| s.label).collect();
    let mut report = compute_metrics(&scores, &truth)?;
    let clip_scores: Vec<f64> = clips.iter().map(|c| c.probability).collect();
    let clip_truth: Vec<Label> = clips.iter().map(|c| c.label).collect();
    let clip_pred: Vec<Label> = clip_scores.iter().map(|&s| predict(s)).collect();
    report.fold = fold;
    report.clip_accuracy = Confusion::from_predictions(&clip_pred, &clip_truth).accuracy();
    report.clip_auc = roc_auc(&clip_scores, &clip_truth);
    report.n_clips = clips.len();
    Ok(report)
}
