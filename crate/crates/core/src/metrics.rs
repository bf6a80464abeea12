//! Confusion counts, threshold metrics and ROC AUC.
//!
//! Rates whose denominator is empty (e.g. sensitivity on a test fold without
//! positives) are `None` rather than zero.

use alloc::vec::Vec;

use crate::milnet::classify;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[cfg_attr(feature = "serde", serde(rename = "fn"))]
    pub fn_: u64,
}

impl Confusion {
    pub fn from_predictions(probabilities: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        if probabilities.len() != labels.len() {
            return Err(Error::contract(alloc::format!(
                "{} scores for {} labels",
                probabilities.len(),
                labels.len()
            )));
        }
        let mut c = Confusion::default();
        for (&p, &y) in probabilities.iter().zip(labels) {
            match (classify(p, threshold), y) {
                (1, 1) => c.tp += 1,
                (1, _) => c.fp += 1,
                (_, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    fn ratio(num: f64, den: f64) -> Option<f64> {
        (den > 0.0).then(|| num / den)
    }

    pub fn accuracy(&self) -> Option<f64> {
        Self::ratio((self.tp + self.tn) as f64, self.total() as f64)
    }

    /// True-positive rate.
    pub fn sensitivity(&self) -> Option<f64> {
        Self::ratio(self.tp as f64, (self.tp + self.fn_) as f64)
    }

    /// True-negative rate.
    pub fn specificity(&self) -> Option<f64> {
        Self::ratio(self.tn as f64, (self.tn + self.fp) as f64)
    }

    /// `TP / (TP + ½(FP + FN))`; undefined when the set has no positives.
    pub fn f1(&self) -> Option<f64> {
        if self.tp + self.fn_ == 0 {
            return None;
        }
        Self::ratio(self.tp as f64, self.tp as f64 + 0.5 * (self.fp + self.fn_) as f64)
    }
}

/// Area under the ROC curve by trapezoidal integration over every distinct
/// score. Tied scores contribute a diagonal segment, which matches the
/// Mann–Whitney statistic with ties counted as one half. `None` unless both
/// classes are present.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    if scores.len() != labels.len() {
        return None;
    }
    let positives = labels.iter().filter(|&&y| y == 1).count() as f64;
    let negatives = labels.len() as f64 - positives;
    if positives == 0.0 || negatives == 0.0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0.0f64, 0.0f64);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let (prev_tp, prev_fp) = (tp, fp);
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        area += (fp - prev_fp) * (tp + prev_tp) / 2.0;
    }
    Some(area / (positives * negatives))
}

/// The five reported metrics for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricSet {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
}

impl MetricSet {
    pub fn compute(probabilities: &[f64], labels: &[u8], threshold: f64) -> Result<(Confusion, Self)> {
        let c = Confusion::from_predictions(probabilities, labels, threshold)?;
        Ok((
            c,
            Self {
                accuracy: c.accuracy(),
                sensitivity: c.sensitivity(),
                specificity: c.specificity(),
                f1: c.f1(),
                auc: roc_auc(probabilities, labels),
            },
        ))
    }

    pub const NAMES: [&'static str; 5] = ["accuracy", "sensitivity", "specificity", "f1", "auc"];

    pub fn values(&self) -> [Option<f64>; 5] {
        [self.accuracy, self.sensitivity, self.specificity, self.f1, self.auc]
    }
}

/// Mean and population standard deviation over the defined values.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Summary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub count: usize,
    pub undefined: usize,
}

pub fn summarize(values: &[Option<f64>]) -> Summary {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    let undefined = values.len() - defined.len();
    if defined.is_empty() {
        return Summary {
            mean: None,
            std: None,
            count: 0,
            undefined,
        };
    }
    let n = defined.len() as f64;
    let mean = defined.iter().sum::<f64>() / n;
    let var = defined.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Summary {
        mean: Some(mean),
        std: Some(num_traits::Float::sqrt(var)),
        count: defined.len(),
        undefined,
    }
}
