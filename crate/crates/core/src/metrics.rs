//! F1, 2AFC (ROC AUC) and the evaluation report.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn count(predictions: &[f64], labels: &[f64]) -> Self {
        let mut c = Confusion::default();
        for (&p, &y) in predictions.iter().zip(labels) {
            match (p > 0.0, y > 0.0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `2tp / (2tp + fp + fn)`, or 0 when nothing is positive.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            (self.tp + self.tn) as f64 / self.total() as f64
        }
    }
}

/// F1 score of the +1 class.
pub fn f1(predictions: &[f64], labels: &[f64]) -> f64 {
    Confusion::count(predictions, labels).f1()
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from average ranks.
pub fn two_afc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&y| y > 0.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("2AFC needs at least one positive and one negative".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] > 0.0 {
                pos_rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub f1: f64,
    pub two_afc: f64,
    pub accuracy: f64,
    pub confusion: Confusion,
}

impl EvalReport {
    /// Scores are thresholded at 0 (label +1 when `score >= 0`).
    pub fn from_scores(scores: &[f64], labels: &[f64]) -> Result<Self> {
        let predictions: Vec<f64> = scores.iter().map(|&s| if s >= 0.0 { 1.0 } else { -1.0 }).collect();
        let confusion = Confusion::count(&predictions, labels);
        Ok(EvalReport {
            f1: confusion.f1(),
            two_afc: two_afc(scores, labels)?,
            accuracy: confusion.accuracy(),
            confusion,
        })
    }

    /// Flat key/value record, in a fixed order.
    pub fn to_record(&self) -> Vec<(&'static str, String)> {
        vec![
            ("f1", self.f1.to_string()),
            ("two_afc", self.two_afc.to_string()),
            ("accuracy", self.accuracy.to_string()),
            ("tp", self.confusion.tp.to_string()),
            ("fp", self.confusion.fp.to_string()),
            ("tn", self.confusion.tn.to_string()),
            ("fn", self.confusion.fn_.to_string()),
        ]
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.confusion;
        write!(
            f,
            "F1 {:.4}  2AFC {:.4}  accuracy {:.4}  (tp {} fp {} tn {} fn {})",
            self.f1, self.two_afc, self.accuracy, c.tp, c.fp, c.tn, c.fn_
        )
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
