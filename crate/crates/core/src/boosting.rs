//! Boosted decision layer over FC activations.
//!
//! Every FC neuron is a candidate weak classifier: a decision stump on that
//! neuron's activation whose hard sign is replaced by the smooth surrogate
//! `f / sqrt(f^2 + eta^2)` so the layer can be trained by backpropagation.
//! AdaBoost picks the active neurons per mini-batch; the strong classifier is
//! the simplex-weighted sum of their smooth responses.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest slope scale a weak classifier may have.
pub const ETA_FLOOR: f64 = 1e-8;

/// AdaBoost stops once the best weighted error is within this of 0.5.
pub const CHANCE_MARGIN: f64 = 1e-6;

/// Weighted errors at or below this count as a perfect split.
pub const PERFECT_ERROR: f64 = 1e-6;

/// Two weighted errors closer than this are treated as a tie.
pub const ERROR_TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn sign(self) -> f64 {
        match self {
            Polarity::Positive => 1.0,
            Polarity::Negative => -1.0,
        }
    }

    pub fn from_sign(s: f64) -> Self {
        if s < 0.0 {
            Polarity::Negative
        } else {
            Polarity::Positive
        }
    }
}

/// `f / sqrt(f^2 + eta^2)`, a sign surrogate in (-1, 1).
pub fn smooth_sign(f: f64, eta: f64) -> f64 {
    f / f.hypot(eta)
}

/// Derivative of [`smooth_sign`] in `f`: `eta^2 / (f^2 + eta^2)^(3/2)`.
pub fn smooth_sign_slope(f: f64, eta: f64) -> f64 {
    let r = f.hypot(eta);
    let q = eta / r;
    q * q / r
}

/// Threshold, orientation and slope of one decision stump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stump {
    pub polarity: Polarity,
    pub threshold: f64,
    pub eta: f64,
}

impl Stump {
    /// Signed margin `p * (x - threshold)`.
    pub fn margin(&self, x: f64) -> f64 {
        self.polarity.sign() * (x - self.threshold)
    }

    pub fn response(&self, x: f64) -> f64 {
        smooth_sign(self.margin(x), self.eta)
    }

    /// Hard stump output. Values exactly at the threshold fall on the low side.
    pub fn hard(&self, x: f64) -> f64 {
        hard_stump(x, self.polarity, self.threshold)
    }
}

pub(crate) fn hard_stump(x: f64, polarity: Polarity, threshold: f64) -> f64 {
    if x > threshold {
        polarity.sign()
    } else {
        -polarity.sign()
    }
}

/// One FC neuron's stump inside a strong classifier. `alpha == 0` marks an
/// inactive neuron, whose stump fields carry no meaning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakClassifier {
    pub neuron: usize,
    pub stump: Stump,
    pub alpha: f64,
}

impl WeakClassifier {
    pub fn inactive(neuron: usize) -> Self {
        WeakClassifier {
            neuron,
            stump: Stump {
                polarity: Polarity::Positive,
                threshold: 0.0,
                eta: 1.0,
            },
            alpha: 0.0,
        }
    }

    pub fn is_active(&self) -> bool {
        self.alpha > 0.0
    }
}

/// Smooth response of `w` at activation `x`.
pub fn smooth_response(x: f64, w: &WeakClassifier) -> f64 {
    w.stump.response(x)
}

/// Activation features `[M, K]` with one label in {-1, +1} per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    features: Tensor,
    labels: Vec<f64>,
}

impl ActivationBatch {
    pub fn new(features: Tensor, labels: Vec<f64>) -> Result<Self> {
        features.expect_rank(2, "activation batch")?;
        if features.shape()[0] != labels.len() {
            return Err(Error::shape(format!(
                "{} feature rows but {} labels",
                features.shape()[0],
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 1.0 && y != -1.0) {
            return Err(Error::shape(format!("label {bad} is not -1 or +1")));
        }
        Ok(ActivationBatch { features, labels })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        let k = self.feature_dim();
        self.features.data().iter().skip(j).step_by(k).copied().collect()
    }

    pub fn has_both_classes(&self) -> bool {
        self.labels.iter().any(|&y| y > 0.0) && self.labels.iter().any(|&y| y < 0.0)
    }

    pub fn into_parts(self) -> (Tensor, Vec<f64>) {
        (self.features, self.labels)
    }
}

/// Population standard deviation of `values` divided by `c`, floored at
/// [`ETA_FLOOR`].
pub fn estimate_eta(values: &[f64], c: f64) -> f64 {
    // Welford
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &v) in values.iter().enumerate() {
        let d = v - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (v - mean);
    }
    let sd = if values.is_empty() {
        0.0
    } else {
        (m2 / values.len() as f64).sqrt()
    };
    (sd / c).max(ETA_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StumpFit {
    pub polarity: Polarity,
    pub threshold: f64,
    pub error: f64,
}

/// Lowest weighted 0/1 error stump on one feature column.
///
/// Candidate thresholds are the midpoints between consecutive distinct
/// values plus one sentinel below the minimum and one above the maximum.
/// Ties go to the smaller threshold, then to positive polarity.
pub fn stump_fit(column: &[f64], labels: &[f64], weights: &[f64]) -> Result<StumpFit> {
    if column.len() != labels.len() || column.len() != weights.len() {
        return Err(Error::shape(format!(
            "stump fit got {} values, {} labels, {} weights",
            column.len(),
            labels.len(),
            weights.len()
        )));
    }
    let mut order: Vec<usize> = (0..column.len()).collect();
    order.sort_by(|&a, &b| column[a].total_cmp(&column[b]));
    stump_fit_sorted(column, &order, labels, weights)
}

/// Sentinel thresholds just outside the observed range.
pub(crate) fn sentinels(min: f64, max: f64) -> (f64, f64) {
    let pad = if max > min { 0.5 * (max - min) } else { 0.5 };
    (min - pad, max + pad)
}

fn stump_fit_sorted(column: &[f64], order: &[usize], labels: &[f64], weights: &[f64]) -> Result<StumpFit> {
    let (mut pos_total, mut neg_total) = (0.0, 0.0);
    for (&y, &w) in labels.iter().zip(weights) {
        if y > 0.0 {
            pos_total += w;
        } else {
            neg_total += w;
        }
    }
    if !(pos_total > 0.0 && neg_total > 0.0) {
        return Err(Error::Selection(
            "stump fit needs positive weight on both classes".into(),
        ));
    }
    if column.iter().any(|v| !v.is_finite()) {
        return Err(Error::Selection("non-finite activation".into()));
    }
    let min = column[order[0]];
    let max = column[order[order.len() - 1]];
    let (below, above) = sentinels(min, max);

    let mut best = StumpFit {
        polarity: Polarity::Positive,
        threshold: below,
        error: neg_total,
    };
    let mut consider = |threshold: f64, err_pos: f64, err_neg: f64| {
        if err_pos < best.error - ERROR_TIE_TOL {
            best = StumpFit {
                polarity: Polarity::Positive,
                threshold,
                error: err_pos,
            };
        }
        if err_neg < best.error - ERROR_TIE_TOL {
            best = StumpFit {
                polarity: Polarity::Negative,
                threshold,
                error: err_neg,
            };
        }
    };
    consider(below, neg_total, pos_total);

    let (mut pos_left, mut neg_left) = (0.0, 0.0);
    let mut k = 0;
    while k < order.len() {
        let v = column[order[k]];
        while k < order.len() && column[order[k]] == v {
            let i = order[k];
            if labels[i] > 0.0 {
                pos_left += weights[i];
            } else {
                neg_left += weights[i];
            }
            k += 1;
        }
        if k == order.len() {
            break;
        }
        let threshold = 0.5 * (v + column[order[k]]);
        consider(
            threshold,
            pos_left + (neg_total - neg_left),
            neg_left + (pos_total - pos_left),
        );
    }
    consider(above, pos_total, neg_total);
    Ok(best)
}

/// Weighted sum of smooth stump responses over all K neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct StrongClassifier {
    weaks: Vec<WeakClassifier>,
}

impl StrongClassifier {
    /// Builds a classifier from per-neuron entries; `weaks[j].neuron` must be `j`.
    pub fn new(weaks: Vec<WeakClassifier>) -> Result<Self> {
        if let Some((j, _)) = weaks.iter().enumerate().find(|(j, w)| w.neuron != *j) {
            return Err(Error::shape(format!("weak classifier at slot {j} has the wrong neuron index")));
        }
        if let Some(w) = weaks.iter().find(|w| !(w.alpha >= 0.0) || (w.is_active() && !(w.stump.eta > 0.0))) {
            return Err(Error::Selection(format!(
                "neuron {} has alpha {} and eta {}",
                w.neuron, w.alpha, w.stump.eta
            )));
        }
        Ok(StrongClassifier { weaks })
    }

    pub fn weaks(&self) -> &[WeakClassifier] {
        &self.weaks
    }

    pub fn feature_dim(&self) -> usize {
        self.weaks.len()
    }

    pub fn active(&self) -> impl Iterator<Item = &WeakClassifier> {
        self.weaks.iter().filter(|w| w.is_active())
    }

    pub fn active_count(&self) -> usize {
        self.active().count()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.weaks.iter().map(|w| w.alpha).collect()
    }

    pub(crate) fn members(&self) -> Vec<Member> {
        self.active()
            .map(|w| Member {
                neuron: w.neuron,
                stump: w.stump,
                weight: w.alpha,
            })
            .collect()
    }

    pub(crate) fn weaks_mut(&mut self) -> &mut [WeakClassifier] {
        &mut self.weaks
    }
}

/// Runs discrete AdaBoost over the K neuron stumps of one mini-batch.
///
/// Each neuron is selected at most once. Selection stops after `rounds`
/// rounds, when no remaining stump beats chance, after a (near) perfect
/// stump has been added, or when all neurons are used. Raw weights
/// `0.5 * ln((1 - e) / e)` are normalized to sum to one, and each selected
/// stump gets `eta = std(f) / c` over the batch.
pub fn adaboost_select(batch: &ActivationBatch, rounds: usize, c: f64) -> Result<StrongClassifier> {
    if batch.is_empty() || !batch.has_both_classes() {
        return Err(Error::Selection("mini-batch must contain both classes".into()));
    }
    let m = batch.len();
    let k = batch.feature_dim();
    let labels = batch.labels();
    let columns: Vec<Vec<f64>> = (0..k).map(|j| batch.column(j)).collect();
    let orders: Vec<Vec<usize>> = columns
        .iter()
        .map(|col| {
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| col[a].total_cmp(&col[b]));
            order
        })
        .collect();

    let mut weights = vec![1.0 / m as f64; m];
    let mut used = vec![false; k];
    let mut picked: Vec<(usize, StumpFit, f64)> = Vec::new();

    for round in 0..rounds {
        let mut best: Option<(usize, StumpFit)> = None;
        for j in (0..k).filter(|&j| !used[j]) {
            let fit = stump_fit_sorted(&columns[j], &orders[j], labels, &weights)?;
            if best.is_none_or(|(_, b)| fit.error < b.error - ERROR_TIE_TOL) {
                best = Some((j, fit));
            }
        }
        let Some((j, fit)) = best else { break };
        if fit.error >= 0.5 - CHANCE_MARGIN {
            if round == 0 {
                return Err(Error::EmptySelection);
            }
            break;
        }
        let eps = fit.error.clamp(PERFECT_ERROR, 1.0 - PERFECT_ERROR);
        let raw = 0.5 * ((1.0 - eps) / eps).ln();
        used[j] = true;
        picked.push((j, fit, raw));
        if fit.error <= PERFECT_ERROR {
            break;
        }
        let col = &columns[j];
        let mut total = 0.0;
        for i in 0..m {
            weights[i] *= (-raw * labels[i] * hard_stump(col[i], fit.polarity, fit.threshold)).exp();
            total += weights[i];
        }
        for w in &mut weights {
            *w /= total;
        }
    }

    let raw_total: f64 = picked.iter().map(|p| p.2).sum();
    let mut weaks: Vec<WeakClassifier> = (0..k).map(WeakClassifier::inactive).collect();
    for (j, fit, raw) in picked {
        let p = fit.polarity.sign();
        let margins: Vec<f64> = columns[j].iter().map(|&x| p * (x - fit.threshold)).collect();
        weaks[j] = WeakClassifier {
            neuron: j,
            stump: Stump {
                polarity: fit.polarity,
                threshold: fit.threshold,
                eta: estimate_eta(&margins, c),
            },
            alpha: raw / raw_total,
        };
    }
    StrongClassifier::new(weaks)
}

/// An active ensemble member: neuron index, stump and (normalized) weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Member {
    pub neuron: usize,
    pub stump: Stump,
    pub weight: f64,
}

pub(crate) fn ensemble_score(members: &[Member], x: &[f64]) -> f64 {
    members.iter().map(|m| m.weight * m.stump.response(x[m.neuron])).sum()
}

/// Strong and weak loss terms of a weighted stump ensemble.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub strong: f64,
    pub weak: f64,
    pub total: f64,
}

pub(crate) fn check_features(members: &[Member], batch: &ActivationBatch, k: usize) -> Result<()> {
    if batch.feature_dim() != k {
        return Err(Error::shape(format!(
            "head expects {k} features, batch has {}",
            batch.feature_dim()
        )));
    }
    if members.is_empty() {
        return Err(Error::Loss("no active weak classifiers".into()));
    }
    Ok(())
}

pub(crate) fn ensemble_loss(members: &[Member], batch: &ActivationBatch, beta: f64) -> LossParts {
    let m = batch.len() as f64;
    let n = members.len() as f64;
    let mut strong = 0.0;
    let mut weak = 0.0;
    for (i, &y) in batch.labels().iter().enumerate() {
        let x = batch.row(i);
        strong += (ensemble_score(members, x) - y).powi(2);
        for mem in members {
            weak += (mem.stump.response(x[mem.neuron]) - y).powi(2);
        }
    }
    let strong = strong / m;
    let weak = weak / (m * n);
    LossParts {
        strong,
        weak,
        total: beta * strong + (1.0 - beta) * weak,
    }
}

/// Gradients of a boosting-head loss.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    /// `[M, K]`; columns of inactive neurons are exactly zero.
    pub d_features: Tensor,
    /// One entry per neuron, summed over the batch; zero for inactive neurons.
    pub d_thresholds: Vec<f64>,
}

pub(crate) fn ensemble_backward(members: &[Member], batch: &ActivationBatch, beta: f64, k: usize) -> Result<HeadGrads> {
    let m = batch.len();
    let n = members.len() as f64;
    let strong_scale = beta * 2.0 / m as f64;
    let weak_scale = (1.0 - beta) * 2.0 / (m as f64 * n);
    let mut dx = vec![0.0; m * k];
    let mut dl = vec![0.0; k];
    for (i, &y) in batch.labels().iter().enumerate() {
        let x = batch.row(i);
        let d_score = strong_scale * (ensemble_score(members, x) - y);
        for mem in members {
            let j = mem.neuron;
            let f = mem.stump.margin(x[j]);
            let h = smooth_sign(f, mem.stump.eta);
            let slope = smooth_sign_slope(f, mem.stump.eta);
            let d_h = d_score * mem.weight + weak_scale * (h - y);
            let p = mem.stump.polarity.sign();
            dx[i * k + j] = d_h * slope * p;
            dl[j] -= d_h * slope * p;
        }
    }
    Ok(HeadGrads {
        d_features: Tensor::new(vec![m, k], dx)?,
        d_thresholds: dl,
    })
}

/// `sum_j alpha_j * h_j(x_j)` over the active neurons.
pub fn strong_score(h: &StrongClassifier, x: &[f64]) -> Result<f64> {
    if x.len() != h.feature_dim() {
        return Err(Error::shape(format!(
            "strong classifier expects {} features, got {}",
            h.feature_dim(),
            x.len()
        )));
    }
    let members = h.members();
    if members.is_empty() {
        return Err(Error::Score("strong classifier has no active weak classifiers".into()));
    }
    Ok(ensemble_score(&members, x))
}

/// Mean squared error between strong scores and labels.
pub fn strong_loss(h: &StrongClassifier, batch: &ActivationBatch) -> Result<f64> {
    let members = h.members();
    if members.is_empty() {
        return Err(Error::Score("strong classifier has no active weak classifiers".into()));
    }
    check_features(&members, batch, h.feature_dim())?;
    Ok(ensemble_loss(&members, batch, 1.0).strong)
}

/// Mean squared error of every active weak response against the labels,
/// averaged over samples and active neurons.
pub fn weak_loss(h: &StrongClassifier, batch: &ActivationBatch) -> Result<f64> {
    let members = h.members();
    check_features(&members, batch, h.feature_dim())?;
    Ok(ensemble_loss(&members, batch, 0.0).weak)
}

pub fn bcnn_loss_parts(h: &StrongClassifier, batch: &ActivationBatch, beta: f64) -> Result<LossParts> {
    check_beta(beta)?;
    let members = h.members();
    check_features(&members, batch, h.feature_dim())?;
    Ok(ensemble_loss(&members, batch, beta))
}

/// `beta * strong_loss + (1 - beta) * weak_loss`.
pub fn bcnn_loss(h: &StrongClassifier, batch: &ActivationBatch, beta: f64) -> Result<f64> {
    bcnn_loss_parts(h, batch, beta).map(|p| p.total)
}

pub fn bcnn_backward(h: &StrongClassifier, batch: &ActivationBatch, beta: f64) -> Result<HeadGrads> {
    check_beta(beta)?;
    let members = h.members();
    check_features(&members, batch, h.feature_dim())?;
    ensemble_backward(&members, batch, beta, h.feature_dim())
}

pub(crate) fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config {
            field: "beta".into(),
            reason: format!("{beta} is outside [0, 1]"),
        });
    }
    Ok(())
}
