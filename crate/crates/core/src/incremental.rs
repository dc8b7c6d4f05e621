//! Incremental strong classifier: a running average of the per-batch boosted
//! classifiers, trained jointly with the CNN.
//!
//! At iteration `t` every neuron's weight becomes
//! `((t - 1) * avg_j + alpha_j) / t`, so neurons picked on many mini-batches
//! accumulate weight while neurons that stop being picked decay as `s / t`.
//! Once a neuron has been active its weight never returns to zero, so the
//! active set only grows.

use crate::boosting::{
    check_beta, check_features, ensemble_backward, ensemble_loss, ensemble_score, HeadGrads, LossParts, Member,
    StrongClassifier, Stump,
};
use crate::error::{Error, Result};
use crate::boosting::ActivationBatch;

#[derive(Debug, Clone, PartialEq)]
pub struct IncrementalStrongClassifier {
    t: u64,
    stumps: Vec<Option<Stump>>,
    weights: Vec<f64>,
}

impl IncrementalStrongClassifier {
    /// Untrained state (`t = 0`, all weights zero) over `k` neurons.
    pub fn new(k: usize) -> Self {
        IncrementalStrongClassifier {
            t: 0,
            stumps: vec![None; k],
            weights: vec![0.0; k],
        }
    }

    /// Rebuilds a state from stored parts, checking its invariants.
    pub fn from_parts(t: u64, stumps: Vec<Option<Stump>>, weights: Vec<f64>) -> Result<Self> {
        if stumps.len() != weights.len() {
            return Err(Error::shape("stump and weight vectors differ in length"));
        }
        for (j, (s, &w)) in stumps.iter().zip(&weights).enumerate() {
            if !(w >= 0.0) {
                return Err(Error::State(format!("neuron {j} has weight {w}")));
            }
            if w > 0.0 && !matches!(s, Some(st) if st.eta > 0.0) {
                return Err(Error::State(format!("active neuron {j} lacks a valid stump")));
            }
        }
        if t == 0 && weights.iter().any(|&w| w > 0.0) {
            return Err(Error::State("untrained state carries weights".into()));
        }
        Ok(IncrementalStrongClassifier { t, stumps, weights })
    }

    pub fn iteration(&self) -> u64 {
        self.t
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn stumps(&self) -> &[Option<Stump>] {
        &self.stumps
    }

    pub fn is_active(&self, j: usize) -> bool {
        self.weights[j] > 0.0
    }

    pub fn active_count(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }

    pub(crate) fn members(&self) -> Vec<Member> {
        self.stumps
            .iter()
            .zip(&self.weights)
            .enumerate()
            .filter(|(_, (_, &w))| w > 0.0)
            .map(|(neuron, (s, &weight))| Member {
                neuron,
                stump: s.expect("active neuron has a stump"),
                weight,
            })
            .collect()
    }

    /// Folds this iteration's boosted classifier into the running average
    /// and advances `t`.
    ///
    /// Neurons selected for the first time adopt the fitted stump. Re-selected
    /// neurons take the fresh polarity and eta; their threshold is replaced by
    /// the fitted one when `refit_threshold` is set and otherwise kept from
    /// gradient descent.
    pub fn merge(&mut self, current: &StrongClassifier, refit_threshold: bool) -> Result<()> {
        if current.feature_dim() != self.feature_dim() {
            return Err(Error::shape(format!(
                "incremental head has {} neurons, boosted classifier {}",
                self.feature_dim(),
                current.feature_dim()
            )));
        }
        let alpha_sum: f64 = current.weaks().iter().map(|w| w.alpha).sum();
        if current.active_count() == 0 || (alpha_sum - 1.0).abs() > 1e-9 {
            return Err(Error::Selection(format!(
                "boosted weights must lie on the simplex (sum {alpha_sum})"
            )));
        }
        let t = self.t + 1;
        let prev = (t - 1) as f64;
        for (j, weak) in current.weaks().iter().enumerate() {
            self.weights[j] = (prev * self.weights[j] + weak.alpha) / t as f64;
            if !weak.is_active() {
                continue;
            }
            self.stumps[j] = Some(match self.stumps[j] {
                Some(old) if !refit_threshold => Stump {
                    threshold: old.threshold,
                    ..weak.stump
                },
                _ => weak.stump,
            });
        }
        let total: f64 = self.weights.iter().sum();
        for w in &mut self.weights {
            *w /= total;
        }
        self.t = t;
        Ok(())
    }

    fn trained_members(&self) -> Result<Vec<Member>> {
        if self.t == 0 {
            return Err(Error::UntrainedHead);
        }
        Ok(self.members())
    }

    /// Incremental strong score of one feature vector.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        let members = self.trained_members()?;
        if x.len() != self.feature_dim() {
            return Err(Error::shape(format!(
                "incremental head expects {} features, got {}",
                self.feature_dim(),
                x.len()
            )));
        }
        Ok(ensemble_score(&members, x))
    }

    pub fn loss_parts(&self, batch: &ActivationBatch, beta: f64) -> Result<LossParts> {
        check_beta(beta)?;
        let members = self.trained_members()?;
        check_features(&members, batch, self.feature_dim())?;
        Ok(ensemble_loss(&members, batch, beta))
    }

    /// `beta * strong + (1 - beta) * weak` with the incremental score as the
    /// strong prediction and the current active set as the weak classifiers.
    pub fn loss(&self, batch: &ActivationBatch, beta: f64) -> Result<f64> {
        self.loss_parts(batch, beta).map(|p| p.total)
    }

    pub fn backward(&self, batch: &ActivationBatch, beta: f64) -> Result<HeadGrads> {
        check_beta(beta)?;
        let members = self.trained_members()?;
        check_features(&members, batch, self.feature_dim())?;
        ensemble_backward(&members, batch, beta, self.feature_dim())
    }

    /// Plain gradient step on the thresholds of active neurons.
    pub fn threshold_step(&mut self, d_thresholds: &[f64], lr: f64, iteration: u64) -> Result<()> {
        apply_threshold_step(
            self.stumps.iter_mut().zip(&self.weights).map(|(s, &w)| (s.as_mut(), w)),
            d_thresholds,
            lr,
            iteration,
            self.weights.len(),
        )
    }

    /// Label (+1 when the score is non-negative) and score.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        let s = self.score(x)?;
        Ok((if s >= 0.0 { 1.0 } else { -1.0 }, s))
    }
}

pub(crate) fn apply_threshold_step<'a>(
    slots: impl Iterator<Item = (Option<&'a mut Stump>, f64)>,
    d_thresholds: &[f64],
    lr: f64,
    iteration: u64,
    k: usize,
) -> Result<()> {
    if d_thresholds.len() != k {
        return Err(Error::shape(format!(
            "expected {k} threshold gradients, got {}",
            d_thresholds.len()
        )));
    }
    let mut updates = Vec::new();
    for ((stump, weight), &g) in slots.zip(d_thresholds) {
        if weight > 0.0 {
            if !g.is_finite() {
                return Err(Error::Training {
                    iteration,
                    reason: "non-finite threshold gradient".into(),
                });
            }
            if let Some(s) = stump {
                updates.push((s, g));
            }
        }
    }
    for (s, g) in updates {
        s.threshold -= lr * g;
    }
    Ok(())
}

/// Threshold step for a per-batch strong classifier.
pub fn strong_threshold_step(h: &mut StrongClassifier, d_thresholds: &[f64], lr: f64, iteration: u64) -> Result<()> {
    let k = h.feature_dim();
    apply_threshold_step(
        h.weaks_mut().iter_mut().map(|w| {
            let a = w.alpha;
            (Some(&mut w.stump), a)
        }),
        d_thresholds,
        lr,
        iteration,
        k,
    )
}
