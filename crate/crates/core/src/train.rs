//! Decision heads on top of the feature extractor and the mini-batch
//! training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boosting::{adaboost_select, bcnn_backward, bcnn_loss_parts, ActivationBatch, StrongClassifier};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::incremental::{strong_threshold_step, IncrementalStrongClassifier};
use crate::layers::{affine_backward, affine_forward};
use crate::network::{build_network, momentum_update, sigmoid_ce_head, HeadKind, NetworkModel, NetworkSpec, TrainConfig, INIT_STD};
use crate::tensor::Tensor;

/// Inner-product decision layer for the sigmoid cross-entropy baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub weights: Tensor,
    pub bias: Tensor,
    velocity: (Tensor, Tensor),
}

impl LinearHead {
    pub fn new(weights: Tensor, bias: Tensor) -> Self {
        let velocity = (Tensor::zeros(weights.shape()), Tensor::zeros(bias.shape()));
        LinearHead {
            weights,
            bias,
            velocity,
        }
    }

    fn init<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Self {
        LinearHead::new(Tensor::randn(&[k, 1], INIT_STD, rng), Tensor::zeros(&[1]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    SigmoidCe(LinearHead),
    /// Per-batch boosted classifier; the last selection is kept for testing.
    Boost(Option<StrongClassifier>),
    Incremental(IncrementalStrongClassifier),
}

impl Head {
    pub fn kind(&self) -> HeadKind {
        match self {
            Head::SigmoidCe(_) => HeadKind::SigmoidCe,
            Head::Boost(_) => HeadKind::Boost,
            Head::Incremental(_) => HeadKind::IncrementalBoost,
        }
    }

    /// Boosting heads are untrained until their first selection.
    pub fn is_trained(&self) -> bool {
        match self {
            Head::SigmoidCe(_) => true,
            Head::Boost(h) => h.is_some(),
            Head::Incremental(s) => s.iteration() > 0,
        }
    }

    pub fn active_count(&self) -> usize {
        match self {
            Head::SigmoidCe(l) => l.weights.len(),
            Head::Boost(h) => h.as_ref().map_or(0, |h| h.active_count()),
            Head::Incremental(s) => s.active_count(),
        }
    }

    /// Raw decision scores for `features: [M, K]`; the label is +1 when the
    /// score is non-negative.
    pub fn scores(&self, features: &Tensor) -> Result<Vec<f64>> {
        let m = features.shape()[0];
        match self {
            Head::SigmoidCe(l) => Ok(affine_forward(features, &l.weights, &l.bias)?.into_data()),
            Head::Boost(None) => Err(Error::UntrainedHead),
            Head::Boost(Some(h)) => (0..m)
                .map(|i| crate::boosting::strong_score(h, features.row(i)))
                .collect(),
            Head::Incremental(s) => (0..m).map(|i| s.score(features.row(i))).collect(),
        }
    }
}

/// What happened during one training iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub iteration: u64,
    pub epoch: usize,
    /// Incremental-head iteration count after this step (0 for other heads).
    pub t: u64,
    pub loss: f64,
    pub strong_loss: Option<f64>,
    pub weak_loss: Option<f64>,
    pub active: usize,
    /// Neurons chosen by boosting this iteration, with their normalized weights.
    pub selected: Vec<(usize, f64)>,
    /// Boosting selection was impossible (single-class batch or nothing
    /// better than chance); the previous head state was reused.
    pub skipped: bool,
}

/// A feature extractor, its decision head and training hyperparameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub network: NetworkModel,
    pub head: Head,
    pub config: TrainConfig,
    iterations: u64,
}

impl Model {
    /// Fresh model; `spec.head` picks the decision layer.
    pub fn new(spec: &NetworkSpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let network = build_network(spec, config.seed)?;
        let k = spec.feature_dim();
        let head = match spec.head {
            HeadKind::SigmoidCe => {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(1);
                Head::SigmoidCe(LinearHead::init(k, &mut rng))
            }
            HeadKind::Boost => Head::Boost(None),
            HeadKind::IncrementalBoost => Head::Incremental(IncrementalStrongClassifier::new(k)),
        };
        Ok(Model {
            network,
            head,
            config,
            iterations: 0,
        })
    }

    pub fn from_parts(network: NetworkModel, head: Head, config: TrainConfig) -> Result<Self> {
        if head.kind() != network.spec().head {
            return Err(Error::State(format!(
                "head {:?} does not match spec head {:?}",
                head.kind(),
                network.spec().head
            )));
        }
        Ok(Model {
            network,
            head,
            config,
            iterations: 0,
        })
    }

    pub fn iterations(&self) -> u64 {
        self.iterations
    }

    /// One mini-batch step: forward, head update, backward, SGD.
    pub fn train_iteration(&mut self, images: &Tensor, labels: &[f64], epoch: usize) -> Result<IterationReport> {
        let iteration = self.iterations + 1;
        let features = self.network.forward_features(images)?;
        if !features.all_finite() {
            return Err(Error::Training {
                iteration,
                reason: "non-finite activations".into(),
            });
        }
        let batch = ActivationBatch::new(features, labels.to_vec())?;
        let cfg = self.config.clone();
        let lr = cfg.learning_rate;

        let mut report = IterationReport {
            iteration,
            epoch,
            t: 0,
            loss: f64::NAN,
            strong_loss: None,
            weak_loss: None,
            active: 0,
            selected: Vec::new(),
            skipped: false,
        };

        let d_features = match &mut self.head {
            Head::SigmoidCe(head) => {
                let scores = affine_forward(batch.features(), &head.weights, &head.bias)?;
                let (loss, d_scores) = sigmoid_ce_head(&scores, batch.labels())?;
                report.loss = loss;
                report.active = head.weights.len();
                check_loss(loss, iteration)?;
                let (dx, dw, db) = affine_backward(batch.features(), &head.weights, &d_scores)?;
                if !(dw.all_finite() && db.all_finite()) {
                    return Err(Error::Training {
                        iteration,
                        reason: "non-finite head gradient".into(),
                    });
                }
                momentum_update(&mut head.weights, &mut head.velocity.0, &dw, lr, cfg.momentum)?;
                momentum_update(&mut head.bias, &mut head.velocity.1, &db, lr, cfg.momentum)?;
                Some(dx)
            }
            Head::Boost(current) => {
                match select(&batch, &cfg)? {
                    Some(h) => {
                        report.selected = selected_pairs(&h);
                        *current = Some(h);
                    }
                    None => report.skipped = true,
                }
                match current {
                    None => None,
                    Some(h) => {
                        let parts = bcnn_loss_parts(h, &batch, cfg.beta)?;
                        report.loss = parts.total;
                        report.strong_loss = Some(parts.strong);
                        report.weak_loss = Some(parts.weak);
                        report.active = h.active_count();
                        check_loss(parts.total, iteration)?;
                        let grads = bcnn_backward(h, &batch, cfg.beta)?;
                        strong_threshold_step(h, &grads.d_thresholds, lr, iteration)?;
                        Some(grads.d_features)
                    }
                }
            }
            Head::Incremental(state) => {
                match select(&batch, &cfg)? {
                    Some(h) => {
                        report.selected = selected_pairs(&h);
                        state.merge(&h, cfg.refit_on_reselect)?;
                    }
                    None => report.skipped = true,
                }
                report.t = state.iteration();
                if state.iteration() == 0 {
                    None
                } else {
                    let parts = state.loss_parts(&batch, cfg.beta)?;
                    report.loss = parts.total;
                    report.strong_loss = Some(parts.strong);
                    report.weak_loss = Some(parts.weak);
                    report.active = state.active_count();
                    check_loss(parts.total, iteration)?;
                    let grads = state.backward(&batch, cfg.beta)?;
                    state.threshold_step(&grads.d_thresholds, lr, iteration)?;
                    Some(grads.d_features)
                }
            }
        };

        match d_features {
            Some(d) => {
                if !d.all_finite() {
                    return Err(Error::Training {
                        iteration,
                        reason: "non-finite feature gradient".into(),
                    });
                }
                let grads = self.network.backward_features(&d)?;
                self.network.sgd_momentum_step(&grads, lr, cfg.momentum, iteration)?;
            }
            None => self.network.clear_cache(),
        }
        self.iterations = iteration;
        Ok(report)
    }

    /// One pass over `data` in stratified mini-batches.
    pub fn train_epoch(&mut self, data: &Dataset, epoch: usize, mut on_iteration: impl FnMut(&IterationReport)) -> Result<Vec<IterationReport>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(2 + epoch as u64);
        let batches = stratified_batches(data.labels(), self.config.batch_size, &mut rng);
        let mut reports = Vec::with_capacity(batches.len());
        for idx in batches {
            let images = data.images().select_rows(&idx);
            let labels: Vec<f64> = idx.iter().map(|&i| data.labels()[i]).collect();
            let r = self.train_iteration(&images, &labels, epoch)?;
            on_iteration(&r);
            reports.push(r);
        }
        Ok(reports)
    }

    /// Runs `config.epochs` epochs.
    pub fn fit(&mut self, data: &Dataset, mut on_iteration: impl FnMut(&IterationReport)) -> Result<Vec<IterationReport>> {
        if data.image_shape() != self.network.spec().input_shape {
            return Err(Error::shape(format!(
                "dataset images {:?} do not match network input {:?}",
                data.image_shape(),
                self.network.spec().input_shape
            )));
        }
        let mut all = Vec::new();
        for epoch in 0..self.config.epochs {
            all.extend(self.train_epoch(data, epoch, &mut on_iteration)?);
        }
        Ok(all)
    }

    /// Decision scores for every image, evaluated in chunks.
    pub fn scores(&self, images: &Tensor) -> Result<Vec<f64>> {
        if !self.head.is_trained() {
            return Err(Error::UntrainedHead);
        }
        let n = images.shape().first().copied().unwrap_or(0);
        let chunk = self.config.batch_size.max(1);
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let features = self.network.features(&images.select_rows(&idx))?;
            out.extend(self.head.scores(&features)?);
            start += chunk;
        }
        Ok(out)
    }

    /// Labels in {-1, +1} and scores.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<(f64, f64)>> {
        Ok(self
            .scores(images)?
            .into_iter()
            .map(|s| (if s >= 0.0 { 1.0 } else { -1.0 }, s))
            .collect())
    }
}

fn check_loss(loss: f64, iteration: u64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Training {
            iteration,
            reason: format!("loss is {loss}"),
        });
    }
    Ok(())
}

fn select(batch: &ActivationBatch, cfg: &TrainConfig) -> Result<Option<StrongClassifier>> {
    if !batch.has_both_classes() {
        return Ok(None);
    }
    match adaboost_select(batch, cfg.rounds, cfg.eta_c) {
        Ok(h) => Ok(Some(h)),
        Err(Error::EmptySelection) => Ok(None),
        Err(e) => Err(e),
    }
}

fn selected_pairs(h: &StrongClassifier) -> Vec<(usize, f64)> {
    h.active().map(|w| (w.neuron, w.alpha)).collect()
}

/// Splits sample indices into `ceil(n / batch_size)` mini-batches, spreading
/// each class evenly so every batch sees both classes whenever the minority
/// class has at least one sample per batch.
pub fn stratified_batches<R: Rng + ?Sized>(labels: &[f64], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let n = labels.len();
    if n == 0 {
        return Vec::new();
    }
    let mut pos: Vec<usize> = (0..n).filter(|&i| labels[i] > 0.0).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| labels[i] <= 0.0).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let nb = n.div_ceil(batch_size.max(1));
    (0..nb)
        .map(|b| {
            let mut batch: Vec<usize> = pos[b * pos.len() / nb..(b + 1) * pos.len() / nb]
                .iter()
                .chain(&neg[b * neg.len() / nb..(b + 1) * neg.len() / nb])
                .copied()
                .collect();
            batch.shuffle(rng);
            batch
        })
        .collect()
}
