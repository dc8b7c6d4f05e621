//! Layer stacks, initialization, the sigmoid cross-entropy baseline head and
//! the momentum SGD update.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{pool_out, Layer};
use crate::tensor::Tensor;

/// Standard deviation of the Gaussian used for conv and affine weights.
pub const INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv { filters: usize, kernel: usize, stride: usize },
    Relu,
    Maxpool { window: usize, stride: usize },
    Affine { out_dim: usize },
}

/// Which decision layer sits on top of the feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    SigmoidCe,
    Boost,
    IncrementalBoost,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// `[C, H, W]` of one input image.
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub head: HeadKind,
}

impl NetworkSpec {
    /// Per-layer output shapes (without the batch axis). Fails on the first
    /// layer that cannot consume its input.
    pub fn shape_chain(&self) -> Result<Vec<Vec<usize>>> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Build {
                layer: 0,
                reason: format!("input shape {:?} has a zero dimension", self.input_shape),
            });
        }
        if self.layers.is_empty() {
            return Err(Error::Build {
                layer: 0,
                reason: "network has no layers".into(),
            });
        }
        let mut shape = vec![c, h, w];
        let mut chain = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let fail = |reason: String| Error::Build { layer: i, reason };
            let is_last = i + 1 == self.layers.len();
            shape = match *layer {
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                } => {
                    if shape.len() != 3 {
                        return Err(fail(format!("conv needs a [C,H,W] input, got {shape:?}")));
                    }
                    if filters == 0 || kernel == 0 || stride == 0 {
                        return Err(fail("conv filters, kernel and stride must be positive".into()));
                    }
                    if kernel > shape[1] || kernel > shape[2] {
                        return Err(fail(format!(
                            "conv kernel {kernel} does not fit {}x{} maps",
                            shape[1], shape[2]
                        )));
                    }
                    vec![
                        filters,
                        (shape[1] - kernel) / stride + 1,
                        (shape[2] - kernel) / stride + 1,
                    ]
                }
                LayerSpec::Relu => shape,
                LayerSpec::Maxpool { window, stride } => {
                    if shape.len() != 3 {
                        return Err(fail(format!("maxpool needs a [C,H,W] input, got {shape:?}")));
                    }
                    if window == 0 || stride == 0 {
                        return Err(fail("maxpool window and stride must be positive".into()));
                    }
                    if window > shape[1] || window > shape[2] {
                        return Err(fail(format!(
                            "maxpool window {window} exceeds {}x{} maps",
                            shape[1], shape[2]
                        )));
                    }
                    vec![
                        shape[0],
                        pool_out(shape[1], window, stride),
                        pool_out(shape[2], window, stride),
                    ]
                }
                LayerSpec::Affine { out_dim } => {
                    if !is_last {
                        return Err(fail("the affine layer must be the terminal layer".into()));
                    }
                    if out_dim == 0 {
                        return Err(fail("affine out_dim must be positive".into()));
                    }
                    vec![out_dim]
                }
            };
            chain.push(shape.clone());
        }
        if !matches!(self.layers.last(), Some(LayerSpec::Affine { .. })) {
            return Err(Error::Build {
                layer: self.layers.len() - 1,
                reason: "network must end in an affine feature layer".into(),
            });
        }
        Ok(chain)
    }

    /// Dimension K of the activation feature vector.
    pub fn feature_dim(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Affine { out_dim }) => *out_dim,
            _ => 0,
        }
    }

    /// Same stack with the terminal affine layer resized to `k`.
    pub fn with_feature_dim(mut self, k: usize) -> Self {
        if let Some(LayerSpec::Affine { out_dim }) = self.layers.last_mut() {
            *out_dim = k;
        }
        self
    }

    pub fn with_head(mut self, head: HeadKind) -> Self {
        self.head = head;
        self
    }
}

/// The three-conv stack used for 128x96 face crops:
/// conv(32,5)/relu/pool(3,3), conv(32,5)/relu/pool(3,3), conv(64,5)/relu, affine(128).
pub fn paper_preset(input_shape: [usize; 3]) -> Result<NetworkSpec> {
    let spec = NetworkSpec {
        input_shape,
        layers: vec![
            LayerSpec::Conv { filters: 32, kernel: 5, stride: 1 },
            LayerSpec::Relu,
            LayerSpec::Maxpool { window: 3, stride: 3 },
            LayerSpec::Conv { filters: 32, kernel: 5, stride: 1 },
            LayerSpec::Relu,
            LayerSpec::Maxpool { window: 3, stride: 3 },
            LayerSpec::Conv { filters: 64, kernel: 5, stride: 1 },
            LayerSpec::Relu,
            LayerSpec::Affine { out_dim: 128 },
        ],
        head: HeadKind::IncrementalBoost,
    };
    spec.shape_chain()?;
    Ok(spec)
}

/// Narrow three-conv stack for small (around 32x32) synthetic images.
pub fn small_preset(input_shape: [usize; 3]) -> Result<NetworkSpec> {
    let spec = NetworkSpec {
        input_shape,
        layers: vec![
            LayerSpec::Conv { filters: 8, kernel: 5, stride: 1 },
            LayerSpec::Relu,
            LayerSpec::Maxpool { window: 2, stride: 2 },
            LayerSpec::Conv { filters: 16, kernel: 5, stride: 1 },
            LayerSpec::Relu,
            LayerSpec::Maxpool { window: 2, stride: 2 },
            LayerSpec::Conv { filters: 16, kernel: 3, stride: 1 },
            LayerSpec::Relu,
            LayerSpec::Affine { out_dim: 32 },
        ],
        head: HeadKind::IncrementalBoost,
    };
    spec.shape_chain()?;
    Ok(spec)
}

/// Hyperparameters for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the strong-classifier loss against the weak-classifier loss.
    pub beta: f64,
    /// Cap on AdaBoost rounds per mini-batch.
    pub rounds: usize,
    /// Divisor c in eta = sigma / c.
    pub eta_c: f64,
    /// Re-selected neurons take the freshly fitted stump threshold (true) or
    /// keep the one learned by gradient descent (false).
    pub refit_on_reselect: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.2,
            momentum: 0.9,
            batch_size: 100,
            epochs: 10,
            beta: 0.5,
            rounds: 32,
            eta_c: 2.0,
            refit_on_reselect: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(Error::Config {
                field: field.into(),
                reason: reason.into(),
            })
        };
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate", "must be a finite positive number");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if self.batch_size < 2 {
            return bad("batch_size", "must be at least 2");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta", "must lie in [0, 1]");
        }
        if self.rounds == 0 {
            return bad("rounds", "must be positive");
        }
        if !(self.eta_c.is_finite() && self.eta_c > 0.0) {
            return bad("eta_c", "must be positive");
        }
        Ok(())
    }
}

/// CNN parameters below the decision layer, with momentum buffers.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    spec: NetworkSpec,
    layers: Vec<Layer>,
    velocity: Vec<Tensor>,
    seed: u64,
}

/// Builds the layer stack with N(0, 0.01^2) weights and zero biases.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<NetworkModel> {
    let chain = spec.shape_chain()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_shape = spec.input_shape.to_vec();
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (layer, out_shape) in spec.layers.iter().zip(&chain) {
        layers.push(match *layer {
            LayerSpec::Conv {
                filters,
                kernel,
                stride,
            } => Layer::conv(
                Tensor::randn(&[filters, in_shape[0], kernel, kernel], INIT_STD, &mut rng),
                Tensor::zeros(&[filters]),
                stride,
            ),
            LayerSpec::Relu => Layer::relu(),
            LayerSpec::Maxpool { window, stride } => Layer::maxpool(window, stride),
            LayerSpec::Affine { out_dim } => {
                let fan_in: usize = in_shape.iter().product();
                Layer::affine(
                    Tensor::randn(&[fan_in, out_dim], INIT_STD, &mut rng),
                    Tensor::zeros(&[out_dim]),
                )
            }
        });
        in_shape = out_shape.clone();
    }
    let velocity = layers
        .iter()
        .flat_map(|l| l.params().into_iter().map(|p| Tensor::zeros(p.shape())))
        .collect();
    Ok(NetworkModel {
        spec: spec.clone(),
        layers,
        velocity,
        seed,
    })
}

impl NetworkModel {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// Replaces all parameters, in [`NetworkModel::params`] order.
    pub fn load_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != params.len() {
            return Err(Error::shape(format!(
                "model has {} parameter tensors, got {}",
                slots.len(),
                params.len()
            )));
        }
        for (slot, p) in slots.iter_mut().zip(&params) {
            if slot.shape() != p.shape() {
                return Err(Error::shape(format!(
                    "parameter shape {:?} does not match {:?}",
                    p.shape(),
                    slot.shape()
                )));
            }
        }
        for (slot, p) in slots.into_iter().zip(params) {
            *slot = p;
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let [c, h, w] = self.spec.input_shape;
        if batch.ndim() != 4 || batch.shape()[1..] != [c, h, w] {
            return Err(Error::shape(format!(
                "batch shape {:?} does not match network input [M, {c}, {h}, {w}]",
                batch.shape()
            )));
        }
        Ok(())
    }

    /// Runs every layer through the terminal affine layer, caching state for
    /// [`NetworkModel::backward_features`]. Returns `[M, K]`.
    pub fn forward_features(&mut self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut a = batch.clone();
        for layer in &mut self.layers {
            a = layer.forward(&a)?;
        }
        Ok(a)
    }

    /// Cache-free forward pass for evaluation.
    pub fn features(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut a = batch.clone();
        for layer in &self.layers {
            a = layer.infer(&a)?;
        }
        Ok(a)
    }

    /// Intermediate activations of a cache-free forward pass, one per layer.
    pub fn activations(&self, batch: &Tensor) -> Result<Vec<Tensor>> {
        self.check_batch(batch)?;
        let mut out = Vec::with_capacity(self.layers.len());
        let mut a = batch.clone();
        for layer in &self.layers {
            a = layer.infer(&a)?;
            out.push(a.clone());
        }
        Ok(out)
    }

    /// Backpropagates `d_features: [M, K]` and returns parameter gradients in
    /// [`NetworkModel::params`] order.
    pub fn backward_features(&mut self, d_features: &Tensor) -> Result<Vec<Tensor>> {
        let mut grads = Vec::new();
        let mut g = d_features.clone();
        for layer in self.layers.iter_mut().rev() {
            let (dx, pg) = layer.backward(&g)?;
            if let Some(pg) = pg {
                grads.push(pg.bias);
                grads.push(pg.weights);
            }
            g = dx;
        }
        grads.reverse();
        Ok(grads)
    }

    /// `v <- mu*v - lr*g; theta <- theta + v` on every parameter tensor.
    pub fn sgd_momentum_step(&mut self, grads: &[Tensor], lr: f64, momentum: f64, iteration: u64) -> Result<()> {
        let mut velocity = std::mem::take(&mut self.velocity);
        let result = (|| {
            let params = self.params_mut();
            if grads.len() != params.len() {
                return Err(Error::shape(format!(
                    "expected {} gradient tensors, got {}",
                    params.len(),
                    grads.len()
                )));
            }
            for g in grads {
                if !g.all_finite() {
                    return Err(Error::Training {
                        iteration,
                        reason: "non-finite CNN gradient".into(),
                    });
                }
            }
            for ((p, v), g) in params.into_iter().zip(velocity.iter_mut()).zip(grads) {
                momentum_update(p, v, g, lr, momentum)?;
            }
            Ok(())
        })();
        self.velocity = velocity;
        result
    }

    pub fn clear_cache(&mut self) {
        for layer in &mut self.layers {
            layer.clear_cache();
        }
    }
}

/// One momentum SGD step on a single tensor.
pub fn momentum_update(param: &mut Tensor, velocity: &mut Tensor, grad: &Tensor, lr: f64, momentum: f64) -> Result<()> {
    if param.shape() != grad.shape() || velocity.shape() != grad.shape() {
        return Err(Error::shape(format!(
            "gradient shape {:?} does not match parameter {:?}",
            grad.shape(),
            param.shape()
        )));
    }
    for ((p, v), &g) in param
        .data_mut()
        .iter_mut()
        .zip(velocity.data_mut().iter_mut())
        .zip(grad.data())
    {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean sigmoid cross-entropy for `scores: [M, 1]` and labels in {-1, +1}.
/// Returns the loss and its gradient with respect to the scores.
pub fn sigmoid_ce_head(scores: &Tensor, labels: &[f64]) -> Result<(f64, Tensor)> {
    let m = labels.len();
    if scores.shape() != [m, 1] {
        return Err(Error::shape(format!(
            "sigmoid head expects scores [{m}, 1], got {:?}",
            scores.shape()
        )));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(m);
    for (&s, &y) in scores.data().iter().zip(labels) {
        let target = if y > 0.0 { 1.0 } else { 0.0 };
        // log(1 + e^s) - target*s, written to avoid overflow
        loss += s.max(0.0) - target * s + (-s.abs()).exp().ln_1p();
        grad.push((sigmoid(s) - target) / m as f64);
    }
    Ok((loss / m as f64, Tensor::new(vec![m, 1], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine_only(k_in: usize, k: usize) -> NetworkSpec {
        NetworkSpec {
            input_shape: [1, 1, k_in],
            layers: vec![LayerSpec::Affine { out_dim: k }],
            head: HeadKind::SigmoidCe,
        }
    }

    #[test]
    fn build_is_deterministic_with_zero_bias() {
        let spec = small_preset([1, 32, 32]).unwrap();
        let a = build_network(&spec, 11).unwrap();
        let b = build_network(&spec, 11).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.data(), pb.data());
        }
        for layer in a.layers() {
            if let Some(bias) = layer.params().get(1) {
                assert!(bias.data().iter().all(|&v| v == 0.0));
            }
        }
        let c = build_network(&spec, 12).unwrap();
        assert_ne!(a.params()[0].data(), c.params()[0].data());
    }

    #[test]
    fn init_std_is_close_to_target() {
        let spec = affine_only(200, 100);
        let model = build_network(&spec, 3).unwrap();
        let w = model.params()[0].data();
        assert!(w.len() >= 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let sd = var.sqrt();
        assert!((sd - INIT_STD).abs() <= 0.1 * INIT_STD, "sd = {sd}");
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let spec = small_preset([1, 32, 32]).unwrap();
        let mut model = build_network(&spec, 1).unwrap();
        let f = model.forward_features(&Tensor::zeros(&[3, 1, 32, 32])).unwrap();
        assert_eq!(f.shape(), &[3, 32]);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affine_only_spec_reduces_to_affine_forward() {
        let spec = affine_only(4, 3);
        let mut model = build_network(&spec, 5).unwrap();
        let x = Tensor::randn(&[2, 1, 1, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let f = model.forward_features(&x).unwrap();
        let p = model.params();
        let direct = crate::layers::affine_forward(&x.clone().reshape(&[2, 4]).unwrap(), p[0], p[1]).unwrap();
        assert_eq!(f, direct);
    }

    #[test]
    fn paper_preset_shapes() {
        let spec = paper_preset([1, 128, 96]).unwrap();
        assert_eq!(spec.feature_dim(), 128);
        let chain = spec.shape_chain().unwrap();
        // output of the third conv (after its relu)
        assert_eq!(chain[7], vec![64, 9, 5]);
        assert_eq!(chain[8], vec![128]);
    }

    #[test]
    fn paper_preset_rejects_small_input_but_small_preset_accepts_it() {
        assert!(matches!(paper_preset([1, 32, 32]), Err(Error::Build { .. })));
        let spec = small_preset([1, 32, 32]).unwrap();
        let chain = spec.shape_chain().unwrap();
        assert_eq!(chain[7], vec![16, 3, 3]);
    }

    #[test]
    fn build_error_names_layer() {
        let spec = NetworkSpec {
            input_shape: [1, 6, 6],
            layers: vec![
                LayerSpec::Conv { filters: 2, kernel: 5, stride: 1 },
                LayerSpec::Maxpool { window: 3, stride: 3 },
                LayerSpec::Affine { out_dim: 2 },
            ],
            head: HeadKind::Boost,
        };
        match build_network(&spec, 0) {
            Err(Error::Build { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("expected build error, got {other:?}"),
        }
    }

    #[test]
    fn batch_shape_mismatch() {
        let mut model = build_network(&small_preset([1, 32, 32]).unwrap(), 0).unwrap();
        assert!(matches!(
            model.forward_features(&Tensor::zeros(&[2, 1, 30, 32])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn sigmoid_ce_reference_values() {
        let (loss, _) = sigmoid_ce_head(&Tensor::zeros(&[1, 1]), &[1.0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        let (loss, g) = sigmoid_ce_head(&Tensor::filled(&[1, 1], 20.0), &[1.0]).unwrap();
        assert!(loss < 1e-8 && g.data()[0].abs() < 1e-8);
    }

    #[test]
    fn sgd_plain_and_fixed_point() {
        let mut p = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let mut v = Tensor::zeros(&[2]);
        let g = Tensor::new(vec![2], vec![0.5, 2.0]).unwrap();
        momentum_update(&mut p, &mut v, &g, 0.1, 0.0).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.1 * 0.5, -1.0 - 0.1 * 2.0]);

        let mut p = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let mut v = Tensor::zeros(&[2]);
        for _ in 0..10 {
            momentum_update(&mut p, &mut v, &Tensor::zeros(&[2]), 0.1, 0.9).unwrap();
        }
        assert_eq!(p.data(), &[3.0, 4.0]);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sgd_momentum_matches_geometric_sum() {
        // v_n = -lr*g*(1 + mu + ... + mu^(n-1)); displacement = sum of v_1..v_3
        let (lr, mu, g) = (0.1, 0.9, 2.0);
        let mut p = Tensor::zeros(&[1]);
        let mut v = Tensor::zeros(&[1]);
        for _ in 0..3 {
            momentum_update(&mut p, &mut v, &Tensor::filled(&[1], g), lr, mu).unwrap();
        }
        let expected = -lr * g * (1.0 + (1.0 + mu) + (1.0 + mu + mu * mu));
        assert!((p.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_with_iteration() {
        let mut model = build_network(&affine_only(2, 1), 0).unwrap();
        let grads = vec![Tensor::filled(&[2, 1], f64::NAN), Tensor::zeros(&[1])];
        match model.sgd_momentum_step(&grads, 0.1, 0.9, 17) {
            Err(Error::Training { iteration, .. }) => assert_eq!(iteration, 17),
            other => panic!("expected training error, got {other:?}"),
        }
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig { beta: 1.5, ..TrainConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "beta"));
        let c = TrainConfig { batch_size: 1, ..TrainConfig::default() };
        assert!(c.validate().is_err());
    }
}
