//! Forward/backward primitives for the convolutional feature extractor.
//!
//! The free functions are pure. [`Layer`] wraps them with parameters and the
//! forward cache that its backward pass needs.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn conv_out(size: usize, kernel: usize, stride: usize) -> usize {
    (size - kernel) / stride + 1
}

/// Pooled extent with ceil rounding: a trailing partial window is kept as
/// long as it starts inside the input.
pub fn pool_out(size: usize, window: usize, stride: usize) -> usize {
    let n = (size - window).div_ceil(stride) + 1;
    if (n - 1) * stride >= size {
        n - 1
    } else {
        n
    }
}

/// Valid (unpadded) 2-D cross-correlation.
///
/// `x` is `[M, C, H, W]`, `kernels` is `[F, C, kh, kw]`, `bias` is `[F]`.
pub fn conv2d_forward(x: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    x.expect_rank(4, "conv input")?;
    kernels.expect_rank(4, "conv kernels")?;
    let (m, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, kc, kh, kw) = (
        kernels.shape()[0],
        kernels.shape()[1],
        kernels.shape()[2],
        kernels.shape()[3],
    );
    if kc != c {
        return Err(Error::shape(format!(
            "conv kernels expect {kc} input channels, input has {c}"
        )));
    }
    if bias.shape() != [f] {
        return Err(Error::shape(format!(
            "conv bias must be [{f}], got {:?}",
            bias.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::shape("conv stride must be positive"));
    }
    if kh > h || kw > w || kh == 0 || kw == 0 {
        return Err(Error::shape(format!(
            "conv kernel {kh}x{kw} does not fit input {h}x{w}"
        )));
    }
    let (oh, ow) = (conv_out(h, kh, stride), conv_out(w, kw, stride));
    let mut out = vec![0.0; m * f * oh * ow];
    let xd = x.data();
    let kd = kernels.data();
    for mi in 0..m {
        for fi in 0..f {
            let o = &mut out[(mi * f + fi) * oh * ow..(mi * f + fi + 1) * oh * ow];
            o.fill(bias.data()[fi]);
            for ci in 0..c {
                let plane = &xd[(mi * c + ci) * h * w..(mi * c + ci + 1) * h * w];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = kd[((fi * c + ci) * kh + ki) * kw + kj];
                        for oy in 0..oh {
                            let src = &plane[(oy * stride + ki) * w + kj..];
                            let dst = &mut o[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                for (d, &v) in dst.iter_mut().zip(&src[..ow]) {
                                    *d += wv * v;
                                }
                            } else {
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d += wv * src[ox * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![m, f, oh, ow], out)
}

/// Gradients of a valid convolution: `(d_input, d_kernels, d_bias)`.
pub fn conv2d_backward(
    x: &Tensor,
    kernels: &Tensor,
    stride: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (m, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, kh, kw) = (kernels.shape()[0], kernels.shape()[2], kernels.shape()[3]);
    let (oh, ow) = (conv_out(h, kh, stride), conv_out(w, kw, stride));
    if grad_out.shape() != [m, f, oh, ow] {
        return Err(Error::shape(format!(
            "conv upstream gradient must be {:?}, got {:?}",
            [m, f, oh, ow],
            grad_out.shape()
        )));
    }
    let xd = x.data();
    let kd = kernels.data();
    let gd = grad_out.data();
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kernels.len()];
    let mut db = vec![0.0; f];
    for mi in 0..m {
        for fi in 0..f {
            let g = &gd[(mi * f + fi) * oh * ow..(mi * f + fi + 1) * oh * ow];
            db[fi] += g.iter().sum::<f64>();
            for ci in 0..c {
                let base = (mi * c + ci) * h * w;
                for ki in 0..kh {
                    for kj in 0..kw {
                        let kidx = ((fi * c + ci) * kh + ki) * kw + kj;
                        let wv = kd[kidx];
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let row = base + (oy * stride + ki) * w + kj;
                            let grow = &g[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                for (&gv, &xv) in grow.iter().zip(&xd[row..row + ow]) {
                                    acc += gv * xv;
                                }
                                for (d, &gv) in dx[row..row + ow].iter_mut().zip(grow) {
                                    *d += gv * wv;
                                }
                            } else {
                                for (ox, &gv) in grow.iter().enumerate() {
                                    let idx = row + ox * stride;
                                    acc += gv * xd[idx];
                                    dx[idx] += gv * wv;
                                }
                            }
                        }
                        dk[kidx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(kernels.shape().to_vec(), dk)?,
        Tensor::new(vec![f], db)?,
    ))
}

/// Winning input position (flat row-major index) for every pooled cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgmaxMask {
    input_shape: Vec<usize>,
    indices: Vec<usize>,
}

impl ArgmaxMask {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }
}

/// Max-pooling over `window x window` patches, clipped at the border (see
/// [`pool_out`]). Ties go to the first position in row-major order.
pub fn maxpool_forward(x: &Tensor, window: usize, stride: usize) -> Result<(Tensor, ArgmaxMask)> {
    x.expect_rank(4, "maxpool input")?;
    let (m, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if window == 0 || stride == 0 {
        return Err(Error::shape("maxpool window and stride must be positive"));
    }
    if window > h || window > w {
        return Err(Error::shape(format!(
            "maxpool window {window} exceeds spatial extent {h}x{w}"
        )));
    }
    let (oh, ow) = (pool_out(h, window, stride), pool_out(w, window, stride));
    let xd = x.data();
    let mut out = Vec::with_capacity(m * c * oh * ow);
    let mut indices = Vec::with_capacity(m * c * oh * ow);
    for plane in 0..m * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * stride * w + ox * stride;
                let mut best = xd[best_idx];
                let (y0, x0) = (oy * stride, ox * stride);
                for yy in y0..(y0 + window).min(h) {
                    for xx in x0..(x0 + window).min(w) {
                        let idx = base + yy * w + xx;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                indices.push(best_idx);
            }
        }
    }
    Ok((
        Tensor::new(vec![m, c, oh, ow], out)?,
        ArgmaxMask {
            input_shape: x.shape().to_vec(),
            indices,
        },
    ))
}

pub fn maxpool_backward(mask: &ArgmaxMask, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.len() != mask.indices.len() {
        return Err(Error::shape(format!(
            "maxpool upstream gradient has {} values, mask routes {}",
            grad_out.len(),
            mask.indices.len()
        )));
    }
    let mut dx = Tensor::zeros(&mask.input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in mask.indices.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    Ok(dx)
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if x.shape() != grad_out.shape() {
        return Err(Error::shape(format!(
            "relu upstream gradient {:?} does not match input {:?}",
            grad_out.shape(),
            x.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// `x · weights + bias` for `x: [M, K_in]`, `weights: [K_in, K_out]`.
pub fn affine_forward(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    x.expect_rank(2, "affine input")?;
    weights.expect_rank(2, "affine weights")?;
    let (m, k_in) = (x.shape()[0], x.shape()[1]);
    let (w_in, k_out) = (weights.shape()[0], weights.shape()[1]);
    if w_in != k_in {
        return Err(Error::shape(format!(
            "affine weights expect {w_in} inputs, got {k_in}"
        )));
    }
    if bias.shape() != [k_out] {
        return Err(Error::shape(format!(
            "affine bias must be [{k_out}], got {:?}",
            bias.shape()
        )));
    }
    let wd = weights.data();
    let mut out = Vec::with_capacity(m * k_out);
    for i in 0..m {
        let mut row = bias.data().to_vec();
        for (k, &xv) in x.row(i).iter().enumerate() {
            let wrow = &wd[k * k_out..(k + 1) * k_out];
            for (o, &wv) in row.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
        out.extend_from_slice(&row);
    }
    Tensor::new(vec![m, k_out], out)
}

/// Gradients of an affine map: `(d_input, d_weights, d_bias)`.
pub fn affine_backward(x: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (m, k_in) = (x.shape()[0], x.shape()[1]);
    let k_out = weights.shape()[1];
    if grad_out.shape() != [m, k_out] {
        return Err(Error::shape(format!(
            "affine upstream gradient must be [{m}, {k_out}], got {:?}",
            grad_out.shape()
        )));
    }
    let wd = weights.data();
    let mut dx = vec![0.0; m * k_in];
    let mut dw = vec![0.0; k_in * k_out];
    let mut db = vec![0.0; k_out];
    for i in 0..m {
        let g = grad_out.row(i);
        let xi = x.row(i);
        for (b, &gv) in db.iter_mut().zip(g) {
            *b += gv;
        }
        for k in 0..k_in {
            let wrow = &wd[k * k_out..(k + 1) * k_out];
            dx[i * k_in + k] = wrow.iter().zip(g).map(|(w, g)| w * g).sum();
            let dwrow = &mut dw[k * k_out..(k + 1) * k_out];
            for (d, &gv) in dwrow.iter_mut().zip(g) {
                *d += xi[k] * gv;
            }
        }
    }
    Ok((
        Tensor::new(vec![m, k_in], dx)?,
        Tensor::new(vec![k_in, k_out], dw)?,
        Tensor::new(vec![k_out], db)?,
    ))
}

/// Gradients for a layer's trainable tensors, in the order of
/// [`Layer::params`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kernels: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    input: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct MaxPool {
    pub window: usize,
    pub stride: usize,
    mask: Option<ArgmaxMask>,
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    input: Option<Tensor>,
}

/// Fully connected layer. Inputs of rank > 2 are flattened per sample.
#[derive(Debug, Clone)]
pub struct Affine {
    pub weights: Tensor,
    pub bias: Tensor,
    input: Option<(Tensor, Vec<usize>)>,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    Relu(Relu),
    MaxPool(MaxPool),
    Affine(Affine),
}

impl Layer {
    pub fn conv(kernels: Tensor, bias: Tensor, stride: usize) -> Self {
        Layer::Conv(Conv2d {
            kernels,
            bias,
            stride,
            input: None,
        })
    }

    pub fn relu() -> Self {
        Layer::Relu(Relu::default())
    }

    pub fn maxpool(window: usize, stride: usize) -> Self {
        Layer::MaxPool(MaxPool {
            window,
            stride,
            mask: None,
        })
    }

    pub fn affine(weights: Tensor, bias: Tensor) -> Self {
        Layer::Affine(Affine {
            weights,
            bias,
            input: None,
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Relu(_) => "relu",
            Layer::MaxPool(_) => "maxpool",
            Layer::Affine(_) => "affine",
        }
    }

    /// Forward pass without touching the cache.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(l) => conv2d_forward(x, &l.kernels, &l.bias, l.stride),
            Layer::Relu(_) => Ok(relu_forward(x)),
            Layer::MaxPool(l) => maxpool_forward(x, l.window, l.stride).map(|(y, _)| y),
            Layer::Affine(l) => affine_forward(&flatten(x)?, &l.weights, &l.bias),
        }
    }

    /// Forward pass that records what [`Layer::backward`] needs.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(l) => {
                let y = conv2d_forward(x, &l.kernels, &l.bias, l.stride)?;
                l.input = Some(x.clone());
                Ok(y)
            }
            Layer::Relu(l) => {
                l.input = Some(x.clone());
                Ok(relu_forward(x))
            }
            Layer::MaxPool(l) => {
                let (y, mask) = maxpool_forward(x, l.window, l.stride)?;
                l.mask = Some(mask);
                Ok(y)
            }
            Layer::Affine(l) => {
                let flat = flatten(x)?;
                let y = affine_forward(&flat, &l.weights, &l.bias)?;
                l.input = Some((flat, x.shape().to_vec()));
                Ok(y)
            }
        }
    }

    /// Gradient with respect to the cached input, plus parameter gradients
    /// for conv and affine layers.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<(Tensor, Option<ParamGrads>)> {
        let kind = self.kind();
        let missing = || Error::State(format!("{kind} backward called before forward"));
        match self {
            Layer::Conv(l) => {
                let x = l.input.as_ref().ok_or_else(missing)?;
                let (dx, dk, db) = conv2d_backward(x, &l.kernels, l.stride, upstream)?;
                Ok((dx, Some(ParamGrads { weights: dk, bias: db })))
            }
            Layer::Relu(l) => {
                let x = l.input.as_ref().ok_or_else(missing)?;
                Ok((relu_backward(x, upstream)?, None))
            }
            Layer::MaxPool(l) => {
                let mask = l.mask.as_ref().ok_or_else(missing)?;
                Ok((maxpool_backward(mask, upstream)?, None))
            }
            Layer::Affine(l) => {
                let (x, in_shape) = l.input.as_ref().ok_or_else(missing)?;
                let (dx, dw, db) = affine_backward(x, &l.weights, upstream)?;
                Ok((dx.reshape(in_shape)?, Some(ParamGrads { weights: dw, bias: db })))
            }
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv(l) => vec![&l.kernels, &l.bias],
            Layer::Affine(l) => vec![&l.weights, &l.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv(l) => vec![&mut l.kernels, &mut l.bias],
            Layer::Affine(l) => vec![&mut l.weights, &mut l.bias],
            _ => Vec::new(),
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv(l) => l.input = None,
            Layer::Relu(l) => l.input = None,
            Layer::MaxPool(l) => l.mask = None,
            Layer::Affine(l) => l.input = None,
        }
    }
}

fn flatten(x: &Tensor) -> Result<Tensor> {
    if x.ndim() == 2 {
        return Ok(x.clone());
    }
    if x.ndim() < 2 {
        return Err(Error::shape(format!(
            "affine input needs a batch axis, got shape {:?}",
            x.shape()
        )));
    }
    let m = x.shape()[0];
    let rest = x.len() / m.max(1);
    x.clone().reshape(&[m, rest])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_scalar_kernel_scales_input() {
        let x = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &t(&[1, 1, 1, 1], &[2.0]), &t(&[1], &[0.0]), 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_diagonal_kernel_sums_diagonal() {
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let k = t(&[1, 1, 2, 2], &[1., 0., 0., 1.]);
        let y = conv2d_forward(&x, &k, &t(&[1], &[0.0]), 1).unwrap();
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 2, 2]);
        let err = conv2d_forward(&x, &k, &Tensor::zeros(&[1]), 1).unwrap_err();
        assert!(matches!(err, Error::Shape(ref m) if m.contains("channels")));
    }

    #[test]
    fn maxpool_constant_input_points_to_window_origin() {
        let x = Tensor::filled(&[1, 1, 4, 4], 3.0);
        let (y, mask) = maxpool_forward(&x, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
        assert_eq!(mask.indices(), &[0, 2, 8, 10]);
    }

    #[test]
    fn maxpool_single_peak() {
        let mut x = Tensor::zeros(&[1, 1, 4, 4]);
        x.data_mut()[4 + 2] = 9.0;
        let (y, _) = maxpool_forward(&x, 2, 2).unwrap();
        assert_eq!(y.data()[1], 9.0);
        assert_eq!(y.data().iter().filter(|&&v| v == 9.0).count(), 1);
    }

    #[test]
    fn maxpool_keeps_trailing_partial_window() {
        assert_eq!(pool_out(124, 3, 3), 42);
        assert_eq!(pool_out(6, 3, 3), 2);
        assert_eq!(pool_out(5, 2, 3), 2);
        let x = Tensor::new(vec![1, 1, 1, 5], vec![0.0, 1.0, 0.0, 0.0, 7.0]).unwrap();
        let (y, _) = maxpool_forward(&x.reshape(&[1, 1, 1, 5]).unwrap(), 1, 2).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 7.0]);
        let x = Tensor::new(vec![1, 1, 2, 4], vec![1.0, 2.0, 3.0, 9.0, 4.0, 5.0, 6.0, 0.0]).unwrap();
        let (y, _) = maxpool_forward(&x, 2, 3).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.data(), &[5.0, 9.0]);
    }

    #[test]
    fn maxpool_window_too_large() {
        let x = Tensor::zeros(&[1, 1, 2, 3]);
        assert!(matches!(maxpool_forward(&x, 3, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn relu_cases() {
        assert_eq!(relu_forward(&t(&[3], &[-1., 0., 2.])).data(), &[0., 0., 2.]);
        assert_eq!(relu_forward(&t(&[2], &[-3., -0.5])).data(), &[0., 0.]);
        assert_eq!(relu_forward(&t(&[2], &[3., 0.5])).data(), &[3., 0.5]);
    }

    #[test]
    fn affine_identity_and_hand_sum() {
        let x = t(&[2, 2], &[1., 2., 3., 4.]);
        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        assert_eq!(affine_forward(&x, &eye, &Tensor::zeros(&[2])).unwrap(), x);
        let y = affine_forward(&t(&[1, 2], &[1., 2.]), &t(&[2, 1], &[1., 1.]), &t(&[1], &[3.])).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn affine_dimension_mismatch() {
        let r = affine_forward(&Tensor::zeros(&[1, 3]), &Tensor::zeros(&[2, 1]), &Tensor::zeros(&[1]));
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn affine_backward_two_by_two_by_hand() {
        // upstream [1, 2] times W^T with W = [[1, 2], [3, 4]] -> [5, 11]
        let w = t(&[2, 2], &[1., 2., 3., 4.]);
        let mut layer = Layer::affine(w, Tensor::zeros(&[2]));
        layer.forward(&t(&[1, 2], &[0.5, -1.0])).unwrap();
        let (dx, grads) = layer.backward(&t(&[1, 2], &[1., 2.])).unwrap();
        assert_eq!(dx.data(), &[5., 11.]);
        let grads = grads.unwrap();
        assert_eq!(grads.weights.data(), &[0.5, 1.0, -1.0, -2.0]);
        assert_eq!(grads.bias.data(), &[1., 2.]);
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut layers = vec![
            Layer::conv(Tensor::zeros(&[1, 1, 1, 1]), Tensor::zeros(&[1]), 1),
            Layer::relu(),
            Layer::maxpool(2, 2),
            Layer::affine(Tensor::zeros(&[2, 1]), Tensor::zeros(&[1])),
        ];
        for layer in &mut layers {
            assert!(matches!(layer.backward(&Tensor::zeros(&[1, 1])), Err(Error::State(_))));
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let x = t(&[1, 1, 3, 3], &[1., -2., 3., 4., 5., -6., 7., 8., 9.]);
        let mut layers = vec![
            Layer::conv(Tensor::filled(&[2, 1, 2, 2], 0.3), Tensor::zeros(&[2]), 1),
            Layer::relu(),
            Layer::maxpool(2, 1),
            Layer::affine(Tensor::filled(&[2, 3], 0.1), Tensor::zeros(&[3])),
        ];
        let mut a = x;
        for layer in &mut layers {
            a = layer.forward(&a).unwrap();
        }
        let mut g = Tensor::zeros(a.shape());
        for layer in layers.iter_mut().rev() {
            let (dx, pg) = layer.backward(&g).unwrap();
            assert!(dx.data().iter().all(|&v| v == 0.0));
            if let Some(pg) = pg {
                assert!(pg.weights.data().iter().all(|&v| v == 0.0));
                assert!(pg.bias.data().iter().all(|&v| v == 0.0));
            }
            g = dx;
        }
    }
}
