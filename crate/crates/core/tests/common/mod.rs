//! Independent reference implementations used by the integration tests.
//! Written as direct loops over the definitions, sharing no code with the
//! library beyond its public types.
#![allow(dead_code)]

use ibcnn_core::boosting::{Polarity, StrongClassifier, Stump, WeakClassifier};
use ibcnn_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

pub fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `|a - n| / max(|a|, |n|, floor)` maximised over entries.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central differences of `f` around `x`, one coordinate at a time.
pub fn central_diff(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Six nested loops over the definition of a valid cross-correlation.
pub fn naive_conv(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize) -> Tensor {
    let s = x.shape();
    let (m, c, h, w) = (s[0], s[1], s[2], s[3]);
    let ks = k.shape();
    let (f, kh, kw) = (ks[0], ks[2], ks[3]);
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let at = |t: &Tensor, i: usize, j: usize, y: usize, z: usize| {
        let sh = t.shape();
        t.data()[((i * sh[1] + j) * sh[2] + y) * sh[3] + z]
    };
    let mut out = Vec::new();
    for mi in 0..m {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[fi];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                acc += at(k, fi, ci, ky, kx) * at(x, mi, ci, oy * stride + ky, ox * stride + kx);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::new(vec![m, f, oh, ow], out).unwrap()
}

/// Exhaustive window scan. Windows start every `stride` cells while the start
/// lies inside the input and are clipped at the border.
pub fn naive_maxpool(x: &Tensor, window: usize, stride: usize) -> Tensor {
    let s = x.shape();
    let (m, c, h, w) = (s[0], s[1], s[2], s[3]);
    let starts = |n: usize| -> Vec<usize> {
        let mut v = vec![0];
        while v.last().unwrap() + window < n && v.last().unwrap() + stride < n {
            v.push(v.last().unwrap() + stride);
        }
        v
    };
    let (ys, xs) = (starts(h), starts(w));
    let mut out = Vec::new();
    for plane in 0..m * c {
        for &y0 in &ys {
            for &x0 in &xs {
                let mut best = f64::NEG_INFINITY;
                for y in y0..(y0 + window).min(h) {
                    for xx in x0..(x0 + window).min(w) {
                        best = best.max(x.data()[plane * h * w + y * w + xx]);
                    }
                }
                out.push(best);
            }
        }
    }
    Tensor::new(vec![m, c, ys.len(), xs.len()], out).unwrap()
}

pub fn naive_matmul(a: &[f64], b: &[f64], n: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        for j in 0..p {
            for l in 0..k {
                out[i * p + j] += a[i * k + l] * b[l * p + j];
            }
        }
    }
    out
}

/// Straight from the definitions: per-sample score, mean squared strong
/// error, mean squared weak error over active neurons.
pub fn direct_losses(weights: &[f64], stumps: &[Stump], features: &[Vec<f64>], labels: &[f64], beta: f64) -> (f64, f64, f64) {
    let m = labels.len() as f64;
    let active: Vec<usize> = (0..weights.len()).filter(|&j| weights[j] > 0.0).collect();
    let h = |j: usize, x: f64| {
        let s = &stumps[j];
        let f = s.polarity.sign() * (x - s.threshold);
        f / (f * f + s.eta * s.eta).sqrt()
    };
    let mut strong = 0.0;
    let mut weak = 0.0;
    for (x, &y) in features.iter().zip(labels) {
        let score: f64 = active.iter().map(|&j| weights[j] * h(j, x[j])).sum();
        strong += (score - y).powi(2);
        for &j in &active {
            weak += (h(j, x[j]) - y).powi(2);
        }
    }
    let strong = strong / m;
    let weak = if active.is_empty() { 0.0 } else { weak / (m * active.len() as f64) };
    (strong, weak, beta * strong + (1.0 - beta) * weak)
}

pub fn population_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub enum RefSelection {
    Empty,
    Picked(Vec<(usize, f64, f64, f64, f64)>),
}

/// Reference discrete AdaBoost: every remaining neuron, every candidate
/// threshold and both polarities are scored by summing weights of the
/// misclassified samples. Returns `(neuron, polarity, threshold, alpha, eta)`
/// in selection order.
pub fn reference_adaboost(features: &[Vec<f64>], labels: &[f64], rounds: usize, c: f64) -> RefSelection {
    const TIE: f64 = 1e-12;
    let m = labels.len();
    let k = features[0].len();
    let mut d = vec![1.0 / m as f64; m];
    let mut used = vec![false; k];
    let mut picked: Vec<(usize, f64, f64, f64)> = Vec::new();
    for round in 0..rounds {
        let mut best: Option<(usize, f64, f64, f64)> = None;
        for j in 0..k {
            if used[j] {
                continue;
            }
            let mut vals: Vec<f64> = features.iter().map(|r| r[j]).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            let (lo, hi) = (vals[0], *vals.last().unwrap());
            let pad = if hi > lo { (hi - lo) / 2.0 } else { 0.5 };
            let mut cands = vec![lo - pad];
            for w in vals.windows(2) {
                cands.push(0.5 * (w[0] + w[1]));
            }
            cands.push(hi + pad);
            for &thr in &cands {
                for p in [1.0, -1.0] {
                    let mut err = 0.0;
                    for i in 0..m {
                        let pred = if features[i][j] > thr { p } else { -p };
                        if pred != labels[i] {
                            err += d[i];
                        }
                    }
                    let better = match best {
                        None => true,
                        Some((_, _, _, e)) => err < e - TIE,
                    };
                    if better {
                        best = Some((j, p, thr, err));
                    }
                }
            }
        }
        let Some((j, p, thr, err)) = best else { break };
        if err >= 0.5 - 1e-6 {
            if round == 0 {
                return RefSelection::Empty;
            }
            break;
        }
        let e = err.clamp(1e-6, 1.0 - 1e-6);
        let a = 0.5 * ((1.0 - e) / e).ln();
        used[j] = true;
        picked.push((j, p, thr, a));
        if err <= 1e-6 {
            break;
        }
        for i in 0..m {
            let pred = if features[i][j] > thr { p } else { -p };
            d[i] *= (-a * labels[i] * pred).exp();
        }
        let z: f64 = d.iter().sum();
        for v in &mut d {
            *v /= z;
        }
    }
    let total: f64 = picked.iter().map(|x| x.3).sum();
    RefSelection::Picked(
        picked
            .into_iter()
            .map(|(j, p, thr, a)| {
                let f: Vec<f64> = features.iter().map(|r| p * (r[j] - thr)).collect();
                let eta = (population_std(&f) / c).max(1e-8);
                (j, p, thr, a / total, eta)
            })
            .collect(),
    )
}

/// Confusion counts by brute force: (tp, fp, tn, fn).
pub fn brute_confusion(pred: &[f64], labels: &[f64]) -> (u64, u64, u64, u64) {
    let mut c = (0, 0, 0, 0);
    for (&p, &y) in pred.iter().zip(labels) {
        if p > 0.0 && y > 0.0 {
            c.0 += 1;
        } else if p > 0.0 {
            c.1 += 1;
        } else if y < 0.0 {
            c.2 += 1;
        } else {
            c.3 += 1;
        }
    }
    c
}

pub fn brute_f1(pred: &[f64], labels: &[f64]) -> f64 {
    let (tp, fp, _, fn_) = brute_confusion(pred, labels);
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Every (positive, negative) pair: win counts 1, tie counts one half.
pub fn brute_two_afc(scores: &[f64], labels: &[f64]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] > 0.0 && labels[j] < 0.0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// A random per-batch strong classifier over `k` neurons with `n_active`
/// active weak classifiers on the simplex.
pub fn random_strong(k: usize, n_active: usize, rng: &mut impl Rng) -> StrongClassifier {
    let mut idx: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    let chosen = &idx[..n_active];
    let raw: Vec<f64> = (0..n_active).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut weaks: Vec<WeakClassifier> = (0..k).map(WeakClassifier::inactive).collect();
    for (&j, &r) in chosen.iter().zip(&raw) {
        weaks[j] = WeakClassifier {
            neuron: j,
            stump: Stump {
                polarity: if rng.random_bool(0.5) { Polarity::Positive } else { Polarity::Negative },
                threshold: rng.random_range(-1.0..1.0),
                eta: rng.random_range(0.2..1.5),
            },
            alpha: r / total,
        };
    }
    StrongClassifier::new(weaks).unwrap()
}

/// Random ±1 labels with both classes present.
pub fn random_labels(m: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let y: Vec<f64> = (0..m).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        if y.iter().any(|&v| v > 0.0) && y.iter().any(|&v| v < 0.0) {
            return y;
        }
    }
}
