//! Model checkpoint container. Byte layout: `docs/FORMATS.md`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boosting::{Polarity, StrongClassifier, Stump, WeakClassifier};
use crate::data::Reader;
use crate::error::{Error, Result};
use crate::incremental::IncrementalStrongClassifier;
use crate::network::{build_network, NetworkSpec, TrainConfig};
use crate::tensor::Tensor;
use crate::train::{Head, LinearHead, Model};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IBCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const TAG_SIGMOID: u8 = 0;
const TAG_BOOST: u8 = 1;
const TAG_INCREMENTAL: u8 = 2;

#[derive(Serialize, Deserialize)]
struct Header {
    network: NetworkSpec,
    train: TrainConfig,
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn get_tensor(r: &mut Reader<'_>) -> Result<Tensor> {
    let ndim = r.u32()? as usize;
    if ndim > 8 {
        return Err(r.fail(format!("tensor rank {ndim} is implausible")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u64()? as usize);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| r.fail("tensor shape overflows".into()))?;
    let data = r.f64s(count)?;
    Tensor::new(shape, data)
}

fn put_record(buf: &mut Vec<u8>, stump: Option<&Stump>, weight: f64) {
    let (active, p, threshold, eta) = match stump {
        Some(s) if weight > 0.0 => (1u64, s.polarity.sign(), s.threshold, s.eta),
        _ => (0u64, 0.0, 0.0, 0.0),
    };
    buf.extend_from_slice(&active.to_le_bytes());
    for v in [p, threshold, eta, weight] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn get_record(r: &mut Reader<'_>) -> Result<(Option<Stump>, f64)> {
    let active = r.u64()?;
    let p = r.f64()?;
    let threshold = r.f64()?;
    let eta = r.f64()?;
    let weight = r.f64()?;
    match active {
        0 => Ok((None, weight)),
        1 => Ok((
            Some(Stump {
                polarity: Polarity::from_sign(p),
                threshold,
                eta,
            }),
            weight,
        )),
        other => Err(r.fail(format!("active flag {other} is not 0 or 1"))),
    }
}

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let header = toml::to_string(&Header {
        network: model.network.spec().clone(),
        train: model.config.clone(),
    })
    .map_err(|e| Error::State(format!("cannot serialize checkpoint header: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());

    let params = model.network.params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        put_tensor(&mut buf, p);
    }

    match &model.head {
        Head::SigmoidCe(l) => {
            buf.push(TAG_SIGMOID);
            put_tensor(&mut buf, &l.weights);
            put_tensor(&mut buf, &l.bias);
        }
        Head::Boost(h) => {
            buf.push(TAG_BOOST);
            match h {
                None => buf.push(0),
                Some(h) => {
                    buf.push(1);
                    buf.extend_from_slice(&(h.feature_dim() as u64).to_le_bytes());
                    for w in h.weaks() {
                        put_record(&mut buf, Some(&w.stump), w.alpha);
                    }
                }
            }
        }
        Head::Incremental(s) => {
            buf.push(TAG_INCREMENTAL);
            buf.extend_from_slice(&s.iteration().to_le_bytes());
            buf.extend_from_slice(&(s.feature_dim() as u64).to_le_bytes());
            for (stump, &w) in s.stumps().iter().zip(s.weights()) {
                put_record(&mut buf, stump.as_ref(), w);
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?).map_err(Error::file(path))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(Error::file(path))?;
    decode_checkpoint(&bytes, path)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Model> {
    let mut r = Reader::open(bytes, path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let header_len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(header_len)?).map_err(|_| r.fail("header is not UTF-8".into()))?;
    let header: Header = toml::from_str(text).map_err(|e| r.fail(format!("bad header: {e}")))?;

    let mut network = build_network(&header.network, header.train.seed)?;
    let n_params = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        params.push(get_tensor(&mut r)?);
    }
    network.load_params(params)?;

    let k = header.network.feature_dim();
    let head = match r.u8()? {
        TAG_SIGMOID => {
            let weights = get_tensor(&mut r)?;
            let bias = get_tensor(&mut r)?;
            if weights.shape() != [k, 1] || bias.shape() != [1] {
                return Err(r.fail("linear head shape does not match the feature width".into()));
            }
            Head::SigmoidCe(LinearHead::new(weights, bias))
        }
        TAG_BOOST => match r.u8()? {
            0 => Head::Boost(None),
            1 => {
                let stored_k = r.u64()? as usize;
                if stored_k != k {
                    return Err(r.fail(format!("head has {stored_k} neurons, network {k}")));
                }
                let mut weaks = Vec::with_capacity(k);
                for j in 0..k {
                    let (stump, alpha) = get_record(&mut r)?;
                    weaks.push(match stump {
                        Some(stump) => WeakClassifier { neuron: j, stump, alpha },
                        None => WeakClassifier::inactive(j),
                    });
                }
                Head::Boost(Some(StrongClassifier::new(weaks)?))
            }
            other => return Err(r.fail(format!("bad boost presence flag {other}"))),
        },
        TAG_INCREMENTAL => {
            let t = r.u64()?;
            let stored_k = r.u64()? as usize;
            if stored_k != k {
                return Err(r.fail(format!("head has {stored_k} neurons, network {k}")));
            }
            let mut stumps = Vec::with_capacity(k);
            let mut weights = Vec::with_capacity(k);
            for _ in 0..k {
                let (s, w) = get_record(&mut r)?;
                stumps.push(s);
                weights.push(w);
            }
            Head::Incremental(IncrementalStrongClassifier::from_parts(t, stumps, weights)?)
        }
        other => return Err(r.fail(format!("unknown head tag {other}"))),
    };
    r.finish()?;
    Model::from_parts(network, head, header.train)
}
