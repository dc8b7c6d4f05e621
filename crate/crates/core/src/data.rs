//! Synthetic datasets, sequence normalization and the dataset container.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: u64,
    /// Fraction of +1 labels, always equal to the actual count over `n`.
    pub positive_rate: f64,
}

/// Images `[n, C, H, W]` with labels in {-1, +1}.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<f64>,
    meta: DatasetMeta,
}

impl Dataset {
    /// Builds a dataset; the positive rate in the metadata is recomputed from
    /// the labels.
    pub fn new(images: Tensor, labels: Vec<f64>, generator: impl Into<String>, seed: u64) -> Result<Self> {
        images.expect_rank(4, "dataset images")?;
        if images.shape()[0] != labels.len() {
            return Err(Error::shape(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::shape("dataset is empty"));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 1.0 && y != -1.0) {
            return Err(Error::shape(format!("label {bad} is not -1 or +1")));
        }
        let positives = labels.iter().filter(|&&y| y > 0.0).count();
        let positive_rate = positives as f64 / labels.len() as f64;
        Ok(Dataset {
            images,
            labels,
            meta: DatasetMeta {
                generator: generator.into(),
                seed,
                positive_rate,
            },
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y > 0.0).count()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }
}

/// Parameters of the Gaussian-bump generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobParams {
    pub seed: u64,
    pub n: usize,
    pub positive_rate: f64,
    pub shape: [usize; 3],
    /// Peak height of the bump added to positive images.
    pub amplitude: f64,
    pub noise_sigma: f64,
}

/// The fixed pattern added to positives: a 2-D Gaussian bump of unit peak
/// centred at (H/3, 2W/3) with width min(H, W)/8, replicated across channels.
pub fn blob_pattern(shape: [usize; 3]) -> Vec<f64> {
    let [c, h, w] = shape;
    let cy = h as f64 / 3.0;
    let cx = 2.0 * w as f64 / 3.0;
    let s = (h.min(w) as f64 / 8.0).max(0.5);
    let mut plane = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            plane.push((-d2 / (2.0 * s * s)).exp());
        }
    }
    plane.repeat(c)
}

/// Gaussian-noise images where positives carry an extra localized bump.
///
/// Exactly `round(n * positive_rate)` samples are positive; which ones is
/// decided by a seeded permutation.
pub fn synth_blobs(params: &BlobParams) -> Result<Dataset> {
    let BlobParams {
        seed,
        n,
        positive_rate,
        shape,
        amplitude,
        noise_sigma,
    } = *params;
    if !(positive_rate > 0.0 && positive_rate < 1.0) {
        return Err(Error::Generation(format!("positive rate {positive_rate} must lie in (0, 1)")));
    }
    let positives = (n as f64 * positive_rate).round() as usize;
    if positives == 0 || positives >= n {
        return Err(Error::Generation(format!(
            "{n} samples at rate {positive_rate} leave a class empty"
        )));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::Generation(format!("image shape {shape:?} has a zero dimension")));
    }
    let noise = Normal::new(0.0, noise_sigma)
        .map_err(|e| Error::Generation(format!("noise sigma {noise_sigma}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut labels = vec![-1.0; n];
    for &i in &order[..positives] {
        labels[i] = 1.0;
    }
    let pattern = blob_pattern(shape);
    let per = pattern.len();
    let mut data = Vec::with_capacity(n * per);
    for &y in &labels {
        for &p in &pattern {
            let v = noise.sample(&mut rng);
            data.push(if y > 0.0 { v + amplitude * p } else { v });
        }
    }
    let images = Tensor::new(vec![n, shape[0], shape[1], shape[2]], data)?;
    Dataset::new(images, labels, "blobs", seed)
}

/// Default number of frames used for per-pixel statistics.
pub const DEFAULT_NORM_WINDOW: usize = 800;

/// Per-pixel z-scoring against a window of `min(window, n)` consecutive
/// frames ending at the current frame. Frames near the start of the sequence,
/// which lack a full trailing window, use the first `min(window, n)` frames.
pub fn sequence_normalize(frames: &Tensor, window: usize) -> Result<Tensor> {
    frames.expect_rank(4, "frame sequence")?;
    let n = frames.shape()[0];
    if n == 0 {
        return Err(Error::shape("frame sequence is empty"));
    }
    if window == 0 {
        return Err(Error::shape("normalization window must be positive"));
    }
    let w = window.min(n);
    let px = frames.len() / n;
    let src = frames.data();
    let mut out = vec![0.0; frames.len()];
    let mut mean = vec![0.0; px];
    let mut sd = vec![0.0; px];
    let mut current_start = usize::MAX;
    for i in 0..n {
        let start = (i + 1).saturating_sub(w);
        if start != current_start {
            current_start = start;
            window_stats(src, px, start, w, &mut mean, &mut sd);
        }
        for p in 0..px {
            out[i * px + p] = (src[i * px + p] - mean[p]) / sd[p];
        }
    }
    Tensor::new(frames.shape().to_vec(), out)
}

fn window_stats(src: &[f64], px: usize, start: usize, w: usize, mean: &mut [f64], sd: &mut [f64]) {
    mean.fill(0.0);
    for f in start..start + w {
        for (m, &v) in mean.iter_mut().zip(&src[f * px..(f + 1) * px]) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= w as f64;
    }
    sd.fill(0.0);
    for f in start..start + w {
        for ((s, &m), &v) in sd.iter_mut().zip(mean.iter()).zip(&src[f * px..(f + 1) * px]) {
            *s += (v - m) * (v - m);
        }
    }
    for s in sd.iter_mut() {
        *s = (*s / w as f64).sqrt().max(1e-8);
    }
}

pub const DATASET_MAGIC: &[u8; 4] = b"IBDS";
pub const DATASET_VERSION: u32 = 1;

/// Writes the binary dataset container (layout in `docs/FORMATS.md`).
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut buf = Vec::with_capacity(64 + ds.images.len() * 8 + ds.len() * 8);
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    let name = ds.meta.generator.as_bytes();
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name);
    buf.extend_from_slice(&ds.meta.seed.to_le_bytes());
    buf.extend_from_slice(&ds.meta.positive_rate.to_le_bytes());
    for &d in ds.images.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &y in &ds.labels {
        buf.extend_from_slice(&(y as i64).to_le_bytes());
    }
    for &v in ds.images.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    let mut file = fs::File::create(path).map_err(Error::file(path))?;
    file.write_all(&buf).map_err(Error::file(path))?;
    Ok(())
}

/// Little-endian cursor over a checksummed byte buffer.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    /// Verifies the trailing CRC32 and the magic/version prefix.
    pub(crate) fn open(bytes: &'a [u8], path: &'a Path, magic: &[u8; 4], version: u32) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("file is {} bytes, too short for a header", bytes.len()),
            });
        }
        if &bytes[..4] != magic {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("bad magic {:?}", &bytes[..4]),
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum {
                path: path.to_path_buf(),
                stored,
                computed,
            });
        }
        let mut r = Reader {
            bytes: body,
            pos: 4,
            path,
        };
        let v = r.u32()?;
        if v != version {
            return Err(r.fail(format!("unsupported version {v}")));
        }
        Ok(r)
    }

    pub(crate) fn fail(&self, reason: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason,
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated payload: wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.fail("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.fail(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(Error::file(path))?;
    let mut r = Reader::open(&bytes, path, DATASET_MAGIC, DATASET_VERSION)?;
    let name_len = r.u32()? as usize;
    let generator = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| r.fail("generator name is not UTF-8".into()))?;
    let seed = r.u64()?;
    let positive_rate = r.f64()?;
    let mut shape = [0usize; 4];
    for d in &mut shape {
        *d = r.u64()? as usize;
    }
    let n = shape[0];
    if n == 0 {
        return Err(r.fail("dataset holds no samples".into()));
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(match r.i64()? {
            1 => 1.0,
            -1 => -1.0,
            other => return Err(r.fail(format!("label {other} is not -1 or +1"))),
        });
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| r.fail("image shape overflows".into()))?;
    let data = r.f64s(count)?;
    r.finish()?;
    let ds = Dataset::new(Tensor::new(shape.to_vec(), data)?, labels, generator, seed)?;
    if ds.meta.positive_rate != positive_rate {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!(
                "header positive rate {positive_rate} disagrees with labels ({})",
                ds.meta.positive_rate
            ),
        });
    }
    Ok(ds)
}
