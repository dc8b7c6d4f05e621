//! Python bindings. Tensors cross the boundary as flat lists plus a shape.

use std::path::PathBuf;

use ibcnn_core::boosting as b;
use ibcnn_core::checkpoint::{load_checkpoint, save_checkpoint};
use ibcnn_core::data as d;
use ibcnn_core::experiment::{evaluate, ExperimentConfig as CoreConfig, HeadName};
use ibcnn_core::incremental as inc;
use ibcnn_core::metrics;
use ibcnn_core::train::Model as CoreModel;
use ibcnn_core::{Error, Tensor};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(ibcnn, IbcnnError, PyException);

fn err(e: Error) -> PyErr {
    IbcnnError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let m = rows.len();
    let k = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != k) {
        return Err(IbcnnError::new_err("feature rows differ in length"));
    }
    Tensor::new(vec![m, k], rows.concat()).map_err(err)
}

fn batch(features: Vec<Vec<f64>>, labels: Vec<f64>) -> PyResult<b::ActivationBatch> {
    b::ActivationBatch::new(matrix(features)?, labels).map_err(err)
}

fn grads_to_py(g: b::HeadGrads) -> (Vec<Vec<f64>>, Vec<f64>) {
    let k = g.d_features.shape()[1];
    let rows = g.d_features.data().chunks(k.max(1)).map(<[f64]>::to_vec).collect();
    (rows, g.d_thresholds)
}

#[pyfunction]
fn smooth_sign(f: f64, eta: f64) -> f64 {
    b::smooth_sign(f, eta)
}

#[pyfunction]
#[pyo3(signature = (values, c = 2.0))]
fn estimate_eta(values: Vec<f64>, c: f64) -> f64 {
    b::estimate_eta(&values, c)
}

/// Returns `(polarity, threshold, weighted_error)` with polarity in {-1, +1}.
#[pyfunction]
fn stump_fit(column: Vec<f64>, labels: Vec<f64>, weights: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    let fit = b::stump_fit(&column, &labels, &weights).map_err(err)?;
    Ok((fit.polarity.sign(), fit.threshold, fit.error))
}

#[pyfunction]
#[pyo3(signature = (features, labels, rounds = 32, c = 2.0))]
fn adaboost_select(features: Vec<Vec<f64>>, labels: Vec<f64>, rounds: usize, c: f64) -> PyResult<StrongClassifier> {
    let h = b::adaboost_select(&batch(features, labels)?, rounds, c).map_err(err)?;
    Ok(StrongClassifier { inner: h })
}

#[pyfunction]
fn f1(predictions: Vec<f64>, labels: Vec<f64>) -> f64 {
    metrics::f1(&predictions, &labels)
}

#[pyfunction]
fn two_afc(scores: Vec<f64>, labels: Vec<f64>) -> PyResult<f64> {
    metrics::two_afc(&scores, &labels).map_err(err)
}

/// Per-pixel z-scoring of a frame sequence given as a flat list and shape.
#[pyfunction]
#[pyo3(signature = (frames, shape, window = d::DEFAULT_NORM_WINDOW))]
fn sequence_normalize(frames: Vec<f64>, shape: Vec<usize>, window: usize) -> PyResult<Vec<f64>> {
    let t = Tensor::new(shape, frames).map_err(err)?;
    Ok(d::sequence_normalize(&t, window).map_err(err)?.into_data())
}

/// One boosted classifier over K neurons.
#[pyclass(module = "ibcnn")]
struct StrongClassifier {
    inner: b::StrongClassifier,
}

#[pymethods]
impl StrongClassifier {
    #[getter]
    fn alphas(&self) -> Vec<f64> {
        self.inner.alphas()
    }

    /// `(neuron, polarity, threshold, eta, alpha)` for each active neuron.
    #[getter]
    fn active(&self) -> Vec<(usize, f64, f64, f64, f64)> {
        self.inner
            .active()
            .map(|w| (w.neuron, w.stump.polarity.sign(), w.stump.threshold, w.stump.eta, w.alpha))
            .collect()
    }

    fn score(&self, x: Vec<f64>) -> PyResult<f64> {
        b::strong_score(&self.inner, &x).map_err(err)
    }

    #[pyo3(signature = (features, labels, beta = 0.5))]
    fn loss(&self, features: Vec<Vec<f64>>, labels: Vec<f64>, beta: f64) -> PyResult<f64> {
        b::bcnn_loss(&self.inner, &batch(features, labels)?, beta).map_err(err)
    }

    /// `(d_features, d_thresholds)`.
    #[pyo3(signature = (features, labels, beta = 0.5))]
    fn backward(&self, features: Vec<Vec<f64>>, labels: Vec<f64>, beta: f64) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
        Ok(grads_to_py(b::bcnn_backward(&self.inner, &batch(features, labels)?, beta).map_err(err)?))
    }

    fn __repr__(&self) -> String {
        format!(
            "StrongClassifier(k={}, active={})",
            self.inner.feature_dim(),
            self.inner.active_count()
        )
    }
}

/// Running average of boosted classifiers.
#[pyclass(module = "ibcnn")]
struct IncrementalStrongClassifier {
    inner: inc::IncrementalStrongClassifier,
}

#[pymethods]
impl IncrementalStrongClassifier {
    #[new]
    fn new(k: usize) -> Self {
        IncrementalStrongClassifier {
            inner: inc::IncrementalStrongClassifier::new(k),
        }
    }

    #[pyo3(signature = (current, refit_threshold = true))]
    fn merge(&mut self, current: &StrongClassifier, refit_threshold: bool) -> PyResult<()> {
        self.inner.merge(&current.inner, refit_threshold).map_err(err)
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights().to_vec()
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.inner.iteration()
    }

    #[getter]
    fn active_count(&self) -> usize {
        self.inner.active_count()
    }

    fn score(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.score(&x).map_err(err)
    }

    #[pyo3(signature = (features, labels, beta = 0.5))]
    fn loss(&self, features: Vec<Vec<f64>>, labels: Vec<f64>, beta: f64) -> PyResult<f64> {
        self.inner.loss(&batch(features, labels)?, beta).map_err(err)
    }

    #[pyo3(signature = (features, labels, beta = 0.5))]
    fn backward(&self, features: Vec<Vec<f64>>, labels: Vec<f64>, beta: f64) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
        Ok(grads_to_py(self.inner.backward(&batch(features, labels)?, beta).map_err(err)?))
    }

    fn threshold_step(&mut self, d_thresholds: Vec<f64>, lr: f64) -> PyResult<()> {
        let t = self.inner.iteration();
        self.inner.threshold_step(&d_thresholds, lr, t).map_err(err)
    }
}

#[pyclass(module = "ibcnn")]
struct Dataset {
    inner: d::Dataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    #[pyo3(signature = (seed = 7, n = 2000, positive_rate = 0.5, shape = [1, 32, 32], amplitude = 2.0, noise_sigma = 1.0))]
    fn synth_blobs(seed: u64, n: usize, positive_rate: f64, shape: [usize; 3], amplitude: f64, noise_sigma: f64) -> PyResult<Self> {
        let p = d::BlobParams {
            seed,
            n,
            positive_rate,
            shape,
            amplitude,
            noise_sigma,
        };
        Ok(Dataset {
            inner: d::synth_blobs(&p).map_err(err)?,
        })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Dataset {
            inner: d::read_dataset(&path).map_err(err)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        d::write_dataset(&path, &self.inner).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn labels(&self) -> Vec<f64> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn positives(&self) -> usize {
        self.inner.positives()
    }

    #[getter]
    fn image_shape(&self) -> [usize; 3] {
        self.inner.image_shape()
    }

    /// Flat row-major pixels of image `i`.
    fn image(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.len() {
            return Err(pyo3::exceptions::PyIndexError::new_err(i));
        }
        Ok(self.inner.images().row(i).to_vec())
    }
}

/// Network plus decision head. `head` is cnn, bcnn, ibcnn or ibcnn-s;
/// `overrides` maps dotted config keys to TOML literals.
#[pyclass(module = "ibcnn")]
struct Model {
    inner: CoreModel,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (head = "ibcnn", input_shape = [1, 32, 32], seed = 7, overrides = None))]
    fn new(head: &str, input_shape: [usize; 3], seed: u64, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut cfg = CoreConfig::default();
        cfg.seed = seed;
        cfg.dataset.shape = input_shape;
        if let Some(o) = overrides {
            for (k, v) in o.iter() {
                let key: String = k.extract()?;
                let val = v.str()?.to_string();
                let val = if v.is_instance_of::<pyo3::types::PyBool>() { val.to_lowercase() } else { val };
                cfg.set(&key, &val).map_err(err)?;
            }
        }
        let head: HeadName = head.parse().map_err(err)?;
        let cfg = cfg.resolve().map_err(err)?;
        let spec = cfg.network_spec(head).map_err(err)?;
        Ok(Model {
            inner: CoreModel::new(&spec, cfg.train_config(head, seed)).map_err(err)?,
        })
    }

    /// Trains for the configured epochs; returns the per-iteration losses.
    fn fit(&mut self, data: &Dataset) -> PyResult<Vec<f64>> {
        let reports = self.inner.fit(&data.inner, |_| {}).map_err(err)?;
        Ok(reports.iter().map(|r| r.loss).collect())
    }

    fn train_epoch(&mut self, data: &Dataset, epoch: usize) -> PyResult<Vec<f64>> {
        let reports = self.inner.train_epoch(&data.inner, epoch, |_| {}).map_err(err)?;
        Ok(reports.iter().map(|r| r.loss).collect())
    }

    fn scores(&self, data: &Dataset) -> PyResult<Vec<f64>> {
        self.inner.scores(data.inner.images()).map_err(err)
    }

    /// Feature vectors of the first `n` images (all by default).
    #[pyo3(signature = (data, n = None))]
    fn features(&self, data: &Dataset, n: Option<usize>) -> PyResult<Vec<Vec<f64>>> {
        let n = n.unwrap_or(data.inner.len()).min(data.inner.len());
        let idx: Vec<usize> = (0..n).collect();
        let f = self.inner.network.features(&data.inner.images().select_rows(&idx)).map_err(err)?;
        let k = f.shape()[1];
        Ok(f.data().chunks(k).map(<[f64]>::to_vec).collect())
    }

    /// F1, 2AFC, accuracy and confusion counts.
    fn evaluate<'py>(&self, py: Python<'py>, data: &Dataset) -> PyResult<Bound<'py, PyDict>> {
        let r = evaluate(&self.inner, &data.inner).map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("f1", r.f1)?;
        out.set_item("two_afc", r.two_afc)?;
        out.set_item("accuracy", r.accuracy)?;
        out.set_item("tp", r.confusion.tp)?;
        out.set_item("fp", r.confusion.fp)?;
        out.set_item("tn", r.confusion.tn)?;
        out.set_item("fn", r.confusion.fn_)?;
        Ok(out)
    }

    #[getter]
    fn active_count(&self) -> usize {
        self.inner.head.active_count()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.inner).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            inner: load_checkpoint(&path).map_err(err)?,
        })
    }
}

#[pymodule]
fn ibcnn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("IbcnnError", m.py().get_type::<IbcnnError>())?;
    m.add_function(wrap_pyfunction!(smooth_sign, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_eta, m)?)?;
    m.add_function(wrap_pyfunction!(stump_fit, m)?)?;
    m.add_function(wrap_pyfunction!(adaboost_select, m)?)?;
    m.add_function(wrap_pyfunction!(f1, m)?)?;
    m.add_function(wrap_pyfunction!(two_afc, m)?)?;
    m.add_function(wrap_pyfunction!(sequence_normalize, m)?)?;
    m.add_class::<StrongClassifier>()?;
    m.add_class::<IncrementalStrongClassifier>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    Ok(())
}
