//! Incremental boosting CNN.
//!
//! A small convolutional feature extractor whose decision layer is a boosted
//! ensemble of differentiable decision stumps over the FC activations. The
//! ensemble is selected by AdaBoost on every mini-batch and folded into a
//! running incremental classifier; the CNN, the stump thresholds and the
//! ensemble are trained together.

pub mod boosting;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod incremental;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod tensor;
pub mod train;
pub mod experiment;

pub use boosting::{
    adaboost_select, bcnn_backward, bcnn_loss, estimate_eta, smooth_response, smooth_sign, stump_fit, strong_loss,
    strong_score, weak_loss, ActivationBatch, HeadGrads, Polarity, StrongClassifier, Stump, StumpFit, WeakClassifier,
};
pub use data::{read_dataset, sequence_normalize, synth_blobs, write_dataset, BlobParams, Dataset};
pub use error::{Error, Result};
pub use incremental::IncrementalStrongClassifier;
pub use metrics::{f1, two_afc, EvalReport};
pub use network::{build_network, paper_preset, small_preset, HeadKind, LayerSpec, NetworkModel, NetworkSpec, TrainConfig};
pub use tensor::Tensor;
pub use train::{Head, IterationReport, Model};
