//! Dataset construction, synthetic data and training.

pub mod config;
pub mod dataset;
pub mod synth;
pub mod train;

use thiserror::Error;

pub use config::TrainConfig;
pub use dataset::{augment, balance, build_dataset, build_from_frames, normalize, LabeledDataset};
pub use synth::{synth_dataset, SynthFrame, SynthSpec, Texture};
pub use train::{train, StepLog, TrainOutput};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("path lists are not aligned: {0}")]
    PairMismatch(String),
    #[error("dataset contains a single class")]
    SingleClassDataset,
    #[error("non-finite loss at step {step}")]
    DivergenceDetected { step: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Imaging(#[from] crate::imaging::ImagingError),
    #[error(transparent)]
    Segmentation(#[from] crate::segmentation::SegError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Dml(#[from] crate::dml::DmlError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
