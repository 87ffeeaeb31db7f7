//! Counterfactual adversarial debiasing for metadata-aware respiratory sound
//! classification.
//!
//! The pipeline fuses an audio/metadata branch with a text-only branch
//! (`causal`), removes attribute information from the text-only branch with a
//! gradient-reversed adversary (`adversarial`), and randomly swaps sensitive
//! metadata sentences for neutral placeholders during training (`metadata`).
//! `training` wires the objective together and `evaluation` provides the
//! specificity/sensitivity metrics and experiment harnesses.

pub mod adversarial;
pub mod causal;
pub mod dataio;
pub mod encoders;
pub mod evaluation;
pub mod metadata;
pub mod model;
pub mod nn;
pub mod rng;
pub mod training;

use thiserror::Error;

/// Number of respiratory sound classes (normal, crackle, wheeze, both).
pub const N_CLASSES: usize = 4;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Metadata(#[from] metadata::MetadataError),
    #[error(transparent)]
    Data(#[from] dataio::DataError),
    #[error(transparent)]
    Encoder(#[from] encoders::EncoderError),
    #[error(transparent)]
    Causal(#[from] causal::CausalError),
    #[error(transparent)]
    Adversarial(#[from] adversarial::AdversarialError),
    #[error(transparent)]
    Training(#[from] training::TrainingError),
    #[error(transparent)]
    Evaluation(#[from] evaluation::EvaluationError),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
