//! Desk-scale stand-in for a fine-tuning pipeline: a synthetic corpus with
//! protected-attribute annotations, hashed features, a small classifier
//! trained on pooled or per-subgroup data, and a LoRA variant. Everything it
//! produces is an ordinary checkpoint or prediction log.

pub mod corpus;
pub mod features;
pub mod gradcheck;
pub mod lora;
pub mod model;

use thiserror::Error;

pub use corpus::{gen_corpus, read_corpus, write_corpus, Corpus, CorpusSpec, Example, GroupSpec};
pub use features::{featurize, SparseFeatures};
pub use gradcheck::{grad_check, grad_check_with, GradCheck};
pub use lora::{train_lora, LoraAdapter, LoraConfig};
pub use model::{
    predict, predict_model, train, train_subgroup, ModelShape, Sample, ToyModel, TrainConfig,
    TrainProvenance,
};

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("subgroup `{0}` has no training examples")]
    EmptyGroup(String),
    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    DivergedTraining { epoch: usize },
    #[error("checkpoint is not a toy model: {0}")]
    IncompatibleCheckpoint(String),
    #[error("cannot parse {what}: {message}")]
    Parse { what: String, message: String },
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Ckpt(#[from] crate::ckpt::CkptError),
}
