//! Hashing bi-encoder with single-vector, late-interaction and rerank scoring.

mod checkpoint;
mod encoder;
mod hashing;
mod scoring;

use thiserror::Error;

pub use checkpoint::{load_params, read_params, save_params, write_params, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use encoder::{EncodedText, EncoderParams, Gradients};
pub(crate) use encoder::{dot, OutputGrad, TextTrace};
pub use hashing::{hash_subwords, subword_ngrams, SubwordHasherConfig};
pub use scoring::{
    rerank, score, score_maxsim, score_single, search_dense, search_maxsim_memo, DenseSearch, EncodedCorpus, MaxSimMemo,
    ScoringMode,
};
pub(crate) use scoring::maxsim_argmax;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("cannot hash an empty token")]
    EmptyToken,
    #[error("text has no tokens")]
    EmptyText,
    #[error("embedding norm collapsed below 1e-12")]
    DegenerateEmbedding,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("encodings were produced by params {expected:016x}, query by {found:016x}")]
    StaleEncodings { expected: u64, found: u64 },
    #[error("unknown doc id `{0}`")]
    UnknownDocId(String),
    #[error("scoring mode {0} is not valid here")]
    UnsupportedMode(ScoringMode),
    #[error("invalid encoder configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] crate::corpus::CorpusError),
}
