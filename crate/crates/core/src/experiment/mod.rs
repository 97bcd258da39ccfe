//! End-to-end research-question pipelines on synthetic desk-scale data.
//!
//! A run synthesizes a collection per seed, transduces eval queries into every
//! configured variety, and compares rankers (RQ1); fine-tunes the encoder on
//! one variety pair and compares against the untrained encoder on that pair
//! (RQ2), on held-out siblings of its family (RQ3) and on other families (RQ4).

mod config;
mod output;
mod pipeline;
mod synth;

use std::path::PathBuf;

use thiserror::Error;

use crate::corpus::CorpusError;
use crate::eval::EvalError;
use crate::index::IndexError;
use crate::neural::{EncoderError, ScoringMode};
use crate::train::TrainError;
use crate::transducer::TransducerError;

pub use config::{CorpusSpec, ExperimentConfig, Ranker, DEFAULT_CONFIG, IDENTITY_PAIR, KNOWN_KEYS};
pub use output::{emit_plot_data, render_report, PlotRow, PLOT_HEADER};
pub use pipeline::{
    Experiment, Rq1Table, Rq1Test, Suite, TransferComparison, TransferRow, TransferTable, Variety, HIGH, LOW, ORIG, OURS,
};
pub use synth::{synthesize_corpus, vocabulary, SyntheticCorpus};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config (line {line}): {message}")]
    ConfigInvalid { line: usize, message: String },
    #[error("unknown config key `{key}` at line {line}")]
    UnknownKey { line: usize, key: String },
    #[error("unknown variety pair `{0}`")]
    UnknownPair(String),
    #[error("pair `{pair}` was used for training and cannot be evaluated as unseen")]
    PairNotUnseen { pair: String },
    #[error("pair `{pair}` belongs to family `{family}`, the family of the training pair")]
    FamilyOverlap { pair: String, family: String },
    #[error("no trained parameters for pair `{pair}` ({mode}) at seed {seed}; run the fine-tuning stage first")]
    MissingTrainedParams { pair: String, mode: ScoringMode, seed: u64 },
    #[error("eval query `{0}` appears in training triplets")]
    HygieneViolation(String),
    #[error("identity control shows a gap for {ranker} ({model}, {metric})")]
    IdentityControlViolated { ranker: String, model: String, metric: String },
    #[error("cannot write {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Transducer(#[from] TransducerError),
}
