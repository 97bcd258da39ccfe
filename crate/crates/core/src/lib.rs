//! Cross-variety retrieval robustness and zero-shot transfer toolkit.
//!
//! The crate bundles a rule-based variety transducer, a BM25 index, a hashing
//! bi-encoder with single-vector, late-interaction and rerank scoring, a
//! contrastive trainer, ranking metrics, and the synthetic experiment pipeline
//! that ties them together.

pub mod analysis;
pub mod corpus;
pub mod experiment;
pub mod eval;
pub mod index;
pub mod neural;
pub mod rng;
pub mod train;
pub mod transducer;

pub use analysis::{analyze, AnalyzerConfig};
pub use corpus::{
    CorpusError, Document, DocumentCollection, Qrels, Query, QuerySet, Ranking, Run, ScoredDoc,
};
pub use eval::{compare_runs, evaluate_run, sign_test, EvalError, EvalReport, MetricKind, MetricSpec};
pub use index::{bm25_search, build_index, Bm25Params, IndexError, InvertedIndex};
pub use neural::{EncodedCorpus, EncodedText, EncoderError, EncoderParams, ScoringMode, SubwordHasherConfig};
pub use train::{build_triplets, train, LossReport, NegativeSource, TrainConfig, TrainError, TrainingTriplet};
pub use transducer::{
    generate_family, parse_rule, parse_ruleset, transduce, transduce_queryset, FamilySpec, RewriteRule, RuleScope,
    TransducerError, VarietyRuleSet,
};
pub use experiment::{Experiment, ExperimentConfig, ExperimentError, Ranker, Suite};
