//! Contrastive fine-tuning of the hashing encoder on transduced query triplets.

mod gradcheck;
mod loss;
mod triplets;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::analysis::AnalyzerConfig;
use crate::corpus::DocumentCollection;
use crate::neural::{EncoderError, EncoderParams, Gradients, ScoringMode};
use crate::rng::{seeded, Stream};

pub use gradcheck::{gradient_check, gradient_check_at, relative_error, Coordinate, GradientCheck, ZERO_GRADIENT};
pub use loss::{infonce_from_scores, infonce_loss};
pub use triplets::{build_triplets, TrainingTriplet, TripletSet};

use loss::{contrastive_batch, Example};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("no training triplets produced ({skipped} queries had no positive)")]
    NoPositives { skipped: usize },
    #[error("non-finite loss or gradient at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("triplet references unknown doc id `{0}`")]
    UnknownDocId(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NegativeSource {
    Bm25Hard,
    Random,
    Mixed,
}

impl NegativeSource {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Bm25Hard => "bm25_hard",
            Self::Random => "random",
            Self::Mixed => "mixed",
        }
    }
}

impl fmt::Display for NegativeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NegativeSource {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bm25_hard" => Ok(Self::Bm25Hard),
            "random" => Ok(Self::Random),
            "mixed" => Ok(Self::Mixed),
            other => Err(TrainError::InvalidConfig(format!("unknown negative source `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub negatives_per_query: usize,
    pub negative_source: NegativeSource,
    pub seed: u64,
    pub loss_mode: ScoringMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            learning_rate: 1e-3,
            temperature: 0.05,
            negatives_per_query: 4,
            negative_source: NegativeSource::Bm25Hard,
            seed: 0,
            loss_mode: ScoringMode::SingleVector,
        }
    }
}

impl TrainConfig {
    /// Zero learning rate is accepted: it is the null-training control.
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if self.negatives_per_query < 1 {
            return bad("negatives_per_query must be >= 1");
        }
        if self.loss_mode == ScoringMode::Rerank {
            return bad("loss mode must be single_vector or multi_vector");
        }
        Ok(())
    }

    /// Stable one-line description used in provenance headers.
    pub fn describe(&self) -> String {
        format!(
            "epochs={} batch_size={} learning_rate={} temperature={} negatives_per_query={} negative_source={} seed={} loss_mode={}",
            self.epochs,
            self.batch_size,
            self.learning_rate,
            self.temperature,
            self.negatives_per_query,
            self.negative_source,
            self.seed,
            self.loss_mode
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub epoch_losses: Vec<f64>,
    /// Mean gradient L2 norm per epoch.
    pub grad_norms: Vec<f64>,
    pub final_version: u64,
    pub steps: usize,
    pub triplets: usize,
}

impl LossReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,grad_norm\n");
        for (e, (l, g)) in self.epoch_losses.iter().zip(&self.grad_norms).enumerate() {
            out.push_str(&format!("{},{l:.9},{g:.9}\n", e + 1));
        }
        out
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam moments. Embedding rows that never received a gradient stay untouched:
/// their moments are zero, so a dense update would leave them unchanged anyway.
struct Adam {
    lr: f64,
    t: i32,
    m_emb: HashMap<u32, Vec<f64>>,
    v_emb: HashMap<u32, Vec<f64>>,
    m_proj: Vec<f64>,
    v_proj: Vec<f64>,
}

impl Adam {
    fn new(lr: f64, dim: usize) -> Self {
        Self {
            lr,
            t: 0,
            m_emb: HashMap::new(),
            v_emb: HashMap::new(),
            m_proj: vec![0.0; dim * dim],
            v_proj: vec![0.0; dim * dim],
        }
    }

    fn update(lr_t: f64, p: &mut [f64], m: &mut [f64], v: &mut [f64], g: Option<&[f64]>, bc2: f64) {
        for i in 0..p.len() {
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
            p[i] -= lr_t * m[i] / ((v[i] / bc2).sqrt() + ADAM_EPS);
        }
    }

    fn step(&mut self, params: &mut EncoderParams, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t);
        let bc2 = 1.0 - BETA2.powi(self.t);
        let lr_t = self.lr / bc1;
        let dim = params.dim;
        Self::update(lr_t, &mut params.projection, &mut self.m_proj, &mut self.v_proj, Some(&grads.projection), bc2);
        for &bucket in grads.embeddings.keys() {
            self.m_emb.entry(bucket).or_insert_with(|| vec![0.0; dim]);
            self.v_emb.entry(bucket).or_insert_with(|| vec![0.0; dim]);
        }
        let mut buckets: Vec<u32> = self.m_emb.keys().copied().collect();
        buckets.sort_unstable();
        for bucket in buckets {
            let start = bucket as usize * dim;
            let row = &mut params.embeddings[start..start + dim];
            let m = self.m_emb.get_mut(&bucket).expect("moment row");
            let v = self.v_emb.get_mut(&bucket).expect("moment row");
            Self::update(lr_t, row, m, v, grads.embeddings.get(&bucket).map(Vec::as_slice), bc2);
        }
    }
}

/// Text slots and contrastive examples for a group of triplets.
///
/// Slots `0..n` hold the queries; document slots follow in first-use order.
/// Each query's candidates are its positive, its explicit negatives, then the
/// positives of the other triplets in the group (in-batch negatives).
pub(crate) fn assemble<'a>(
    group: &[&'a TrainingTriplet],
    coll: &'a DocumentCollection,
) -> Result<(Vec<&'a str>, Vec<Example>), TrainError> {
    let mut texts: Vec<&str> = group.iter().map(|t| t.query.text.as_str()).collect();
    let mut slot_of: HashMap<&str, usize> = HashMap::new();
    let mut slot = |doc_id: &'a str, texts: &mut Vec<&'a str>| -> Result<usize, TrainError> {
        if let Some(&s) = slot_of.get(doc_id) {
            return Ok(s);
        }
        let doc = coll.get(doc_id).ok_or_else(|| TrainError::UnknownDocId(doc_id.to_string()))?;
        texts.push(doc.text.as_str());
        slot_of.insert(doc_id, texts.len() - 1);
        Ok(texts.len() - 1)
    };
    let mut positives = Vec::with_capacity(group.len());
    for t in group {
        positives.push(slot(&t.positive_doc_id, &mut texts)?);
    }
    let mut negatives = Vec::with_capacity(group.len());
    for t in group {
        let mut ns = Vec::with_capacity(t.negative_doc_ids.len());
        for n in &t.negative_doc_ids {
            ns.push(slot(n, &mut texts)?);
        }
        negatives.push(ns);
    }
    let examples = (0..group.len())
        .map(|i| {
            let mut candidates = vec![positives[i]];
            for &c in negatives[i].iter().chain(positives.iter()) {
                if !candidates.contains(&c) {
                    candidates.push(c);
                }
            }
            Example { query: i, candidates }
        })
        .collect();
    Ok((texts, examples))
}

/// Fine-tunes a copy of `init`; `init` itself is never modified.
pub fn train(
    init: &EncoderParams,
    triplets: &[TrainingTriplet],
    coll: &DocumentCollection,
    analyzer: &AnalyzerConfig,
    cfg: &TrainConfig,
) -> Result<(EncoderParams, LossReport), TrainError> {
    cfg.validate()?;
    if triplets.is_empty() {
        return Err(TrainError::NoPositives { skipped: 0 });
    }
    let mut params = init.clone();
    let mut adam = Adam::new(cfg.learning_rate, params.dim);
    let mut rng = seeded(cfg.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut grad_norms = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut norm_sum = 0.0;
        let mut batches = 0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let group: Vec<&TrainingTriplet> = chunk.iter().map(|&i| &triplets[i]).collect();
            let (texts, examples) = assemble(&group, coll)?;
            let out = contrastive_batch(&params, analyzer, &texts, &examples, cfg.temperature, cfg.loss_mode, true)
                .map_err(|e| match e {
                    TrainError::NonFiniteLoss { .. } => TrainError::NonFiniteLoss { epoch, batch },
                    other => other,
                })?;
            let grads = out.grads.expect("gradient requested");
            if !grads.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch });
            }
            loss_sum += out.losses.iter().sum::<f64>();
            norm_sum += grads.l2_norm();
            batches += 1;
            adam.step(&mut params, &grads);
            steps += 1;
            if !params.all_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch });
            }
        }
        epoch_losses.push(loss_sum / triplets.len() as f64);
        grad_norms.push(norm_sum / batches as f64);
    }
    params.refresh_version();
    let report = LossReport {
        epoch_losses,
        grad_norms,
        final_version: params.version(),
        steps,
        triplets: triplets.len(),
    };
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Document, Query};
    use crate::neural::SubwordHasherConfig;

    fn fixture() -> (EncoderParams, DocumentCollection, Vec<TrainingTriplet>) {
        let hasher = SubwordHasherConfig {
            bucket_count: 1 << 10,
            ..Default::default()
        };
        let params = EncoderParams::init(hasher, 8, 3).unwrap();
        let words = ["river", "stone", "lamp", "garden", "window", "cloud", "market", "bridge"];
        let docs: Vec<Document> = (0..8)
            .map(|i| Document::new(format!("d{i}"), format!("{} {} {}", words[i], words[(i + 1) % 8], words[(i + 3) % 8])))
            .collect();
        let coll = DocumentCollection::from_documents(docs).unwrap();
        let triplets = (0..8)
            .map(|i| TrainingTriplet {
                query: Query::new(format!("q{i}"), words[i]),
                positive_doc_id: format!("d{i}"),
                negative_doc_ids: vec![format!("d{}", (i + 4) % 8)],
            })
            .collect();
        (params, coll, triplets)
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs: 4,
            batch_size: 4,
            learning_rate: 0.01,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let (p, coll, t) = fixture();
        let c = TrainConfig {
            learning_rate: 0.0,
            ..cfg()
        };
        let (out, report) = train(&p, &t, &coll, &AnalyzerConfig::default(), &c).unwrap();
        assert_eq!(out, p);
        assert_eq!(report.final_version, p.version());
    }

    #[test]
    fn training_is_deterministic_and_pure() {
        let (p, coll, t) = fixture();
        let before = p.clone();
        let a = train(&p, &t, &coll, &AnalyzerConfig::default(), &cfg()).unwrap();
        let b = train(&p, &t, &coll, &AnalyzerConfig::default(), &cfg()).unwrap();
        assert_eq!(a, b);
        assert_eq!(p, before);
        assert_ne!(a.0.version(), p.version());
    }

    #[test]
    fn loss_goes_down() {
        let (p, coll, t) = fixture();
        let c = TrainConfig { epochs: 10, ..cfg() };
        for mode in [ScoringMode::SingleVector, ScoringMode::MultiVectorMaxSim] {
            let c = TrainConfig { loss_mode: mode, ..c.clone() };
            let (_, report) = train(&p, &t, &coll, &AnalyzerConfig::default(), &c).unwrap();
            assert!(report.epoch_losses.last().unwrap() < &report.epoch_losses[0]);
            assert!(report.grad_norms.iter().all(|g| g.is_finite()));
            assert_eq!(report.to_csv().lines().count(), 11);
        }
    }

    #[test]
    fn in_batch_positives_join_candidates() {
        let (_, coll, t) = fixture();
        let group: Vec<&TrainingTriplet> = t.iter().take(3).collect();
        let (texts, examples) = assemble(&group, &coll).unwrap();
        // 3 queries, 3 positives, 3 negatives (d4, d5, d6), all distinct
        assert_eq!(texts.len(), 9);
        assert_eq!(examples[0].candidates, vec![3, 6, 4, 5]);
        assert_eq!(examples[1].candidates, vec![4, 7, 3, 5]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { batch_size: 1, ..Default::default() },
            TrainConfig { temperature: 0.0, ..Default::default() },
            TrainConfig { negatives_per_query: 0, ..Default::default() },
            TrainConfig { loss_mode: ScoringMode::Rerank, ..Default::default() },
            TrainConfig { learning_rate: f64::NAN, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert_eq!("mixed".parse::<NegativeSource>().unwrap(), NegativeSource::Mixed);
    }

    #[test]
    fn unknown_doc_is_reported() {
        let (p, coll, mut t) = fixture();
        t[0].negative_doc_ids = vec!["nope".into()];
        assert!(matches!(
            train(&p, &t, &coll, &AnalyzerConfig::default(), &cfg()),
            Err(TrainError::UnknownDocId(_))
        ));
    }
}
