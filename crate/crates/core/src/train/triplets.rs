use std::collections::HashSet;

use rand::seq::index;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{DocumentCollection, Qrels, Query, QuerySet};
use crate::index::{Bm25Params, InvertedIndex};
use crate::rng::{seeded, Stream};

use super::{NegativeSource, TrainConfig, TrainError};

/// A transduced query, one relevant document and explicit negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingTriplet {
    pub query: Query,
    pub positive_doc_id: String,
    pub negative_doc_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletSet {
    pub triplets: Vec<TrainingTriplet>,
    /// Queries with no judged-relevant document in the collection.
    pub skipped_queries: usize,
}

/// BM25 hits for the query that are not judged relevant, best first.
fn hard_negatives(query: &str, idx: &InvertedIndex, bm25: Bm25Params, relevant: &HashSet<&str>, want: usize) -> Vec<String> {
    idx.search(query, bm25, want + relevant.len())
        .into_iter()
        .filter(|d| !relevant.contains(d.doc_id.as_str()))
        .take(want)
        .map(|d| d.doc_id)
        .collect()
}

/// Uniform draws without replacement from documents that are neither relevant nor already chosen.
fn random_negatives(
    rng: &mut ChaCha8Rng,
    coll: &DocumentCollection,
    relevant: &HashSet<&str>,
    chosen: &[String],
    want: usize,
) -> Vec<String> {
    let taken: HashSet<&str> = chosen.iter().map(String::as_str).collect();
    let pool: Vec<&str> = coll
        .iter()
        .map(|d| d.doc_id.as_str())
        .filter(|d| !relevant.contains(d) && !taken.contains(d))
        .collect();
    let n = want.min(pool.len());
    index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i].to_string()).collect()
}

/// Builds one triplet per (query, relevant document) pair.
///
/// Relevance means grade ≥ 1. Hard negatives come from BM25 over the query text
/// as given (the transduced text when training on T(Q)); when too few BM25
/// hits exist the remainder is drawn at random.
pub fn build_triplets(
    queries: &QuerySet,
    qrels: &Qrels,
    coll: &DocumentCollection,
    cfg: &TrainConfig,
    idx: &InvertedIndex,
    bm25: Bm25Params,
) -> Result<TripletSet, TrainError> {
    cfg.validate()?;
    let mut rng = seeded(cfg.seed, Stream::Triplets);
    let mut triplets = Vec::new();
    let mut skipped = 0;
    let want = cfg.negatives_per_query;
    for query in queries.iter() {
        let judged = qrels.get(&query.query_id);
        let relevant: HashSet<&str> = judged
            .into_iter()
            .flatten()
            .filter(|(_, &g)| g >= 1)
            .map(|(d, _)| d.as_str())
            .collect();
        let positives: Vec<&str> = judged
            .into_iter()
            .flatten()
            .filter(|(d, &g)| g >= 1 && coll.get(d).is_some())
            .map(|(d, _)| d.as_str())
            .collect();
        if positives.is_empty() {
            skipped += 1;
            continue;
        }
        let hard = match cfg.negative_source {
            NegativeSource::Bm25Hard => hard_negatives(&query.text, idx, bm25, &relevant, want),
            NegativeSource::Mixed => hard_negatives(&query.text, idx, bm25, &relevant, want.div_ceil(2)),
            NegativeSource::Random => Vec::new(),
        };
        for positive in positives {
            let mut negatives = hard.clone();
            let fill = random_negatives(&mut rng, coll, &relevant, &negatives, want - negatives.len());
            negatives.extend(fill);
            if negatives.is_empty() {
                continue;
            }
            triplets.push(TrainingTriplet {
                query: query.clone(),
                positive_doc_id: positive.to_string(),
                negative_doc_ids: negatives,
            });
        }
    }
    if triplets.is_empty() {
        return Err(TrainError::NoPositives { skipped });
    }
    Ok(TripletSet {
        triplets,
        skipped_queries: skipped,
    })
}
