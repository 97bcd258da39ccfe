//! Synthetic desk-scale collection with queries extracted from their passages.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Document, DocumentCollection, Qrels, Query, QuerySet};
use crate::rng::{seeded, Stream};

use super::config::CorpusSpec;
use super::ExperimentError;

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh", "th", "w", "j",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "aa", "ee", "oo", "ou", "ei", "ie"];
const CODAS: &[&str] = &["n", "r", "s", "k", "t", "l", "nd", "st"];

/// Collection, disjoint train/eval query sets and binary qrels.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub collection: DocumentCollection,
    pub train: QuerySet,
    pub eval: QuerySet,
    pub qrels: Qrels,
}

fn word(rng: &mut ChaCha8Rng) -> String {
    let syllables = match rng.gen_range(0..10) {
        0..=2 => 1,
        3..=7 => 2,
        _ => 3,
    };
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
        w.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
    }
    if rng.gen_bool(0.4) {
        w.push_str(CODAS[rng.gen_range(0..CODAS.len())]);
    }
    w
}

/// `size` distinct pseudo-words; the order is the Zipf frequency rank.
pub fn vocabulary(size: usize, seed: u64) -> Result<Vec<String>, ExperimentError> {
    let mut rng = seeded(seed, Stream::Vocabulary);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(size);
    let mut attempts = 0usize;
    while out.len() < size {
        attempts += 1;
        if attempts > size * 100 {
            return Err(ExperimentError::ConfigInvalid {
                line: 0,
                message: format!("cannot generate {size} distinct words"),
            });
        }
        let w = word(&mut rng);
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    Ok(out)
}

/// Draws `n` distinct items with probability proportional to `weights`.
fn weighted_distinct(rng: &mut ChaCha8Rng, weights: &[f64], n: usize) -> Vec<usize> {
    let mut w = weights.to_vec();
    let mut chosen = Vec::with_capacity(n);
    for _ in 0..n.min(w.len()) {
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut x = rng.gen::<f64>() * total;
        let mut pick = w.len() - 1;
        for (i, wi) in w.iter().enumerate() {
            if *wi > 0.0 && x < *wi {
                pick = i;
                break;
            }
            x -= wi;
        }
        while w[pick] <= 0.0 {
            pick -= 1;
        }
        chosen.push(pick);
        w[pick] = 0.0;
    }
    chosen
}

/// Builds the collection and queries for one experiment seed.
///
/// The vocabulary depends only on `spec.vocab_seed`; passages and queries on
/// `seed`. Each query takes idf-weighted terms from a distinct source passage,
/// which is its single relevant document.
pub fn synthesize_corpus(spec: &CorpusSpec, seed: u64) -> Result<SyntheticCorpus, ExperimentError> {
    let invalid = |message: String| ExperimentError::ConfigInvalid { line: 0, message };
    let n_queries = spec.train_queries + spec.eval_queries;
    if spec.docs == 0 || spec.train_queries == 0 || spec.eval_queries == 0 || spec.vocab_size == 0 {
        return Err(invalid("corpus and query counts must be >= 1".into()));
    }
    if n_queries > spec.docs {
        return Err(invalid(format!("{n_queries} queries need as many passages, have {}", spec.docs)));
    }
    if spec.passage_min == 0 || spec.passage_min > spec.passage_max || spec.terms_min == 0 || spec.terms_min > spec.terms_max {
        return Err(invalid("invalid passage or query length range".into()));
    }
    let vocab = vocabulary(spec.vocab_size, spec.vocab_seed)?;
    let weights: Vec<f64> = (0..vocab.len()).map(|r| 1.0 / ((r + 1) as f64).powf(spec.zipf_exponent)).collect();
    let zipf = WeightedIndex::new(&weights).map_err(|e| invalid(e.to_string()))?;
    let mut rng = seeded(seed, Stream::Corpus);

    let width = spec.docs.to_string().len().max(5);
    let mut passages: Vec<Vec<usize>> = Vec::with_capacity(spec.docs);
    for _ in 0..spec.docs {
        let len = rng.gen_range(spec.passage_min..=spec.passage_max);
        passages.push((0..len).map(|_| zipf.sample(&mut rng)).collect());
    }
    let mut df: HashMap<usize, usize> = HashMap::new();
    for p in &passages {
        for w in p.iter().collect::<BTreeSet<_>>() {
            *df.entry(*w).or_default() += 1;
        }
    }
    let docs: Vec<Document> = passages
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let text = p.iter().map(|&w| vocab[w].as_str()).collect::<Vec<_>>().join(" ");
            Document::new(format!("d{i:0width$}"), text)
        })
        .collect();

    let sources = index::sample(&mut rng, spec.docs, n_queries).into_vec();
    let n = spec.docs as f64;
    let mut train = Vec::with_capacity(spec.train_queries);
    let mut eval = Vec::with_capacity(spec.eval_queries);
    let mut qrels = Qrels::new();
    for (q, &src) in sources.iter().enumerate() {
        let mut distinct: Vec<usize> = Vec::new();
        for &w in &passages[src] {
            if !distinct.contains(&w) {
                distinct.push(w);
            }
        }
        let idf: Vec<f64> = distinct.iter().map(|w| (n / df[w] as f64).ln() + 0.1).collect();
        let want = rng.gen_range(spec.terms_min..=spec.terms_max);
        let mut picks = weighted_distinct(&mut rng, &idf, want);
        picks.sort_unstable();
        let text = picks.iter().map(|&i| vocab[distinct[i]].as_str()).collect::<Vec<_>>().join(" ");
        let (id, bucket) = if q < spec.train_queries {
            (format!("train-{:04}", q + 1), &mut train)
        } else {
            (format!("eval-{:04}", q + 1 - spec.train_queries), &mut eval)
        };
        qrels.insert(id.clone(), BTreeMap::from([(docs[src].doc_id.clone(), 1)]));
        bucket.push(Query::new(id, text));
    }
    Ok(SyntheticCorpus {
        collection: DocumentCollection::from_documents(docs)?,
        train: QuerySet::from_queries(train)?,
        eval: QuerySet::from_queries(eval)?,
        qrels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::ExperimentConfig;

    fn small(docs: usize, train: usize, eval: usize) -> CorpusSpec {
        CorpusSpec {
            docs,
            train_queries: train,
            eval_queries: eval,
            ..ExperimentConfig::default().corpus
        }
    }

    #[test]
    fn positives_exist() {
        let c = synthesize_corpus(&small(10, 1, 1), 4).unwrap();
        assert_eq!(c.collection.len(), 10);
        for q in c.train.iter().chain(c.eval.iter()) {
            let judged = &c.qrels[&q.query_id];
            assert_eq!(judged.len(), 1);
            assert!(judged.keys().all(|d| c.collection.get(d).is_some()));
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let spec = small(200, 20, 10);
        assert_eq!(synthesize_corpus(&spec, 1).unwrap(), synthesize_corpus(&spec, 1).unwrap());
        assert_ne!(synthesize_corpus(&spec, 1).unwrap(), synthesize_corpus(&spec, 2).unwrap());
    }

    #[test]
    fn train_and_eval_are_disjoint() {
        let c = synthesize_corpus(&small(300, 100, 50), 9).unwrap();
        let train: BTreeSet<&str> = c.train.iter().map(|q| q.query_id.as_str()).collect();
        assert!(c.eval.iter().all(|q| !train.contains(q.query_id.as_str())));
        let sources: BTreeSet<&String> = c.qrels.values().flat_map(|m| m.keys()).collect();
        assert_eq!(sources.len(), 150);
    }

    #[test]
    fn queries_overlap_their_positive_more_than_random_docs() {
        let c = synthesize_corpus(&small(500, 100, 10), 3).unwrap();
        let words = |t: &str| t.split(' ').map(str::to_string).collect::<BTreeSet<_>>();
        let mut rng = seeded(0, Stream::Corpus);
        let (mut pos, mut rand_overlap) = (0usize, 0usize);
        for q in c.train.iter() {
            let qw = words(&q.text);
            let positive = c.qrels[&q.query_id].keys().next().unwrap();
            pos += qw.intersection(&words(&c.collection.get(positive).unwrap().text)).count();
            let other = &c.collection.docs()[rng.gen_range(0..c.collection.len())];
            rand_overlap += qw.intersection(&words(&other.text)).count();
        }
        assert!(pos > rand_overlap, "{pos} vs {rand_overlap}");
    }

    #[test]
    fn vocabulary_is_distinct() {
        let v = vocabulary(3000, 17).unwrap();
        assert_eq!(v.iter().collect::<BTreeSet<_>>().len(), 3000);
    }

    #[test]
    fn too_many_queries_rejected() {
        assert!(synthesize_corpus(&small(10, 8, 5), 1).is_err());
    }
}
