use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::analysis::AnalyzerConfig;
use crate::corpus::{sort_ranking, DocumentCollection, Ranking, ScoredDoc};

use super::encoder::{dot, EncodedText, EncoderParams};
use super::EncoderError;

/// The three ranker archetypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScoringMode {
    /// Cosine of pooled vectors.
    SingleVector,
    /// Late interaction: Σ over query tokens of the best-matching document token.
    MultiVectorMaxSim,
    /// Single-vector first stage, head re-scored with MaxSim.
    Rerank,
}

impl ScoringMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoringMode::SingleVector => "single_vector",
            ScoringMode::MultiVectorMaxSim => "multi_vector",
            ScoringMode::Rerank => "rerank",
        }
    }
}

impl fmt::Display for ScoringMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoringMode {
    type Err = EncoderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single_vector" => Ok(ScoringMode::SingleVector),
            "multi_vector" | "multi_vector_maxsim" => Ok(ScoringMode::MultiVectorMaxSim),
            "rerank" => Ok(ScoringMode::Rerank),
            other => Err(EncoderError::InvalidConfig(format!("unknown scoring mode `{other}`"))),
        }
    }
}

fn same_dim(q: &EncodedText, d: &EncodedText) -> Result<(), EncoderError> {
    if q.dim == d.dim {
        Ok(())
    } else {
        Err(EncoderError::DimensionMismatch {
            left: q.dim,
            right: d.dim,
        })
    }
}

pub fn score_single(q: &EncodedText, d: &EncodedText) -> Result<f64, EncoderError> {
    same_dim(q, d)?;
    Ok(dot(&q.pooled, &d.pooled))
}

pub fn score_maxsim(q: &EncodedText, d: &EncodedText) -> Result<f64, EncoderError> {
    same_dim(q, d)?;
    Ok(maxsim_unchecked(q, d))
}

pub(crate) fn maxsim_unchecked(q: &EncodedText, d: &EncodedText) -> f64 {
    q.tokens()
        .map(|qt| {
            d.tokens()
                .map(|dt| dot(qt, dt))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum()
}

/// Index of the best document token for every query token.
pub(crate) fn maxsim_argmax(q: &EncodedText, d: &EncodedText) -> Vec<usize> {
    q.tokens()
        .map(|qt| {
            let mut best = (0, f64::NEG_INFINITY);
            for (j, dt) in d.tokens().enumerate() {
                let s = dot(qt, dt);
                if s > best.1 {
                    best = (j, s);
                }
            }
            best.0
        })
        .collect()
}

pub fn score(mode: ScoringMode, q: &EncodedText, d: &EncodedText) -> Result<f64, EncoderError> {
    match mode {
        ScoringMode::SingleVector => score_single(q, d),
        ScoringMode::MultiVectorMaxSim | ScoringMode::Rerank => score_maxsim(q, d),
    }
}

/// Pre-encoded documents for exhaustive dense retrieval.
///
/// Documents without any analyzer token cannot be encoded and are never retrieved.
#[derive(Debug, Clone)]
pub struct EncodedCorpus {
    params_version: u64,
    dim: usize,
    doc_ids: Vec<String>,
    encodings: Vec<Option<EncodedText>>,
    by_id: HashMap<String, usize>,
}

impl EncodedCorpus {
    pub fn encode(coll: &DocumentCollection, params: &EncoderParams, analyzer: &AnalyzerConfig) -> Result<Self, EncoderError> {
        let mut encodings = Vec::with_capacity(coll.len());
        for doc in coll.iter() {
            match params.encode(&doc.text, analyzer) {
                Ok(e) => encodings.push(Some(e)),
                Err(EncoderError::EmptyText) => encodings.push(None),
                Err(e) => return Err(e),
            }
        }
        let doc_ids: Vec<String> = coll.iter().map(|d| d.doc_id.clone()).collect();
        let by_id = doc_ids.iter().enumerate().map(|(i, d)| (d.clone(), i)).collect();
        Ok(Self {
            params_version: params.version(),
            dim: params.dim(),
            doc_ids,
            encodings,
            by_id,
        })
    }

    pub fn params_version(&self) -> u64 {
        self.params_version
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn get(&self, doc_id: &str) -> Option<&EncodedText> {
        self.by_id.get(doc_id).and_then(|&i| self.encodings[i].as_ref())
    }

    fn check_version(&self, query: &EncodedText) -> Result<(), EncoderError> {
        if query.params_version != self.params_version {
            return Err(EncoderError::StaleEncodings {
                expected: self.params_version,
                found: query.params_version,
            });
        }
        if query.dim != self.dim {
            return Err(EncoderError::DimensionMismatch {
                left: query.dim,
                right: self.dim,
            });
        }
        Ok(())
    }
}

/// Ranking plus the parameter version and mode that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSearch {
    pub ranking: Ranking,
    pub params_version: u64,
    pub mode: ScoringMode,
}

/// Exhaustive top-`k` dense retrieval. [`ScoringMode::Rerank`] needs a first stage; see [`rerank`].
pub fn search_dense(
    query: &EncodedText,
    corpus: &EncodedCorpus,
    mode: ScoringMode,
    k: usize,
) -> Result<DenseSearch, EncoderError> {
    corpus.check_version(query)?;
    let scorer: fn(&EncodedText, &EncodedText) -> f64 = match mode {
        ScoringMode::SingleVector => |q, d| dot(&q.pooled, &d.pooled),
        ScoringMode::MultiVectorMaxSim => maxsim_unchecked,
        ScoringMode::Rerank => return Err(EncoderError::UnsupportedMode(mode)),
    };
    let mut ranking: Ranking = corpus
        .doc_ids
        .iter()
        .zip(&corpus.encodings)
        .filter_map(|(id, enc)| enc.as_ref().map(|d| ScoredDoc::new(id.clone(), scorer(query, d))))
        .collect();
    sort_ranking(&mut ranking);
    ranking.truncate(k);
    Ok(DenseSearch {
        ranking,
        params_version: corpus.params_version,
        mode,
    })
}

/// Per-document best similarity for every distinct query token vector seen so far.
///
/// Token vectors do not depend on context, so queries sharing a term share its
/// row. A memo is tied to one parameter version and resets when used with
/// encodings from another.
#[derive(Debug, Clone, Default)]
pub struct MaxSimMemo {
    params_version: Option<u64>,
    rows: HashMap<Vec<u64>, Vec<f64>>,
}

impl MaxSimMemo {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn key(token: &[f64]) -> Vec<u64> {
        token.iter().map(|x| x.to_bits()).collect()
    }
}

/// Top-`k` MaxSim retrieval through `memo`; equal to
/// `search_dense(query, corpus, MultiVectorMaxSim, k)` bit for bit.
pub fn search_maxsim_memo(
    query: &EncodedText,
    corpus: &EncodedCorpus,
    memo: &mut MaxSimMemo,
    k: usize,
) -> Result<DenseSearch, EncoderError> {
    corpus.check_version(query)?;
    if memo.params_version != Some(corpus.params_version) {
        memo.rows.clear();
        memo.params_version = Some(corpus.params_version);
    }
    for qt in query.tokens() {
        let key = MaxSimMemo::key(qt);
        memo.rows.entry(key).or_insert_with(|| {
            corpus
                .encodings
                .iter()
                .map(|enc| match enc {
                    Some(d) => d.tokens().map(|dt| dot(qt, dt)).fold(f64::NEG_INFINITY, f64::max),
                    None => f64::NEG_INFINITY,
                })
                .collect()
        });
    }
    let rows: Vec<&Vec<f64>> = query.tokens().map(|qt| &memo.rows[&MaxSimMemo::key(qt)]).collect();
    let mut ranking: Ranking = corpus
        .doc_ids
        .iter()
        .zip(&corpus.encodings)
        .enumerate()
        .filter(|(_, (_, enc))| enc.is_some())
        .map(|(i, (id, _))| ScoredDoc::new(id.clone(), rows.iter().map(|r| r[i]).sum()))
        .collect();
    sort_ranking(&mut ranking);
    ranking.truncate(k);
    Ok(DenseSearch {
        ranking,
        params_version: corpus.params_version,
        mode: ScoringMode::MultiVectorMaxSim,
    })
}

/// Re-scores the first `k` entries of `base` with MaxSim; the rest keep base order beneath them.
///
/// Tail scores are shifted by a constant so the output stays non-increasing.
/// The output is a permutation of `base`, so set-based metrics are unchanged.
pub fn rerank(base: &[ScoredDoc], query: &EncodedText, corpus: &EncodedCorpus, k: usize) -> Result<Ranking, EncoderError> {
    let k = k.min(base.len());
    if k == 0 {
        return Ok(base.to_vec());
    }
    corpus.check_version(query)?;
    let mut head = Vec::with_capacity(k);
    for entry in &base[..k] {
        let doc = corpus
            .get(&entry.doc_id)
            .ok_or_else(|| EncoderError::UnknownDocId(entry.doc_id.clone()))?;
        head.push(ScoredDoc::new(entry.doc_id.clone(), maxsim_unchecked(query, doc)));
    }
    sort_ranking(&mut head);
    let tail = &base[k..];
    if let (Some(last), Some(first_tail)) = (head.last(), tail.first()) {
        let shift = (last.score - 1.0) - first_tail.score;
        head.extend(tail.iter().map(|d| ScoredDoc::new(d.doc_id.clone(), d.score + shift)));
    }
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use crate::neural::SubwordHasherConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params() -> EncoderParams {
        let hasher = SubwordHasherConfig {
            bucket_count: 1 << 12,
            ..Default::default()
        };
        EncoderParams::init(hasher, 16, 5).unwrap()
    }

    fn random_vectors(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    fn enc(tokens: &[Vec<f64>]) -> EncodedText {
        let dim = tokens[0].len();
        let mut pooled = vec![0.0; dim];
        for t in tokens {
            for (p, x) in pooled.iter_mut().zip(t) {
                *p += x;
            }
        }
        EncodedText::from_vectors(tokens, &pooled, 0).unwrap()
    }

    #[test]
    fn self_similarity_is_one() {
        let p = params();
        let e = p.encode("a cat sat", &AnalyzerConfig::default()).unwrap();
        assert!((score_single(&e, &e).unwrap() - 1.0).abs() < 1e-12);
        assert!((score_maxsim(&e, &e).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_pooled_vectors_score_zero() {
        let a = EncodedText::from_vectors(&[vec![1.0, 0.0]], &[1.0, 0.0], 0).unwrap();
        let b = EncodedText::from_vectors(&[vec![0.0, 1.0]], &[0.0, 1.0], 0).unwrap();
        assert_eq!(score_single(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn single_matches_brute_force_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let a = enc(&random_vectors(&mut rng, 3, 7));
            let b = enc(&random_vectors(&mut rng, 5, 7));
            let mut brute = 0.0;
            for i in 0..7 {
                brute += a.pooled()[i] * b.pooled()[i];
            }
            assert!((score_single(&a, &b).unwrap() - brute).abs() < 1e-9);
            assert_eq!(score_single(&a, &b).unwrap(), score_single(&b, &a).unwrap());
        }
    }

    #[test]
    fn maxsim_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let q = enc(&random_vectors(&mut rng, 3, 6));
            let d = enc(&random_vectors(&mut rng, 4, 6));
            let mut expected = 0.0;
            for i in 0..3 {
                let mut best = f64::NEG_INFINITY;
                for j in 0..4 {
                    let mut s = 0.0;
                    for c in 0..6 {
                        s += q.token(i)[c] * d.token(j)[c];
                    }
                    if s > best {
                        best = s;
                    }
                }
                expected += best;
            }
            let got = score_maxsim(&q, &d).unwrap();
            assert!((got - expected).abs() < 1e-9);
            assert!(got.abs() <= 3.0 + 1e-12);
        }
    }

    #[test]
    fn single_token_maxsim_equals_cosine() {
        let p = params();
        let cfg = AnalyzerConfig::default();
        let a = p.encode("llengua", &cfg).unwrap();
        let b = p.encode("lengua", &cfg).unwrap();
        let cos = dot(a.token(0), b.token(0));
        assert!((score_maxsim(&a, &b).unwrap() - cos).abs() < 1e-12);
        assert!((score_single(&a, &b).unwrap() - cos).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let a = EncodedText::from_vectors(&[vec![1.0, 0.0]], &[1.0, 0.0], 0).unwrap();
        let b = EncodedText::from_vectors(&[vec![0.0, 1.0, 0.0]], &[0.0, 1.0, 0.0], 0).unwrap();
        assert!(matches!(score_single(&a, &b), Err(EncoderError::DimensionMismatch { .. })));
        assert!(matches!(score_maxsim(&a, &b), Err(EncoderError::DimensionMismatch { .. })));
    }

    fn corpus() -> DocumentCollection {
        DocumentCollection::from_documents(vec![
            Document::new("d1", "the cat sat on the mat"),
            Document::new("d2", "dogs chase cats"),
            Document::new("d3", "a bird in the hand"),
            Document::new("d4", "..."),
        ])
        .unwrap()
    }

    #[test]
    fn dense_search_basics() {
        let p = params();
        let cfg = AnalyzerConfig::default();
        let store = EncodedCorpus::encode(&corpus(), &p, &cfg).unwrap();
        let q = p.encode("dogs chase cats", &cfg).unwrap();
        let r = search_dense(&q, &store, ScoringMode::SingleVector, 100).unwrap();
        // untokenizable d4 is skipped
        assert_eq!(r.ranking.len(), 3);
        assert_eq!(r.ranking[0].doc_id, "d2");
        assert!((r.ranking[0].score - 1.0).abs() < 1e-12);
        assert_eq!(r.params_version, p.version());
        assert_eq!(r.mode, ScoringMode::SingleVector);
        assert_eq!(r, search_dense(&q, &store, ScoringMode::SingleVector, 100).unwrap());
        assert!(matches!(
            search_dense(&q, &store, ScoringMode::Rerank, 10),
            Err(EncoderError::UnsupportedMode(_))
        ));
    }

    #[test]
    fn stale_encodings_rejected() {
        let p = params();
        let cfg = AnalyzerConfig::default();
        let store = EncodedCorpus::encode(&corpus(), &p, &cfg).unwrap();
        let other = EncoderParams::init(*p.hasher(), 16, 6).unwrap();
        let q = other.encode("cat", &cfg).unwrap();
        assert!(matches!(
            search_dense(&q, &store, ScoringMode::MultiVectorMaxSim, 10),
            Err(EncoderError::StaleEncodings { .. })
        ));
    }

    #[test]
    fn rerank_properties() {
        let p = params();
        let cfg = AnalyzerConfig::default();
        let store = EncodedCorpus::encode(&corpus(), &p, &cfg).unwrap();
        let q = p.encode("the cat", &cfg).unwrap();
        let base = search_dense(&q, &store, ScoringMode::SingleVector, 10).unwrap().ranking;

        assert_eq!(rerank(&base, &q, &store, 0).unwrap(), base);

        let maxsim_base = search_dense(&q, &store, ScoringMode::MultiVectorMaxSim, 10).unwrap().ranking;
        assert_eq!(rerank(&maxsim_base, &q, &store, maxsim_base.len()).unwrap(), maxsim_base);

        for k in 0..=base.len() {
            let out = rerank(&base, &q, &store, k).unwrap();
            let mut a: Vec<_> = base.iter().map(|d| d.doc_id.clone()).collect();
            let mut b: Vec<_> = out.iter().map(|d| d.doc_id.clone()).collect();
            assert_eq!(out[k..].iter().map(|d| &d.doc_id).collect::<Vec<_>>(), base[k..].iter().map(|d| &d.doc_id).collect::<Vec<_>>());
            a.sort();
            b.sort();
            assert_eq!(a, b);
            assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
        }

        let bogus = vec![ScoredDoc::new("nope", 1.0)];
        assert!(matches!(rerank(&bogus, &q, &store, 1), Err(EncoderError::UnknownDocId(_))));
    }
    #[test]
    fn memo_matches_exhaustive_maxsim() {
        let p = params();
        let cfg = AnalyzerConfig::default();
        let store = EncodedCorpus::encode(&corpus(), &p, &cfg).unwrap();
        let mut memo = MaxSimMemo::new();
        for text in ["the cat", "dogs chase cats", "the bird", "cat cat mat"] {
            let q = p.encode(text, &cfg).unwrap();
            for k in [1, 2, 10] {
                let exact = search_dense(&q, &store, ScoringMode::MultiVectorMaxSim, k).unwrap();
                assert_eq!(search_maxsim_memo(&q, &store, &mut memo, k).unwrap(), exact);
            }
        }
        assert!(memo.len() < 10);
        let other = EncoderParams::init(*p.hasher(), 16, 6).unwrap();
        let other_store = EncodedCorpus::encode(&corpus(), &other, &cfg).unwrap();
        let q = other.encode("the cat", &cfg).unwrap();
        let exact = search_dense(&q, &other_store, ScoringMode::MultiVectorMaxSim, 10).unwrap();
        assert_eq!(search_maxsim_memo(&q, &other_store, &mut memo, 10).unwrap(), exact);
        assert_eq!(memo.len(), 2);
    }
}
