//! Inverted index and BM25 retrieval.
//!
//! Scoring follows the Robertson–Spärck Jones form
//!
//! ```text
//! idf(t)   = ln(1 + (N - df + 0.5) / (df + 0.5))
//! w(t, d)  = idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / avgdl))
//! score    = Σ_t qtf(t) * w(t, d)
//! ```
//!
//! Query terms are summed in first-occurrence order so the indexed path and the
//! full-scan oracle produce bit-identical scores.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::analysis::{analyze, AnalyzerConfig};
use crate::corpus::{sort_ranking, CorpusError, DocumentCollection, Ranking, ScoredDoc};

const SNAPSHOT_MAGIC: &str = "varietyir-index";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("cannot index an empty collection")]
    EmptyCollection,
    #[error("invalid BM25 parameters k1={k1}, b={b}")]
    InvalidParams { k1: f64, b: f64 },
    #[error("index snapshot line {line}: {message}")]
    Snapshot { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

impl Bm25Params {
    pub fn new(k1: f64, b: f64) -> Result<Self, IndexError> {
        let p = Self { k1, b };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), IndexError> {
        if self.k1 > 0.0 && self.k1.is_finite() && (0.0..=1.0).contains(&self.b) {
            Ok(())
        } else {
            Err(IndexError::InvalidParams { k1: self.k1, b: self.b })
        }
    }
}

pub fn idf(doc_count: usize, df: usize) -> f64 {
    let n = doc_count as f64;
    let df = df as f64;
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

/// Saturated, length-normalized term weight without the idf factor.
pub fn tf_weight(tf: f64, doc_len: f64, avgdl: f64, params: Bm25Params) -> f64 {
    let norm = if avgdl > 0.0 { doc_len / avgdl } else { 0.0 };
    tf * (params.k1 + 1.0) / (tf + params.k1 * (1.0 - params.b + params.b * norm))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc_index: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    postings: HashMap<String, Vec<Posting>>,
    doc_lengths: Vec<u32>,
    doc_ids: Vec<String>,
    avgdl: f64,
    analyzer: AnalyzerConfig,
}

fn mean_length(lengths: &[u32]) -> f64 {
    let total: u64 = lengths.iter().map(|&l| u64::from(l)).sum();
    total as f64 / lengths.len() as f64
}

/// Distinct terms in first-occurrence order with their query-side counts.
fn query_terms(tokens: Vec<String>) -> Vec<(String, usize)> {
    let mut order: Vec<(String, usize)> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();
    for t in tokens {
        match slot.get(&t) {
            Some(&i) => order[i].1 += 1,
            None => {
                slot.insert(t.clone(), order.len());
                order.push((t, 1));
            }
        }
    }
    order
}

impl InvertedIndex {
    pub fn build(coll: &DocumentCollection, cfg: &AnalyzerConfig) -> Result<Self, IndexError> {
        if coll.is_empty() {
            return Err(IndexError::EmptyCollection);
        }
        let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
        let mut doc_lengths = Vec::with_capacity(coll.len());
        let mut doc_ids = Vec::with_capacity(coll.len());
        for (i, doc) in coll.iter().enumerate() {
            let tokens = analyze(&doc.text, cfg);
            doc_lengths.push(tokens.len() as u32);
            doc_ids.push(doc.doc_id.clone());
            let mut counts: HashMap<String, u32> = HashMap::new();
            for t in tokens {
                *counts.entry(t).or_default() += 1;
            }
            // doc_index increases monotonically, so every postings list stays sorted
            for (term, tf) in counts {
                postings.entry(term).or_default().push(Posting {
                    doc_index: i as u32,
                    tf,
                });
            }
        }
        let avgdl = mean_length(&doc_lengths);
        Ok(Self {
            postings,
            doc_lengths,
            doc_ids,
            avgdl,
            analyzer: *cfg,
        })
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn doc_lengths(&self) -> &[u32] {
        &self.doc_lengths
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn term_count(&self) -> usize {
        self.postings.len()
    }

    pub fn analyzer(&self) -> &AnalyzerConfig {
        &self.analyzer
    }

    /// Top-`k` BM25 ranking; zero-score documents are dropped.
    pub fn search(&self, query: &str, params: Bm25Params, k: usize) -> Ranking {
        let terms = query_terms(analyze(query, &self.analyzer));
        let mut scores = vec![0.0f64; self.doc_count()];
        let mut touched: Vec<u32> = Vec::new();
        let n = self.doc_count();
        for (term, qtf) in &terms {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let term_idf = idf(n, list.len());
            for p in list {
                let w = term_idf
                    * tf_weight(
                        f64::from(p.tf),
                        f64::from(self.doc_lengths[p.doc_index as usize]),
                        self.avgdl,
                        params,
                    );
                let slot = &mut scores[p.doc_index as usize];
                if *slot == 0.0 {
                    touched.push(p.doc_index);
                }
                *slot += *qtf as f64 * w;
            }
        }
        let mut ranking: Ranking = touched
            .into_iter()
            .filter(|&d| scores[d as usize] > 0.0)
            .map(|d| ScoredDoc::new(self.doc_ids[d as usize].clone(), scores[d as usize]))
            .collect();
        sort_ranking(&mut ranking);
        ranking.truncate(k);
        ranking
    }

    /// Text snapshot; see [`InvertedIndex::from_snapshot`].
    pub fn to_snapshot(&self) -> Result<String, IndexError> {
        let mut out = String::new();
        let _ = writeln!(out, "{SNAPSHOT_MAGIC} {SNAPSHOT_VERSION}");
        let _ = writeln!(out, "analyzer {}", self.analyzer.describe());
        let _ = writeln!(out, "docs {}", self.doc_count());
        for (id, len) in self.doc_ids.iter().zip(&self.doc_lengths) {
            if id.contains(['\t', '\n', '\r']) {
                return Err(IndexError::Snapshot {
                    line: 0,
                    message: format!("doc id {id:?} cannot be stored"),
                });
            }
            let _ = writeln!(out, "{id}\t{len}");
        }
        let mut terms: Vec<&String> = self.postings.keys().collect();
        terms.sort();
        let _ = writeln!(out, "terms {}", terms.len());
        for term in terms {
            out.push_str(term);
            out.push('\t');
            for (i, p) in self.postings[term].iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{}:{}", p.doc_index, p.tf);
            }
            out.push('\n');
        }
        Ok(out)
    }

    /// Loads a snapshot. The layout is:
    ///
    /// ```text
    /// varietyir-index 1
    /// analyzer lc=1,norm=none,cjk=unigram
    /// docs <N>
    /// <doc_id>\t<token_count>          (N lines, collection order)
    /// terms <T>
    /// <term>\t<doc_index>:<tf> ...     (T lines, terms sorted)
    /// ```
    pub fn from_snapshot(text: &str) -> Result<Self, IndexError> {
        let err = |line: usize, message: &str| IndexError::Snapshot {
            line,
            message: message.to_string(),
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| lines.next().ok_or_else(|| err(0, &format!("truncated before {what}")));

        let (ln, header) = next("header")?;
        if header != format!("{SNAPSHOT_MAGIC} {SNAPSHOT_VERSION}") {
            return Err(err(ln, "unsupported snapshot header"));
        }
        let (ln, analyzer) = next("analyzer")?;
        let analyzer = analyzer
            .strip_prefix("analyzer ")
            .and_then(AnalyzerConfig::parse_description)
            .ok_or_else(|| err(ln, "bad analyzer line"))?;
        let (ln, docs) = next("docs")?;
        let n: usize = docs
            .strip_prefix("docs ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(ln, "bad docs line"))?;
        if n == 0 {
            return Err(IndexError::EmptyCollection);
        }
        let mut doc_ids = Vec::with_capacity(n);
        let mut doc_lengths = Vec::with_capacity(n);
        for _ in 0..n {
            let (ln, l) = next("document table")?;
            let (id, len) = l.split_once('\t').ok_or_else(|| err(ln, "expected `<doc_id>\\t<length>`"))?;
            doc_ids.push(id.to_string());
            doc_lengths.push(len.parse().map_err(|_| err(ln, "bad document length"))?);
        }
        let (ln, terms) = next("terms")?;
        let t: usize = terms
            .strip_prefix("terms ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(ln, "bad terms line"))?;
        let mut postings = HashMap::with_capacity(t);
        for _ in 0..t {
            let (ln, l) = next("postings")?;
            let (term, list) = l.split_once('\t').ok_or_else(|| err(ln, "expected `<term>\\t<postings>`"))?;
            let mut parsed = Vec::new();
            for item in list.split(' ') {
                let (d, tf) = item.split_once(':').ok_or_else(|| err(ln, "bad posting"))?;
                let p = Posting {
                    doc_index: d.parse().map_err(|_| err(ln, "bad doc index"))?,
                    tf: tf.parse().map_err(|_| err(ln, "bad term frequency"))?,
                };
                if p.doc_index as usize >= n || p.tf == 0 {
                    return Err(err(ln, "posting out of range"));
                }
                if parsed.last().is_some_and(|q: &Posting| q.doc_index >= p.doc_index) {
                    return Err(err(ln, "postings not sorted by doc index"));
                }
                parsed.push(p);
            }
            postings.insert(term.to_string(), parsed);
        }
        let avgdl = mean_length(&doc_lengths);
        Ok(Self {
            postings,
            doc_lengths,
            doc_ids,
            avgdl,
            analyzer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        let path = path.as_ref();
        fs::write(path, self.to_snapshot()?).map_err(|e| CorpusError::io(path, e).into())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        Self::from_snapshot(&text)
    }
}

pub fn build_index(coll: &DocumentCollection, cfg: &AnalyzerConfig) -> Result<InvertedIndex, IndexError> {
    InvertedIndex::build(coll, cfg)
}

pub fn bm25_search(query: &str, idx: &InvertedIndex, params: Bm25Params, k: usize) -> Ranking {
    idx.search(query, params, k)
}

/// Full-scan BM25 over the raw collection, one score per document in collection order.
///
/// Shares no state with [`InvertedIndex`]: statistics are recounted from the text.
pub fn bm25_score_naive(
    query: &str,
    coll: &DocumentCollection,
    params: Bm25Params,
    cfg: &AnalyzerConfig,
) -> Vec<ScoredDoc> {
    let docs: Vec<Vec<String>> = coll.iter().map(|d| analyze(&d.text, cfg)).collect();
    let n = docs.len();
    if n == 0 {
        return Vec::new();
    }
    let total: usize = docs.iter().map(Vec::len).sum();
    let avgdl = total as f64 / n as f64;
    let terms = query_terms(analyze(query, cfg));
    let dfs: Vec<usize> = terms
        .iter()
        .map(|(t, _)| docs.iter().filter(|d| d.contains(t)).count())
        .collect();
    coll.iter()
        .zip(&docs)
        .map(|(doc, tokens)| {
            let mut score = 0.0;
            for ((term, qtf), &df) in terms.iter().zip(&dfs) {
                let tf = tokens.iter().filter(|t| *t == term).count();
                if tf == 0 {
                    continue;
                }
                score += *qtf as f64 * (idf(n, df) * tf_weight(tf as f64, tokens.len() as f64, avgdl, params));
            }
            ScoredDoc::new(doc.doc_id.clone(), score)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use proptest::prelude::*;

    fn coll(docs: &[(&str, &str)]) -> DocumentCollection {
        DocumentCollection::from_documents(docs.iter().map(|(i, t)| Document::new(*i, *t)).collect()).unwrap()
    }

    #[test]
    fn hand_counted_statistics() {
        let idx = build_index(&coll(&[("d1", "a b"), ("d2", "b")]), &AnalyzerConfig::default()).unwrap();
        assert_eq!(idx.df("a"), 1);
        assert_eq!(idx.df("b"), 2);
        assert_eq!(idx.avgdl(), 1.5);
        assert_eq!(idx.postings("b"), &[Posting { doc_index: 0, tf: 1 }, Posting { doc_index: 1, tf: 1 }]);
    }

    #[test]
    fn empty_document() {
        let opts = crate::corpus::LoadOptions {
            allow_empty_text: true,
            ..Default::default()
        };
        let c = crate::corpus::parse_collection("d1\t\n", &opts).unwrap();
        let idx = build_index(&c, &AnalyzerConfig::default()).unwrap();
        assert_eq!(idx.doc_lengths(), &[0]);
        assert_eq!(idx.term_count(), 0);
        assert!(idx.search("anything", Bm25Params::default(), 10).is_empty());
    }

    #[test]
    fn empty_collection_rejected() {
        assert!(matches!(
            build_index(&DocumentCollection::default(), &AnalyzerConfig::default()),
            Err(IndexError::EmptyCollection)
        ));
    }

    #[test]
    fn rebuild_is_identical() {
        let c = coll(&[("d1", "x y z x"), ("d2", "y q"), ("d3", "z z z")]);
        let a = build_index(&c, &AnalyzerConfig::default()).unwrap();
        let b = build_index(&c, &AnalyzerConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_snapshot().unwrap(), b.to_snapshot().unwrap());
    }

    #[test]
    fn single_term_score_is_ln2() {
        let c = coll(&[("d1", "apple"), ("d2", "banana")]);
        let idx = build_index(&c, &AnalyzerConfig::default()).unwrap();
        let r = bm25_search("apple", &idx, Bm25Params::new(0.9, 0.4).unwrap(), 10);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].doc_id, "d1");
        assert!((r[0].score - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(format!("{:.6}", r[0].score), "0.693147");
    }

    #[test]
    fn unknown_terms_give_empty_ranking() {
        let idx = build_index(&coll(&[("d1", "apple")]), &AnalyzerConfig::default()).unwrap();
        assert!(bm25_search("pear", &idx, Bm25Params::default(), 10).is_empty());
        assert!(bm25_search("", &idx, Bm25Params::default(), 10).is_empty());
    }

    #[test]
    fn repeated_query_term_doubles_score() {
        let c = coll(&[("d1", "apple pie"), ("d2", "banana")]);
        let idx = build_index(&c, &AnalyzerConfig::default()).unwrap();
        let once = bm25_search("apple", &idx, Bm25Params::default(), 10)[0].score;
        let twice = bm25_search("apple apple", &idx, Bm25Params::default(), 10)[0].score;
        assert_eq!(twice, 2.0 * once);
    }

    #[test]
    fn naive_oracle_matches_two_doc_example() {
        let c = coll(&[("d1", "apple"), ("d2", "banana")]);
        let cfg = AnalyzerConfig::default();
        let idx = build_index(&c, &cfg).unwrap();
        let params = Bm25Params::default();
        let naive = bm25_score_naive("apple", &c, params, &cfg);
        let indexed = bm25_search("apple", &idx, params, 10);
        assert!((naive[0].score - indexed[0].score).abs() < 1e-9);
        assert_eq!(naive[1].score, 0.0);
    }

    #[test]
    fn naive_oracle_edge_cases() {
        let c = coll(&[("d1", "apple"), ("d2", "banana")]);
        let cfg = AnalyzerConfig::default();
        assert!(bm25_score_naive("", &c, Bm25Params::default(), &cfg).iter().all(|d| d.score == 0.0));
        let single = coll(&[("only", "word")]);
        let s = bm25_score_naive("word", &single, Bm25Params::default(), &cfg);
        assert!(s[0].score > 0.0);
        assert!(idf(1, 1) > 0.0);
    }

    #[test]
    fn ties_break_by_doc_id() {
        let c = coll(&[("z", "same text"), ("a", "same text"), ("m", "other")]);
        let idx = build_index(&c, &AnalyzerConfig::default()).unwrap();
        let r = bm25_search("same", &idx, Bm25Params::default(), 10);
        let ids: Vec<_> = r.iter().map(|d| d.doc_id.as_str()).collect();
        assert_eq!(ids, ["a", "z"]);
    }

    #[test]
    fn snapshot_reproduces_results_bit_exactly() {
        let c = coll(&[("d1", "le chat noir"), ("d2", "un chat"), ("d3", "noir noir 你好")]);
        let idx = build_index(&c, &AnalyzerConfig::default()).unwrap();
        let restored = InvertedIndex::from_snapshot(&idx.to_snapshot().unwrap()).unwrap();
        assert_eq!(restored, idx);
        for q in ["chat", "noir chat", "你"] {
            assert_eq!(
                restored.search(q, Bm25Params::default(), 10),
                idx.search(q, Bm25Params::default(), 10)
            );
        }
        assert!(matches!(
            InvertedIndex::from_snapshot("varietyir-index 9\n"),
            Err(IndexError::Snapshot { line: 1, .. })
        ));
    }

    #[test]
    fn invalid_params() {
        assert!(Bm25Params::new(0.0, 0.5).is_err());
        assert!(Bm25Params::new(1.2, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn tf_monotone(tf in 1u32..50, dl in 1u32..100, avgdl in 1.0f64..50.0, k1 in 0.01f64..3.0, b in 0.0f64..=1.0) {
            let p = Bm25Params { k1, b };
            let lo = tf_weight(tf as f64, dl as f64, avgdl, p);
            let hi = tf_weight(tf as f64 + 1.0, dl as f64, avgdl, p);
            prop_assert!(hi > lo);
        }

        #[test]
        fn disjoint_query_scores_zero(words in proptest::collection::vec("[a-e]{1,3}", 1..8)) {
            let c = coll(&[("d1", &words.join(" ")), ("d2", "zzz")]);
            let s = bm25_score_naive("qqq xxx", &c, Bm25Params::default(), &AnalyzerConfig::default());
            prop_assert!(s.iter().all(|d| d.score == 0.0));
        }
    }
}
