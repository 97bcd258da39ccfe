//! Documents, queries, relevance judgments and TREC run files.
//!
//! Collections and query sets are read from `<id>\t<text>[\t<language_tag>]`
//! TSV or from JSONL records. Qrels use the TREC `qid 0 docid grade` layout and
//! run files the six-column `qid Q0 docid rank score tag` layout with scores
//! printed to six decimals.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

/// Language tag assigned to records that do not carry one.
pub const UNTAGGED: &str = "und";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed record {record}: {reason}")]
    MalformedRecord { record: usize, reason: String },
    #[error("duplicate id `{id}` at record {record}")]
    DuplicateId { id: String, record: usize },
    #[error("negative grade {grade} at line {record}")]
    NegativeGrade { record: usize, grade: i64 },
    #[error("query `{query_id}` has non-contiguous ranks")]
    NonContiguousRanks { query_id: String },
    #[error("ranking for query `{query_id}` is not sorted by score desc, doc_id asc")]
    UnsortedRanking { query_id: String },
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        CorpusError::IoFailure {
            path: path.display().to_string(),
            source,
        }
    }
}

/// On-disk record layout for collections and query sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RecordFormat {
    #[default]
    Tsv,
    Jsonl,
}

impl std::str::FromStr for RecordFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tsv" => Ok(RecordFormat::Tsv),
            "jsonl" => Ok(RecordFormat::Jsonl),
            other => Err(format!("unknown record format `{other}` (expected tsv or jsonl)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub format: RecordFormat,
    /// Accept records whose text is empty.
    pub allow_empty_text: bool,
    /// Tag used when a record carries no language tag.
    pub default_language: String,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            format: RecordFormat::Tsv,
            allow_empty_text: false,
            default_language: UNTAGGED.to_string(),
        }
    }
}

impl LoadOptions {
    pub fn with_format(format: RecordFormat) -> Self {
        Self {
            format,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    pub language_tag: String,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            doc_id: doc_id.into(),
            text: text.into(),
            language_tag: UNTAGGED.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub query_id: String,
    pub text: String,
    pub language_tag: String,
}

impl Query {
    pub fn new(query_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            query_id: query_id.into(),
            text: text.into(),
            language_tag: UNTAGGED.to_string(),
        }
    }
}

/// Ordered, id-unique set of documents.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DocumentCollection {
    docs: Vec<Document>,
    by_id: HashMap<String, usize>,
}

impl DocumentCollection {
    /// Builds a collection, rejecting duplicate ids. Record indices in errors are 1-based.
    pub fn from_documents(docs: Vec<Document>) -> Result<Self, CorpusError> {
        let mut by_id = HashMap::with_capacity(docs.len());
        for (i, doc) in docs.iter().enumerate() {
            if doc.doc_id.is_empty() {
                return Err(CorpusError::MalformedRecord {
                    record: i + 1,
                    reason: "empty doc_id".into(),
                });
            }
            if by_id.insert(doc.doc_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId {
                    id: doc.doc_id.clone(),
                    record: i + 1,
                });
            }
        }
        Ok(Self { docs, by_id })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.by_id.get(doc_id).map(|&i| &self.docs[i])
    }

    pub fn position(&self, doc_id: &str) -> Option<usize> {
        self.by_id.get(doc_id).copied()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Document> {
        self.docs.iter()
    }
}

/// Ordered, id-unique set of queries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuerySet {
    queries: Vec<Query>,
}

impl QuerySet {
    pub fn from_queries(queries: Vec<Query>) -> Result<Self, CorpusError> {
        let mut seen = HashMap::with_capacity(queries.len());
        for (i, q) in queries.iter().enumerate() {
            if q.query_id.is_empty() {
                return Err(CorpusError::MalformedRecord {
                    record: i + 1,
                    reason: "empty query_id".into(),
                });
            }
            if seen.insert(q.query_id.as_str(), i).is_some() {
                return Err(CorpusError::DuplicateId {
                    id: q.query_id.clone(),
                    record: i + 1,
                });
            }
        }
        Ok(Self { queries })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn queries(&self) -> &[Query] {
        &self.queries
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Query> {
        self.queries.iter()
    }
}

/// query_id → doc_id → grade. Queries without judgments are absent.
pub type Qrels = BTreeMap<String, BTreeMap<String, u32>>;

/// One retrieved document with its score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f64,
}

impl ScoredDoc {
    pub fn new(doc_id: impl Into<String>, score: f64) -> Self {
        Self {
            doc_id: doc_id.into(),
            score,
        }
    }
}

/// Ranked list for a single query, best first.
pub type Ranking = Vec<ScoredDoc>;

/// Sorts by score descending, ties broken by doc_id ascending.
pub fn sort_ranking(ranking: &mut [ScoredDoc]) {
    ranking.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.doc_id.cmp(&b.doc_id))
    });
}

/// A flattened run line.
#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub query_id: String,
    pub doc_id: String,
    pub rank: usize,
    pub score: f64,
    pub run_tag: String,
}

/// Rankings for a set of queries under one run tag.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Run {
    pub tag: String,
    pub rankings: BTreeMap<String, Ranking>,
}

impl Run {
    pub fn new(tag: impl Into<String>) -> Self {
        Self {
            tag: tag.into(),
            rankings: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, query_id: impl Into<String>, ranking: Ranking) {
        self.rankings.insert(query_id.into(), ranking);
    }

    /// Entries in output order: query_id ascending, then rank.
    pub fn entries(&self) -> impl Iterator<Item = RunEntry> + '_ {
        self.rankings.iter().flat_map(move |(qid, ranking)| {
            ranking.iter().enumerate().map(move |(i, d)| RunEntry {
                query_id: qid.clone(),
                doc_id: d.doc_id.clone(),
                rank: i + 1,
                score: d.score,
                run_tag: self.tag.clone(),
            })
        })
    }

    pub fn len(&self) -> usize {
        self.rankings.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Deserialize)]
struct JsonDoc {
    doc_id: String,
    text: String,
    #[serde(default)]
    language_tag: Option<String>,
}

#[derive(Deserialize)]
struct JsonQuery {
    query_id: String,
    text: String,
    #[serde(default)]
    language_tag: Option<String>,
}

struct RawRecord {
    id: String,
    text: String,
    language_tag: Option<String>,
}

fn parse_records(content: &str, opts: &LoadOptions, json_is_query: bool) -> Result<Vec<RawRecord>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let record = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        let raw = match opts.format {
            RecordFormat::Tsv => {
                let mut cols = line.split('\t');
                let id = cols.next().unwrap_or_default();
                let text = cols.next().ok_or_else(|| CorpusError::MalformedRecord {
                    record,
                    reason: "expected `<id>\\t<text>`".into(),
                })?;
                let language_tag = cols.next().map(str::to_string);
                if cols.next().is_some() {
                    return Err(CorpusError::MalformedRecord {
                        record,
                        reason: "more than three columns".into(),
                    });
                }
                RawRecord {
                    id: id.to_string(),
                    text: text.to_string(),
                    language_tag,
                }
            }
            RecordFormat::Jsonl => {
                let malformed = |e: serde_json::Error| CorpusError::MalformedRecord {
                    record,
                    reason: e.to_string(),
                };
                if json_is_query {
                    let q: JsonQuery = serde_json::from_str(line).map_err(malformed)?;
                    RawRecord {
                        id: q.query_id,
                        text: q.text,
                        language_tag: q.language_tag,
                    }
                } else {
                    let d: JsonDoc = serde_json::from_str(line).map_err(malformed)?;
                    RawRecord {
                        id: d.doc_id,
                        text: d.text,
                        language_tag: d.language_tag,
                    }
                }
            }
        };
        if raw.id.is_empty() {
            return Err(CorpusError::MalformedRecord {
                record,
                reason: "empty id".into(),
            });
        }
        if raw.text.is_empty() && !opts.allow_empty_text {
            return Err(CorpusError::MalformedRecord {
                record,
                reason: "empty text".into(),
            });
        }
        out.push(raw);
    }
    Ok(out)
}

fn read_to_string(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>) -> Result<(), CorpusError> {
    let mut seen = HashMap::new();
    for (i, id) in ids.enumerate() {
        if seen.insert(id, i).is_some() {
            return Err(CorpusError::DuplicateId {
                id: id.to_string(),
                record: i + 1,
            });
        }
    }
    Ok(())
}

pub fn parse_collection(content: &str, opts: &LoadOptions) -> Result<DocumentCollection, CorpusError> {
    let records = parse_records(content, opts, false)?;
    let docs = records
        .into_iter()
        .map(|r| Document {
            doc_id: r.id,
            text: r.text,
            language_tag: r.language_tag.unwrap_or_else(|| opts.default_language.clone()),
        })
        .collect::<Vec<_>>();
    check_unique(docs.iter().map(|d| d.doc_id.as_str()))?;
    DocumentCollection::from_documents(docs)
}

pub fn load_collection(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<DocumentCollection, CorpusError> {
    parse_collection(&read_to_string(path.as_ref())?, opts)
}

pub fn parse_queries(content: &str, opts: &LoadOptions) -> Result<QuerySet, CorpusError> {
    let records = parse_records(content, opts, true)?;
    let queries = records
        .into_iter()
        .map(|r| Query {
            query_id: r.id,
            text: r.text,
            language_tag: r.language_tag.unwrap_or_else(|| opts.default_language.clone()),
        })
        .collect::<Vec<_>>();
    QuerySet::from_queries(queries)
}

pub fn load_queries(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<QuerySet, CorpusError> {
    parse_queries(&read_to_string(path.as_ref())?, opts)
}

/// Serializes a query set as TSV with the language tag column.
pub fn format_queries_tsv(qs: &QuerySet) -> String {
    let mut out = String::new();
    for q in qs.iter() {
        let _ = writeln!(out, "{}\t{}\t{}", q.query_id, q.text, q.language_tag);
    }
    out
}

pub fn format_collection_tsv(coll: &DocumentCollection) -> String {
    let mut out = String::new();
    for d in coll.iter() {
        let _ = writeln!(out, "{}\t{}\t{}", d.doc_id, d.text, d.language_tag);
    }
    out
}

pub fn parse_qrels(content: &str) -> Result<Qrels, CorpusError> {
    let mut qrels = Qrels::new();
    for (i, line) in content.lines().enumerate() {
        let record = i + 1;
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            continue;
        }
        if cols.len() != 4 {
            return Err(CorpusError::MalformedRecord {
                record,
                reason: format!("expected 4 columns, found {}", cols.len()),
            });
        }
        let grade: i64 = cols[3].parse().map_err(|_| CorpusError::MalformedRecord {
            record,
            reason: format!("grade `{}` is not an integer", cols[3]),
        })?;
        if grade < 0 {
            return Err(CorpusError::NegativeGrade { record, grade });
        }
        let grade = u32::try_from(grade).map_err(|_| CorpusError::MalformedRecord {
            record,
            reason: "grade out of range".into(),
        })?;
        let judged = qrels.entry(cols[0].to_string()).or_default();
        if judged.insert(cols[2].to_string(), grade).is_some() {
            return Err(CorpusError::DuplicateId {
                id: format!("{} {}", cols[0], cols[2]),
                record,
            });
        }
    }
    Ok(qrels)
}

pub fn load_qrels(path: impl AsRef<Path>) -> Result<Qrels, CorpusError> {
    parse_qrels(&read_to_string(path.as_ref())?)
}

pub fn format_qrels(qrels: &Qrels) -> String {
    let mut out = String::new();
    for (qid, judged) in qrels {
        for (did, grade) in judged {
            let _ = writeln!(out, "{qid} 0 {did} {grade}");
        }
    }
    out
}

fn check_sorted(query_id: &str, ranking: &[ScoredDoc]) -> Result<(), CorpusError> {
    let ok = ranking.windows(2).all(|w| {
        w[0].score > w[1].score || (w[0].score == w[1].score && w[0].doc_id < w[1].doc_id)
    });
    if ok {
        Ok(())
    } else {
        Err(CorpusError::UnsortedRanking {
            query_id: query_id.to_string(),
        })
    }
}

/// Renders a run in TREC format. Rankings must already be in sort order.
pub fn format_run(run: &Run) -> Result<String, CorpusError> {
    let mut out = String::new();
    for (qid, ranking) in &run.rankings {
        check_sorted(qid, ranking)?;
        for (i, d) in ranking.iter().enumerate() {
            let _ = writeln!(out, "{} Q0 {} {} {:.6} {}", qid, d.doc_id, i + 1, d.score, run.tag);
        }
    }
    Ok(out)
}

pub fn write_run(run: &Run, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let text = format_run(run)?;
    fs::write(path, text).map_err(|e| CorpusError::io(path, e))
}

pub fn parse_run(content: &str) -> Result<Run, CorpusError> {
    let mut tag: Option<String> = None;
    let mut by_query: BTreeMap<String, Vec<(usize, ScoredDoc)>> = BTreeMap::new();
    for (i, line) in content.lines().enumerate() {
        let record = i + 1;
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            continue;
        }
        if cols.len() != 6 {
            return Err(CorpusError::MalformedRecord {
                record,
                reason: format!("expected 6 columns, found {}", cols.len()),
            });
        }
        let rank: usize = cols[3].parse().map_err(|_| CorpusError::MalformedRecord {
            record,
            reason: format!("rank `{}` is not a positive integer", cols[3]),
        })?;
        let score: f64 = cols[4].parse().map_err(|_| CorpusError::MalformedRecord {
            record,
            reason: format!("score `{}` is not a number", cols[4]),
        })?;
        match &tag {
            None => tag = Some(cols[5].to_string()),
            Some(t) if t != cols[5] => {
                return Err(CorpusError::MalformedRecord {
                    record,
                    reason: format!("run tag `{}` differs from `{t}`", cols[5]),
                })
            }
            Some(_) => {}
        }
        by_query
            .entry(cols[0].to_string())
            .or_default()
            .push((rank, ScoredDoc::new(cols[2], score)));
    }
    let mut run = Run::new(tag.unwrap_or_default());
    for (qid, mut entries) in by_query {
        entries.sort_by_key(|(rank, _)| *rank);
        if entries.iter().enumerate().any(|(i, (rank, _))| *rank != i + 1) {
            return Err(CorpusError::NonContiguousRanks { query_id: qid });
        }
        let mut seen = HashMap::new();
        for (i, (_, d)) in entries.iter().enumerate() {
            if seen.insert(d.doc_id.as_str(), i).is_some() {
                return Err(CorpusError::DuplicateId {
                    id: format!("{qid} {}", d.doc_id),
                    record: i + 1,
                });
            }
        }
        if entries.windows(2).any(|w| w[0].1.score < w[1].1.score) {
            return Err(CorpusError::UnsortedRanking { query_id: qid });
        }
        run.insert(qid, entries.into_iter().map(|(_, d)| d).collect());
    }
    Ok(run)
}

pub fn read_run(path: impl AsRef<Path>) -> Result<Run, CorpusError> {
    parse_run(&read_to_string(path.as_ref())?)
}
