//! Ranking metrics, per-query reports and paired sign tests.
//!
//! Unjudged documents count as non-relevant. A query contributes to a metric's
//! mean when the qrels hold at least one document at or above the metric's
//! relevance threshold; other judged queries are listed as excluded. Judged
//! queries absent from the run score 0.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use thiserror::Error;

use crate::corpus::{Qrels, Run, ScoredDoc};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("invalid metric `{0}`")]
    InvalidMetric(String),
    #[error("no metric specs given")]
    NoMetrics,
    #[error("reports cover different query sets ({left} vs {right} queries)")]
    QuerySetMismatch { left: usize, right: usize },
    #[error("metric {0} missing from report")]
    MissingMetric(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MetricKind {
    Mrr,
    Recall,
    Ndcg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MetricSpec {
    pub kind: MetricKind,
    pub cutoff: usize,
    /// Minimum grade counted as relevant (MRR and recall).
    pub threshold: u32,
}

impl MetricSpec {
    pub fn mrr(cutoff: usize) -> Self {
        Self {
            kind: MetricKind::Mrr,
            cutoff,
            threshold: 1,
        }
    }

    pub fn recall(cutoff: usize) -> Self {
        Self {
            kind: MetricKind::Recall,
            cutoff,
            threshold: 1,
        }
    }

    pub fn ndcg(cutoff: usize) -> Self {
        Self {
            kind: MetricKind::Ndcg,
            cutoff,
            threshold: 1,
        }
    }

    fn validate(&self) -> Result<(), EvalError> {
        if self.cutoff == 0 || self.threshold == 0 {
            Err(EvalError::InvalidMetric(self.to_string()))
        } else {
            Ok(())
        }
    }
}

/// `mrr@10`, `recall@1000`, `ndcg@20`; a non-default threshold is written `mrr@10/2`.
impl fmt::Display for MetricSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.kind {
            MetricKind::Mrr => "mrr",
            MetricKind::Recall => "recall",
            MetricKind::Ndcg => "ndcg",
        };
        write!(f, "{name}@{}", self.cutoff)?;
        if self.threshold != 1 && self.kind != MetricKind::Ndcg {
            write!(f, "/{}", self.threshold)?;
        }
        Ok(())
    }
}

impl FromStr for MetricSpec {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || EvalError::InvalidMetric(s.to_string());
        let (name, rest) = s.trim().split_once('@').ok_or_else(bad)?;
        let (cutoff, threshold) = match rest.split_once('/') {
            Some((c, t)) => (c, t.parse().map_err(|_| bad())?),
            None => (rest, 1),
        };
        let kind = match name.to_ascii_lowercase().as_str() {
            "mrr" | "rr" => MetricKind::Mrr,
            "recall" | "r" => MetricKind::Recall,
            "ndcg" => MetricKind::Ndcg,
            _ => return Err(bad()),
        };
        let spec = MetricSpec {
            kind,
            cutoff: cutoff.parse().map_err(|_| bad())?,
            threshold,
        };
        spec.validate().map_err(|_| bad())?;
        Ok(spec)
    }
}

pub fn parse_metric_list(s: &str) -> Result<Vec<MetricSpec>, EvalError> {
    let specs = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<_>, _>>()?;
    if specs.is_empty() {
        return Err(EvalError::NoMetrics);
    }
    Ok(specs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricResult {
    pub spec: MetricSpec,
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
    /// Judged queries without any document meeting the relevance bar.
    pub excluded: Vec<String>,
}

fn is_relevant(grade: Option<&u32>, threshold: u32) -> bool {
    grade.is_some_and(|&g| g >= threshold)
}

fn reciprocal_rank(ranking: &[ScoredDoc], judged: &BTreeMap<String, u32>, k: usize, threshold: u32) -> f64 {
    ranking
        .iter()
        .take(k)
        .position(|d| is_relevant(judged.get(&d.doc_id), threshold))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

fn recall(ranking: &[ScoredDoc], judged: &BTreeMap<String, u32>, k: usize, threshold: u32) -> f64 {
    let total = judged.values().filter(|&&g| g >= threshold).count();
    let found = ranking
        .iter()
        .take(k)
        .filter(|d| is_relevant(judged.get(&d.doc_id), threshold))
        .count();
    found as f64 / total as f64
}

fn gain(grade: u32) -> f64 {
    2f64.powi(grade as i32) - 1.0
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

fn ideal_dcg(judged: &BTreeMap<String, u32>, k: usize) -> f64 {
    let mut grades: Vec<u32> = judged.values().copied().filter(|&g| g > 0).collect();
    grades.sort_unstable_by(|a, b| b.cmp(a));
    grades.iter().take(k).enumerate().map(|(i, &g)| gain(g) * discount(i + 1)).sum()
}

fn ndcg(ranking: &[ScoredDoc], judged: &BTreeMap<String, u32>, k: usize) -> f64 {
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| judged.get(&d.doc_id).map_or(0.0, |&g| gain(g) * discount(i + 1)))
        .sum();
    dcg / ideal_dcg(judged, k)
}

/// Computes one metric for every eligible judged query.
pub fn evaluate_metric(run: &Run, qrels: &Qrels, spec: MetricSpec) -> MetricResult {
    let empty: Vec<ScoredDoc> = Vec::new();
    let mut per_query = BTreeMap::new();
    let mut excluded = Vec::new();
    for (qid, judged) in qrels {
        let eligible = match spec.kind {
            MetricKind::Ndcg => judged.values().any(|&g| g > 0),
            _ => judged.values().any(|&g| g >= spec.threshold),
        };
        if !eligible {
            excluded.push(qid.clone());
            continue;
        }
        let ranking = run.rankings.get(qid).unwrap_or(&empty);
        let value = match spec.kind {
            MetricKind::Mrr => reciprocal_rank(ranking, judged, spec.cutoff, spec.threshold),
            MetricKind::Recall => recall(ranking, judged, spec.cutoff, spec.threshold),
            MetricKind::Ndcg => ndcg(ranking, judged, spec.cutoff),
        };
        per_query.insert(qid.clone(), value);
    }
    // ascending query_id order
    let mean = if per_query.is_empty() {
        0.0
    } else {
        per_query.values().sum::<f64>() / per_query.len() as f64
    };
    MetricResult {
        spec,
        per_query,
        mean,
        excluded,
    }
}

pub fn mrr_at_k(run: &Run, qrels: &Qrels, k: usize, threshold: u32) -> MetricResult {
    evaluate_metric(
        run,
        qrels,
        MetricSpec {
            kind: MetricKind::Mrr,
            cutoff: k,
            threshold,
        },
    )
}

pub fn recall_at_k(run: &Run, qrels: &Qrels, k: usize, threshold: u32) -> MetricResult {
    evaluate_metric(
        run,
        qrels,
        MetricSpec {
            kind: MetricKind::Recall,
            cutoff: k,
            threshold,
        },
    )
}

pub fn ndcg_at_k(run: &Run, qrels: &Qrels, k: usize) -> MetricResult {
    evaluate_metric(run, qrels, MetricSpec::ndcg(k))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub run_tag: String,
    pub qrels_id: String,
    pub results: Vec<MetricResult>,
}

impl EvalReport {
    pub fn metric(&self, spec: MetricSpec) -> Option<&MetricResult> {
        self.results.iter().find(|r| r.spec == spec)
    }

    pub fn mean(&self, spec: MetricSpec) -> Option<f64> {
        self.metric(spec).map(|r| r.mean)
    }

    /// `query_id,metric,value` rows per metric followed by a `__mean__` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("query_id,metric,value\n");
        for r in &self.results {
            for (qid, v) in &r.per_query {
                let _ = writeln!(out, "{qid},{},{v:.6}", r.spec);
            }
            let _ = writeln!(out, "__mean__,{},{:.6}", r.spec, r.mean);
        }
        out
    }
}

pub fn evaluate_run(run: &Run, qrels: &Qrels, qrels_id: &str, specs: &[MetricSpec]) -> Result<EvalReport, EvalError> {
    if specs.is_empty() {
        return Err(EvalError::NoMetrics);
    }
    for s in specs {
        s.validate()?;
    }
    Ok(EvalReport {
        run_tag: run.tag.clone(),
        qrels_id: qrels_id.to_string(),
        results: specs.iter().map(|&s| evaluate_metric(run, qrels, s)).collect(),
    })
}

/// Exact two-sided sign test over paired deltas; zero deltas are dropped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignTest {
    pub positive: usize,
    pub negative: usize,
    pub ties: usize,
    pub p_value: f64,
}

pub fn sign_test(deltas: &[f64]) -> SignTest {
    let positive = deltas.iter().filter(|&&d| d > 0.0).count();
    let negative = deltas.iter().filter(|&&d| d < 0.0).count();
    let ties = deltas.len() - positive - negative;
    SignTest {
        positive,
        negative,
        ties,
        p_value: binomial_two_sided(positive + negative, positive.min(negative)),
    }
}

/// min(1, 2 · P[X ≤ x]) for X ~ Binomial(n, 1/2).
fn binomial_two_sided(n: usize, x: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    // log C(n, i) accumulated incrementally, probabilities summed in linear space
    let ln_half_n = -(n as f64) * std::f64::consts::LN_2;
    let mut ln_choose = 0.0f64;
    let mut tail = 0.0;
    for i in 0..=x {
        if i > 0 {
            ln_choose += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        tail += (ln_choose + ln_half_n).exp();
    }
    (2.0 * tail).min(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub metric: MetricSpec,
    /// b − a per query.
    pub deltas: BTreeMap<String, f64>,
    pub mean_a: f64,
    pub mean_b: f64,
    pub mean_delta: f64,
    pub test: SignTest,
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("query_id,metric,delta\n");
        for (qid, d) in &self.deltas {
            let _ = writeln!(out, "{qid},{},{d:.6}", self.metric);
        }
        let _ = writeln!(out, "# mean_a={:.6}", self.mean_a);
        let _ = writeln!(out, "# mean_b={:.6}", self.mean_b);
        let _ = writeln!(out, "# mean_delta={:.6}", self.mean_delta);
        let _ = writeln!(
            out,
            "# wins={} losses={} ties={}",
            self.test.positive, self.test.negative, self.test.ties
        );
        let _ = writeln!(out, "# sign_test_p={:.6}", self.test.p_value);
        out
    }
}

pub fn compare_runs(a: &EvalReport, b: &EvalReport, metric: MetricSpec) -> Result<Comparison, EvalError> {
    let ra = a.metric(metric).ok_or_else(|| EvalError::MissingMetric(metric.to_string()))?;
    let rb = b.metric(metric).ok_or_else(|| EvalError::MissingMetric(metric.to_string()))?;
    if !ra.per_query.keys().eq(rb.per_query.keys()) {
        return Err(EvalError::QuerySetMismatch {
            left: ra.per_query.len(),
            right: rb.per_query.len(),
        });
    }
    let deltas: BTreeMap<String, f64> = ra
        .per_query
        .iter()
        .zip(rb.per_query.values())
        .map(|((q, va), vb)| (q.clone(), vb - va))
        .collect();
    let values: Vec<f64> = deltas.values().copied().collect();
    let mean_delta = if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    };
    Ok(Comparison {
        metric,
        mean_a: ra.mean,
        mean_b: rb.mean,
        mean_delta,
        test: sign_test(&values),
        deltas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_of(qid: &str, docs: &[&str]) -> Run {
        let mut run = Run::new("t");
        let n = docs.len();
        run.insert(
            qid,
            docs.iter().enumerate().map(|(i, d)| ScoredDoc::new(*d, (n - i) as f64)).collect(),
        );
        run
    }

    fn qrels(entries: &[(&str, &str, u32)]) -> Qrels {
        let mut q = Qrels::new();
        for (qid, did, g) in entries {
            q.entry(qid.to_string()).or_default().insert(did.to_string(), *g);
        }
        q
    }

    #[test]
    fn mrr_cases() {
        let q = qrels(&[("q", "rel", 1)]);
        assert_eq!(mrr_at_k(&run_of("q", &["rel", "a"]), &q, 10, 1).mean, 1.0);
        let mut docs: Vec<String> = (0..10).map(|i| format!("x{i}")).collect();
        docs.push("rel".into());
        let refs: Vec<&str> = docs.iter().map(String::as_str).collect();
        assert_eq!(mrr_at_k(&run_of("q", &refs), &q, 10, 1).mean, 0.0);
        let r = mrr_at_k(&run_of("q", &["a", "b", "rel"]), &q, 10, 1).mean;
        assert!((r - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn recall_cases() {
        let q = qrels(&[("q", "r1", 1), ("q", "r2", 1)]);
        assert_eq!(recall_at_k(&run_of("q", &["r2", "x", "r1"]), &q, 1000, 1).mean, 1.0);
        assert_eq!(recall_at_k(&run_of("q", &["x"]), &q, 1000, 1).mean, 0.0);
        let q3 = qrels(&[("q", "r1", 1), ("q", "r2", 1), ("q", "r3", 2)]);
        let r = recall_at_k(&run_of("q", &["r3", "x"]), &q3, 1000, 1).mean;
        assert!((r - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn query_without_relevant_is_excluded() {
        let q = qrels(&[("q1", "a", 1), ("q2", "b", 0)]);
        let r = recall_at_k(&run_of("q1", &["a"]), &q, 10, 1);
        assert_eq!(r.excluded, ["q2"]);
        assert_eq!(r.per_query.len(), 1);
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn ndcg_cases() {
        let q = qrels(&[("q", "a", 2), ("q", "b", 1)]);
        assert!((ndcg_at_k(&run_of("q", &["a", "b"]), &q, 20).mean - 1.0).abs() < 1e-15);

        let q = qrels(&[("q", "r1", 1), ("q", "r2", 1), ("q", "n", 0)]);
        let v = ndcg_at_k(&run_of("q", &["r1", "n", "r2"]), &q, 3).mean;
        // DCG = 1 + 0 + 1/log2(4) = 1.5, IDCG = 1 + 1/log2(3)
        let idcg = 1.0 + 1.0 / 3f64.log2();
        assert!((idcg - 1.630930).abs() < 1e-6);
        assert!((v - 1.5 / idcg).abs() < 1e-12);
        assert!((v - 0.919721).abs() < 1e-6);

        let empty = Run::new("t");
        assert_eq!(ndcg_at_k(&empty, &q, 20).per_query["q"], 0.0);
    }

    #[test]
    fn missing_query_scores_zero() {
        let q = qrels(&[("q1", "a", 1), ("q2", "b", 1)]);
        let r = mrr_at_k(&run_of("q1", &["a"]), &q, 10, 1);
        assert_eq!(r.per_query["q2"], 0.0);
        assert_eq!(r.mean, 0.5);
    }

    #[test]
    fn report_composition() {
        let q = qrels(&[("q1", "a", 1), ("q2", "b", 1)]);
        let run = run_of("q1", &["b", "a"]);
        let specs = [MetricSpec::mrr(10), MetricSpec::recall(1000), MetricSpec::ndcg(20)];
        let report = evaluate_run(&run, &q, "test", &specs).unwrap();
        assert_eq!(report.results[0], mrr_at_k(&run, &q, 10, 1));
        for r in &report.results {
            let mean = r.per_query.values().sum::<f64>() / r.per_query.len() as f64;
            assert_eq!(r.mean, mean);
        }
        assert_eq!(report, evaluate_run(&run.clone(), &q, "test", &specs).unwrap());
        assert!(report.to_csv().contains("__mean__,mrr@10,0.250000"));
        assert_eq!(evaluate_run(&run, &q, "test", &[]), Err(EvalError::NoMetrics));
    }

    #[test]
    fn metric_spec_parsing() {
        assert_eq!("mrr@10".parse::<MetricSpec>().unwrap(), MetricSpec::mrr(10));
        assert_eq!("R@1000".parse::<MetricSpec>().unwrap(), MetricSpec::recall(1000));
        let t: MetricSpec = "mrr@10/2".parse().unwrap();
        assert_eq!(t.threshold, 2);
        assert_eq!(t.to_string(), "mrr@10/2");
        assert!("mrr@0".parse::<MetricSpec>().is_err());
        assert!("map@10".parse::<MetricSpec>().is_err());
        assert_eq!(parse_metric_list("mrr@10, recall@1000").unwrap().len(), 2);
    }

    #[test]
    fn sign_test_values() {
        assert_eq!(sign_test(&[0.0; 5]).p_value, 1.0);
        let p = sign_test(&[0.1; 10]).p_value;
        assert!((p - 2.0 * 0.5f64.powi(10)).abs() < 1e-15);
        assert!((p - 0.001953).abs() < 1e-6);
        // 3 vs 7: 2 * (1 + 10 + 45 + 120) / 1024
        let mut d = vec![1.0; 3];
        d.extend([-1.0; 7]);
        assert!((sign_test(&d).p_value - 352.0 / 1024.0).abs() < 1e-12);
        assert_eq!(sign_test(&[1.0, -1.0]).p_value, 1.0);
    }

    #[test]
    fn compare_cases() {
        let q = qrels(&[("q1", "a", 1)]);
        let specs = [MetricSpec::mrr(10)];
        let a = evaluate_run(&run_of("q1", &["a"]), &q, "x", &specs).unwrap();
        let c = compare_runs(&a, &a, MetricSpec::mrr(10)).unwrap();
        assert_eq!(c.mean_delta, 0.0);
        assert_eq!(c.test.p_value, 1.0);

        let other = qrels(&[("q9", "a", 1)]);
        let b = evaluate_run(&run_of("q9", &["a"]), &other, "x", &specs).unwrap();
        assert!(matches!(
            compare_runs(&a, &b, MetricSpec::mrr(10)),
            Err(EvalError::QuerySetMismatch { .. })
        ));
    }

    #[test]
    fn compare_ten_wins() {
        let mut q = Qrels::new();
        let mut worse = Run::new("a");
        let mut better = Run::new("b");
        for i in 0..10 {
            let qid = format!("q{i}");
            q.entry(qid.clone()).or_default().insert("rel".into(), 1);
            worse.insert(qid.clone(), vec![ScoredDoc::new("x", 2.0), ScoredDoc::new("rel", 1.0)]);
            better.insert(qid, vec![ScoredDoc::new("rel", 2.0)]);
        }
        let specs = [MetricSpec::mrr(10)];
        let a = evaluate_run(&worse, &q, "q", &specs).unwrap();
        let b = evaluate_run(&better, &q, "q", &specs).unwrap();
        let c = compare_runs(&a, &b, specs[0]).unwrap();
        assert_eq!(c.mean_delta, 0.5);
        assert!((c.test.p_value - 0.001953125).abs() < 1e-12);
    }
}
