use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use crate::corpus::{format_run, Qrels, QuerySet, Ranking, Run};
use crate::eval::{evaluate_metric, sign_test, MetricSpec, SignTest};
use crate::index::InvertedIndex;
use crate::neural::{
    rerank, search_dense, search_maxsim_memo, write_params, EncodedCorpus, EncoderError, EncoderParams, MaxSimMemo,
    ScoringMode,
};
use crate::train::{build_triplets, train, TrainConfig};
use crate::transducer::{transduce_queryset, VarietyRuleSet};

use super::config::{ExperimentConfig, Ranker, IDENTITY_PAIR};
use super::output::{self, PlotRow};
use super::synth::{synthesize_corpus, SyntheticCorpus};
use super::ExperimentError;

pub const HIGH: &str = "high";
pub const LOW: &str = "low";
pub const ORIG: &str = "orig";
pub const OURS: &str = "ours";

/// A low-resource variety paired with the untransduced high-resource one.
#[derive(Debug, Clone, PartialEq)]
pub struct Variety {
    pub id: String,
    pub family: String,
    pub ruleset: VarietyRuleSet,
}

/// Which encoder produced an evaluation: the untrained one or one fine-tuned on a pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Model {
    Orig,
    Ours(String),
}

impl Model {
    fn dir(&self) -> String {
        match self {
            Model::Orig => ORIG.to_string(),
            Model::Ours(p) => format!("{OURS}-{p}"),
        }
    }
}

/// Per-metric, per-query values of one (model, ranker, query set) evaluation.
type Outcome = Vec<BTreeMap<String, f64>>;

struct SeedState {
    seed: u64,
    corpus: SyntheticCorpus,
    eval_qrels: Qrels,
    index: InvertedIndex,
    init: EncoderParams,
    trained: BTreeMap<(String, ScoringMode), EncoderParams>,
    /// Eval queries per variety id; `None` key holds the original queries.
    queries: BTreeMap<Option<String>, QuerySet>,
    outcomes: HashMap<(Model, Ranker, Option<String>), Outcome>,
    /// Encoded collection for the most recently used model.
    encoded: Option<(Model, BTreeMap<ScoringMode, EncodedCorpus>)>,
    memo: MaxSimMemo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rq1Row {
    pub ranker: Ranker,
    pub pair: String,
    pub query_language: &'static str,
    pub metric: MetricSpec,
    pub value: f64,
}

/// Sign test of low- minus high-variety values, pooled over queries and seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Rq1Test {
    pub ranker: Ranker,
    pub pair: String,
    pub metric: MetricSpec,
    pub mean_high: f64,
    pub mean_low: f64,
    pub mean_delta: f64,
    pub test: SignTest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rq1Table {
    pub rows: Vec<Rq1Row>,
    pub tests: Vec<Rq1Test>,
    pub plot: Vec<PlotRow>,
}

impl Rq1Table {
    pub fn test(&self, ranker: Ranker, pair: &str, metric: MetricSpec) -> Option<&Rq1Test> {
        self.tests
            .iter()
            .find(|t| t.ranker == ranker && t.pair == pair && t.metric == metric)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferRow {
    pub ranker: Ranker,
    pub train_pair: String,
    pub pair: String,
    pub query_language: &'static str,
    pub condition: &'static str,
    pub metric: MetricSpec,
    pub value: f64,
}

/// Ours minus Orig. for one ranker, pair, variety and metric.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferComparison {
    pub ranker: Ranker,
    pub train_pair: String,
    pub pair: String,
    pub query_language: &'static str,
    pub metric: MetricSpec,
    pub mean_orig: f64,
    pub mean_ours: f64,
    pub mean_delta: f64,
    /// `mean_delta / mean_orig`, or 0 when `mean_orig` is 0.
    pub relative_change: f64,
    /// Per-seed mean delta, in config seed order.
    pub seed_deltas: Vec<(u64, f64)>,
    pub test: SignTest,
}

impl TransferComparison {
    pub fn seeds_improved(&self) -> usize {
        self.seed_deltas.iter().filter(|(_, d)| *d > 0.0).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferTable {
    /// `rq2`, `rq3` or `rq4`.
    pub name: &'static str,
    pub rows: Vec<TransferRow>,
    pub comparisons: Vec<TransferComparison>,
    pub plot: Vec<PlotRow>,
}

impl TransferTable {
    pub fn comparison(
        &self,
        ranker: Ranker,
        train_pair: &str,
        pair: &str,
        query_language: &str,
        metric: MetricSpec,
    ) -> Option<&TransferComparison> {
        self.comparisons.iter().find(|c| {
            c.ranker == ranker
                && c.train_pair == train_pair
                && c.pair == pair
                && c.query_language == query_language
                && c.metric == metric
        })
    }
}

/// Tables produced by one invocation; absent stages were not run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Suite {
    pub rq1: Option<Rq1Table>,
    pub rq2: Option<TransferTable>,
    pub rq3: Option<TransferTable>,
    pub rq4: Option<TransferTable>,
}

/// Pipeline state shared by the research-question stages.
///
/// Trained parameters from [`Experiment::fine_tune`] are kept and reused by the
/// transfer stages. Output files are collected in memory and written in path
/// order by [`Experiment::write`].
pub struct Experiment {
    cfg: ExperimentConfig,
    varieties: Vec<Variety>,
    seeds: Vec<SeedState>,
    artifacts: BTreeMap<PathBuf, Vec<u8>>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl Experiment {
    /// Synthesizes the per-seed collections, indexes them and initializes encoders.
    pub fn new(cfg: ExperimentConfig) -> Result<Self, ExperimentError> {
        cfg.validate()?;
        let mut varieties: Vec<Variety> = cfg
            .rulesets()?
            .into_iter()
            .map(|rs| Variety {
                id: rs.ruleset_id.clone(),
                family: rs.family_id.clone(),
                ruleset: rs,
            })
            .collect();
        if cfg.identity_control {
            let rs = VarietyRuleSet::empty(IDENTITY_PAIR);
            varieties.push(Variety {
                id: IDENTITY_PAIR.to_string(),
                family: rs.family_id.clone(),
                ruleset: rs,
            });
        }
        let mut seeds = Vec::with_capacity(cfg.seeds.len());
        for &seed in &cfg.seeds {
            let corpus = synthesize_corpus(&cfg.corpus, seed)?;
            let eval_ids: BTreeSet<&str> = corpus.eval.iter().map(|q| q.query_id.as_str()).collect();
            let eval_qrels: Qrels = corpus
                .qrels
                .iter()
                .filter(|(q, _)| eval_ids.contains(q.as_str()))
                .map(|(q, j)| (q.clone(), j.clone()))
                .collect();
            let index = InvertedIndex::build(&corpus.collection, &cfg.analyzer)?;
            let init = EncoderParams::init(cfg.hasher, cfg.dim, seed)?;
            let mut queries = BTreeMap::new();
            queries.insert(None, corpus.eval.clone());
            for v in &varieties {
                queries.insert(Some(v.id.clone()), transduce_queryset(&corpus.eval, &v.ruleset));
            }
            seeds.push(SeedState {
                seed,
                corpus,
                eval_qrels,
                index,
                init,
                trained: BTreeMap::new(),
                queries,
                outcomes: HashMap::new(),
                encoded: None,
                memo: MaxSimMemo::new(),
            });
        }
        let mut exp = Experiment {
            cfg,
            varieties,
            seeds,
            artifacts: BTreeMap::new(),
        };
        exp.record_static_artifacts();
        Ok(exp)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn varieties(&self) -> &[Variety] {
        &self.varieties
    }

    pub fn variety(&self, id: &str) -> Result<&Variety, ExperimentError> {
        self.varieties
            .iter()
            .find(|v| v.id == id)
            .ok_or_else(|| ExperimentError::UnknownPair(id.to_string()))
    }

    /// Synthetic data of each seed, in config order.
    pub fn corpora(&self) -> impl Iterator<Item = (u64, &SyntheticCorpus)> {
        self.seeds.iter().map(|s| (s.seed, &s.corpus))
    }

    /// Trained parameters for `pair` and loss `mode` at `seed`, if fine-tuning ran.
    pub fn trained_params(&self, pair: &str, mode: ScoringMode, seed: u64) -> Option<&EncoderParams> {
        self.seeds
            .iter()
            .find(|s| s.seed == seed)
            .and_then(|s| s.trained.get(&(pair.to_string(), mode)))
    }

    /// Held-out siblings of `pair`'s family (never used for training).
    pub fn unseen_pairs(&self, pair: &str) -> Result<Vec<String>, ExperimentError> {
        let family = self.variety(pair)?.family.clone();
        Ok(self
            .varieties
            .iter()
            .filter(|v| v.family == family && !self.cfg.train_pairs.contains(&v.id))
            .map(|v| v.id.clone())
            .collect())
    }

    /// Varieties of every other family.
    pub fn cross_family_pairs(&self, pair: &str) -> Result<Vec<String>, ExperimentError> {
        let family = self.variety(pair)?.family.clone();
        Ok(self
            .varieties
            .iter()
            .filter(|v| v.family != family && v.id != IDENTITY_PAIR)
            .map(|v| v.id.clone())
            .collect())
    }

    /// Stable provenance lines embedded in every table.
    pub fn provenance(&self) -> Vec<String> {
        let c = &self.cfg;
        let train = TrainConfig {
            seed: 0,
            ..c.train.clone()
        };
        vec![
            format!("config_hash={}", c.hash()),
            format!("seeds={}", c.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")),
            format!("bm25.k1={:?} bm25.b={:?}", c.bm25.k1, c.bm25.b),
            format!(
                "train: {} (seed = experiment seed, loss_mode = ranker mode)",
                train.describe().replace(" seed=0", "").replace(" loss_mode=single_vector", "")
            ),
            format!(
                "encoder: dim={} buckets={} ngrams={}..{} hash_seed={} analyzer={}",
                c.dim,
                c.hasher.bucket_count,
                c.hasher.ngram_min,
                c.hasher.ngram_max,
                c.hasher.hash_seed,
                c.analyzer.describe()
            ),
            format!(
                "rulesets={}",
                self.varieties.iter().map(|v| v.id.as_str()).collect::<Vec<_>>().join(",")
            ),
            format!("train_pairs={}", c.train_pairs.join(",")),
            format!("retrieval.depth={} retrieval.rerank_depth={}", c.retrieval_depth, c.rerank_depth),
        ]
    }

    fn record_static_artifacts(&mut self) {
        let config = self.cfg.to_config_text();
        self.artifacts.insert(PathBuf::from("config.txt"), config.into_bytes());
        for v in &self.varieties {
            self.artifacts
                .insert(PathBuf::from(format!("rulesets/{}.rules", v.id)), v.ruleset.to_string().into_bytes());
        }
    }

    /// Loss modes that the configured neural rankers need trained parameters for.
    fn needed_modes(&self) -> Vec<ScoringMode> {
        let mut modes: Vec<ScoringMode> = Vec::new();
        for r in &self.cfg.rankers {
            for m in r.loss_modes() {
                if !modes.contains(m) {
                    modes.push(*m);
                }
            }
        }
        modes
    }

    /// Trains on transduced train queries of `pair` for every seed and needed
    /// loss mode. Already-trained combinations are reused.
    pub fn fine_tune(&mut self, pair: &str) -> Result<(), ExperimentError> {
        let variety = self.variety(pair)?.clone();
        if variety.id == IDENTITY_PAIR {
            return Err(ExperimentError::UnknownPair(pair.to_string()));
        }
        let modes = self.needed_modes();
        for state in &mut self.seeds {
            for &mode in &modes {
                let key = (pair.to_string(), mode);
                if state.trained.contains_key(&key) {
                    continue;
                }
                let cfg = TrainConfig {
                    seed: state.seed,
                    loss_mode: mode,
                    ..self.cfg.train.clone()
                };
                let tq = transduce_queryset(&state.corpus.train, &variety.ruleset);
                let set = build_triplets(&tq, &state.corpus.qrels, &state.corpus.collection, &cfg, &state.index, self.cfg.bm25)?;
                for t in &set.triplets {
                    if state.eval_qrels.contains_key(&t.query.query_id) {
                        return Err(ExperimentError::HygieneViolation(t.query.query_id.clone()));
                    }
                }
                let (params, report) = train(&state.init, &set.triplets, &state.corpus.collection, &self.cfg.analyzer, &cfg)?;
                let stem = format!("training/seed-{}/{}.{}", state.seed, pair, mode);
                let negatives: usize = set.triplets.iter().map(|t| t.negative_doc_ids.len()).sum();
                let manifest = format!(
                    "pair={pair}\nseed={}\nloss_mode={mode}\ntrain_config={}\nconfig_hash={}\ntrain_queries={}\ntriplets={}\nskipped_queries={}\nnegatives={}\nsteps={}\ninit_version={:016x}\nfinal_version={:016x}\n",
                    state.seed,
                    cfg.describe(),
                    self.cfg.hash(),
                    tq.len(),
                    set.triplets.len(),
                    set.skipped_queries,
                    negatives,
                    report.steps,
                    state.init.version(),
                    report.final_version,
                );
                self.artifacts.insert(PathBuf::from(format!("{stem}.manifest")), manifest.into_bytes());
                self.artifacts
                    .insert(PathBuf::from(format!("{stem}.loss.csv")), report.to_csv().into_bytes());
                if self.cfg.save_checkpoints {
                    let mut bytes = Vec::new();
                    write_params(&params, &mut bytes).expect("writing to memory cannot fail");
                    self.artifacts.insert(PathBuf::from(format!("models/seed-{}/{}.{}.bin", state.seed, pair, mode)), bytes);
                }
                state.trained.insert(key, params);
            }
        }
        Ok(())
    }

    fn params_for<'a>(
        init: &'a EncoderParams,
        trained: &'a BTreeMap<(String, ScoringMode), EncoderParams>,
        seed: u64,
        model: &Model,
        mode: ScoringMode,
    ) -> Result<&'a EncoderParams, ExperimentError> {
        match model {
            Model::Orig => Ok(init),
            Model::Ours(pair) => trained
                .get(&(pair.clone(), mode))
                .ok_or_else(|| ExperimentError::MissingTrainedParams {
                    pair: pair.clone(),
                    mode,
                    seed,
                }),
        }
    }

    /// Retrieves with one ranker for every query of `queries`.
    fn retrieve(
        cfg: &ExperimentConfig,
        state: &mut SeedState,
        model: &Model,
        ranker: Ranker,
        queries: &QuerySet,
    ) -> Result<Run, ExperimentError> {
        let modes: &[ScoringMode] = ranker.loss_modes();
        let mut params: Vec<(ScoringMode, &EncoderParams)> = Vec::new();
        for &m in modes {
            params.push((m, Self::params_for(&state.init, &state.trained, state.seed, model, m)?));
        }
        if !modes.is_empty() && state.encoded.as_ref().map(|(k, _)| k) != Some(model) {
            state.encoded = Some((model.clone(), BTreeMap::new()));
            state.memo = MaxSimMemo::new();
        }
        for &(m, p) in &params {
            let slot = &mut state.encoded.as_mut().expect("encoding slot").1;
            if let std::collections::btree_map::Entry::Vacant(e) = slot.entry(m) {
                e.insert(EncodedCorpus::encode(&state.corpus.collection, p, &cfg.analyzer)?);
            }
        }
        let encoded = state.encoded.as_ref().map(|(_, e)| e);
        let depth = cfg.retrieval_depth;
        let mut run = Run::new(format!("{}-{}", model.dir(), ranker));
        for q in queries.iter() {
            let ranking: Ranking = match ranker {
                Ranker::Bm25 => state.index.search(&q.text, cfg.bm25, depth),
                _ => {
                    let enc = encoded.expect("encodings prepared");
                    let encode = |mode: ScoringMode| -> Result<Option<_>, ExperimentError> {
                        let p = params.iter().find(|(m, _)| *m == mode).expect("params prepared").1;
                        match p.encode(&q.text, &cfg.analyzer) {
                            Ok(e) => Ok(Some(e)),
                            Err(EncoderError::EmptyText) => Ok(None),
                            Err(e) => Err(e.into()),
                        }
                    };
                    match ranker {
                        Ranker::SingleVector => match encode(ScoringMode::SingleVector)? {
                            Some(qe) => search_dense(&qe, &enc[&ScoringMode::SingleVector], ScoringMode::SingleVector, depth)?.ranking,
                            None => Vec::new(),
                        },
                        Ranker::MultiVector => match encode(ScoringMode::MultiVectorMaxSim)? {
                            Some(qe) => search_maxsim_memo(&qe, &enc[&ScoringMode::MultiVectorMaxSim], &mut state.memo, depth)?.ranking,
                            None => Vec::new(),
                        },
                        _ => match (encode(ScoringMode::SingleVector)?, encode(ScoringMode::MultiVectorMaxSim)?) {
                            (Some(first), Some(second)) => {
                                let base = search_dense(&first, &enc[&ScoringMode::SingleVector], ScoringMode::SingleVector, depth)?;
                                rerank(&base.ranking, &second, &enc[&ScoringMode::MultiVectorMaxSim], cfg.rerank_depth)?
                            }
                            _ => Vec::new(),
                        },
                    }
                }
            };
            run.insert(q.query_id.clone(), ranking);
        }
        Ok(run)
    }

    /// Evaluates (model, ranker) on the original eval queries (`variety = None`)
    /// or on their transduction into `variety`, caching the per-query values.
    fn outcome(&mut self, seed_index: usize, model: &Model, ranker: Ranker, variety: Option<&str>) -> Result<Outcome, ExperimentError> {
        let key = (model.clone(), ranker, variety.map(str::to_string));
        if let Some(o) = self.seeds[seed_index].outcomes.get(&key) {
            return Ok(o.clone());
        }
        let state = &mut self.seeds[seed_index];
        let queries = state.queries[&key.2].clone();
        let mut run = Self::retrieve(&self.cfg, state, model, ranker, &queries)?;
        let outcome: Outcome = self
            .cfg
            .metrics
            .iter()
            .map(|&m| evaluate_metric(&run, &state.eval_qrels, m).per_query)
            .collect();
        for ranking in run.rankings.values_mut() {
            ranking.truncate(self.cfg.run_depth);
        }
        let path = format!(
            "runs/seed-{}/{}/{}.{}.trec",
            state.seed,
            model.dir(),
            ranker,
            variety.unwrap_or("original")
        );
        self.artifacts.insert(PathBuf::from(path), format_run(&run)?.into_bytes());
        state.outcomes.insert(key, outcome.clone());
        Ok(outcome)
    }

    /// Evaluates every (model, ranker, query set) combination seed by seed so
    /// each model's encodings are built once, then releases them.
    fn prefetch(&mut self, models: &[Model], rankers: &[Ranker], sets: &[Option<String>]) -> Result<(), ExperimentError> {
        for si in 0..self.seeds.len() {
            for model in models {
                for &ranker in rankers {
                    for set in sets {
                        self.outcome(si, model, ranker, set.as_deref())?;
                    }
                }
            }
            self.seeds[si].encoded = None;
            self.seeds[si].memo = MaxSimMemo::new();
        }
        Ok(())
    }

    /// Robustness of every ranker: original vs. transduced eval queries per variety.
    pub fn run_rq1(&mut self) -> Result<Rq1Table, ExperimentError> {
        let metrics = self.cfg.metrics.clone();
        let rankers = self.cfg.rankers.clone();
        let pairs: Vec<String> = self.varieties.iter().map(|v| v.id.clone()).collect();
        let mut table = Rq1Table {
            rows: Vec::new(),
            tests: Vec::new(),
            plot: Vec::new(),
        };
        let mut sets = vec![None];
        sets.extend(pairs.iter().cloned().map(Some));
        self.prefetch(&[Model::Orig], &rankers, &sets)?;
        for &ranker in &rankers {
            for pair in &pairs {
                // per metric: (seed, query) -> (high, low)
                let mut pooled: Vec<BTreeMap<(u64, String), (f64, f64)>> = vec![BTreeMap::new(); metrics.len()];
                let mut seed_means: Vec<Vec<(u64, f64, f64)>> = vec![Vec::new(); metrics.len()];
                for si in 0..self.seeds.len() {
                    let seed = self.seeds[si].seed;
                    let high = self.outcome(si, &Model::Orig, ranker, None)?;
                    let low = self.outcome(si, &Model::Orig, ranker, Some(pair))?;
                    for (mi, (h, l)) in high.iter().zip(&low).enumerate() {
                        for (qid, hv) in h {
                            pooled[mi].insert((seed, qid.clone()), (*hv, l[qid]));
                        }
                        seed_means[mi].push((seed, mean(h.values().copied()), mean(l.values().copied())));
                    }
                }
                for (mi, &metric) in metrics.iter().enumerate() {
                    let mean_high = mean(seed_means[mi].iter().map(|s| s.1));
                    let mean_low = mean(seed_means[mi].iter().map(|s| s.2));
                    if pair == IDENTITY_PAIR && pooled[mi].values().any(|(h, l)| h != l) {
                        return Err(ExperimentError::IdentityControlViolated {
                            ranker: ranker.to_string(),
                            model: ORIG.into(),
                            metric: metric.to_string(),
                        });
                    }
                    for (lang, value) in [(HIGH, mean_high), (LOW, mean_low)] {
                        table.rows.push(Rq1Row {
                            ranker,
                            pair: pair.clone(),
                            query_language: lang,
                            metric,
                            value,
                        });
                    }
                    for &(seed, h, l) in &seed_means[mi] {
                        for (lang, value) in [(HIGH, h), (LOW, l)] {
                            table.plot.push(PlotRow {
                                ranker: ranker.to_string(),
                                pair: pair.clone(),
                                query_language: lang.to_string(),
                                condition: ORIG.to_string(),
                                metric: metric.to_string(),
                                value,
                                seed,
                            });
                        }
                    }
                    let deltas: Vec<f64> = pooled[mi].values().map(|(h, l)| l - h).collect();
                    table.tests.push(Rq1Test {
                        ranker,
                        pair: pair.clone(),
                        metric,
                        mean_high,
                        mean_low,
                        mean_delta: mean_low - mean_high,
                        test: sign_test(&deltas),
                    });
                }
            }
        }
        Ok(table)
    }

    fn neural_rankers(&self) -> Vec<Ranker> {
        self.cfg.rankers.iter().copied().filter(|r| r.is_neural()).collect()
    }

    fn transfer_table(&mut self, name: &'static str, train_pair: &str, pairs: &[String]) -> Result<TransferTable, ExperimentError> {
        let metrics = self.cfg.metrics.clone();
        let ours = Model::Ours(train_pair.to_string());
        let mut table = TransferTable {
            name,
            rows: Vec::new(),
            comparisons: Vec::new(),
            plot: Vec::new(),
        };
        let rankers = self.neural_rankers();
        let mut sets = vec![None];
        sets.extend(pairs.iter().cloned().map(Some));
        self.prefetch(&[Model::Orig, ours.clone()], &rankers, &sets)?;
        for ranker in rankers {
            for pair in pairs {
                for (lang, variety) in [(HIGH, None), (LOW, Some(pair.as_str()))] {
                    let mut pooled: Vec<Vec<f64>> = vec![Vec::new(); metrics.len()];
                    let mut seed_means: Vec<Vec<(u64, f64, f64)>> = vec![Vec::new(); metrics.len()];
                    for si in 0..self.seeds.len() {
                        let seed = self.seeds[si].seed;
                        let orig = self.outcome(si, &Model::Orig, ranker, variety)?;
                        let tuned = self.outcome(si, &ours, ranker, variety)?;
                        for (mi, (o, t)) in orig.iter().zip(&tuned).enumerate() {
                            pooled[mi].extend(o.iter().map(|(q, ov)| t[q] - ov));
                            seed_means[mi].push((seed, mean(o.values().copied()), mean(t.values().copied())));
                        }
                    }
                    for (mi, &metric) in metrics.iter().enumerate() {
                        let mean_orig = mean(seed_means[mi].iter().map(|s| s.1));
                        let mean_ours = mean(seed_means[mi].iter().map(|s| s.2));
                        for (condition, value) in [(ORIG, mean_orig), (OURS, mean_ours)] {
                            table.rows.push(TransferRow {
                                ranker,
                                train_pair: train_pair.to_string(),
                                pair: pair.clone(),
                                query_language: lang,
                                condition,
                                metric,
                                value,
                            });
                        }
                        for &(seed, o, t) in &seed_means[mi] {
                            for (condition, value) in [(ORIG.to_string(), o), (format!("{OURS}:{train_pair}"), t)] {
                                table.plot.push(PlotRow {
                                    ranker: ranker.to_string(),
                                    pair: pair.clone(),
                                    query_language: lang.to_string(),
                                    condition,
                                    metric: metric.to_string(),
                                    value,
                                    seed,
                                });
                            }
                        }
                        let mean_delta = mean_ours - mean_orig;
                        table.comparisons.push(TransferComparison {
                            ranker,
                            train_pair: train_pair.to_string(),
                            pair: pair.clone(),
                            query_language: lang,
                            metric,
                            mean_orig,
                            mean_ours,
                            mean_delta,
                            relative_change: if mean_orig == 0.0 { 0.0 } else { mean_delta / mean_orig },
                            seed_deltas: seed_means[mi].iter().map(|&(s, o, t)| (s, t - o)).collect(),
                            test: sign_test(&pooled[mi]),
                        });
                    }
                }
            }
        }
        Ok(table)
    }

    fn check_trained(&self, train_pair: &str) -> Result<(), ExperimentError> {
        self.variety(train_pair)?;
        for state in &self.seeds {
            for mode in self.needed_modes() {
                if !state.trained.contains_key(&(train_pair.to_string(), mode)) {
                    return Err(ExperimentError::MissingTrainedParams {
                        pair: train_pair.to_string(),
                        mode,
                        seed: state.seed,
                    });
                }
            }
        }
        Ok(())
    }

    fn merge(name: &'static str, tables: Vec<TransferTable>) -> TransferTable {
        let mut out = TransferTable {
            name,
            rows: Vec::new(),
            comparisons: Vec::new(),
            plot: Vec::new(),
        };
        for t in tables {
            out.rows.extend(t.rows);
            out.comparisons.extend(t.comparisons);
            out.plot.extend(t.plot);
        }
        out
    }

    /// Fine-tunes on each training pair and compares Orig. vs. Ours on that pair.
    pub fn run_rq2(&mut self) -> Result<TransferTable, ExperimentError> {
        let mut tables = Vec::new();
        for pair in self.cfg.train_pairs.clone() {
            self.fine_tune(&pair)?;
            tables.push(self.run_rq2_pair(&pair)?);
        }
        Ok(Self::merge("rq2", tables))
    }

    /// RQ2 comparison for one already fine-tuned pair.
    pub fn run_rq2_pair(&mut self, pair_a: &str) -> Result<TransferTable, ExperimentError> {
        self.check_trained(pair_a)?;
        self.transfer_table("rq2", pair_a, &[pair_a.to_string()])
    }

    /// Zero-shot transfer of the pair-A model to held-out pairs of its own family.
    pub fn run_rq3_pairs(&mut self, pair_a: &str, unseen: &[String]) -> Result<TransferTable, ExperimentError> {
        let family = self.variety(pair_a)?.family.clone();
        for p in unseen {
            let v = self.variety(p)?;
            if p == pair_a || self.cfg.train_pairs.contains(p) {
                return Err(ExperimentError::PairNotUnseen { pair: p.clone() });
            }
            if v.family != family {
                return Err(ExperimentError::ConfigInvalid {
                    line: 0,
                    message: format!("`{p}` is not a sibling of `{pair_a}`; cross-family pairs belong to RQ4"),
                });
            }
        }
        self.check_trained(pair_a)?;
        self.transfer_table("rq3", pair_a, unseen)
    }

    /// Transfer of the pair-A model to varieties of other families.
    pub fn run_rq4_pairs(&mut self, pair_a: &str, cross: &[String]) -> Result<TransferTable, ExperimentError> {
        let family = self.variety(pair_a)?.family.clone();
        for p in cross {
            let v = self.variety(p)?;
            if v.family == family {
                return Err(ExperimentError::FamilyOverlap {
                    pair: p.clone(),
                    family: family.clone(),
                });
            }
        }
        self.check_trained(pair_a)?;
        self.transfer_table("rq4", pair_a, cross)
    }

    /// RQ3 for every training pair against its held-out siblings.
    pub fn run_rq3(&mut self) -> Result<TransferTable, ExperimentError> {
        let mut tables = Vec::new();
        for pair in self.cfg.train_pairs.clone() {
            let unseen = self.unseen_pairs(&pair)?;
            tables.push(self.run_rq3_pairs(&pair, &unseen)?);
        }
        Ok(Self::merge("rq3", tables))
    }

    /// RQ4 for every training pair against other families, plus the identity control.
    pub fn run_rq4(&mut self) -> Result<TransferTable, ExperimentError> {
        let mut tables = Vec::new();
        for pair in self.cfg.train_pairs.clone() {
            let mut cross = self.cross_family_pairs(&pair)?;
            if self.cfg.identity_control {
                cross.push(IDENTITY_PAIR.to_string());
            }
            let table = self.run_rq4_pairs(&pair, &cross)?;
            self.check_identity(&table)?;
            tables.push(table);
        }
        Ok(Self::merge("rq4", tables))
    }

    /// Every identity-pair comparison must show identical high and low values.
    fn check_identity(&self, table: &TransferTable) -> Result<(), ExperimentError> {
        for c in table.comparisons.iter().filter(|c| c.pair == IDENTITY_PAIR && c.query_language == LOW) {
            let high = table
                .comparison(c.ranker, &c.train_pair, IDENTITY_PAIR, HIGH, c.metric)
                .expect("high row emitted with low row");
            for (model, a, b) in [(ORIG, high.mean_orig, c.mean_orig), (OURS, high.mean_ours, c.mean_ours)] {
                if a != b {
                    return Err(ExperimentError::IdentityControlViolated {
                        ranker: c.ranker.to_string(),
                        model: model.into(),
                        metric: c.metric.to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Runs the stages in order; RQ3 and RQ4 fine-tune first when RQ2 was not requested.
    pub fn run(&mut self, rq1: bool, rq2: bool, rq3: bool, rq4: bool) -> Result<Suite, ExperimentError> {
        let mut suite = Suite::default();
        if rq1 {
            suite.rq1 = Some(self.run_rq1()?);
        }
        if rq2 {
            suite.rq2 = Some(self.run_rq2()?);
        } else if rq3 || rq4 {
            for pair in self.cfg.train_pairs.clone() {
                self.fine_tune(&pair)?;
            }
        }
        if rq3 {
            suite.rq3 = Some(self.run_rq3()?);
        }
        if rq4 {
            suite.rq4 = Some(self.run_rq4()?);
        }
        Ok(suite)
    }

    /// Every output file for `suite`, keyed by path relative to the output directory.
    pub fn outputs(&self, suite: &Suite) -> BTreeMap<PathBuf, Vec<u8>> {
        let mut files = self.artifacts.clone();
        let provenance = self.provenance();
        files.extend(output::table_files(suite, &provenance));
        files.insert(PathBuf::from("REPORT.md"), output::render_report(self, suite).into_bytes());
        files
    }

    /// Writes all outputs under `dir` in path order.
    pub fn write(&self, suite: &Suite, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
        let files = self.outputs(suite);
        let mut written = Vec::with_capacity(files.len());
        for (rel, bytes) in files {
            let path = dir.join(&rel);
            let io = |e: std::io::Error| ExperimentError::Io {
                path: path.clone(),
                message: e.to_string(),
            };
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(io)?;
            }
            std::fs::write(&path, &bytes).map_err(io)?;
            written.push(path);
        }
        Ok(written)
    }
}
