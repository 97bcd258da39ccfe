//! Line-based `key = value` experiment configuration.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::analysis::AnalyzerConfig;
use crate::eval::{parse_metric_list, MetricSpec};
use crate::index::Bm25Params;
use crate::neural::{ScoringMode, SubwordHasherConfig};
use crate::train::{NegativeSource, TrainConfig};
use crate::transducer::{generate_family, parse_rule, FamilySpec, VarietyRuleSet};

use super::ExperimentError;

/// The configuration the experiment runs with when no file is given.
pub const DEFAULT_CONFIG: &str = include_str!("default.conf");

/// Pair id of the empty-ruleset control variety.
pub const IDENTITY_PAIR: &str = "identity";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Ranker {
    Bm25,
    SingleVector,
    MultiVector,
    Rerank,
}

impl Ranker {
    pub const ALL: [Ranker; 4] = [Ranker::Bm25, Ranker::SingleVector, Ranker::MultiVector, Ranker::Rerank];

    pub fn as_str(self) -> &'static str {
        match self {
            Ranker::Bm25 => "bm25",
            Ranker::SingleVector => "single_vector",
            Ranker::MultiVector => "multi_vector",
            Ranker::Rerank => "rerank",
        }
    }

    pub fn is_neural(self) -> bool {
        self != Ranker::Bm25
    }

    /// Loss modes whose trained parameters this ranker needs.
    pub fn loss_modes(self) -> &'static [ScoringMode] {
        match self {
            Ranker::Bm25 => &[],
            Ranker::SingleVector => &[ScoringMode::SingleVector],
            Ranker::MultiVector => &[ScoringMode::MultiVectorMaxSim],
            Ranker::Rerank => &[ScoringMode::SingleVector, ScoringMode::MultiVectorMaxSim],
        }
    }
}

impl fmt::Display for Ranker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ranker {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ranker::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown ranker `{s}` (expected bm25, single_vector, multi_vector or rerank)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub docs: usize,
    pub vocab_size: usize,
    pub vocab_seed: u64,
    pub passage_min: usize,
    pub passage_max: usize,
    pub zipf_exponent: f64,
    pub train_queries: usize,
    pub eval_queries: usize,
    pub terms_min: usize,
    pub terms_max: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Entries per query written to run files; metrics use the full retrieval depth.
    pub run_depth: usize,
    pub save_checkpoints: bool,
    pub corpus: CorpusSpec,
    pub families: Vec<FamilySpec>,
    pub train_pairs: Vec<String>,
    pub identity_control: bool,
    pub rankers: Vec<Ranker>,
    pub metrics: Vec<MetricSpec>,
    pub report_metric: MetricSpec,
    pub retrieval_depth: usize,
    pub rerank_depth: usize,
    pub bm25: Bm25Params,
    pub analyzer: AnalyzerConfig,
    pub hasher: SubwordHasherConfig,
    pub dim: usize,
    /// `seed` is replaced by the experiment seed and `loss_mode` by the
    /// ranker's scoring mode for each training run.
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::parse(DEFAULT_CONFIG).expect("bundled default config is valid")
    }
}

#[derive(Debug, Default)]
struct FamilyDraft {
    seed: Option<u64>,
    fraction: Option<f64>,
    siblings: Option<usize>,
    rules: Vec<crate::transducer::RewriteRule>,
}

fn invalid(line: usize, message: impl Into<String>) -> ExperimentError {
    ExperimentError::ConfigInvalid {
        line,
        message: message.into(),
    }
}

fn num<T: FromStr>(value: &str, line: usize, key: &str) -> Result<T, ExperimentError> {
    value
        .parse()
        .map_err(|_| invalid(line, format!("`{key}` expects a number, got `{value}`")))
}

fn list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn boolean(value: &str, line: usize, key: &str) -> Result<bool, ExperimentError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(invalid(line, format!("`{key}` expects true or false, got `{value}`"))),
    }
}

struct Collected {
    scalars: BTreeMap<String, (usize, String)>,
    families: BTreeMap<String, FamilyDraft>,
    family_order: Vec<String>,
}

fn collect(text: &str) -> Result<Collected, ExperimentError> {
    let mut scalars: BTreeMap<String, (usize, String)> = BTreeMap::new();
    let mut families: BTreeMap<String, FamilyDraft> = BTreeMap::new();
    let mut family_order: Vec<String> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| invalid(line, "expected `key = value`"))?;
        let (key, value) = (key.trim(), value.trim());
        if let Some(rest) = key.strip_prefix("family.") {
            let (id, field) = rest
                .rsplit_once('.')
                .ok_or_else(|| ExperimentError::UnknownKey { line, key: key.into() })?;
            if id.is_empty() || id.contains(char::is_whitespace) || id == IDENTITY_PAIR {
                return Err(invalid(line, format!("invalid family id `{id}`")));
            }
            if !families.contains_key(id) {
                family_order.push(id.to_string());
            }
            let draft = families.entry(id.to_string()).or_default();
            let dup = |set: bool| if set { Err(invalid(line, format!("`{key}` given twice"))) } else { Ok(()) };
            match field {
                "seed" => {
                    dup(draft.seed.is_some())?;
                    draft.seed = Some(num(value, line, key)?);
                }
                "fraction" => {
                    dup(draft.fraction.is_some())?;
                    draft.fraction = Some(num(value, line, key)?);
                }
                "siblings" => {
                    dup(draft.siblings.is_some())?;
                    draft.siblings = Some(num(value, line, key)?);
                }
                "rule" => draft
                    .rules
                    .push(parse_rule(value).map_err(|e| invalid(line, format!("`{key}`: {e}")))?),
                _ => return Err(ExperimentError::UnknownKey { line, key: key.into() }),
            }
            continue;
        }
        if !KNOWN_KEYS.contains(&key) {
            return Err(ExperimentError::UnknownKey { line, key: key.into() });
        }
        if scalars.insert(key.to_string(), (line, value.to_string())).is_some() {
            return Err(invalid(line, format!("`{key}` given twice")));
        }
    }
    Ok(Collected {
        scalars,
        families,
        family_order,
    })
}

impl ExperimentConfig {
    /// Parses a config file. Every key must be known. Scalar keys that are not
    /// given keep their default value; declaring any family replaces the
    /// default families entirely.
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let user = collect(text)?;
        let base = collect(DEFAULT_CONFIG)?;
        let (mut scalars, mut families, mut family_order) = (base.scalars, base.families, base.family_order);
        scalars.extend(user.scalars);
        if !user.family_order.is_empty() {
            families = user.families;
            family_order = user.family_order;
        }

        let take = |key: &str| -> Result<(usize, String), ExperimentError> {
            scalars
                .get(key)
                .cloned()
                .ok_or_else(|| invalid(0, format!("missing key `{key}`")))
        };
        let number = |key: &str| -> Result<f64, ExperimentError> {
            let (line, v) = take(key)?;
            num(&v, line, key)
        };
        let count = |key: &str| -> Result<usize, ExperimentError> {
            let (line, v) = take(key)?;
            num(&v, line, key)
        };
        let seed = |key: &str| -> Result<u64, ExperimentError> {
            let (line, v) = take(key)?;
            num(&v, line, key)
        };

        let (line, seeds_text) = take("seeds")?;
        let seeds = list(&seeds_text)
            .iter()
            .map(|s| num(s, line, "seeds"))
            .collect::<Result<Vec<u64>, _>>()?;

        let (line, rankers_text) = take("rankers")?;
        let rankers = list(&rankers_text)
            .iter()
            .map(|r| r.parse::<Ranker>().map_err(|m| invalid(line, m)))
            .collect::<Result<Vec<_>, _>>()?;

        let (line, metrics_text) = take("metrics")?;
        let metrics = parse_metric_list(&metrics_text).map_err(|e| invalid(line, e.to_string()))?;
        let (line, report_text) = take("report.metric")?;
        let report_metric: MetricSpec = report_text.parse().map_err(|e: crate::eval::EvalError| invalid(line, e.to_string()))?;

        let (line, source) = take("train.negative_source")?;
        let negative_source: NegativeSource = source.parse().map_err(|e: crate::train::TrainError| invalid(line, e.to_string()))?;
        let (line, save) = take("output.save_checkpoints")?;
        let save_checkpoints = boolean(&save, line, "output.save_checkpoints")?;
        let (line, identity) = take("identity_control")?;
        let identity_control = boolean(&identity, line, "identity_control")?;

        let mut family_specs = Vec::with_capacity(family_order.len());
        for id in family_order {
            let d = families.remove(&id).expect("recorded family");
            let missing = |field: &str| invalid(0, format!("family `{id}` is missing `{field}`"));
            family_specs.push(FamilySpec {
                family_id: id.clone(),
                seed: d.seed.ok_or_else(|| missing("seed"))?,
                sampling_fraction: d.fraction.ok_or_else(|| missing("fraction"))?,
                siblings: d.siblings.ok_or_else(|| missing("siblings"))?,
                shared_rule_pool: d.rules,
            });
        }

        let cfg = ExperimentConfig {
            seeds,
            output_dir: PathBuf::from(take("output.dir")?.1),
            run_depth: count("output.run_depth")?,
            save_checkpoints,
            corpus: CorpusSpec {
                docs: count("corpus.docs")?,
                vocab_size: count("corpus.vocab_size")?,
                vocab_seed: seed("corpus.vocab_seed")?,
                passage_min: count("corpus.passage_min")?,
                passage_max: count("corpus.passage_max")?,
                zipf_exponent: number("corpus.zipf_exponent")?,
                train_queries: count("queries.train")?,
                eval_queries: count("queries.eval")?,
                terms_min: count("queries.terms_min")?,
                terms_max: count("queries.terms_max")?,
            },
            families: family_specs,
            train_pairs: list(&take("pairs.train")?.1),
            identity_control,
            rankers,
            metrics,
            report_metric,
            retrieval_depth: count("retrieval.depth")?,
            rerank_depth: count("retrieval.rerank_depth")?,
            bm25: Bm25Params {
                k1: number("bm25.k1")?,
                b: number("bm25.b")?,
            },
            analyzer: AnalyzerConfig::default(),
            hasher: SubwordHasherConfig {
                ngram_min: count("encoder.ngram_min")?,
                ngram_max: count("encoder.ngram_max")?,
                bucket_count: count("encoder.buckets")?,
                hash_seed: seed("encoder.hash_seed")?,
            },
            dim: count("encoder.dim")?,
            train: TrainConfig {
                epochs: count("train.epochs")?,
                batch_size: count("train.batch_size")?,
                learning_rate: number("train.learning_rate")?,
                temperature: number("train.temperature")?,
                negatives_per_query: count("train.negatives")?,
                negative_source,
                seed: 0,
                loss_mode: ScoringMode::SingleVector,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks cross-field invariants: family structure, pair availability and counts.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(invalid(0, m));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.seeds.iter().collect::<HashSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.rankers.is_empty() {
            return bad("at least one ranker is required".into());
        }
        if self.rankers.iter().collect::<HashSet<_>>().len() != self.rankers.len() {
            return bad("rankers must be distinct".into());
        }
        if !self.metrics.contains(&self.report_metric) {
            return bad(format!("report.metric {} is not in metrics", self.report_metric));
        }
        let c = &self.corpus;
        if c.docs < 2 || c.vocab_size < 2 {
            return bad("corpus.docs and corpus.vocab_size must be >= 2".into());
        }
        if c.passage_min < 1 || c.passage_min > c.passage_max {
            return bad("need 1 <= corpus.passage_min <= corpus.passage_max".into());
        }
        if !(c.zipf_exponent >= 0.0 && c.zipf_exponent.is_finite()) {
            return bad("corpus.zipf_exponent must be finite and >= 0".into());
        }
        if c.train_queries < 1 || c.eval_queries < 1 {
            return bad("query counts must be >= 1".into());
        }
        if c.train_queries + c.eval_queries > c.docs {
            return bad("each query needs its own source passage: queries.train + queries.eval > corpus.docs".into());
        }
        if c.terms_min < 1 || c.terms_min > c.terms_max {
            return bad("need 1 <= queries.terms_min <= queries.terms_max".into());
        }
        if self.retrieval_depth < 1 || self.rerank_depth < 1 || self.run_depth < 1 {
            return bad("retrieval and output depths must be >= 1".into());
        }
        self.bm25.validate().map_err(|e| invalid(0, e.to_string()))?;
        self.hasher.validate().map_err(|e| invalid(0, e.to_string()))?;
        if self.dim < 2 {
            return bad("encoder.dim must be >= 2".into());
        }
        self.train.validate().map_err(|e| invalid(0, e.to_string()))?;

        if self.families.len() < 2 {
            return bad("at least two families are required".into());
        }
        let mut owner: HashMap<&crate::transducer::RewriteRule, &str> = HashMap::new();
        for f in &self.families {
            if f.siblings < 2 {
                return bad(format!("family `{}` needs at least two siblings", f.family_id));
            }
            for rule in &f.shared_rule_pool {
                if let Some(other) = owner.insert(rule, &f.family_id) {
                    if other != f.family_id {
                        return bad(format!(
                            "families `{other}` and `{}` share rule {rule}; family pools must be disjoint",
                            f.family_id
                        ));
                    }
                }
            }
        }
        let varieties = self.variety_ids();
        if self.train_pairs.is_empty() {
            return bad("pairs.train must name at least one variety".into());
        }
        for p in &self.train_pairs {
            if !varieties.contains(p) {
                return bad(format!("unknown training pair `{p}`"));
            }
        }
        if self.train_pairs.iter().collect::<BTreeSet<_>>().len() != self.train_pairs.len() {
            return bad("pairs.train entries must be distinct".into());
        }
        if varieties.iter().all(|v| self.train_pairs.contains(v)) {
            return bad("at least one variety pair must be held out of training".into());
        }
        Ok(())
    }

    fn variety_ids(&self) -> Vec<String> {
        self.families
            .iter()
            .flat_map(|f| (0..f.siblings).map(move |i| f.sibling_id(i)))
            .collect()
    }

    /// All sibling rulesets, family by family, in config order.
    pub fn rulesets(&self) -> Result<Vec<VarietyRuleSet>, ExperimentError> {
        let mut out = Vec::new();
        for f in &self.families {
            out.extend(generate_family(f)?);
        }
        Ok(out)
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_config_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        let join = |items: Vec<String>| items.join(", ");
        kv("seeds", join(self.seeds.iter().map(u64::to_string).collect()));
        kv("output.dir", self.output_dir.display().to_string());
        kv("output.run_depth", self.run_depth.to_string());
        kv("output.save_checkpoints", self.save_checkpoints.to_string());
        let c = &self.corpus;
        kv("corpus.docs", c.docs.to_string());
        kv("corpus.vocab_size", c.vocab_size.to_string());
        kv("corpus.vocab_seed", c.vocab_seed.to_string());
        kv("corpus.passage_min", c.passage_min.to_string());
        kv("corpus.passage_max", c.passage_max.to_string());
        kv("corpus.zipf_exponent", format!("{:?}", c.zipf_exponent));
        kv("queries.train", c.train_queries.to_string());
        kv("queries.eval", c.eval_queries.to_string());
        kv("queries.terms_min", c.terms_min.to_string());
        kv("queries.terms_max", c.terms_max.to_string());
        for f in &self.families {
            let id = &f.family_id;
            kv(&format!("family.{id}.seed"), f.seed.to_string());
            kv(&format!("family.{id}.fraction"), format!("{:?}", f.sampling_fraction));
            kv(&format!("family.{id}.siblings"), f.siblings.to_string());
            for rule in &f.shared_rule_pool {
                let text = rule.to_string();
                kv(&format!("family.{id}.rule"), text.trim_start_matches("rule ").to_string());
            }
        }
        kv("pairs.train", join(self.train_pairs.clone()));
        kv("identity_control", self.identity_control.to_string());
        kv("rankers", join(self.rankers.iter().map(|r| r.to_string()).collect()));
        kv("metrics", join(self.metrics.iter().map(|m| m.to_string()).collect()));
        kv("report.metric", self.report_metric.to_string());
        kv("retrieval.depth", self.retrieval_depth.to_string());
        kv("retrieval.rerank_depth", self.rerank_depth.to_string());
        kv("bm25.k1", format!("{:?}", self.bm25.k1));
        kv("bm25.b", format!("{:?}", self.bm25.b));
        kv("encoder.dim", self.dim.to_string());
        kv("encoder.buckets", self.hasher.bucket_count.to_string());
        kv("encoder.ngram_min", self.hasher.ngram_min.to_string());
        kv("encoder.ngram_max", self.hasher.ngram_max.to_string());
        kv("encoder.hash_seed", self.hasher.hash_seed.to_string());
        let t = &self.train;
        kv("train.epochs", t.epochs.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.learning_rate", format!("{:?}", t.learning_rate));
        kv("train.temperature", format!("{:?}", t.temperature));
        kv("train.negatives", t.negatives_per_query.to_string());
        kv("train.negative_source", t.negative_source.to_string());
        out
    }

    /// SHA-256 of the canonical text, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let digest = Sha256::digest(canonical.to_config_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Every scalar key; `family.<id>.{seed,fraction,siblings,rule}` are handled separately.
pub const KNOWN_KEYS: &[&str] = &[
    "seeds",
    "output.dir",
    "output.run_depth",
    "output.save_checkpoints",
    "corpus.docs",
    "corpus.vocab_size",
    "corpus.vocab_seed",
    "corpus.passage_min",
    "corpus.passage_max",
    "corpus.zipf_exponent",
    "queries.train",
    "queries.eval",
    "queries.terms_min",
    "queries.terms_max",
    "pairs.train",
    "identity_control",
    "rankers",
    "metrics",
    "report.metric",
    "retrieval.depth",
    "retrieval.rerank_depth",
    "bm25.k1",
    "bm25.b",
    "encoder.dim",
    "encoder.buckets",
    "encoder.ngram_min",
    "encoder.ngram_max",
    "encoder.hash_seed",
    "train.epochs",
    "train.batch_size",
    "train.learning_rate",
    "train.temperature",
    "train.negatives",
    "train.negative_source",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_parses_and_round_trips() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.seeds, vec![1, 2, 3, 4, 5]);
        assert_eq!(cfg.families.len(), 2);
        assert_eq!(cfg.families[0].shared_rule_pool.len(), 8);
        assert_eq!(cfg.rankers, Ranker::ALL.to_vec());
        let again = ExperimentConfig::parse(&cfg.to_config_text()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let text = format!("{DEFAULT_CONFIG}\nbm25.k3 = 1\n");
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert!(matches!(err, ExperimentError::UnknownKey { ref key, .. } if key == "bm25.k3"), "{err}");
        let text = format!("{DEFAULT_CONFIG}\nfamily.west.colour = red\n");
        assert!(matches!(ExperimentConfig::parse(&text), Err(ExperimentError::UnknownKey { .. })));
    }

    #[test]
    fn missing_and_duplicate_keys() {
        let partial = ExperimentConfig::parse("bm25.k1 = 1.2\nseeds = 3\n").unwrap();
        assert_eq!(partial.bm25.k1, 1.2);
        assert_eq!(partial.seeds, vec![3]);
        assert_eq!(partial.families, ExperimentConfig::default().families);
        let twice = format!("{DEFAULT_CONFIG}\nbm25.b = 0.5\n");
        assert!(ExperimentConfig::parse(&twice).is_err());
    }

    #[test]
    fn shared_rules_across_families_are_rejected() {
        let text = format!("{DEFAULT_CONFIG}\nfamily.east.rule = \"ch\" -> \"c\"\n");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("disjoint"), "{err}");
    }

    #[test]
    fn structural_requirements() {
        let one_family: String = DEFAULT_CONFIG
            .lines()
            .filter(|l| !l.starts_with("family.east"))
            .map(|l| format!("{l}\n"))
            .collect::<String>()
            .replace("pairs.train = west-0, east-0", "pairs.train = west-0");
        let missing_seed = "family.north.fraction = 0.5\nfamily.north.siblings = 2\nfamily.north.rule = \"a\" -> \"b\"\n";
        assert!(ExperimentConfig::parse(missing_seed).unwrap_err().to_string().contains("missing `seed`"));
        assert!(ExperimentConfig::parse(&one_family).unwrap_err().to_string().contains("two families"));
        let all_trained = DEFAULT_CONFIG
            .replace("family.west.siblings = 3", "family.west.siblings = 2")
            .replace("family.east.siblings = 3", "family.east.siblings = 2")
            .replace("pairs.train = west-0, east-0", "pairs.train = west-0, west-1, east-0, east-1");
        assert!(ExperimentConfig::parse(&all_trained).unwrap_err().to_string().contains("held out"));
        let unknown_pair = DEFAULT_CONFIG.replace("pairs.train = west-0, east-0", "pairs.train = north-0");
        assert!(ExperimentConfig::parse(&unknown_pair).is_err());
        let lonely = DEFAULT_CONFIG.replace("family.west.siblings = 3", "family.west.siblings = 1");
        assert!(ExperimentConfig::parse(&lonely).is_err());
    }

    #[test]
    fn rulesets_follow_family_order() {
        let cfg = ExperimentConfig::default();
        let ids: Vec<String> = cfg.rulesets().unwrap().into_iter().map(|r| r.ruleset_id).collect();
        assert_eq!(ids, ["west-0", "west-1", "west-2", "east-0", "east-1", "east-2"]);
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.bm25.k1 = 1.2;
        assert_ne!(a.hash(), b.hash());
    }
}
