use std::collections::BTreeSet;

use rand::seq::index;

use crate::analysis::{analyze, AnalyzerConfig};
use crate::corpus::DocumentCollection;
use crate::neural::{hash_subwords, EncoderParams, Gradients, ScoringMode};
use crate::rng::{seeded, Stream};

use super::loss::contrastive_batch;
use super::{assemble, TrainError, TrainingTriplet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Coordinate {
    Embedding { bucket: u32, component: usize },
    Projection { row: usize, col: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub coordinates: usize,
    /// Coordinate with the largest error, with its analytic and numeric values.
    pub worst: Option<(Coordinate, f64, f64)>,
    /// Every checked coordinate with its analytic and numeric values.
    pub entries: Vec<(Coordinate, f64, f64)>,
}

impl GradientCheck {
    pub fn max_absolute_error(&self) -> f64 {
        self.entries.iter().map(|(_, a, n)| (a - n).abs()).fold(0.0, f64::max)
    }
}

/// Magnitudes below this are rounding residue of an exactly-zero gradient.
pub const ZERO_GRADIENT: f64 = 1e-10;

/// `|a - n| / max(|a|, |n|)`, defined as 0 when both sides are zero
/// (below [`ZERO_GRADIENT`] in magnitude).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < ZERO_GRADIENT {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn slot(params: &mut EncoderParams, c: Coordinate) -> &mut f64 {
    let dim = params.dim;
    match c {
        Coordinate::Embedding { bucket, component } => &mut params.embeddings[bucket as usize * dim + component],
        Coordinate::Projection { row, col } => &mut params.projection[row * dim + col],
    }
}

fn analytic(grads: &Gradients, c: Coordinate) -> f64 {
    match c {
        Coordinate::Embedding { bucket, component } => grads.embedding(bucket, component),
        Coordinate::Projection { row, col } => grads.projection[row * grads.dim + col],
    }
}

fn validate_eps(epsilon: f64) -> Result<(), TrainError> {
    if (1e-6..=1e-3).contains(&epsilon) {
        Ok(())
    } else {
        Err(TrainError::InvalidConfig(format!("epsilon {epsilon} outside [1e-6, 1e-3]")))
    }
}

/// Compares the analytic batch-loss gradient with central differences at the
/// given coordinates. The loss is the same in-batch objective `train` optimizes.
pub fn gradient_check_at(
    params: &EncoderParams,
    analyzer: &AnalyzerConfig,
    triplets: &[TrainingTriplet],
    coll: &DocumentCollection,
    temperature: f64,
    mode: ScoringMode,
    epsilon: f64,
    coords: &[Coordinate],
) -> Result<GradientCheck, TrainError> {
    validate_eps(epsilon)?;
    let group: Vec<&TrainingTriplet> = triplets.iter().collect();
    let (texts, examples) = assemble(&group, coll)?;
    let base = contrastive_batch(params, analyzer, &texts, &examples, temperature, mode, true)?;
    let grads = base.grads.expect("gradient requested");

    let mut work = params.clone();
    let mut result = GradientCheck {
        max_relative_error: 0.0,
        coordinates: coords.len(),
        worst: None,
        entries: Vec::with_capacity(coords.len()),
    };
    for &c in coords {
        let x = *slot(&mut work, c);
        *slot(&mut work, c) = x + epsilon;
        let up = contrastive_batch(&work, analyzer, &texts, &examples, temperature, mode, false)?.mean_loss;
        *slot(&mut work, c) = x - epsilon;
        let down = contrastive_batch(&work, analyzer, &texts, &examples, temperature, mode, false)?.mean_loss;
        *slot(&mut work, c) = x;
        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic(&grads, c);
        let err = relative_error(a, numeric);
        result.entries.push((c, a, numeric));
        if result.worst.is_none() || err > result.max_relative_error {
            result.max_relative_error = err;
            result.worst = Some((c, a, numeric));
        }
    }
    Ok(result)
}

/// Samples `coordinates` parameters that the triplets actually touch (embedding
/// rows of their subwords plus the projection) and runs [`gradient_check_at`].
pub fn gradient_check(
    params: &EncoderParams,
    analyzer: &AnalyzerConfig,
    triplets: &[TrainingTriplet],
    coll: &DocumentCollection,
    temperature: f64,
    mode: ScoringMode,
    epsilon: f64,
    coordinates: usize,
    seed: u64,
) -> Result<GradientCheck, TrainError> {
    validate_eps(epsilon)?;
    let group: Vec<&TrainingTriplet> = triplets.iter().collect();
    let (texts, _) = assemble(&group, coll)?;
    let mut buckets = BTreeSet::new();
    for text in &texts {
        for token in analyze(text, analyzer) {
            buckets.extend(hash_subwords(&token, params.hasher())?);
        }
    }
    let dim = params.dim();
    let buckets: Vec<u32> = buckets.into_iter().collect();
    let emb_count = buckets.len() * dim;
    let total = emb_count + dim * dim;
    let mut rng = seeded(seed, Stream::GradientCheck);
    let mut picks: Vec<usize> = index::sample(&mut rng, total, coordinates.min(total)).into_vec();
    picks.sort_unstable();
    let coords: Vec<Coordinate> = picks
        .into_iter()
        .map(|i| {
            if i < emb_count {
                Coordinate::Embedding {
                    bucket: buckets[i / dim],
                    component: i % dim,
                }
            } else {
                let j = i - emb_count;
                Coordinate::Projection { row: j / dim, col: j % dim }
            }
        })
        .collect();
    gradient_check_at(params, analyzer, triplets, coll, temperature, mode, epsilon, &coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Document, Query};
    use crate::neural::SubwordHasherConfig;

    fn fixture() -> (EncoderParams, DocumentCollection, Vec<TrainingTriplet>) {
        let hasher = SubwordHasherConfig {
            bucket_count: 1 << 12,
            ..Default::default()
        };
        let params = EncoderParams::init(hasher, 8, 11).unwrap();
        let coll = DocumentCollection::from_documents(vec![
            Document::new("a", "northern river crossing at dawn"),
            Document::new("b", "market stalls near the old bridge"),
            Document::new("c", "a lamp in the garden window"),
            Document::new("d", "clouds over the stone harbour"),
        ])
        .unwrap();
        let t = vec![
            TrainingTriplet {
                query: Query::new("q1", "rivor dawnish"),
                positive_doc_id: "a".into(),
                negative_doc_ids: vec!["c".into(), "d".into()],
            },
            TrainingTriplet {
                query: Query::new("q2", "oldish brigde markit"),
                positive_doc_id: "b".into(),
                negative_doc_ids: vec!["d".into()],
            },
        ];
        (params, coll, t)
    }

    #[test]
    fn sampled_coordinates_agree() {
        let (p, coll, t) = fixture();
        for mode in [ScoringMode::SingleVector, ScoringMode::MultiVectorMaxSim] {
            let r = gradient_check(&p, &AnalyzerConfig::default(), &t, &coll, 1.0, mode, 1e-4, 60, 5).unwrap();
            assert_eq!(r.coordinates, 60);
            assert!(r.max_relative_error < 1e-5, "{mode}: {:?}", r.worst);
            // at a sharp temperature some coordinates sit below finite-difference resolution
            let r = gradient_check(&p, &AnalyzerConfig::default(), &t, &coll, 0.05, mode, 1e-4, 60, 5).unwrap();
            for (c, a, n) in r.entries {
                assert!(relative_error(a, n) < 1e-5 || (a - n).abs() < 1e-10, "{c:?} {a} {n}");
            }
        }
    }

    #[test]
    fn unused_bucket_has_zero_error() {
        let (p, coll, t) = fixture();
        let cfg = AnalyzerConfig::default();
        let group: Vec<&TrainingTriplet> = t.iter().collect();
        let (texts, _) = assemble(&group, &coll).unwrap();
        let used: BTreeSet<u32> = texts
            .iter()
            .flat_map(|text| analyze(text, &cfg))
            .flat_map(|tok| hash_subwords(&tok, p.hasher()).unwrap())
            .collect();
        let bucket = (0..4096u32).find(|b| !used.contains(b)).unwrap();
        let c = Coordinate::Embedding { bucket, component: 3 };
        let r = gradient_check_at(&p, &cfg, &t, &coll, 0.05, ScoringMode::SingleVector, 1e-4, &[c]).unwrap();
        let (_, a, n) = r.worst.unwrap();
        assert_eq!((a, n, r.max_relative_error), (0.0, 0.0, 0.0));
    }

    #[test]
    fn epsilon_range_is_enforced() {
        let (p, coll, t) = fixture();
        let cfg = AnalyzerConfig::default();
        for eps in [1e-7, 1e-2] {
            assert!(gradient_check(&p, &cfg, &t, &coll, 0.05, ScoringMode::SingleVector, eps, 5, 0).is_err());
        }
    }

    #[test]
    fn halving_epsilon_does_not_blow_up_error() {
        let (p, coll, t) = fixture();
        let cfg = AnalyzerConfig::default();
        let a = gradient_check(&p, &cfg, &t, &coll, 0.05, ScoringMode::SingleVector, 1e-4, 40, 9).unwrap();
        let b = gradient_check(&p, &cfg, &t, &coll, 0.05, ScoringMode::SingleVector, 5e-5, 40, 9).unwrap();
        assert!(b.max_relative_error <= 4.0 * a.max_relative_error.max(1e-12));
    }
}
