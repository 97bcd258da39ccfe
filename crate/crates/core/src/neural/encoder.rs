use std::collections::BTreeMap;

use rand::Rng;

use crate::analysis::{analyze, AnalyzerConfig};
use crate::rng::{seeded, Stream};

use super::hashing::{hash_subwords, SubwordHasherConfig};
use super::EncoderError;

const DEGENERATE_NORM: f64 = 1e-12;

/// Trainable parameters of the hashing encoder.
///
/// A token's vector is `normalize(P · mean(E[ids]))` where `E` is the
/// `bucket_count × dim` embedding table and `P` the `dim × dim` projection.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub(crate) hasher: SubwordHasherConfig,
    pub(crate) dim: usize,
    /// Row-major, `bucket_count × dim`.
    pub(crate) embeddings: Vec<f64>,
    /// Row-major, `dim × dim`.
    pub(crate) projection: Vec<f64>,
    pub(crate) seed: u64,
    pub(crate) version: u64,
}

impl EncoderParams {
    pub const DEFAULT_DIM: usize = 64;

    /// Embeddings uniform in ±sqrt(3/dim) (unit expected row norm), projection = identity.
    pub fn init(hasher: SubwordHasherConfig, dim: usize, seed: u64) -> Result<Self, EncoderError> {
        hasher.validate()?;
        if dim < 2 {
            return Err(EncoderError::InvalidConfig(format!("dim {dim} < 2")));
        }
        let mut rng = seeded(seed, Stream::Init);
        let bound = (3.0 / dim as f64).sqrt();
        let embeddings = (0..hasher.bucket_count * dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let mut projection = vec![0.0; dim * dim];
        for i in 0..dim {
            projection[i * dim + i] = 1.0;
        }
        Ok(Self::from_parts(hasher, dim, embeddings, projection, seed))
    }

    pub(crate) fn from_parts(
        hasher: SubwordHasherConfig,
        dim: usize,
        embeddings: Vec<f64>,
        projection: Vec<f64>,
        seed: u64,
    ) -> Self {
        let mut p = Self {
            hasher,
            dim,
            embeddings,
            projection,
            seed,
            version: 0,
        };
        p.version = p.fingerprint();
        p
    }

    /// Content hash over configuration and every parameter bit.
    pub(crate) fn fingerprint(&self) -> u64 {
        let mut h = crate::rng::fnv1a(b"varietyir-encoder");
        let mut mix = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x0000_0100_0000_01b3).rotate_left(29);
        };
        mix(self.hasher.ngram_min as u64);
        mix(self.hasher.ngram_max as u64);
        mix(self.hasher.bucket_count as u64);
        mix(self.hasher.hash_seed);
        mix(self.dim as u64);
        for v in self.embeddings.iter().chain(&self.projection) {
            mix(v.to_bits());
        }
        h
    }

    pub(crate) fn refresh_version(&mut self) {
        self.version = self.fingerprint();
    }

    pub fn hasher(&self) -> &SubwordHasherConfig {
        &self.hasher
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Changes whenever any parameter changes.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn embedding_row(&self, bucket: u32) -> &[f64] {
        let start = bucket as usize * self.dim;
        &self.embeddings[start..start + self.dim]
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    pub fn all_finite(&self) -> bool {
        self.embeddings.iter().chain(&self.projection).all(|v| v.is_finite())
    }

    pub fn encode(&self, text: &str, analyzer: &AnalyzerConfig) -> Result<EncodedText, EncoderError> {
        Ok(self.forward(text, analyzer)?.encoded)
    }

    pub(crate) fn forward(&self, text: &str, analyzer: &AnalyzerConfig) -> Result<TextTrace, EncoderError> {
        let tokens = analyze(text, analyzer);
        if tokens.is_empty() {
            return Err(EncoderError::EmptyText);
        }
        let dim = self.dim;
        let n = tokens.len();
        let mut traces = Vec::with_capacity(n);
        let mut token_vectors = vec![0.0; n * dim];
        let mut pooled_raw = vec![0.0; dim];
        for (t, token) in tokens.iter().enumerate() {
            let ids = hash_subwords(token, &self.hasher)?;
            let mut mean = vec![0.0; dim];
            for &id in &ids {
                for (m, e) in mean.iter_mut().zip(self.embedding_row(id)) {
                    *m += e;
                }
            }
            let inv = 1.0 / ids.len() as f64;
            mean.iter_mut().for_each(|m| *m *= inv);
            let projected = matvec(&self.projection, &mean, dim);
            let norm = l2(&projected);
            if !(norm >= DEGENERATE_NORM) {
                return Err(EncoderError::DegenerateEmbedding);
            }
            let out = &mut token_vectors[t * dim..(t + 1) * dim];
            for (o, p) in out.iter_mut().zip(&projected) {
                *o = p / norm;
            }
            for (acc, p) in pooled_raw.iter_mut().zip(&projected) {
                *acc += p;
            }
            traces.push(TokenTrace {
                ids,
                mean,
                norm,
            });
        }
        pooled_raw.iter_mut().for_each(|p| *p /= n as f64);
        let pooled_norm = l2(&pooled_raw);
        if !(pooled_norm >= DEGENERATE_NORM) {
            return Err(EncoderError::DegenerateEmbedding);
        }
        let pooled = pooled_raw.iter().map(|p| p / pooled_norm).collect();
        Ok(TextTrace {
            tokens: traces,
            pooled_norm,
            encoded: EncodedText {
                dim,
                token_vectors,
                pooled,
                params_version: self.version,
            },
        })
    }
}

pub(crate) fn matvec(m: &[f64], v: &[f64], dim: usize) -> Vec<f64> {
    m.chunks_exact(dim).map(|row| dot(row, v)).collect()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Unit-norm token vectors plus a unit-norm pooled vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedText {
    pub(crate) dim: usize,
    /// Row-major, one unit vector per analyzer token.
    pub(crate) token_vectors: Vec<f64>,
    pub(crate) pooled: Vec<f64>,
    pub(crate) params_version: u64,
}

impl EncodedText {
    /// Builds an encoding from raw vectors, normalizing each.
    pub fn from_vectors(tokens: &[Vec<f64>], pooled: &[f64], params_version: u64) -> Result<Self, EncoderError> {
        let dim = pooled.len();
        if tokens.is_empty() {
            return Err(EncoderError::EmptyText);
        }
        let mut token_vectors = Vec::with_capacity(tokens.len() * dim);
        for t in tokens {
            if t.len() != dim {
                return Err(EncoderError::DimensionMismatch {
                    left: dim,
                    right: t.len(),
                });
            }
            token_vectors.extend(unit(t)?);
        }
        Ok(Self {
            dim,
            token_vectors,
            pooled: unit(pooled)?,
            params_version,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token_count(&self) -> usize {
        self.token_vectors.len() / self.dim
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.token_vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn tokens(&self) -> std::slice::ChunksExact<'_, f64> {
        self.token_vectors.chunks_exact(self.dim)
    }

    pub fn pooled(&self) -> &[f64] {
        &self.pooled
    }

    pub fn params_version(&self) -> u64 {
        self.params_version
    }
}

fn unit(v: &[f64]) -> Result<Vec<f64>, EncoderError> {
    let n = l2(v);
    if !(n >= DEGENERATE_NORM) {
        return Err(EncoderError::DegenerateEmbedding);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub(crate) struct TokenTrace {
    pub ids: Vec<u32>,
    pub mean: Vec<f64>,
    pub norm: f64,
}

/// Intermediate values of one forward pass, kept for backpropagation.
pub(crate) struct TextTrace {
    pub tokens: Vec<TokenTrace>,
    pub pooled_norm: f64,
    pub encoded: EncodedText,
}

/// Gradient of a scalar with respect to [`EncoderParams`]; embedding rows are sparse.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub dim: usize,
    pub embeddings: BTreeMap<u32, Vec<f64>>,
    pub projection: Vec<f64>,
}

impl Gradients {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            embeddings: BTreeMap::new(),
            projection: vec![0.0; dim * dim],
        }
    }

    pub fn embedding(&self, bucket: u32, component: usize) -> f64 {
        self.embeddings.get(&bucket).map_or(0.0, |row| row[component])
    }

    pub fn l2_norm(&self) -> f64 {
        let emb: f64 = self.embeddings.values().flatten().map(|g| g * g).sum();
        let proj: f64 = self.projection.iter().map(|g| g * g).sum();
        (emb + proj).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.projection.iter().chain(self.embeddings.values().flatten()).all(|g| g.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        self.projection.iter_mut().for_each(|g| *g *= factor);
        self.embeddings.values_mut().flatten().for_each(|g| *g *= factor);
    }
}

/// Upstream gradients with respect to one encoded text.
pub(crate) struct OutputGrad {
    pub tokens: Option<Vec<f64>>,
    pub pooled: Option<Vec<f64>>,
}

impl OutputGrad {
    pub fn new() -> Self {
        Self {
            tokens: None,
            pooled: None,
        }
    }

    pub fn tokens_mut(&mut self, len: usize) -> &mut [f64] {
        self.tokens.get_or_insert_with(|| vec![0.0; len])
    }

    pub fn pooled_mut(&mut self, dim: usize) -> &mut [f64] {
        self.pooled.get_or_insert_with(|| vec![0.0; dim])
    }
}

/// d(unit)/d(raw) applied to `upstream`: (I - û ûᵀ) upstream / |raw|.
fn normalize_backward(unit: &[f64], norm: f64, upstream: &[f64], out: &mut [f64]) {
    let along = dot(unit, upstream);
    for ((o, u), g) in out.iter_mut().zip(unit).zip(upstream) {
        *o += (g - u * along) / norm;
    }
}

impl EncoderParams {
    /// Accumulates the parameter gradient implied by `upstream` into `grads`.
    pub(crate) fn backward(&self, trace: &TextTrace, upstream: &OutputGrad, grads: &mut Gradients) {
        let dim = self.dim;
        let n = trace.tokens.len();
        let enc = &trace.encoded;
        // gradient with respect to each token's projected (pre-normalization) vector
        let mut d_projected = vec![0.0; n * dim];
        if let Some(dp) = &upstream.pooled {
            let mut d_raw = vec![0.0; dim];
            normalize_backward(&enc.pooled, trace.pooled_norm, dp, &mut d_raw);
            let share = 1.0 / n as f64;
            for t in 0..n {
                for (d, r) in d_projected[t * dim..(t + 1) * dim].iter_mut().zip(&d_raw) {
                    *d += r * share;
                }
            }
        }
        if let Some(dt) = &upstream.tokens {
            for (t, tok) in trace.tokens.iter().enumerate() {
                let range = t * dim..(t + 1) * dim;
                normalize_backward(&enc.token_vectors[range.clone()], tok.norm, &dt[range.clone()], &mut d_projected[range]);
            }
        }
        for (t, tok) in trace.tokens.iter().enumerate() {
            let du = &d_projected[t * dim..(t + 1) * dim];
            if du.iter().all(|g| *g == 0.0) {
                continue;
            }
            // projected = P · mean
            for (i, g) in du.iter().enumerate() {
                let row = &mut grads.projection[i * dim..(i + 1) * dim];
                for (r, m) in row.iter_mut().zip(&tok.mean) {
                    *r += g * m;
                }
            }
            let mut d_mean = vec![0.0; dim];
            for (i, g) in du.iter().enumerate() {
                let prow = &self.projection[i * dim..(i + 1) * dim];
                for (dm, p) in d_mean.iter_mut().zip(prow) {
                    *dm += g * p;
                }
            }
            let inv = 1.0 / tok.ids.len() as f64;
            for &id in &tok.ids {
                let row = grads.embeddings.entry(id).or_insert_with(|| vec![0.0; dim]);
                for (r, d) in row.iter_mut().zip(&d_mean) {
                    *r += d * inv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderParams {
        let hasher = SubwordHasherConfig {
            bucket_count: 1 << 10,
            ..Default::default()
        };
        EncoderParams::init(hasher, 8, 42).unwrap()
    }

    #[test]
    fn encoding_is_deterministic_and_unit_norm() {
        let p = small();
        let cfg = AnalyzerConfig::default();
        let a = p.encode("the quick brown fox", &cfg).unwrap();
        let b = p.encode("the quick brown fox", &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.token_count(), 4);
        for t in a.tokens() {
            assert!((l2(t) - 1.0).abs() < 1e-6);
        }
        assert!((l2(a.pooled()) - 1.0).abs() < 1e-6);
        assert_eq!(a.params_version(), p.version());
    }

    #[test]
    fn empty_text_rejected() {
        let p = small();
        assert!(matches!(p.encode("", &AnalyzerConfig::default()), Err(EncoderError::EmptyText)));
        assert!(matches!(p.encode(" !? ", &AnalyzerConfig::default()), Err(EncoderError::EmptyText)));
    }

    #[test]
    fn single_token_pooled_equals_token() {
        let p = small();
        let e = p.encode("occitan", &AnalyzerConfig::default()).unwrap();
        for (a, b) in e.pooled().iter().zip(e.token(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_projection_detected() {
        let mut p = small();
        p.projection.iter_mut().for_each(|v| *v = 0.0);
        assert!(matches!(
            p.encode("word", &AnalyzerConfig::default()),
            Err(EncoderError::DegenerateEmbedding)
        ));
    }

    #[test]
    fn init_is_seeded() {
        let a = small();
        let b = small();
        assert_eq!(a, b);
        let c = EncoderParams::init(*a.hasher(), 8, 43).unwrap();
        assert_ne!(a.version(), c.version());
        assert!(matches!(
            EncoderParams::init(*a.hasher(), 1, 1),
            Err(EncoderError::InvalidConfig(_))
        ));
    }

    #[test]
    fn version_tracks_content() {
        let mut p = small();
        let v = p.version();
        p.embeddings[3] += 1e-9;
        p.refresh_version();
        assert_ne!(v, p.version());
    }
}
