//! InfoNCE over encoder scores, with hand-derived backpropagation.
//!
//! For a query with candidate scores `s_0` (positive) and `s_1..s_N`:
//!
//! ```text
//! L      = -ln( exp(s_0/τ) / Σ_c exp(s_c/τ) )
//! ∂L/∂s_c = (softmax(s/τ)_c - [c = 0]) / τ
//! ```

use crate::analysis::AnalyzerConfig;
use crate::neural::{dot, maxsim_argmax, EncoderParams, Gradients, OutputGrad, ScoringMode, TextTrace};

use super::TrainError;

/// Loss and its gradient with respect to the candidate scores (positive first).
pub fn infonce_from_scores(scores: &[f64], temperature: f64) -> (f64, Vec<f64>) {
    assert!(!scores.is_empty(), "InfoNCE needs a positive score");
    let scaled: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = (max + total.ln()) - scaled[0];
    let grads = exps
        .iter()
        .enumerate()
        .map(|(c, e)| (e / total - if c == 0 { 1.0 } else { 0.0 }) / temperature)
        .collect();
    (loss, grads)
}

/// One contrastive example: a query text slot and candidate text slots, positive first.
#[derive(Debug, Clone)]
pub(crate) struct Example {
    pub query: usize,
    pub candidates: Vec<usize>,
}

pub(crate) struct BatchResult {
    pub mean_loss: f64,
    pub losses: Vec<f64>,
    pub grads: Option<Gradients>,
}

fn check_mode(mode: ScoringMode) -> Result<(), TrainError> {
    match mode {
        ScoringMode::SingleVector | ScoringMode::MultiVectorMaxSim => Ok(()),
        ScoringMode::Rerank => Err(TrainError::InvalidConfig("loss mode must be single_vector or multi_vector".into())),
    }
}

/// Mean InfoNCE over `examples`, optionally with its parameter gradient.
///
/// Gradients are reduced in example order, then backpropagated text by text in
/// slot order, so the result is bit-reproducible.
pub(crate) fn contrastive_batch(
    params: &EncoderParams,
    analyzer: &AnalyzerConfig,
    texts: &[&str],
    examples: &[Example],
    temperature: f64,
    mode: ScoringMode,
    want_grad: bool,
) -> Result<BatchResult, TrainError> {
    check_mode(mode)?;
    let traces: Vec<TextTrace> = texts
        .iter()
        .map(|t| params.forward(t, analyzer))
        .collect::<Result<_, _>>()?;
    let mut upstream: Vec<OutputGrad> = texts.iter().map(|_| OutputGrad::new()).collect();
    let dim = params.dim();
    let weight = 1.0 / examples.len() as f64;
    let mut losses = Vec::with_capacity(examples.len());

    for ex in examples {
        let q = &traces[ex.query].encoded;
        match mode {
            ScoringMode::SingleVector => {
                let scores: Vec<f64> = ex
                    .candidates
                    .iter()
                    .map(|&c| dot(q.pooled(), traces[c].encoded.pooled()))
                    .collect();
                let (loss, dscores) = infonce_from_scores(&scores, temperature);
                losses.push(loss);
                if want_grad {
                    for (&c, g) in ex.candidates.iter().zip(&dscores) {
                        let g = g * weight;
                        let d = traces[c].encoded.pooled();
                        for (o, x) in upstream[ex.query].pooled_mut(dim).iter_mut().zip(d) {
                            *o += g * x;
                        }
                        for (o, x) in upstream[c].pooled_mut(dim).iter_mut().zip(q.pooled()) {
                            *o += g * x;
                        }
                    }
                }
            }
            _ => {
                let argmaxes: Vec<Vec<usize>> = ex
                    .candidates
                    .iter()
                    .map(|&c| maxsim_argmax(q, &traces[c].encoded))
                    .collect();
                let scores: Vec<f64> = ex
                    .candidates
                    .iter()
                    .zip(&argmaxes)
                    .map(|(&c, best)| {
                        let d = &traces[c].encoded;
                        best.iter().enumerate().map(|(i, &j)| dot(q.token(i), d.token(j))).sum()
                    })
                    .collect();
                let (loss, dscores) = infonce_from_scores(&scores, temperature);
                losses.push(loss);
                if want_grad {
                    let q_len = q.token_count() * dim;
                    for ((&c, best), g) in ex.candidates.iter().zip(&argmaxes).zip(&dscores) {
                        let g = g * weight;
                        let d = &traces[c].encoded;
                        let d_len = d.token_count() * dim;
                        for (i, &j) in best.iter().enumerate() {
                            let qt = upstream[ex.query].tokens_mut(q_len);
                            for (o, x) in qt[i * dim..(i + 1) * dim].iter_mut().zip(d.token(j)) {
                                *o += g * x;
                            }
                            let dt = upstream[c].tokens_mut(d_len);
                            for (o, x) in dt[j * dim..(j + 1) * dim].iter_mut().zip(q.token(i)) {
                                *o += g * x;
                            }
                        }
                    }
                }
            }
        }
    }

    let mean_loss = losses.iter().sum::<f64>() * weight;
    if !mean_loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { epoch: 0, batch: 0 });
    }
    let grads = want_grad.then(|| {
        let mut grads = Gradients::zeros(dim);
        for (trace, up) in traces.iter().zip(&upstream) {
            if up.tokens.is_some() || up.pooled.is_some() {
                params.backward(trace, up, &mut grads);
            }
        }
        grads
    });
    Ok(BatchResult {
        mean_loss,
        losses,
        grads,
    })
}

/// InfoNCE for one query against a positive and explicit negatives, with the
/// gradient with respect to every encoder parameter.
pub fn infonce_loss(
    params: &EncoderParams,
    analyzer: &AnalyzerConfig,
    query: &str,
    positive: &str,
    negatives: &[&str],
    temperature: f64,
    mode: ScoringMode,
) -> Result<(f64, Gradients), TrainError> {
    if negatives.is_empty() {
        return Err(TrainError::InvalidConfig("at least one negative is required".into()));
    }
    if !(temperature > 0.0) {
        return Err(TrainError::InvalidConfig("temperature must be positive".into()));
    }
    let mut texts = vec![query, positive];
    texts.extend_from_slice(negatives);
    let example = Example {
        query: 0,
        candidates: (1..texts.len()).collect(),
    };
    let out = contrastive_batch(params, analyzer, &texts, &[example], temperature, mode, true)?;
    let grads = out.grads.expect("gradient requested");
    if !grads.is_finite() {
        return Err(TrainError::NonFiniteLoss { epoch: 0, batch: 0 });
    }
    Ok((out.mean_loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::SubwordHasherConfig;

    #[test]
    fn uniform_scores_give_ln_n_plus_one() {
        for n in 1..10 {
            let scores = vec![0.37; n + 1];
            let (loss, grads) = infonce_from_scores(&scores, 0.05);
            assert!((loss - ((n + 1) as f64).ln()).abs() < 1e-12);
            assert!(grads.iter().sum::<f64>().abs() < 1e-9);
        }
    }

    #[test]
    fn dominant_positive_drives_loss_to_zero() {
        let (loss, _) = infonce_from_scores(&[1.0, -1.0, -1.0], 0.001);
        assert!(loss < 1e-12);
        assert!(loss >= 0.0);
    }

    #[test]
    fn loss_decreases_in_positive_score() {
        let mut last = f64::INFINITY;
        for i in 0..50 {
            let s = -1.0 + i as f64 * 0.04;
            let (loss, grads) = infonce_from_scores(&[s, 0.2, -0.3, 0.5], 0.1);
            assert!(loss < last);
            assert!(grads[0] < 0.0);
            last = loss;
        }
    }

    #[test]
    fn score_gradient_matches_finite_differences() {
        let scores = [0.3, 0.1, -0.2, 0.25];
        let (_, grads) = infonce_from_scores(&scores, 0.07);
        for c in 0..scores.len() {
            let h = 1e-6;
            let mut up = scores;
            up[c] += h;
            let mut down = scores;
            down[c] -= h;
            let numeric = (infonce_from_scores(&up, 0.07).0 - infonce_from_scores(&down, 0.07).0) / (2.0 * h);
            assert!((numeric - grads[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_candidates_give_ln_n_plus_one_through_encoder() {
        let hasher = SubwordHasherConfig {
            bucket_count: 1 << 10,
            ..Default::default()
        };
        let p = EncoderParams::init(hasher, 8, 1).unwrap();
        let cfg = AnalyzerConfig::default();
        for mode in [ScoringMode::SingleVector, ScoringMode::MultiVectorMaxSim] {
            let (loss, _) = infonce_loss(&p, &cfg, "query words", "same doc", &["same doc"; 4], 0.05, mode).unwrap();
            assert!((loss - 5f64.ln()).abs() < 1e-12);
        }
        assert!(infonce_loss(&p, &cfg, "q", "d", &[], 0.05, ScoringMode::SingleVector).is_err());
        assert!(infonce_loss(&p, &cfg, "q", "d", &["n"], 0.05, ScoringMode::Rerank).is_err());
    }
}
