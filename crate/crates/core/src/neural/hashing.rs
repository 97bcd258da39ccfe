//! Character n-gram hashing in the fastText style.
//!
//! A token `w` is wrapped as `<w>` and every window of `ngram_min..=ngram_max`
//! characters is hashed with seeded 64-bit FNV-1a into `bucket_count` buckets.

use crate::rng::{fnv1a_extend, fnv_offset};

use super::EncoderError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubwordHasherConfig {
    pub ngram_min: usize,
    pub ngram_max: usize,
    /// Power of two.
    pub bucket_count: usize,
    /// Mixed into the FNV offset basis.
    pub hash_seed: u64,
}

impl Default for SubwordHasherConfig {
    fn default() -> Self {
        Self {
            ngram_min: 3,
            ngram_max: 5,
            bucket_count: 1 << 15,
            hash_seed: 0,
        }
    }
}

impl SubwordHasherConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.ngram_min == 0 || self.ngram_min > self.ngram_max {
            return Err(EncoderError::InvalidConfig(format!(
                "n-gram range {}..={} is empty",
                self.ngram_min, self.ngram_max
            )));
        }
        if self.bucket_count < 2 || !self.bucket_count.is_power_of_two() || self.bucket_count > u32::MAX as usize {
            return Err(EncoderError::InvalidConfig(format!(
                "bucket count {} must be a power of two >= 2",
                self.bucket_count
            )));
        }
        Ok(())
    }

    pub fn hash_ngram(&self, chars: &[char]) -> u32 {
        let mut state = fnv_offset() ^ self.hash_seed;
        let mut buf = [0u8; 4];
        for c in chars {
            state = fnv1a_extend(state, c.encode_utf8(&mut buf).as_bytes());
        }
        (state & (self.bucket_count as u64 - 1)) as u32
    }
}

/// The bracketed n-grams of `token`, in window order.
pub fn subword_ngrams(token: &str, cfg: &SubwordHasherConfig) -> Vec<String> {
    let chars = bracketed(token);
    windows(&chars, cfg).map(|w| w.iter().collect()).collect()
}

fn bracketed(token: &str) -> Vec<char> {
    let mut chars = Vec::with_capacity(token.len() + 2);
    chars.push('<');
    chars.extend(token.chars());
    chars.push('>');
    chars
}

fn windows<'a>(chars: &'a [char], cfg: &SubwordHasherConfig) -> impl Iterator<Item = &'a [char]> + 'a {
    let (lo, hi) = (cfg.ngram_min, cfg.ngram_max);
    (lo..=hi).flat_map(move |n| chars.windows(n))
}

/// Bucket ids of every n-gram of `<token>`; a multiset in window order.
///
/// A token too short to yield any window hashes as the whole bracketed form.
pub fn hash_subwords(token: &str, cfg: &SubwordHasherConfig) -> Result<Vec<u32>, EncoderError> {
    if token.is_empty() {
        return Err(EncoderError::EmptyToken);
    }
    let chars = bracketed(token);
    let mut ids: Vec<u32> = windows(&chars, cfg).map(|w| cfg.hash_ngram(w)).collect();
    if ids.is_empty() {
        ids.push(cfg.hash_ngram(&chars));
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn cat_has_six_ngrams() {
        let cfg = SubwordHasherConfig::default();
        let grams = subword_ngrams("cat", &cfg);
        assert_eq!(grams, ["<ca", "cat", "at>", "<cat", "cat>", "<cat>"]);
        let ids = hash_subwords("cat", &cfg).unwrap();
        assert_eq!(ids.len(), 6);
        assert_eq!(ids, hash_subwords("cat", &cfg).unwrap());
        let expected: Vec<u32> = grams
            .iter()
            .map(|g| (crate::rng::fnv1a(g.as_bytes()) & 0x7fff) as u32)
            .collect();
        assert_eq!(ids, expected);
    }

    #[test]
    fn single_letter_token() {
        let cfg = SubwordHasherConfig::default();
        assert_eq!(subword_ngrams("a", &cfg), ["<a>"]);
        assert_eq!(hash_subwords("a", &cfg).unwrap().len(), 1);
    }

    #[test]
    fn short_token_falls_back_to_whole_form() {
        let cfg = SubwordHasherConfig {
            ngram_min: 4,
            ngram_max: 6,
            ..Default::default()
        };
        assert_eq!(hash_subwords("a", &cfg).unwrap().len(), 1);
    }

    #[test]
    fn empty_token_rejected() {
        assert!(matches!(
            hash_subwords("", &SubwordHasherConfig::default()),
            Err(EncoderError::EmptyToken)
        ));
    }

    #[test]
    fn config_validation() {
        let bad_range = SubwordHasherConfig {
            ngram_min: 5,
            ngram_max: 3,
            ..Default::default()
        };
        assert!(bad_range.validate().is_err());
        let bad_buckets = SubwordHasherConfig {
            bucket_count: 1000,
            ..Default::default()
        };
        assert!(bad_buckets.validate().is_err());
        assert!(SubwordHasherConfig::default().validate().is_ok());
    }

    #[test]
    fn one_edit_tokens_share_an_ngram() {
        // exhaustive over a small alphabet: substitutions in tokens of length >= ngram_min + 1
        let cfg = SubwordHasherConfig::default();
        let alphabet = ['a', 'b', 'c'];
        for len in cfg.ngram_min + 1..=cfg.ngram_min + 2 {
            let total = alphabet.len().pow(len as u32);
            for code in 0..total {
                let mut c = code;
                let word: Vec<char> = (0..len)
                    .map(|_| {
                        let ch = alphabet[c % 3];
                        c /= 3;
                        ch
                    })
                    .collect();
                let base: String = word.iter().collect();
                let base_grams: HashSet<String> = subword_ngrams(&base, &cfg).into_iter().collect();
                for pos in 0..len {
                    for &sub in &alphabet {
                        if sub == word[pos] {
                            continue;
                        }
                        let mut other = word.clone();
                        other[pos] = sub;
                        let other: String = other.iter().collect();
                        let shared = subword_ngrams(&other, &cfg).iter().any(|g| base_grams.contains(g));
                        assert!(shared, "{base} / {other}");
                    }
                }
            }
        }
    }
}
