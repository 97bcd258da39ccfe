//! Tokenization shared by the lexical index and the neural encoder.

use unicode_normalization::UnicodeNormalization;

use crate::transducer::is_word_char;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    #[default]
    None,
    /// NFKC.
    CompatibilityComposed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CjkMode {
    /// Each Han, Kana or Hangul codepoint is a token of its own.
    #[default]
    CodepointUnigram,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnalyzerConfig {
    pub lowercase: bool,
    pub normalization: Normalization,
    pub cjk_mode: CjkMode,
}

impl Default for AnalyzerConfig {
    fn default() -> Self {
        Self {
            lowercase: true,
            normalization: Normalization::None,
            cjk_mode: CjkMode::CodepointUnigram,
        }
    }
}

impl AnalyzerConfig {
    /// Compact form used in index snapshots and provenance, e.g. `lc=1,norm=none,cjk=unigram`.
    pub fn describe(&self) -> String {
        format!(
            "lc={},norm={},cjk={}",
            u8::from(self.lowercase),
            match self.normalization {
                Normalization::None => "none",
                Normalization::CompatibilityComposed => "nfkc",
            },
            match self.cjk_mode {
                CjkMode::CodepointUnigram => "unigram",
                CjkMode::Off => "off",
            }
        )
    }

    pub fn parse_description(s: &str) -> Option<Self> {
        let mut cfg = AnalyzerConfig::default();
        let mut seen = 0;
        for part in s.split(',') {
            let (k, v) = part.split_once('=')?;
            match (k, v) {
                ("lc", "1") => cfg.lowercase = true,
                ("lc", "0") => cfg.lowercase = false,
                ("norm", "none") => cfg.normalization = Normalization::None,
                ("norm", "nfkc") => cfg.normalization = Normalization::CompatibilityComposed,
                ("cjk", "unigram") => cfg.cjk_mode = CjkMode::CodepointUnigram,
                ("cjk", "off") => cfg.cjk_mode = CjkMode::Off,
                _ => return None,
            }
            seen += 1;
        }
        (seen == 3).then_some(cfg)
    }
}

pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF       // hiragana, katakana
        | 0x31F0..=0x31FF     // katakana phonetic extensions
        | 0x3400..=0x4DBF     // han extension A
        | 0x4E00..=0x9FFF     // han unified
        | 0xF900..=0xFAFF     // han compatibility
        | 0xFF66..=0xFF9F     // halfwidth katakana
        | 0x1100..=0x11FF     // hangul jamo
        | 0x3130..=0x318F     // hangul compatibility jamo
        | 0xAC00..=0xD7AF     // hangul syllables
        | 0x20000..=0x2FA1F   // han extensions B+
    )
}

/// Splits text into tokens on non-alphanumeric codepoints.
pub fn analyze(text: &str, cfg: &AnalyzerConfig) -> Vec<String> {
    let normalized: String = match cfg.normalization {
        Normalization::None => text.to_string(),
        Normalization::CompatibilityComposed => text.nfkc().collect(),
    };
    let mut tokens = Vec::new();
    let mut current = String::new();
    let push_char = |current: &mut String, c: char| {
        if cfg.lowercase {
            current.extend(c.to_lowercase());
        } else {
            current.push(c);
        }
    };
    for c in normalized.chars() {
        if !is_word_char(c) {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if cfg.cjk_mode == CjkMode::CodepointUnigram && is_cjk(c) {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            let mut single = String::new();
            push_char(&mut single, c);
            tokens.push(single);
        } else {
            push_char(&mut current, c);
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}
