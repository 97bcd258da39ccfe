//! Rule-based variety transducer.
//!
//! A [`VarietyRuleSet`] rewrites text from a high-resource variety into a
//! related low-resource one in two stages: whole-word lexicon substitution,
//! then a single left-to-right pass of ordered string rewrite rules. At each
//! cursor position the longest applicable left-hand side wins, earlier rules
//! win ties, and the cursor jumps past the matched text, so rewriting always
//! terminates.
//!
//! Rule files are line based:
//!
//! ```text
//! # comment
//! ruleset west-0 family west
//! rule "ch" -> "tx"
//! rule "e" -> "a" final
//! lex hond -> hund
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use crate::corpus::{Query, QuerySet};
use crate::rng::{seeded, Stream};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TransducerError {
    #[error("line {line}: {message}")]
    SyntaxError { line: usize, message: String },
    #[error("line {line}: rule has an empty left-hand side")]
    EmptyLhs { line: usize },
    #[error("line {line}: rule `{lhs}` rewrites to itself")]
    NoOpRule { line: usize, lhs: String },
    #[error("line {line}: lexicon key `{key}` already defined")]
    DuplicateLexiconKey { line: usize, key: String },
    #[error("family `{family_id}` has an empty rule pool")]
    EmptyPool { family_id: String },
    #[error("family `{family_id}`: {message}")]
    InvalidFamily { family_id: String, message: String },
}

/// Where a rule may fire relative to word boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum RuleScope {
    #[default]
    Anywhere,
    WordInitial,
    WordFinal,
    WholeWord,
}

impl RuleScope {
    fn keyword(self) -> Option<&'static str> {
        match self {
            RuleScope::Anywhere => None,
            RuleScope::WordInitial => Some("initial"),
            RuleScope::WordFinal => Some("final"),
            RuleScope::WholeWord => Some("word"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RewriteRule {
    lhs: String,
    rhs: String,
    scope: RuleScope,
}

impl RewriteRule {
    pub fn new(lhs: impl Into<String>, rhs: impl Into<String>, scope: RuleScope) -> Result<Self, TransducerError> {
        Self::at_line(lhs.into(), rhs.into(), scope, 0)
    }

    fn at_line(lhs: String, rhs: String, scope: RuleScope, line: usize) -> Result<Self, TransducerError> {
        if lhs.is_empty() {
            return Err(TransducerError::EmptyLhs { line });
        }
        if scope == RuleScope::Anywhere && lhs == rhs {
            return Err(TransducerError::NoOpRule { line, lhs });
        }
        Ok(Self { lhs, rhs, scope })
    }

    pub fn lhs(&self) -> &str {
        &self.lhs
    }

    pub fn rhs(&self) -> &str {
        &self.rhs
    }

    pub fn scope(&self) -> RuleScope {
        self.scope
    }
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

impl fmt::Display for RewriteRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rule {} -> {}", quote(&self.lhs), quote(&self.rhs))?;
        if let Some(kw) = self.scope.keyword() {
            write!(f, " {kw}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarietyRuleSet {
    pub ruleset_id: String,
    pub family_id: String,
    rules: Vec<RewriteRule>,
    lexicon: BTreeMap<String, String>,
}

impl VarietyRuleSet {
    pub fn new(ruleset_id: impl Into<String>, family_id: impl Into<String>, rules: Vec<RewriteRule>) -> Self {
        Self {
            ruleset_id: ruleset_id.into(),
            family_id: family_id.into(),
            rules,
            lexicon: BTreeMap::new(),
        }
    }

    /// The identity transducer.
    pub fn empty(ruleset_id: impl Into<String>) -> Self {
        Self::new(ruleset_id, "none", Vec::new())
    }

    pub fn with_lexicon(mut self, lexicon: BTreeMap<String, String>) -> Self {
        self.lexicon = lexicon;
        self
    }

    pub fn rules(&self) -> &[RewriteRule] {
        &self.rules
    }

    pub fn lexicon(&self) -> &BTreeMap<String, String> {
        &self.lexicon
    }

    pub fn is_identity(&self) -> bool {
        self.rules.is_empty() && self.lexicon.iter().all(|(k, v)| k == v)
    }

    pub fn max_rhs_chars(&self) -> usize {
        self.rules.iter().map(|r| r.rhs.chars().count()).max().unwrap_or(0)
    }
}

impl fmt::Display for VarietyRuleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ruleset {} family {}", self.ruleset_id, self.family_id)?;
        for rule in &self.rules {
            writeln!(f, "{rule}")?;
        }
        for (k, v) in &self.lexicon {
            writeln!(f, "lex {k} -> {v}")?;
        }
        Ok(())
    }
}

/// Reads a double-quoted string starting at `s[0] == '"'`, returning the
/// unescaped contents and the remainder after the closing quote.
fn take_quoted(s: &str, line: usize) -> Result<(String, &str), TransducerError> {
    let syntax = |message: &str| TransducerError::SyntaxError {
        line,
        message: message.to_string(),
    };
    let mut chars = s.char_indices();
    match chars.next() {
        Some((_, '"')) => {}
        _ => return Err(syntax("expected a quoted string")),
    }
    let mut out = String::new();
    let mut escaped = false;
    for (i, c) in chars {
        if escaped {
            out.push(c);
            escaped = false;
        } else if c == '\\' {
            escaped = true;
        } else if c == '"' {
            return Ok((out, &s[i + 1..]));
        } else {
            out.push(c);
        }
    }
    Err(syntax("unterminated string"))
}

fn parse_rule_line(rest: &str, line: usize) -> Result<RewriteRule, TransducerError> {
    let syntax = |message: String| TransducerError::SyntaxError { line, message };
    let (lhs, rest) = take_quoted(rest.trim_start(), line)?;
    let rest = rest
        .trim_start()
        .strip_prefix("->")
        .ok_or_else(|| syntax("expected `->` after left-hand side".into()))?;
    let (rhs, rest) = take_quoted(rest.trim_start(), line)?;
    let scope = match rest.trim() {
        "" => RuleScope::Anywhere,
        "initial" => RuleScope::WordInitial,
        "final" => RuleScope::WordFinal,
        "word" => RuleScope::WholeWord,
        other => return Err(syntax(format!("unknown scope `{other}`"))),
    };
    RewriteRule::at_line(lhs, rhs, scope, line)
}

/// Parses one rule in rule-file syntax without the `rule` keyword: `"lhs" -> "rhs" [scope]`.
pub fn parse_rule(text: &str) -> Result<RewriteRule, TransducerError> {
    parse_rule_line(text, 1)
}

/// Parses rule-file contents. Errors carry 1-based line numbers.
pub fn parse_ruleset(text: &str) -> Result<VarietyRuleSet, TransducerError> {
    let mut header: Option<(String, String)> = None;
    let mut rules = Vec::new();
    let mut lexicon = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let (keyword, rest) = content.split_once(char::is_whitespace).unwrap_or((content, ""));
        match keyword {
            "ruleset" => {
                if header.is_some() {
                    return Err(TransducerError::SyntaxError {
                        line,
                        message: "duplicate ruleset header".into(),
                    });
                }
                let parts: Vec<&str> = rest.split_whitespace().collect();
                match parts.as_slice() {
                    [id, "family", fam] => header = Some((id.to_string(), fam.to_string())),
                    _ => {
                        return Err(TransducerError::SyntaxError {
                            line,
                            message: "expected `ruleset <id> family <family_id>`".into(),
                        })
                    }
                }
            }
            "rule" | "lex" if header.is_none() => {
                return Err(TransducerError::SyntaxError {
                    line,
                    message: "`ruleset` header must come first".into(),
                })
            }
            "rule" => rules.push(parse_rule_line(rest, line)?),
            "lex" => {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                let [from, "->", to] = parts.as_slice() else {
                    return Err(TransducerError::SyntaxError {
                        line,
                        message: "expected `lex <word> -> <word>`".into(),
                    });
                };
                if lexicon.insert(from.to_string(), to.to_string()).is_some() {
                    return Err(TransducerError::DuplicateLexiconKey {
                        line,
                        key: from.to_string(),
                    });
                }
            }
            other => {
                return Err(TransducerError::SyntaxError {
                    line,
                    message: format!("unknown directive `{other}`"),
                })
            }
        }
    }
    let (ruleset_id, family_id) = header.ok_or(TransducerError::SyntaxError {
        line: 0,
        message: "missing `ruleset` header".into(),
    })?;
    Ok(VarietyRuleSet {
        ruleset_id,
        family_id,
        rules,
        lexicon,
    })
}

/// Word characters are alphanumeric; everything else delimits.
pub(crate) fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

fn apply_lexicon(text: &str, lexicon: &BTreeMap<String, String>) -> String {
    if lexicon.is_empty() {
        return text.to_string();
    }
    let mut out = String::with_capacity(text.len());
    let mut word_start: Option<usize> = None;
    let flush = |out: &mut String, word: &str| match lexicon.get(word) {
        Some(repl) => out.push_str(repl),
        None => out.push_str(word),
    };
    for (i, c) in text.char_indices() {
        if is_word_char(c) {
            word_start.get_or_insert(i);
        } else {
            if let Some(start) = word_start.take() {
                flush(&mut out, &text[start..i]);
            }
            out.push(c);
        }
    }
    if let Some(start) = word_start {
        flush(&mut out, &text[start..]);
    }
    out
}

struct CompiledRule {
    lhs: Vec<char>,
    rhs: String,
    scope: RuleScope,
}

fn scope_allows(scope: RuleScope, chars: &[char], start: usize, end: usize) -> bool {
    let at_start = start == 0 || !is_word_char(chars[start - 1]);
    let at_end = end == chars.len() || !is_word_char(chars[end]);
    match scope {
        RuleScope::Anywhere => true,
        RuleScope::WordInitial => at_start,
        RuleScope::WordFinal => at_end,
        RuleScope::WholeWord => at_start && at_end,
    }
}

fn apply_rules(text: &str, rules: &[RewriteRule]) -> String {
    if rules.is_empty() {
        return text.to_string();
    }
    let compiled: Vec<CompiledRule> = rules
        .iter()
        .map(|r| CompiledRule {
            lhs: r.lhs.chars().collect(),
            rhs: r.rhs.clone(),
            scope: r.scope,
        })
        .collect();
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut pos = 0;
    while pos < chars.len() {
        let mut best: Option<&CompiledRule> = None;
        for rule in &compiled {
            let end = pos + rule.lhs.len();
            if end > chars.len() || chars[pos..end] != rule.lhs[..] {
                continue;
            }
            if !scope_allows(rule.scope, &chars, pos, end) {
                continue;
            }
            // strictly longer only: earlier rules keep ties
            if best.is_none_or(|b| rule.lhs.len() > b.lhs.len()) {
                best = Some(rule);
            }
        }
        match best {
            Some(rule) => {
                out.push_str(&rule.rhs);
                pos += rule.lhs.len();
            }
            None => {
                out.push(chars[pos]);
                pos += 1;
            }
        }
    }
    out
}

/// Rewrites `text` into the ruleset's variety.
pub fn transduce(text: &str, rs: &VarietyRuleSet) -> String {
    let after_lexicon = apply_lexicon(text, &rs.lexicon);
    apply_rules(&after_lexicon, &rs.rules)
}

/// Transduces every query, keeping ids and order and retagging with the ruleset id.
pub fn transduce_queryset(qs: &QuerySet, rs: &VarietyRuleSet) -> QuerySet {
    let queries = qs
        .iter()
        .map(|q| Query {
            query_id: q.query_id.clone(),
            text: transduce(&q.text, rs),
            language_tag: rs.ruleset_id.clone(),
        })
        .collect();
    QuerySet::from_queries(queries).expect("ids are unchanged from a valid query set")
}

/// Template for a family of sibling varieties drawn from one rule pool.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilySpec {
    pub family_id: String,
    pub shared_rule_pool: Vec<RewriteRule>,
    /// Fraction of the pool each sibling receives, in (0, 1].
    pub sampling_fraction: f64,
    pub siblings: usize,
    pub seed: u64,
}

impl FamilySpec {
    pub fn sibling_id(&self, index: usize) -> String {
        format!("{}-{}", self.family_id, index)
    }
}

/// Generates the sibling rulesets of a family.
///
/// Every sibling receives `ceil(fraction * |pool|)` rules kept in pool order.
/// One anchor rule, drawn once per family, is given to all siblings so any two
/// siblings overlap; the rest are sampled without replacement.
pub fn generate_family(spec: &FamilySpec) -> Result<Vec<VarietyRuleSet>, TransducerError> {
    let invalid = |message: &str| TransducerError::InvalidFamily {
        family_id: spec.family_id.clone(),
        message: message.to_string(),
    };
    let pool = &spec.shared_rule_pool;
    if pool.is_empty() {
        return Err(TransducerError::EmptyPool {
            family_id: spec.family_id.clone(),
        });
    }
    if !(spec.sampling_fraction > 0.0 && spec.sampling_fraction <= 1.0) {
        return Err(invalid("sampling fraction must lie in (0, 1]"));
    }
    if spec.siblings == 0 {
        return Err(invalid("at least one sibling is required"));
    }
    if pool.iter().collect::<HashSet<_>>().len() != pool.len() {
        return Err(invalid("rule pool contains duplicates"));
    }
    let take = ((spec.sampling_fraction * pool.len() as f64).ceil() as usize).clamp(1, pool.len());
    let mut rng = seeded(spec.seed, Stream::Family);
    let anchor = rng.gen_range(0..pool.len());
    let others: Vec<usize> = (0..pool.len()).filter(|&i| i != anchor).collect();

    let mut out = Vec::with_capacity(spec.siblings);
    for s in 0..spec.siblings {
        let mut chosen: Vec<usize> = index::sample(&mut rng, others.len(), take - 1)
            .into_iter()
            .map(|i| others[i])
            .collect();
        chosen.push(anchor);
        chosen.sort_unstable();
        let rules = chosen.into_iter().map(|i| pool[i].clone()).collect();
        out.push(VarietyRuleSet::new(spec.sibling_id(s), spec.family_id.clone(), rules));
    }
    Ok(out)
}

/// Number of rules two rulesets have in common.
pub fn shared_rule_count(a: &VarietyRuleSet, b: &VarietyRuleSet) -> usize {
    let set: HashSet<&RewriteRule> = a.rules.iter().collect();
    b.rules.iter().filter(|r| set.contains(r)).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rule(l: &str, r: &str) -> RewriteRule {
        RewriteRule::new(l, r, RuleScope::Anywhere).unwrap()
    }

    #[test]
    fn parses_header_and_rule() {
        let rs = parse_ruleset("# demo\nruleset ca family romance\nrule \"ch\" -> \"tx\"\n").unwrap();
        assert_eq!(rs.ruleset_id, "ca");
        assert_eq!(rs.family_id, "romance");
        assert_eq!(rs.rules(), &[rule("ch", "tx")]);
    }

    #[test]
    fn parse_errors() {
        assert_eq!(
            parse_ruleset("ruleset a family f\nrule \"\" -> \"x\"\n").unwrap_err(),
            TransducerError::EmptyLhs { line: 2 }
        );
        assert_eq!(
            parse_ruleset("ruleset a family f\nlex hond -> hond\nlex hond -> hond\n").unwrap_err(),
            TransducerError::DuplicateLexiconKey {
                line: 3,
                key: "hond".into()
            }
        );
        assert!(matches!(
            parse_ruleset("ruleset a family f\nrule \"a\" => \"b\"\n").unwrap_err(),
            TransducerError::SyntaxError { line: 2, .. }
        ));
        assert!(matches!(
            parse_ruleset("rule \"a\" -> \"b\"\n").unwrap_err(),
            TransducerError::SyntaxError { line: 1, .. }
        ));
        assert!(matches!(
            parse_ruleset("ruleset a family f\nrule \"a\" -> \"a\"\n").unwrap_err(),
            TransducerError::NoOpRule { line: 2, .. }
        ));
        assert!(matches!(
            parse_ruleset("ruleset a family f\nrule \"a\" -> \"b\" middle\n").unwrap_err(),
            TransducerError::SyntaxError { line: 2, .. }
        ));
    }

    #[test]
    fn scoped_identity_rule_is_allowed() {
        // only anywhere-scoped self rewrites are no-ops worth rejecting
        let rs = parse_ruleset("ruleset a family f\nrule \"a\" -> \"a\" word\n").unwrap();
        assert_eq!(rs.rules()[0].scope(), RuleScope::WholeWord);
    }

    #[test]
    fn display_round_trips_through_parser() {
        let rs = VarietyRuleSet::new(
            "x-1",
            "x",
            vec![
                rule("ch", "tx"),
                RewriteRule::new("e", "", RuleScope::WordFinal).unwrap(),
                RewriteRule::new("q\"u", "k\\", RuleScope::WordInitial).unwrap(),
                RewriteRule::new("de", "di", RuleScope::WholeWord).unwrap(),
            ],
        )
        .with_lexicon(BTreeMap::from([("chat".to_string(), "gat".to_string())]));
        assert_eq!(parse_ruleset(&rs.to_string()).unwrap(), rs);
    }

    #[test]
    fn longest_match_single_pass() {
        let rs = VarietyRuleSet::new("t", "f", vec![rule("ab", "x"), rule("b", "y")]);
        assert_eq!(transduce("abb", &rs), "xy");
    }

    #[test]
    fn longest_match_beats_rule_order() {
        let rs = VarietyRuleSet::new("t", "f", vec![rule("a", "1"), rule("ab", "2")]);
        assert_eq!(transduce("abab a", &rs), "22 1");
    }

    #[test]
    fn earlier_rule_wins_equal_length() {
        let rs = VarietyRuleSet::new("t", "f", vec![rule("ab", "1"), rule("ab", "2")]);
        assert_eq!(transduce("ab", &rs), "1");
    }

    #[test]
    fn replacement_output_is_not_rescanned() {
        let rs = VarietyRuleSet::new("t", "f", vec![rule("a", "aa")]);
        assert_eq!(transduce("aa", &rs), "aaaa");
    }

    #[test]
    fn lexicon_then_rules() {
        let rs = VarietyRuleSet::new("t", "f", vec![rule("s", "ç")])
            .with_lexicon(BTreeMap::from([("chat".to_string(), "gat".to_string())]));
        assert_eq!(transduce("chat sec", &rs), "gat çec");
        // lexicon matches whole words only
        assert_eq!(transduce("chats", &rs), "chatç");
    }

    #[test]
    fn scopes_respect_word_boundaries() {
        let rs = VarietyRuleSet::new(
            "t",
            "f",
            vec![
                RewriteRule::new("e", "a", RuleScope::WordFinal).unwrap(),
                RewriteRule::new("s", "z", RuleScope::WordInitial).unwrap(),
                RewriteRule::new("de", "di", RuleScope::WholeWord).unwrap(),
            ],
        );
        assert_eq!(transduce("sese, de desde", &rs), "zesa, di desda");
    }

    #[test]
    fn queryset_keeps_ids_and_retags() {
        let qs = QuerySet::from_queries(vec![Query::new("q1", "chat"), Query::new("q2", "hello")]).unwrap();
        let ident = transduce_queryset(&qs, &VarietyRuleSet::empty("ctl"));
        assert_eq!(ident.queries()[0].text, "chat");
        assert!(ident.iter().all(|q| q.language_tag == "ctl"));

        let rs = VarietyRuleSet::new("oc", "f", vec![rule("s", "ç")])
            .with_lexicon(BTreeMap::from([("chat".to_string(), "gat".to_string())]));
        let out = transduce_queryset(&qs, &rs);
        assert_eq!(out.queries()[0].text, "gat");
        assert_eq!(out.queries()[1].query_id, "q2");

        assert!(transduce_queryset(&QuerySet::default(), &rs).is_empty());
    }

    fn spec(id: &str, pool: Vec<RewriteRule>, fraction: f64, seed: u64) -> FamilySpec {
        FamilySpec {
            family_id: id.into(),
            shared_rule_pool: pool,
            sampling_fraction: fraction,
            siblings: 3,
            seed,
        }
    }

    fn pool(prefix: &str, n: usize) -> Vec<RewriteRule> {
        (0..n).map(|i| rule(&format!("{prefix}{i}"), &format!("{i}{prefix}"))).collect()
    }

    #[test]
    fn full_fraction_gives_whole_pool() {
        let s = spec("a", pool("x", 5), 1.0, 3);
        for rs in generate_family(&s).unwrap() {
            assert_eq!(rs.rules(), s.shared_rule_pool.as_slice());
            assert_eq!(rs.family_id, "a");
        }
    }

    #[test]
    fn family_generation_is_deterministic() {
        let s = spec("a", pool("x", 9), 0.4, 17);
        assert_eq!(generate_family(&s).unwrap(), generate_family(&s).unwrap());
    }

    #[test]
    fn family_errors() {
        assert!(matches!(
            generate_family(&spec("a", vec![], 0.5, 1)),
            Err(TransducerError::EmptyPool { .. })
        ));
        assert!(matches!(
            generate_family(&spec("a", pool("x", 3), 0.0, 1)),
            Err(TransducerError::InvalidFamily { .. })
        ));
    }

    #[test]
    fn disjoint_pools_share_nothing() {
        let a = generate_family(&spec("a", pool("x", 6), 0.5, 1)).unwrap();
        let b = generate_family(&spec("b", pool("y", 6), 0.5, 1)).unwrap();
        for ra in &a {
            for rb in &b {
                assert_eq!(shared_rule_count(ra, rb), 0);
            }
        }
    }

    proptest! {
        #[test]
        fn empty_ruleset_is_identity(s in "\\PC*") {
            prop_assert_eq!(transduce(&s, &VarietyRuleSet::empty("id")), s);
        }

        #[test]
        fn output_length_is_bounded(s in "[abc ]{0,40}") {
            let rs = VarietyRuleSet::new("t", "f", vec![rule("a", "xyz"), rule("bc", ""), rule("c", "cc")]);
            let out = transduce(&s, &rs);
            prop_assert!(out.chars().count() <= s.chars().count() * (1 + rs.max_rhs_chars()));
            prop_assert_eq!(out, transduce(&s, &rs));
        }

        #[test]
        fn siblings_overlap(n in 1usize..12, fraction in 0.01f64..=1.0, seed in any::<u64>()) {
            let fam = generate_family(&spec("a", pool("x", n), fraction, seed)).unwrap();
            for (i, a) in fam.iter().enumerate() {
                for b in &fam[i + 1..] {
                    prop_assert!(shared_rule_count(a, b) >= 1);
                }
            }
        }
    }
}
