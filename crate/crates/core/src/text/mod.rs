//! Report text: normalization, sentence/keyword decomposition, vocabulary and
//! the frozen embedding table that encodes each granularity.

mod encoder;
mod vocab;

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use encoder::{encode_pyramid, PyramidIds, TextEncoder, TextFeatures};
pub use vocab::{build_vocab, Vocabulary, BOS, EOS, PAD, UNK};

const PUNCTUATION: &[char] = &['.', ',', '!', '?', ';', ':'];
const TERMINATORS: &[char] = &['.', '!', '?'];

pub const DEFAULT_LEXICON: &str = include_str!("../../data/lexicon.txt");
pub const DEFAULT_STOPWORDS: &str = include_str!("../../data/stopwords.txt");

pub fn is_punctuation(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| PUNCTUATION.contains(&c))
}

/// Lowercased whitespace tokens with trailing punctuation split into
/// one-character tokens: `"Effusion."` becomes `["effusion", "."]`.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chunk = chunk.to_lowercase();
        let stem = chunk.trim_end_matches(PUNCTUATION);
        if !stem.is_empty() {
            out.push(stem.to_string());
        }
        out.extend(chunk[stem.len()..].chars().map(String::from));
    }
    out
}

/// Inverse of [`tokenize`] on normalized text: punctuation attaches to the previous token.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for t in tokens {
        let t = t.as_ref();
        if !out.is_empty() && !is_punctuation(t) {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

/// Lowercase, single-spaced, no space before punctuation.
pub fn normalize(raw: &str) -> String {
    detokenize(&tokenize(raw))
}

/// Word tokens only.
pub fn words(text: &str) -> Vec<String> {
    tokenize(text).into_iter().filter(|t| !is_punctuation(t)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub id: String,
    pub raw: String,
}

impl Report {
    pub fn new(id: impl Into<String>, raw: impl Into<String>) -> Result<Report> {
        let raw = raw.into();
        if normalize(&raw).is_empty() {
            return Err(Error::Empty("report text is empty".into()));
        }
        Ok(Report { id: id.into(), raw })
    }
}

/// Split at `.`, `!`, `?` followed by whitespace or end of text, dropping
/// sentences with fewer than `min_tokens` word tokens.
pub fn split_sentences(raw: &str, min_tokens: usize) -> Result<Vec<String>> {
    let text = normalize(raw);
    if text.is_empty() {
        return Err(Error::Empty("report text is empty".into()));
    }
    let chars: Vec<char> = text.chars().collect();
    let mut pieces = Vec::new();
    let mut start = 0;
    for (i, &c) in chars.iter().enumerate() {
        let at_boundary = chars.get(i + 1).is_none_or(|n| n.is_whitespace());
        if TERMINATORS.contains(&c) && at_boundary {
            pieces.push(chars[start..i].iter().collect::<String>());
            start = i + 1;
        }
    }
    if start < chars.len() {
        pieces.push(chars[start..].iter().collect());
    }
    let kept: Vec<String> = pieces
        .into_iter()
        .map(|s| s.trim().to_string())
        .filter(|s| words(s).len() >= min_tokens)
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyPyramid(format!(
            "no sentence with at least {min_tokens} tokens"
        )));
    }
    Ok(kept)
}

/// Lexicon and stopword lists plus the thresholds of the decomposition.
#[derive(Clone, Debug)]
pub struct TextRules {
    pub lexicon: Vec<String>,
    lexicon_set: HashSet<String>,
    pub stopwords: HashSet<String>,
    pub min_sentence_tokens: usize,
    pub max_keywords: usize,
}

fn word_list(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect()
}

impl TextRules {
    pub fn new(lexicon: &str, stopwords: &str) -> Result<TextRules> {
        let lexicon = word_list(lexicon);
        if lexicon.is_empty() {
            return Err(Error::Empty("lexicon is empty".into()));
        }
        Ok(TextRules {
            lexicon_set: lexicon.iter().cloned().collect(),
            lexicon,
            stopwords: word_list(stopwords).into_iter().collect(),
            min_sentence_tokens: 3,
            max_keywords: 16,
        })
    }

    pub fn in_lexicon(&self, token: &str) -> bool {
        self.lexicon_set.contains(token)
    }
}

impl Default for TextRules {
    fn default() -> Self {
        TextRules::new(DEFAULT_LEXICON, DEFAULT_STOPWORDS).expect("bundled word lists")
    }
}

/// Lexicon hits in order of first appearance, then other non-stopword words,
/// deduplicated and capped at `max_keywords`.
pub fn extract_keywords(sentences: &[Vec<String>], rules: &TextRules) -> Result<Vec<String>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let all = || sentences.iter().flatten().map(|t| t.to_lowercase());
    for t in all() {
        if out.len() < rules.max_keywords && rules.in_lexicon(&t) && seen.insert(t.clone()) {
            out.push(t);
        }
    }
    for t in all() {
        if out.len() >= rules.max_keywords {
            break;
        }
        let eligible = !is_punctuation(&t)
            && t.chars().any(|c| c.is_alphabetic())
            && !rules.stopwords.contains(&t);
        if eligible && seen.insert(t.clone()) {
            out.push(t);
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyPyramid("no keywords extracted".into()));
    }
    Ok(out)
}

/// Paragraph, sentence and keyword granularities of one report.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPyramid {
    pub paragraph_tokens: Vec<String>,
    pub sentences: Vec<Vec<String>>,
    pub keywords: Vec<String>,
}

impl TextPyramid {
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.paragraph_tokens.len(), self.sentences.len(), self.keywords.len())
    }
}

pub fn build_pyramid(raw: &str, rules: &TextRules) -> Result<TextPyramid> {
    let sentences: Vec<Vec<String>> = split_sentences(raw, rules.min_sentence_tokens)?
        .iter()
        .map(|s| words(s))
        .collect();
    let keywords = extract_keywords(&sentences, rules)?;
    Ok(TextPyramid {
        paragraph_tokens: words(raw),
        sentences,
        keywords,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn tokenize_splits_trailing_punctuation() {
        assert_eq!(tokenize("No  Effusion. Heart,  normal"), toks("no effusion . heart , normal"));
        assert_eq!(tokenize("3.5 cm"), toks("3.5 cm"));
        assert_eq!(normalize("  A .  B "), "a. b");
    }

    #[test]
    fn short_second_sentence_dropped() {
        let s = split_sentences("heart size is normal. no effusion.", 3).unwrap();
        assert_eq!(s, vec!["heart size is normal"]);
    }

    #[test]
    fn no_terminator_gives_one_sentence() {
        let s = split_sentences("lungs are clear bilaterally", 3).unwrap();
        assert_eq!(s, vec!["lungs are clear bilaterally"]);
    }

    #[test]
    fn all_short_sentences_is_an_error() {
        assert!(matches!(split_sentences("a. b. c.", 3), Err(Error::EmptyPyramid(_))));
    }

    #[test]
    fn decimal_point_is_not_a_boundary() {
        let s = split_sentences("a nodule of 3.5 cm is seen! heart is normal?", 3).unwrap();
        assert_eq!(s, vec!["a nodule of 3.5 cm is seen", "heart is normal"]);
    }

    #[test]
    fn lexicon_hits_come_first() {
        let rules = TextRules::default();
        let k = extract_keywords(&[toks("no focal consolidation or pleural effusion")], &rules).unwrap();
        assert_eq!(k, toks("consolidation effusion focal pleural"));
    }

    #[test]
    fn all_stopwords_is_an_error() {
        let rules = TextRules::default();
        assert!(extract_keywords(&[toks("there is no")], &rules).is_err());
    }

    #[test]
    fn repeated_keyword_kept_once() {
        let rules = TextRules::default();
        let k = extract_keywords(&[toks("small effusion"), toks("effusion small")], &rules).unwrap();
        assert_eq!(k, toks("effusion small"));
    }

    #[test]
    fn keyword_cap() {
        let rules = TextRules { max_keywords: 2, ..TextRules::default() };
        let k = extract_keywords(&[toks("alpha beta gamma effusion")], &rules).unwrap();
        assert_eq!(k, toks("effusion alpha"));
    }

    #[test]
    fn pyramid_counts() {
        let rules = TextRules::default();
        let p = build_pyramid("The trachea is midline. A small pleural effusion is present.", &rules)
            .unwrap();
        assert_eq!(p.sentences.len(), 2);
        assert_eq!(p.paragraph_tokens.len(), 10);
        assert_eq!(p.keywords[0], "effusion");
        for k in &p.keywords {
            assert!(p.sentences.iter().flatten().any(|t| t == k));
        }
    }

    #[test]
    fn empty_report_rejected() {
        assert!(Report::new("r", "   ").is_err());
        assert!(Report::new("r", "ok").is_ok());
    }

    proptest! {
        #[test]
        fn detokenize_inverts_tokenize_on_normalized_text(raw in "[a-zA-Z.,!? ]{0,40}") {
            let norm = normalize(&raw);
            prop_assert_eq!(detokenize(&tokenize(&norm)), norm.clone());
            prop_assert_eq!(normalize(&norm), norm);
        }

        #[test]
        fn pyramid_level_bounds(raw in "([a-z]{1,6} ){1,8}[a-z]{1,6}[.!?]( ([a-z]{1,6} ){1,8}[a-z]{1,6}[.])*") {
            let rules = TextRules { stopwords: HashSet::new(), ..TextRules::default() };
            if let Ok(p) = build_pyramid(&raw, &rules) {
                let before = split_sentences(&raw, 0).map(|s| s.len()).unwrap_or(0);
                prop_assert!(p.keywords.len() <= p.paragraph_tokens.len());
                prop_assert!(p.sentences.len() <= before);
                prop_assert!(p.sentences.iter().all(|s| s.len() >= rules.min_sentence_tokens));
                for k in &p.keywords {
                    prop_assert!(p.sentences.iter().flatten().any(|t| t == k));
                }
            }
        }
    }
}
