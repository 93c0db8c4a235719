//! Tokenization and value canonicalization.
//!
//! Both the corpus pipeline and the evaluation code must agree on these rules,
//! so they live in one place. Tokenization and canonicalization are pure
//! functions of their inputs; the alias map is passed in explicitly.

use std::collections::BTreeMap;

/// Reserved value meaning the slot is not constrained.
pub const NONE_VALUE: &str = "none";
/// Reserved value meaning the user does not care.
pub const DONT_CARE_VALUE: &str = "dont_care";

/// Spellings that normalize to [`DONT_CARE_VALUE`].
const DONT_CARE_VARIANTS: &[&str] = &[
    "dont_care",
    "dontcare",
    "dont care",
    "don't care",
    "do not care",
    "do n't care",
    "doesn't matter",
    "does not matter",
    "any",
    "anything",
];

/// Spellings that normalize to [`NONE_VALUE`].
const NONE_VARIANTS: &[&str] = &["none", "not mentioned", "unknown", ""];

const ARTICLES: &[&str] = &["a", "an", "the"];

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Lowercases and splits into word and punctuation tokens.
///
/// Word characters are alphanumerics plus underscore. A colon or period
/// between two digits stays inside the word, so clock times like "20:45" and
/// decimals like "3.50" survive as single tokens. All other non-whitespace
/// characters become one-character tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut tokens = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        let keep_in_word = is_word_char(c)
            || ((c == ':' || c == '.')
                && i > 0
                && i + 1 < chars.len()
                && chars[i - 1].is_ascii_digit()
                && chars[i + 1].is_ascii_digit());
        if keep_in_word {
            current.push(c);
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            if !c.is_whitespace() {
                tokens.push(c.to_string());
            }
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Inverse-ish of [`tokenize`] for span decoding: joins with single spaces.
pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Maps surface value strings to canonical forms for comparison and matching.
pub type AliasMap = BTreeMap<String, String>;

/// Normalizes a slot value string to its canonical form.
///
/// Rules, in order: lowercase and trim; map don't-care spellings to
/// `dont_care` and absent-value spellings to `none`; apply the alias map on
/// the whole string; drop leading articles and punctuation-only tokens;
/// collapse whitespace.
pub fn canonicalize_value(raw: &str, aliases: &AliasMap) -> String {
    let lower = raw.trim().to_lowercase();
    if DONT_CARE_VARIANTS.contains(&lower.as_str()) {
        return DONT_CARE_VALUE.to_string();
    }
    if NONE_VARIANTS.contains(&lower.as_str()) {
        return NONE_VALUE.to_string();
    }
    let mapped = aliases.get(&lower).cloned().unwrap_or(lower);
    if mapped == DONT_CARE_VALUE || mapped == NONE_VALUE {
        return mapped;
    }
    let tokens = tokenize(&mapped);
    let kept: Vec<String> = tokens
        .into_iter()
        .enumerate()
        .filter(|(i, t)| {
            let is_punct = t.chars().all(|c| !is_word_char(c));
            let is_leading_article = *i == 0 && ARTICLES.contains(&t.as_str());
            !is_punct && !is_leading_article
        })
        .map(|(_, t)| t)
        .collect();
    let joined = kept.join(" ");
    if joined.is_empty() {
        NONE_VALUE.to_string()
    } else {
        joined
    }
}

/// True when the string parses as a bare number or an HH:MM clock time.
pub fn looks_numeric_or_time(value: &str) -> bool {
    let v = value.trim();
    if v.is_empty() {
        return false;
    }
    if v.parse::<f64>().is_ok() {
        return true;
    }
    if let Some((h, m)) = v.split_once(':') {
        return h.len() <= 2
            && m.len() == 2
            && h.chars().all(|c| c.is_ascii_digit())
            && m.chars().all(|c| c.is_ascii_digit());
    }
    false
}
