//! Pretokenization: splitting text into the spans BPE runs within.
//!
//! Both modes produce a partition of the input: the returned slices are
//! contiguous and concatenate back to the original string.

use std::fmt;

use fancy_regex::Regex;
use serde_json::{json, Value};

use crate::error::{Error, Result};

/// GPT-2 style split pattern, used when an ingested file asks for byte-level
/// regex splitting without naming a pattern.
pub const GPT2_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

#[derive(Clone, Default)]
pub enum PretokenRule {
    /// Words and punctuation runs, each optionally carrying one leading
    /// space; leftover whitespace forms its own pretoken.
    #[default]
    WhitespacePunct,
    Regex { pattern: String, regex: Regex },
}

impl fmt::Debug for PretokenRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PretokenRule::WhitespacePunct => write!(f, "WhitespacePunct"),
            PretokenRule::Regex { pattern, .. } => f.debug_tuple("Regex").field(pattern).finish(),
        }
    }
}

impl PartialEq for PretokenRule {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (PretokenRule::WhitespacePunct, PretokenRule::WhitespacePunct) => true,
            (PretokenRule::Regex { pattern: a, .. }, PretokenRule::Regex { pattern: b, .. }) => a == b,
            _ => false,
        }
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || unicode_normalization::char::is_combining_mark(c)
}

impl PretokenRule {
    pub fn regex(pattern: &str) -> Result<Self> {
        let regex = Regex::new(pattern).map_err(|e| Error::Regex(e.to_string()))?;
        Ok(PretokenRule::Regex {
            pattern: pattern.to_string(),
            regex,
        })
    }

    pub fn split<'a>(&self, text: &'a str) -> Result<Vec<&'a str>> {
        match self {
            PretokenRule::WhitespacePunct => Ok(split_whitespace_punct(text)),
            PretokenRule::Regex { regex, .. } => split_regex(regex, text),
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            PretokenRule::WhitespacePunct => json!({ "mode": "whitespace_punct" }),
            PretokenRule::Regex { pattern, .. } => json!({ "mode": "regex", "pattern": pattern }),
        }
    }

    /// Parse either this crate's `{"mode": ...}` object or the nested
    /// `pre_tokenizer` object found in published tokenizer files.
    pub fn from_json(value: &Value) -> Result<Self> {
        if let Some(mode) = value.get("mode").and_then(Value::as_str) {
            return match mode {
                "whitespace_punct" => Ok(PretokenRule::WhitespacePunct),
                "regex" => {
                    let pattern = value
                        .get("pattern")
                        .and_then(Value::as_str)
                        .ok_or_else(|| Error::schema("pretokenizer", "regex mode without a pattern"))?;
                    PretokenRule::regex(pattern)
                }
                other => Err(Error::schema("pretokenizer", format!("unknown mode {other:?}"))),
            };
        }
        if let Some(pattern) = find_split_pattern(value) {
            return PretokenRule::regex(&pattern);
        }
        if uses_byte_level_regex(value) {
            return PretokenRule::regex(GPT2_PATTERN);
        }
        if value.is_null() {
            return Ok(PretokenRule::WhitespacePunct);
        }
        Err(Error::schema(
            "pretokenizer",
            format!("unsupported pretokenizer: {value}"),
        ))
    }
}

fn find_split_pattern(value: &Value) -> Option<String> {
    match value {
        Value::Object(map) => {
            if map.get("type").and_then(Value::as_str) == Some("Split") {
                let pattern = map.get("pattern")?;
                return pattern
                    .get("Regex")
                    .or_else(|| pattern.get("String"))
                    .and_then(Value::as_str)
                    .map(|p| {
                        if pattern.get("String").is_some() {
                            regex::escape(p)
                        } else {
                            p.to_string()
                        }
                    });
            }
            map.values().find_map(find_split_pattern)
        }
        Value::Array(items) => items.iter().find_map(find_split_pattern),
        _ => None,
    }
}

fn uses_byte_level_regex(value: &Value) -> bool {
    match value {
        Value::Object(map) => {
            if map.get("type").and_then(Value::as_str) == Some("ByteLevel") {
                return map.get("use_regex").and_then(Value::as_bool).unwrap_or(true);
            }
            map.values().any(uses_byte_level_regex)
        }
        Value::Array(items) => items.iter().any(uses_byte_level_regex),
        _ => false,
    }
}

fn split_regex<'a>(regex: &Regex, text: &'a str) -> Result<Vec<&'a str>> {
    let mut out = Vec::new();
    let mut last = 0;
    for m in regex.find_iter(text) {
        let m = m.map_err(|e| Error::Regex(e.to_string()))?;
        if m.start() > last {
            out.push(&text[last..m.start()]);
        }
        if m.end() > m.start() {
            out.push(m.as_str());
        }
        last = m.end();
    }
    if last < text.len() {
        out.push(&text[last..]);
    }
    Ok(out)
}

fn split_whitespace_punct(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let end_of = |k: usize| chars.get(k).map_or(text.len(), |&(i, _)| i);
    let mut out = Vec::new();
    let mut k = 0;
    while k < chars.len() {
        let start = chars[k].0;
        let c = chars[k].1;
        if c.is_whitespace() {
            let mut e = k;
            while e < chars.len() && chars[e].1.is_whitespace() {
                e += 1;
            }
            // a trailing single space is handed to the following pretoken
            let split = if e < chars.len() && chars[e - 1].1 == ' ' { e - 1 } else { e };
            if split > k {
                out.push(&text[start..end_of(split)]);
                k = split;
                continue;
            }
            // k is the lone space before a non-space char; fall through with it attached
            let body = k + 1;
            let e = scan_run(&chars, body);
            out.push(&text[start..end_of(e)]);
            k = e;
        } else {
            let e = scan_run(&chars, k);
            out.push(&text[start..end_of(e)]);
            k = e;
        }
    }
    out
}

/// End index of the word run or punctuation run starting at `k`.
fn scan_run(chars: &[(usize, char)], k: usize) -> usize {
    let word = is_word_char(chars[k].1);
    let mut e = k + 1;
    while e < chars.len() {
        let c = chars[e].1;
        if c.is_whitespace() || is_word_char(c) != word {
            break;
        }
        e += 1;
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn whitespace_punct_attaches_single_space() {
        let parts = PretokenRule::WhitespacePunct.split("Hello, world  again!\n").unwrap();
        assert_eq!(parts, vec!["Hello", ",", " world", " ", " again", "!", "\n"]);
    }

    #[test]
    fn whitespace_punct_keeps_marks_inside_words() {
        let parts = PretokenRule::WhitespacePunct.split("परिवार का").unwrap();
        assert_eq!(parts, vec!["परिवार", " का"]);
    }

    #[test]
    fn regex_split_fills_gaps() {
        let rule = PretokenRule::regex(r"\d+").unwrap();
        assert_eq!(rule.split("ab12cd3").unwrap(), vec!["ab", "12", "cd", "3"]);
    }

    #[test]
    fn gpt2_pattern_with_lookahead() {
        let rule = PretokenRule::regex(GPT2_PATTERN).unwrap();
        assert_eq!(
            rule.split("I'm  here").unwrap(),
            vec!["I", "'m", " ", " here"]
        );
    }

    #[test]
    fn case_insensitive_contraction_pattern() {
        let pattern = r"(?i:'s|'t|'re|'ve|'m|'ll|'d)|[^\r\n\p{L}\p{N}]?\p{L}+|\p{N}| ?[^\s\p{L}\p{N}]+[\r\n]*|\s*[\r\n]+|\s+(?!\S)|\s+";
        let rule = PretokenRule::regex(pattern).unwrap();
        assert_eq!(
            rule.split("WE'LL pay 42 ők!\n").unwrap(),
            vec!["WE", "'LL", " pay", " ", "4", "2", " ők", "!\n"]
        );
    }

    #[test]
    fn parses_nested_split_pretokenizer() {
        let v = serde_json::json!({
            "type": "Sequence",
            "pretokenizers": [
                {"type": "Split", "pattern": {"Regex": "\\s+|\\S+"}, "behavior": "Isolated", "invert": false},
                {"type": "ByteLevel", "add_prefix_space": false, "use_regex": false}
            ]
        });
        let rule = PretokenRule::from_json(&v).unwrap();
        assert_eq!(rule, PretokenRule::regex(r"\s+|\S+").unwrap());
    }

    proptest! {
        #[test]
        fn splits_are_partitions(text in "[ a-zA-Z0-9,.!\\n\\tअआइ]{0,40}") {
            for rule in [PretokenRule::WhitespacePunct, PretokenRule::regex(GPT2_PATTERN).unwrap()] {
                let parts = rule.split(&text).unwrap();
                prop_assert_eq!(parts.concat(), text.clone());
                prop_assert!(parts.iter().all(|p| !p.is_empty()));
            }
        }
    }
}
