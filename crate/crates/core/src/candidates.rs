//! Candidate vocabulary items: frequent corpus words, token affixes of
//! words, and budget schedules for merge-based expansion.

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::bpe::{TokenId, Tokenizer};
use crate::error::{Error, Result};
use crate::fsutil;

pub const DEFAULT_MIN_FREQ: u64 = 5;

/// Fractions of the maximum budget used to sweep merge-based expansion.
pub const DEFAULT_BUDGET_FRACTIONS: [f64; 6] = [1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125];

fn word_regex() -> &'static Regex {
    // runs of non-space, non-punctuation chars; '-' and '\'' may join runs
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[^\s\p{P}]+(?:['-][^\s\p{P}]+)*").expect("valid word regex"))
}

/// Split text at word boundaries, keeping hyphenated and contracted forms
/// whole.
pub fn split_words(text: &str) -> impl Iterator<Item = &str> {
    word_regex().find_iter(text).map(|m| m.as_str())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    /// `(surface, frequency)`, by descending frequency then surface.
    pub words: Vec<(String, u64)>,
    pub source_corpus_size: usize,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn surfaces(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(|(w, _)| w.as_str())
    }

    /// Drop words the tokenizer already encodes as a single token.
    pub fn out_of_vocabulary(&self, tok: &Tokenizer) -> Result<CandidateSet> {
        let mut words = Vec::with_capacity(self.words.len());
        for (w, f) in &self.words {
            if tok.encode(w)?.len() > 1 {
                words.push((w.clone(), *f));
            }
        }
        Ok(CandidateSet {
            words,
            source_corpus_size: self.source_corpus_size,
        })
    }

    pub fn truncated(&self, budget: usize) -> CandidateSet {
        CandidateSet {
            words: self.words.iter().take(budget).cloned().collect(),
            source_corpus_size: self.source_corpus_size,
        }
    }

    pub fn to_tsv(&self) -> String {
        self.words.iter().map(|(w, f)| format!("{w}\t{f}\n")).collect()
    }

    pub fn from_tsv(text: &str, source_corpus_size: usize) -> Result<CandidateSet> {
        let mut words = Vec::new();
        for (k, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let (w, f) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::schema("candidate tsv", format!("line {}: expected surface<TAB>frequency", k + 1)))?;
            let f = f
                .parse()
                .map_err(|_| Error::schema("candidate tsv", format!("line {}: bad frequency {f:?}", k + 1)))?;
            words.push((w.to_string(), f));
        }
        Ok(CandidateSet {
            words,
            source_corpus_size,
        })
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_tsv().as_bytes())
    }
}

/// Word frequencies over `corpus`, keeping words seen at least `min_freq`
/// times.
pub fn extract_candidate_words<S: AsRef<str> + Sync>(corpus: &[S], min_freq: u64) -> Result<CandidateSet> {
    if corpus.is_empty() {
        return Err(Error::input("candidate extraction needs a non-empty corpus"));
    }
    if min_freq == 0 {
        return Err(Error::input("min_freq must be at least 1"));
    }
    let counts = corpus
        .par_iter()
        .fold(HashMap::<&str, u64>::new, |mut acc, line| {
            for w in split_words(line.as_ref()) {
                *acc.entry(w).or_default() += 1;
            }
            acc
        })
        .reduce(HashMap::new, |mut a, b| {
            for (w, c) in b {
                *a.entry(w).or_default() += c;
            }
            a
        });
    let mut words: Vec<(String, u64)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_freq)
        .map(|(w, c)| (w.to_string(), c))
        .collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(CandidateSet {
        words,
        source_corpus_size: corpus.len(),
    })
}

/// A contiguous run of a word's tokens. Positions are 1-based and
/// inclusive, matching trace positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffixSpan {
    pub word: String,
    pub first: usize,
    pub last: usize,
    pub surface: String,
    /// Token count of the whole word.
    pub word_len: usize,
}

impl AffixSpan {
    pub fn is_full_word(&self) -> bool {
        self.first == 1 && self.last == self.word_len
    }
}

/// All multi-token spans of `word`'s tokenization whose surface is not
/// already one base token. Spans that split a UTF-8 sequence are skipped.
pub fn enumerate_affixes(word: &str, tok: &Tokenizer) -> Result<Vec<AffixSpan>> {
    if word.is_empty() {
        return Err(Error::input("cannot enumerate affixes of an empty word"));
    }
    let ids = tok.encode(word)?;
    affixes_of(word, &ids, tok)
}

/// As [`enumerate_affixes`] with a precomputed tokenization (e.g. the token
/// ids stored in a trace).
pub fn affixes_of(word: &str, ids: &[TokenId], tok: &Tokenizer) -> Result<Vec<AffixSpan>> {
    let n = ids.len();
    let pieces: Vec<Vec<u8>> = ids.iter().map(|&id| tok.token_bytes(id)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for first in 1..=n {
        let mut bytes = pieces[first - 1].clone();
        for last in first + 1..=n {
            bytes.extend_from_slice(&pieces[last - 1]);
            let Ok(surface) = std::str::from_utf8(&bytes) else { continue };
            if tok.base_id_of_surface(surface).is_some() {
                continue;
            }
            out.push(AffixSpan {
                word: word.to_string(),
                first,
                last,
                surface: surface.to_string(),
                word_len: n,
            });
        }
    }
    Ok(out)
}

/// `round(γ · max_budget)` for each fraction, deduplicated, descending and
/// at least 1.
pub fn budget_schedule(max_budget: usize, fractions: &[f64]) -> Result<Vec<usize>> {
    if max_budget == 0 {
        return Err(Error::input("max_budget must be at least 1"));
    }
    let mut out = Vec::with_capacity(fractions.len());
    for &g in fractions {
        if !(g > 0.0 && g <= 1.0) {
            return Err(Error::input(format!("budget fraction {g} outside (0, 1]")));
        }
        out.push(((g * max_budget as f64).round() as usize).max(1));
    }
    out.sort_unstable_by(|a, b| b.cmp(a));
    out.dedup();
    Ok(out)
}
