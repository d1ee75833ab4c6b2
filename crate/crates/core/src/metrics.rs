//! Fragmentation and efficiency metrics.
//!
//! All ratios aggregate corpus totals (sum of per-sentence counts) rather
//! than averaging per-sentence ratios. Characters are unicode scalar values.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bpe::Tokenizer;
use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::fsutil;

/// Total token count of `texts` under `tok`.
pub fn count_tokens<S: AsRef<str> + Sync>(tok: &Tokenizer, texts: &[S]) -> Result<u64> {
    texts
        .par_iter()
        .map(|t| tok.encode(t.as_ref()).map(|ids| ids.len() as u64))
        .try_reduce(|| 0, |a, b| Ok(a + b))
}

pub fn count_chars<S: AsRef<str>>(texts: &[S]) -> u64 {
    texts.iter().map(|t| t.as_ref().chars().count() as u64).sum()
}

pub fn tokens_ratio(tok: &Tokenizer, corpus: &ParallelCorpus, lang: &str) -> Result<f64> {
    let num = count_tokens(tok, corpus.sentences(lang)?)?;
    let den = count_tokens(tok, corpus.sentences(corpus.reference())?)?;
    if den == 0 {
        return Err(Error::Degenerate(format!(
            "reference language {} encodes to zero tokens",
            corpus.reference()
        )));
    }
    Ok(num as f64 / den as f64)
}

pub fn characters_ratio(corpus: &ParallelCorpus, lang: &str) -> Result<f64> {
    let num = count_chars(corpus.sentences(lang)?);
    let den = count_chars(corpus.sentences(corpus.reference())?);
    if den == 0 {
        return Err(Error::Degenerate(format!(
            "reference language {} has zero characters",
            corpus.reference()
        )));
    }
    Ok(num as f64 / den as f64)
}

/// `1 - T_exp(D) / T_orig(D)`. Negative when the expansion lengthens the
/// dataset overall.
pub fn token_reduction<S: AsRef<str> + Sync>(orig: &Tokenizer, exp: &Tokenizer, dataset: &[S]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::input("token reduction needs a non-empty dataset"));
    }
    let before = count_tokens(orig, dataset)?;
    if before == 0 {
        return Err(Error::Degenerate("dataset encodes to zero tokens under the original tokenizer".into()));
    }
    let after = count_tokens(exp, dataset)?;
    Ok(1.0 - after as f64 / before as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerverseWord {
    pub word: String,
    pub orig_len: usize,
    pub exp_len: usize,
}

/// Words the expanded tokenizer encodes into strictly more tokens.
pub fn perversity_audit<S: AsRef<str>>(orig: &Tokenizer, exp: &Tokenizer, words: &[S]) -> Result<Vec<PerverseWord>> {
    let mut out = Vec::new();
    for w in words {
        let w = w.as_ref();
        let orig_len = orig.encode(w)?.len();
        let exp_len = exp.encode(w)?.len();
        if exp_len > orig_len {
            out.push(PerverseWord {
                word: w.to_string(),
                orig_len,
                exp_len,
            });
        }
    }
    Ok(out)
}

pub fn performance_conservation(expanded_score: f64, original_score: f64) -> Result<f64> {
    if !(original_score > 0.0) || !original_score.is_finite() {
        return Err(Error::input(format!(
            "original score must be positive, got {original_score}"
        )));
    }
    Ok(expanded_score / original_score)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageMetrics {
    pub language: String,
    pub tokens_ratio: f64,
    pub characters_ratio: f64,
    pub token_count: u64,
    pub character_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub reference: String,
    pub languages: Vec<LanguageMetrics>,
}

impl MetricReport {
    pub fn get(&self, lang: &str) -> Option<&LanguageMetrics> {
        self.languages
            .iter()
            .find(|m| m.language == lang || m.language.split('_').next() == Some(lang))
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for m in &self.languages {
            w.serialize(m).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("json serialization")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_json().as_bytes())
    }
}

/// Token and character ratios for every language (or the given subset).
pub fn analyze(tok: &Tokenizer, corpus: &ParallelCorpus, only: Option<&[String]>) -> Result<MetricReport> {
    let langs: Vec<String> = match only {
        Some(list) => list
            .iter()
            .map(|l| {
                corpus
                    .resolve(l)
                    .map(str::to_string)
                    .ok_or_else(|| Error::input(format!("language {l:?} not in corpus")))
            })
            .collect::<Result<_>>()?,
        None => corpus.languages().map(str::to_string).collect(),
    };
    let ref_tokens = count_tokens(tok, corpus.sentences(corpus.reference())?)?;
    let ref_chars = count_chars(corpus.sentences(corpus.reference())?);
    if ref_tokens == 0 || ref_chars == 0 {
        return Err(Error::Degenerate(format!("reference language {} is empty", corpus.reference())));
    }
    let languages = langs
        .par_iter()
        .map(|lang| {
            let sents = corpus.sentences(lang)?;
            let token_count = count_tokens(tok, sents)?;
            let character_count = count_chars(sents);
            Ok(LanguageMetrics {
                language: lang.clone(),
                tokens_ratio: token_count as f64 / ref_tokens as f64,
                characters_ratio: character_count as f64 / ref_chars as f64,
                token_count,
                character_count,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        reference: corpus.reference().to_string(),
        languages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpe::{train_bpe, PretokenRule};
    use std::collections::BTreeMap;

    fn corpus(pairs: &[(&str, &[&str])]) -> ParallelCorpus {
        let mut m = BTreeMap::new();
        for (l, s) in pairs {
            m.insert(l.to_string(), s.iter().map(|x| x.to_string()).collect());
        }
        ParallelCorpus::new(m, "eng").unwrap()
    }

    #[test]
    fn reference_ratio_is_one() {
        let c = corpus(&[("eng", &["hello there", "bye"]), ("hin", &["नमस्ते", "अलविदा"])]);
        let tok = train_bpe(&["hello there bye"], 5).unwrap();
        assert_eq!(tokens_ratio(&tok, &c, "eng").unwrap(), 1.0);
        assert_eq!(characters_ratio(&c, "eng").unwrap(), 1.0);
    }

    #[test]
    fn byte_tokenizer_ratio_is_byte_ratio() {
        let c = corpus(&[("eng", &["abc", "de"]), ("hin", &["नम", "क"])]);
        let tok = Tokenizer::byte_level(PretokenRule::WhitespacePunct);
        let bytes = |l: &str| c.sentences(l).unwrap().iter().map(|s| s.len()).sum::<usize>() as f64;
        let expected = bytes("hin") / bytes("eng");
        assert_eq!(tokens_ratio(&tok, &c, "hin").unwrap(), expected);
        assert_eq!(expected, 9.0 / 5.0);
    }

    #[test]
    fn char_ratio_direct_count() {
        let c = corpus(&[("eng", &["abcd"]), ("xx", &["ab"])]);
        assert_eq!(characters_ratio(&c, "xx").unwrap(), 0.5);
    }

    #[test]
    fn char_ratio_ignores_tokenizer_and_counts_scalars() {
        let c = corpus(&[("eng", &["abcd"]), ("hin", &["नमस्ते"])]);
        // 6 scalar values (न म स ् त े) despite 18 bytes
        assert_eq!(characters_ratio(&c, "hin").unwrap(), 1.5);
        let a = analyze(&Tokenizer::byte_level(PretokenRule::WhitespacePunct), &c, None).unwrap();
        let b = analyze(&train_bpe(&["नमस्ते abcd"], 10).unwrap(), &c, None).unwrap();
        assert_eq!(a.get("hin").unwrap().characters_ratio, b.get("hin").unwrap().characters_ratio);
    }

    #[test]
    fn missing_language_and_empty_reference() {
        let c = corpus(&[("eng", &[""]), ("hin", &["x"])]);
        let tok = Tokenizer::byte_level(PretokenRule::WhitespacePunct);
        assert!(matches!(tokens_ratio(&tok, &c, "hin"), Err(Error::Degenerate(_))));
        assert!(matches!(tokens_ratio(&tok, &c, "fra"), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn reduction_identity_and_full_word_items() {
        let tok = Tokenizer::byte_level(PretokenRule::WhitespacePunct);
        let data = vec!["परिवार"; 10];
        assert_eq!(token_reduction(&tok, &tok, &data).unwrap(), 0.0);
        // smallest merge budget that leaves the word in 4 tokens
        let four = (0..18)
            .map(|n| train_bpe(&["परिवार"], n).unwrap())
            .find(|t| t.encode("परिवार").unwrap().len() == 4)
            .unwrap();
        let exp = four.expand_vocabulary(&["परिवार"]).unwrap();
        // 10 tokens after vs 40 before
        assert_eq!(token_reduction(&four, &exp, &data).unwrap(), 0.75);
    }

    #[test]
    fn conservation() {
        assert_eq!(performance_conservation(0.7, 0.7).unwrap(), 1.0);
        assert_eq!(performance_conservation(43.05, 86.1).unwrap(), 0.5);
        assert_eq!(performance_conservation(86.0, 86.0).unwrap(), 1.0);
        assert!(performance_conservation(1.0, 0.0).is_err());
        assert!(performance_conservation(1.0, -2.0).is_err());
    }

    #[test]
    fn report_serializations() {
        let c = corpus(&[("eng", &["ab"]), ("hin", &["नम"])]);
        let r = analyze(&Tokenizer::byte_level(PretokenRule::WhitespacePunct), &c, None).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("language,tokens_ratio,characters_ratio,token_count,character_count\n"));
        assert!(csv.contains("hin,3.0,1.0,6,2"));
        let back: MetricReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
