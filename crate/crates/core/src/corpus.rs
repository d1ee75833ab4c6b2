//! Corpus ingestion: plain line files and parallel multi-language corpora.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_REFERENCE: &str = "eng";

/// Read a UTF-8 file holding one sequence per line.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes)
        .map_err(|e| Error::input(format!("{}: not valid UTF-8: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
        .collect())
}

/// Index-aligned sentences for several languages.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelCorpus {
    languages: BTreeMap<String, Vec<String>>,
    reference: String,
}

impl ParallelCorpus {
    pub fn new(languages: BTreeMap<String, Vec<String>>, reference: &str) -> Result<Self> {
        let mut corpus = ParallelCorpus {
            languages,
            reference: reference.to_string(),
        };
        let resolved = corpus
            .resolve(reference)
            .ok_or_else(|| Error::input(format!("reference language {reference:?} not in corpus")))?
            .to_string();
        corpus.reference = resolved;
        let expected = corpus.languages[&corpus.reference].len();
        let ragged: Vec<String> = corpus
            .languages
            .iter()
            .filter(|(_, s)| s.len() != expected)
            .map(|(l, s)| format!("{l} ({} vs {expected})", s.len()))
            .collect();
        if !ragged.is_empty() {
            return Err(Error::Consistency(format!(
                "parallel corpus languages differ in length: {}",
                ragged.join(", ")
            )));
        }
        Ok(corpus)
    }

    /// Load a directory or a TSV file.
    ///
    /// Directories may hold `<lang>.txt` files (one sentence per line) or
    /// per-language subdirectories with a `<split>.tsv` file whose header
    /// names a `text` column. A file path is read as `lang \t index \t text`.
    pub fn load(path: &Path, reference: &str, split: &str) -> Result<Self> {
        if path.is_dir() {
            Self::from_dir(path, reference, split)
        } else {
            Self::from_tsv(path, reference)
        }
    }

    fn from_dir(dir: &Path, reference: &str, split: &str) -> Result<Self> {
        let mut languages = BTreeMap::new();
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths: Vec<_> = entries
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
            .collect::<Result<_>>()?;
        paths.sort();
        for p in paths {
            let name = p.file_name().unwrap_or_default().to_string_lossy().to_string();
            if p.is_dir() {
                let tsv = p.join(format!("{split}.tsv"));
                if tsv.is_file() {
                    languages.insert(name, read_text_column(&tsv)?);
                }
            } else if let Some(lang) = name.strip_suffix(".txt") {
                languages.insert(lang.to_string(), read_lines(&p)?);
            }
        }
        if languages.is_empty() {
            return Err(Error::input(format!("{}: no language files found", dir.display())));
        }
        ParallelCorpus::new(languages, reference)
    }

    fn from_tsv(path: &Path, reference: &str) -> Result<Self> {
        let mut by_lang: BTreeMap<String, BTreeMap<u64, String>> = BTreeMap::new();
        for (k, line) in read_lines(path)?.into_iter().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut cols = line.splitn(3, '\t');
            let (Some(lang), Some(index), Some(text)) = (cols.next(), cols.next(), cols.next()) else {
                return Err(Error::schema(path.display().to_string(), format!("line {}: expected 3 columns", k + 1)));
            };
            let index: u64 = index.parse().map_err(|_| {
                Error::schema(path.display().to_string(), format!("line {}: bad index {index:?}", k + 1))
            })?;
            if by_lang.entry(lang.to_string()).or_default().insert(index, text.to_string()).is_some() {
                return Err(Error::schema(
                    path.display().to_string(),
                    format!("line {}: duplicate index {index} for {lang}", k + 1),
                ));
            }
        }
        let mut index_sets = by_lang.values().map(|m| m.keys().collect::<Vec<_>>());
        if let Some(first) = index_sets.next() {
            if index_sets.any(|s| s != first) {
                return Err(Error::Consistency(format!(
                    "{}: languages do not share the same sentence indices",
                    path.display()
                )));
            }
        }
        let languages = by_lang
            .into_iter()
            .map(|(l, m)| (l, m.into_values().collect()))
            .collect();
        ParallelCorpus::new(languages, reference)
    }

    /// Exact key, or the unique key whose part before `_` equals `lang`
    /// (so `hin` finds `hin_Deva`).
    pub fn resolve(&self, lang: &str) -> Option<&str> {
        if let Some((k, _)) = self.languages.get_key_value(lang) {
            return Some(k);
        }
        let mut hits = self
            .languages
            .keys()
            .filter(|k| k.split('_').next() == Some(lang));
        match (hits.next(), hits.next()) {
            (Some(k), None) => Some(k),
            _ => None,
        }
    }

    pub fn reference(&self) -> &str {
        &self.reference
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.languages.keys().map(String::as_str)
    }

    pub fn sentences(&self, lang: &str) -> Result<&[String]> {
        let key = self
            .resolve(lang)
            .ok_or_else(|| Error::input(format!("language {lang:?} not in corpus")))?;
        Ok(&self.languages[key])
    }

    /// Concatenate the corpus with itself (used to check scale invariance).
    pub fn duplicated(&self) -> ParallelCorpus {
        let languages = self
            .languages
            .iter()
            .map(|(l, s)| (l.clone(), s.iter().chain(s.iter()).cloned().collect()))
            .collect();
        ParallelCorpus {
            languages,
            reference: self.reference.clone(),
        }
    }
}

fn read_text_column(path: &Path) -> Result<Vec<String>> {
    let lines = read_lines(path)?;
    let mut iter = lines.into_iter();
    let header = iter
        .next()
        .ok_or_else(|| Error::schema(path.display().to_string(), "empty file"))?;
    let col = header
        .split('\t')
        .position(|h| h == "text")
        .ok_or_else(|| Error::schema(path.display().to_string(), "no `text` column in header"))?;
    iter.filter(|l| !l.is_empty())
        .enumerate()
        .map(|(k, l)| {
            l.split('\t').nth(col).map(str::to_string).ok_or_else(|| {
                Error::schema(path.display().to_string(), format!("row {} lacks the text column", k + 2))
            })
        })
        .collect()
}
