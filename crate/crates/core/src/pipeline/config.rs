use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{read_lines, ParallelCorpus, DEFAULT_REFERENCE};
use crate::detok::SelectionConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Continue BPE training on the target-language corpus.
    BpeExtend,
    /// Add whole words the model detokenizes.
    Tokens2words,
    /// Add whole words and affixes the model detokenizes.
    Fragmend,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Random,
    Fvt,
    SparseCombo,
    TraceMapped,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::BpeExtend => "bpe_extend",
            Method::Tokens2words => "tokens2words",
            Method::Fragmend => "fragmend",
        }
    }
}

impl Init {
    pub fn name(self) -> &'static str {
        match self {
            Init::Random => "random",
            Init::Fvt => "fvt",
            Init::SparseCombo => "sparse_combo",
            Init::TraceMapped => "trace_mapped",
        }
    }
}

fn default_min_freq() -> u64 {
    crate::candidates::DEFAULT_MIN_FREQ
}

fn default_metric() -> String {
    "score".into()
}

fn default_true() -> bool {
    true
}

fn default_reference() -> String {
    DEFAULT_REFERENCE.into()
}

fn default_split() -> String {
    "train".into()
}

/// One experiment, read from a TOML file. Relative paths resolve against the
/// file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub language: String,
    pub tokenizer: PathBuf,
    /// Candidate-extraction and BPE-training text.
    pub corpus: PathBuf,
    /// Held-out text for measuring token reduction; defaults to `corpus`.
    #[serde(default)]
    pub eval_corpus: Option<PathBuf>,
    /// Reference language and split, used when a corpus path is a parallel
    /// corpus directory.
    #[serde(default = "default_reference")]
    pub reference: String,
    #[serde(default = "default_split")]
    pub split: String,
    pub input_embeddings: PathBuf,
    /// Defaults to the input matrix, which must then be marked tied.
    #[serde(default)]
    pub output_embeddings: Option<PathBuf>,
    pub method: Method,
    pub init: Init,
    #[serde(default)]
    pub trace: Option<PathBuf>,
    /// Single-token traces for fitting mappers; defaults to `trace`.
    #[serde(default)]
    pub mapper_trace: Option<PathBuf>,
    #[serde(default)]
    pub alpha: Option<PathBuf>,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub budget: Option<usize>,
    #[serde(default = "default_min_freq")]
    pub min_freq: u64,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub ledger: Option<PathBuf>,
    /// Externally measured downstream score of the resulting model.
    #[serde(default)]
    pub performance: Option<f64>,
    #[serde(default = "default_metric")]
    pub metric: String,
    #[serde(default = "default_true")]
    pub higher_is_better: bool,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::schema("experiment config", e.message().to_string()))?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| e.in_file(path))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.tokenizer);
        fix(&mut self.corpus);
        fix(&mut self.input_embeddings);
        fix(&mut self.output_dir);
        for p in [
            &mut self.eval_corpus,
            &mut self.output_embeddings,
            &mut self.trace,
            &mut self.mapper_trace,
            &mut self.alpha,
            &mut self.ledger,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn needs_trace(&self) -> bool {
        matches!(self.method, Method::Tokens2words | Method::Fragmend) || self.init == Init::TraceMapped
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::schema("experiment config", m));
        if self.needs_trace() && self.trace.is_none() {
            return bad(format!(
                "method {} with init {} requires `trace`",
                self.method.name(),
                self.init.name()
            ));
        }
        if self.init == Init::SparseCombo && self.alpha.is_none() {
            return bad("init sparse_combo requires `alpha`".into());
        }
        if self.method == Method::BpeExtend && self.budget.is_none() {
            return bad("method bpe_extend requires `budget`".into());
        }
        if self.method == Method::BpeExtend && self.init == Init::TraceMapped {
            return bad("init trace_mapped needs detokenization outcomes; use tokens2words or fragmend".into());
        }
        if let Some(p) = self.performance {
            if !p.is_finite() {
                return bad(format!("performance {p} is not finite"));
            }
        }
        Ok(())
    }

    /// Short stable hash of every setting that affects results.
    pub fn fingerprint(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            for k in ["output_dir", "ledger", "performance", "metric", "higher_is_better"] {
                m.remove(k);
            }
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        hex::encode(&digest[..8])
    }
}

/// Sentences of `lang` from a line file or a parallel corpus directory.
pub fn load_sentences(path: &Path, lang: &str, reference: &str, split: &str) -> Result<Vec<String>> {
    if path.is_dir() {
        let c = ParallelCorpus::load(path, reference, split)?;
        Ok(c.sentences(lang)?.to_vec())
    } else {
        read_lines(path)
    }
}
