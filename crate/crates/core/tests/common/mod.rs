//! Synthetic language fixtures shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lexpand::bpe::{train_bpe, Tokenizer};
use lexpand::detok::{TraceBuilder, TraceRecord};
use lexpand::embed::{EmbeddingMatrix, Role};
use lexpand::pipeline::ExperimentConfig;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DIM: usize = 8;
pub const LAYERS: usize = 4;
/// Layer at which every frequent word is detokenized in the trace.
pub const DETOK_LAYER: usize = 3;

/// Frequent words use letters a–m, filler words n–z, so no item built from
/// frequent words can occur inside filler.
const WORD_LETTERS: &[u8] = b"abcdefghijklm";
const FILLER_LETTERS: &[u8] = b"nopqrstuvwxyz";

pub struct World {
    pub dir: tempfile::TempDir,
    pub words: Vec<String>,
    pub tokenizer: Tokenizer,
    pub train: Vec<String>,
    pub heldout: Vec<String>,
    pub input: EmbeddingMatrix,
    pub output: EmbeddingMatrix,
    /// Hidden states of single-token records are `q · e` for embedding row `e`.
    pub q: DMatrix<f64>,
}

fn random_word(rng: &mut ChaCha8Rng, letters: &[u8], len: std::ops::RangeInclusive<usize>) -> String {
    let n = rng.random_range(len);
    (0..n).map(|_| letters[rng.random_range(0..letters.len())] as char).collect()
}

fn sentences(rng: &mut ChaCha8Rng, words: &[String], count: usize) -> Vec<String> {
    let weights: Vec<f64> = (0..words.len()).map(|k| 1.0 / (k as f64 + 1.0)).collect();
    let total: f64 = weights.iter().sum();
    (0..count)
        .map(|_| {
            (0..6)
                .map(|_| {
                    if rng.random_bool(0.7) {
                        let mut x = rng.random_range(0.0..total);
                        let mut k = 0;
                        while x >= weights[k] && k + 1 < words.len() {
                            x -= weights[k];
                            k += 1;
                        }
                        words[k].clone()
                    } else {
                        random_word(rng, FILLER_LETTERS, 4..=7)
                    }
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, role: Role, rows: usize) -> EmbeddingMatrix {
    let data = (0..rows * DIM).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    EmbeddingMatrix::new(role, rows, DIM, data).unwrap()
}

pub fn write_lines(path: &Path, lines: &[String]) {
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}

impl World {
    /// Build and write a synthetic language: 20 frequent multi-token words,
    /// train and held-out splits, a base tokenizer, embeddings and a trace in
    /// which every frequent word is detokenized on its last token.
    pub fn build(seed: u64) -> World {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut words: Vec<String> = Vec::new();
        while words.len() < 20 {
            let w = random_word(&mut rng, WORD_LETTERS, 6..=9);
            if !words.contains(&w) {
                words.push(w);
            }
        }
        let generic: Vec<String> = (0..200).map(|_| random_word(&mut rng, b"abcdefghijklmnopqrstuvwxyz", 2..=5)).collect();
        let tokenizer = train_bpe(&generic, 12).unwrap();
        for w in &words {
            assert!(tokenizer.encode(w).unwrap().len() >= 2, "{w} should be multi-token");
        }
        let train = sentences(&mut rng, &words, 400);
        let heldout = sentences(&mut rng, &words, 200);
        let input = random_matrix(&mut rng, Role::Input, tokenizer.len());
        let output = random_matrix(&mut rng, Role::Output, tokenizer.len());
        let q = DMatrix::from_fn(DIM, DIM, |_, _| rng.random_range(-1.0..1.0)).qr().q();

        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        tokenizer.save(&root.join("tokenizer.json")).unwrap();
        write_lines(&root.join("train.txt"), &train);
        write_lines(&root.join("heldout.txt"), &heldout);
        input.save(&root.join("input.bin")).unwrap();
        output.save(&root.join("output.bin")).unwrap();

        let mut b = TraceBuilder::new("synthetic", DIM, LAYERS);
        for w in &words {
            let ids = tokenizer.encode(w).unwrap();
            let n = ids.len();
            let rec = TraceRecord::new(w, ids, LAYERS)
                .with_generation(n, DETOK_LAYER, &format!("{w}, {w}, {w}"))
                .with_generation(n, 1, "")
                .with_generation(1, 2, "zzz");
            let h: Vec<f32> = (0..DIM).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            b.push(rec, BTreeMap::from([((n, DETOK_LAYER), h)])).unwrap();
        }
        // single-token records for fitting mappers
        for c in b'!'..=b'~' {
            let s = (c as char).to_string();
            let ids = tokenizer.encode(&s).unwrap();
            let e = nalgebra::DVector::from_iterator(DIM, input.row(ids[0]).unwrap().iter().map(|&x| x as f64));
            let h = (q.transpose() * e).iter().map(|&x| x as f32).collect();
            b.push(TraceRecord::new(&s, ids, LAYERS), BTreeMap::from([((1, DETOK_LAYER), h)])).unwrap();
        }
        b.write(&root.join("trace.jsonl")).unwrap();

        World {
            dir,
            words,
            tokenizer,
            train,
            heldout,
            input,
            output,
            q,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Config text for `method`/`init` writing into `out`.
    pub fn config_text(&self, method: &str, init: &str, out: &str, extra: &str) -> String {
        format!(
            r#"language = "syn"
tokenizer = "tokenizer.json"
corpus = "train.txt"
eval_corpus = "heldout.txt"
input_embeddings = "input.bin"
output_embeddings = "output.bin"
method = "{method}"
init = "{init}"
trace = "trace.jsonl"
output_dir = "{out}"
seed = 7
{extra}
"#
        )
    }

    pub fn config(&self, method: &str, init: &str, out: &str, extra: &str) -> ExperimentConfig {
        let path = self.path(&format!("{out}.toml"));
        std::fs::write(&path, self.config_text(method, init, out, extra)).unwrap();
        ExperimentConfig::load(&path).unwrap()
    }

    /// Expected token reduction on the held-out split when every frequent
    /// word becomes one token and nothing else changes, counted directly.
    pub fn oracle_reduction(&self) -> f64 {
        let mut before = 0usize;
        let mut after = 0usize;
        let space = self.tokenizer.encode(" ").unwrap().len();
        for s in &self.heldout {
            before += self.tokenizer.encode(s).unwrap().len();
            for (k, w) in s.split(' ').enumerate() {
                let lead = if k == 0 { 0 } else { space };
                if self.words.iter().any(|x| x == w) {
                    after += lead + 1;
                } else {
                    let piece = if k == 0 { w.to_string() } else { format!(" {w}") };
                    after += self.tokenizer.encode(&piece).unwrap().len();
                }
            }
        }
        1.0 - after as f64 / before as f64
    }
}
