use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lexpand::bpe::{train_bpe, PretokenRule, Tokenizer, GPT2_PATTERN};
use lexpand::detok::{TraceBuilder, TraceRecord};
use lexpand::embed::{EmbeddingMatrix, Role};

const DIM: usize = 4;
const WORDS: [&str; 4] = ["kalimba", "dorofeji", "bamalika", "felodiki"];

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let corpus: Vec<String> = (0..60)
            .map(|k| format!("{} {} ok {}", WORDS[k % 4], WORDS[(k + 1) % 4], WORDS[(k * 3) % 4]))
            .collect();
        let tok = train_bpe(&["a b c d e f g h i j k l m n o p".to_string()], 0).unwrap();
        tok.save(&root.join("tokenizer.json")).unwrap();
        std::fs::write(root.join("train.txt"), corpus.join("\n")).unwrap();

        let rows = tok.len();
        let data: Vec<f32> = (0..rows * DIM).map(|k| ((k * 37 % 101) as f32 / 50.0) - 1.0).collect();
        EmbeddingMatrix::new(Role::Input, rows, DIM, data.clone()).unwrap().save(&root.join("e.bin")).unwrap();
        EmbeddingMatrix::new(Role::Output, rows, DIM, data).unwrap().save(&root.join("u.bin")).unwrap();

        let mut b = TraceBuilder::new("fixture", DIM, 2);
        for w in WORDS {
            let ids = tok.encode(w).unwrap();
            let n = ids.len();
            let h = vec![0.5, -0.25, 1.0, 0.75];
            b.push(
                TraceRecord::new(w, ids, 2).with_generation(n, 1, &format!("{w} {w}")),
                BTreeMap::from([((n, 1), h)]),
            )
            .unwrap();
        }
        for (k, c) in ["a", "b", "c", "d", "e"].into_iter().enumerate() {
            let ids = tok.encode(c).unwrap();
            let h = (0..DIM).map(|j| ((k + j) % 3) as f32 - 0.5 + j as f32 * 0.1).collect();
            b.push(TraceRecord::new(c, ids, 2), BTreeMap::from([((1, 1), h)])).unwrap();
        }
        b.write(&root.join("trace.jsonl")).unwrap();

        std::fs::create_dir(root.join("par")).unwrap();
        std::fs::write(root.join("par/eng.txt"), "one two\nthree\n").unwrap();
        std::fs::write(root.join("par/xyz.txt"), "one two one two\nthree three\n").unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, name: &str, init: &str, extra: &str) -> PathBuf {
        let text = format!(
            r#"language = "syn"
tokenizer = "tokenizer.json"
corpus = "train.txt"
input_embeddings = "e.bin"
output_embeddings = "u.bin"
method = "tokens2words"
init = "{init}"
trace = "trace.jsonl"
output_dir = "{name}"
ledger = "ledger.csv"
performance = 0.5
{extra}
"#
        );
        let p = self.path(&format!("{name}.toml"));
        std::fs::write(&p, text).unwrap();
        p
    }
}

fn lexpand(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lexpand"));
    cmd.args(args).env_remove("LEXPAND_CACHE_DIR");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn analyze_fragmentation_prints_ratios() {
    let f = Fixture::new();
    let out = lexpand(
        &["analyze-fragmentation", "--tokenizer", s(&f.path("tokenizer.json")), "--corpus", s(&f.path("par"))],
        &[],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.starts_with("language,tokens_ratio"));
    assert!(text.lines().any(|l| l.starts_with("eng,1.0,")), "{text}");
    assert!(text.lines().any(|l| l.starts_with("xyz,")));
}

#[test]
fn run_writes_artifacts_and_ledger_then_pareto() {
    let f = Fixture::new();
    for (name, budget) in [("a", 1), ("b", 3)] {
        let cfg = f.config(name, "fvt", &format!("budget = {budget}"));
        let out = lexpand(&["run", "--config", s(&cfg)], &[]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let row: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
        assert_eq!(row["items_added"], budget);
        assert!(f.path(name).join("input_embeddings.bin").exists());
    }
    let out = lexpand(
        &[
            "pareto",
            "--ledger",
            s(&f.path("ledger.csv")),
            "--csv",
            s(&f.path("front.csv")),
            "--svg",
            s(&f.path("front.svg")),
        ],
        &[],
    );
    assert!(out.status.success());
    assert!(stdout(&out).contains("of 2 rows"));
    assert!(std::fs::read_to_string(f.path("front.svg")).unwrap().contains("class=\"point\""));
}

#[test]
fn select_and_init_embeddings() {
    let f = Fixture::new();
    let cfg = f.config("sel", "fvt", "budget = 2");
    let out = lexpand(&["select", "--config", s(&cfg)], &[]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("selected 2 items"));
    assert!(!f.path("sel").join("input_embeddings.bin").exists());
    let out = lexpand(&["init-embeddings", "--config", s(&cfg)], &[]);
    assert!(out.status.success());
    assert!(f.path("sel").join("output_embeddings.bin").exists());
}

#[test]
fn cache_dir_comes_from_the_environment() {
    let f = Fixture::new();
    let cfg = f.config("tm", "trace_mapped", "");
    let cache = f.path("cache");
    let out = lexpand(&["run", "--config", s(&cfg)], &[("LEXPAND_CACHE_DIR", &cache)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_dir(&cache).unwrap().count(), 1);
}

#[test]
fn validation_errors_exit_with_two() {
    let f = Fixture::new();
    let cfg = f.config("bad", "fvt", "unknown_key = 1");
    let out = lexpand(&["run", "--config", s(&cfg)], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml"));

    // a trace whose token ids disagree with the tokenizer
    let mut b = TraceBuilder::new("fixture", DIM, 2);
    b.push(TraceRecord::new("kalimba", vec![0], 2).with_generation(1, 1, "x"), BTreeMap::new()).unwrap();
    b.write(&f.path("wrong.jsonl")).unwrap();
    let out = lexpand(
        &["validate-traces", "--trace", s(&f.path("wrong.jsonl")), "--tokenizer", s(&f.path("tokenizer.json"))],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn input_errors_exit_with_one() {
    let f = Fixture::new();
    let out = lexpand(&["run", "--config", s(&f.path("missing.toml"))], &[]);
    assert_eq!(out.status.code(), Some(1));
    let out = lexpand(&["run"], &[]);
    assert_eq!(out.status.code(), Some(1));
    let out = lexpand(&["--help"], &[]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn validate_traces_reports_a_clean_file() {
    let f = Fixture::new();
    let out = lexpand(
        &["validate-traces", "--trace", s(&f.path("trace.jsonl")), "--tokenizer", s(&f.path("tokenizer.json"))],
        &[],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("9 records, 0 warnings"));
}

fn development_tokenizer() -> Tokenizer {
    let rule = PretokenRule::regex(GPT2_PATTERN).unwrap();
    let mut vocab = Tokenizer::byte_level(rule.clone()).vocab().clone();
    let merges = [("d", "e"), ("v", "e"), ("de", "ve"), ("l", "o"), ("lo", "p"), ("m", "e"), ("n", "t"), ("me", "nt")];
    for (l, r) in merges {
        let next = vocab.len() as u32;
        vocab.insert(format!("{l}{r}"), next);
    }
    let merges = merges.iter().map(|(l, r)| (l.to_string(), r.to_string())).collect();
    Tokenizer::new(vocab, merges, rule, Vec::new()).unwrap()
}

#[test]
fn audit_perversity_lists_longer_words() {
    let f = Fixture::new();
    let orig = development_tokenizer();
    orig.save(&f.path("orig.json")).unwrap();
    orig.expand_vocabulary(&["elop"]).unwrap().save(&f.path("exp.json")).unwrap();
    std::fs::write(f.path("words.txt"), "development and elop\nment\n").unwrap();
    let out = lexpand(
        &[
            "audit-perversity",
            "--original",
            s(&f.path("orig.json")),
            "--expanded",
            s(&f.path("exp.json")),
            "--words",
            s(&f.path("words.txt")),
        ],
        &[],
    );
    assert!(out.status.success());
    assert_eq!(stdout(&out).trim(), r#"{"word":"development","orig_len":3,"exp_len":4}"#);
}
