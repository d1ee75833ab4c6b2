//! End-to-end experiments: select items, initialize their embeddings,
//! assemble the expanded model assets and measure token reduction.

mod config;
mod report;

pub use config::{load_sentences, ExperimentConfig, Init, Method};
pub use report::{
    append_ledger, emit_report, pareto_front, read_ledger, render_svg, rows_from_csv, rows_to_csv, ResultRow,
    LEDGER_HEADER,
};

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bpe::{extend_merges, Tokenizer};
use crate::candidates::{extract_candidate_words, CandidateSet};
use crate::detok::{
    evaluate_with_affixes, evaluate_words, gather_activations, select_expansion, Occurrence, Reduction, SelectedItem,
    TraceSet,
};
use crate::embed::{
    assemble_expanded, fit_mappers, init_fvt, init_from_trace, init_random, init_sparse_combo, load_alpha,
    mean_of_rows, EmbeddingMatrix, MapperSet, NewItem, Role,
};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::metrics::{perversity_audit, token_reduction};

/// An item chosen for expansion, with its ranking weight and, for
/// trace-based methods, where its activations come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedItem {
    pub surface: String,
    /// Corpus frequency mass behind the item (sum over source words).
    pub weight: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduction: Option<Reduction>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub occurrences: Vec<Occurrence>,
}

/// The selection stage's output.
#[derive(Debug, Clone)]
pub struct Plan {
    pub original: Tokenizer,
    pub expanded: Tokenizer,
    pub items: Vec<PlannedItem>,
}

/// Loaded inputs shared by the stages.
pub struct Inputs {
    pub tokenizer: Tokenizer,
    pub train: Vec<String>,
    pub eval: Vec<String>,
    pub traces: Option<TraceSet>,
}

impl Inputs {
    pub fn load(cfg: &ExperimentConfig) -> Result<Inputs> {
        let tokenizer = Tokenizer::load(&cfg.tokenizer)?;
        let sentences = |p: &Path| load_sentences(p, &cfg.language, &cfg.reference, &cfg.split);
        let train = sentences(&cfg.corpus)?;
        let eval = match &cfg.eval_corpus {
            Some(p) => sentences(p)?,
            None => train.clone(),
        };
        let traces = cfg.trace.as_deref().map(load_traces).transpose()?;
        Ok(Inputs {
            tokenizer,
            train,
            eval,
            traces,
        })
    }
}

fn load_traces(path: &Path) -> Result<TraceSet> {
    let set = TraceSet::load(path)?;
    for w in set.validate() {
        log::warn!("{}: {w}", path.display());
    }
    Ok(set)
}

/// Trace tokenizations must agree with the tokenizer under expansion.
fn check_trace_tokenization(traces: &TraceSet, tok: &Tokenizer, words: &HashMap<&str, u64>) -> Result<()> {
    for r in traces.records().iter().filter(|r| words.contains_key(r.word.as_str())) {
        let ids = tok.encode(&r.word)?;
        if ids != r.token_ids {
            return Err(Error::Consistency(format!(
                "trace tokenizes {:?} as {:?} but the tokenizer gives {:?}",
                r.word, r.token_ids, ids
            )));
        }
    }
    Ok(())
}

fn rank_selection(selected: Vec<SelectedItem>, freq: &HashMap<&str, u64>) -> Vec<PlannedItem> {
    let mut items: Vec<PlannedItem> = selected
        .into_iter()
        .map(|s| {
            let mut sources: Vec<&str> = s.occurrences.iter().map(|o| o.source_word.as_str()).collect();
            sources.sort_unstable();
            sources.dedup();
            let weight = sources.iter().map(|w| freq.get(w).copied().unwrap_or(0)).sum();
            PlannedItem {
                surface: s.surface,
                weight,
                reduction: Some(s.reduction),
                occurrences: s.occurrences,
            }
        })
        .collect();
    // stable: selection order breaks weight ties
    items.sort_by_key(|i| std::cmp::Reverse(i.weight));
    items
}

/// Choose the items to add and build the expanded tokenizer.
pub fn plan(cfg: &ExperimentConfig, inputs: &Inputs) -> Result<Plan> {
    let tok = &inputs.tokenizer;
    if cfg.method == Method::BpeExtend {
        let budget = cfg.budget.expect("validated");
        let expanded = extend_merges(tok, &inputs.train, budget)?;
        let items = expanded
            .new_ids_since(tok)
            .into_iter()
            .map(|id| {
                Ok(PlannedItem {
                    surface: String::from_utf8_lossy(&expanded.token_bytes(id)?).into_owned(),
                    weight: 0,
                    reduction: None,
                    occurrences: Vec::new(),
                })
            })
            .collect::<Result<_>>()?;
        return Ok(Plan {
            original: tok.clone(),
            expanded,
            items,
        });
    }
    let traces = inputs.traces.as_ref().expect("validated");
    let candidates: CandidateSet = extract_candidate_words(&inputs.train, cfg.min_freq)?.out_of_vocabulary(tok)?;
    let freq: HashMap<&str, u64> = candidates.words.iter().map(|(w, f)| (w.as_str(), *f)).collect();
    check_trace_tokenization(traces, tok, &freq)?;
    let outcomes = match cfg.method {
        Method::Tokens2words => evaluate_words(traces, cfg.selection.last_token_only)?,
        Method::Fragmend => evaluate_with_affixes(traces, tok, cfg.selection.last_token_only)?,
        Method::BpeExtend => unreachable!(),
    };
    let outcomes: Vec<_> = outcomes
        .into_iter()
        .filter(|o| freq.contains_key(o.source_word.as_str()))
        .collect();
    log::info!(
        "{} candidate words, {} outcomes ({} successful)",
        candidates.len(),
        outcomes.len(),
        outcomes.iter().filter(|o| o.success).count()
    );
    let mut items = rank_selection(select_expansion(&outcomes, &cfg.selection), &freq);
    if let Some(b) = cfg.budget {
        items.truncate(b);
    }
    let expanded = tok.expand_vocabulary(&items.iter().map(|i| i.surface.as_str()).collect::<Vec<_>>())?;
    Ok(Plan {
        original: tok.clone(),
        expanded,
        items,
    })
}

pub fn load_embeddings(cfg: &ExperimentConfig) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
    let e = EmbeddingMatrix::load_role(&cfg.input_embeddings, Role::Input)?;
    let u = match &cfg.output_embeddings {
        Some(p) => EmbeddingMatrix::load_role(p, Role::Output)?,
        None if e.tied => e.as_role(Role::Output),
        None => {
            return Err(Error::schema(
                "experiment config",
                "`output_embeddings` is required unless the input matrix is marked tied",
            ))
        }
    };
    if e.dim() != u.dim() {
        return Err(Error::Consistency(format!("input dim {} != output dim {}", e.dim(), u.dim())));
    }
    Ok((e, u))
}

fn file_digest(h: &mut Sha256, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    h.update((bytes.len() as u64).to_le_bytes());
    h.update(&bytes);
    Ok(())
}

/// Fit mappers, reusing `cache_dir/mappers-<hash>.bin` when present. The key
/// covers the trace, its sidecar and both embedding matrices.
pub fn mappers_cached(
    trace_path: &Path,
    e: &EmbeddingMatrix,
    u: &EmbeddingMatrix,
    cache_dir: Option<&Path>,
) -> Result<MapperSet> {
    let traces = load_traces(trace_path)?;
    let Some(dir) = cache_dir else {
        return fit_mappers(&traces, e, u);
    };
    let mut h = Sha256::new();
    file_digest(&mut h, trace_path)?;
    if let Some(side) = &traces.header.sidecar {
        file_digest(&mut h, &trace_path.parent().unwrap_or(Path::new(".")).join(side))?;
    }
    h.update(e.to_bytes());
    h.update(u.to_bytes());
    let path = dir.join(format!("mappers-{}.bin", hex::encode(&h.finalize()[..16])));
    if path.is_file() {
        match MapperSet::load(&path) {
            Ok(m) => {
                log::info!("using cached mappers {}", path.display());
                return Ok(m);
            }
            Err(err) => log::warn!("ignoring unreadable cache entry {}: {err}", path.display()),
        }
    }
    let m = fit_mappers(&traces, e, u)?;
    m.save(&path)?;
    Ok(m)
}

fn average(vs: &[Vec<f32>]) -> Vec<f32> {
    let d = vs[0].len();
    let n = vs.len() as f64;
    (0..d)
        .map(|j| (vs.iter().map(|v| v[j] as f64).sum::<f64>() / n) as f32)
        .collect()
}

/// Input and output vectors for every planned item, in plan order.
pub fn initialize(
    cfg: &ExperimentConfig,
    inputs: &Inputs,
    plan: &Plan,
    e: &EmbeddingMatrix,
    u: &EmbeddingMatrix,
    cache_dir: Option<&Path>,
) -> Result<Vec<NewItem>> {
    let n = plan.items.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let pairs: Vec<(Vec<f32>, Vec<f32>)> = match cfg.init {
        Init::Random => {
            let a = init_random(e, n, cfg.seed)?;
            let b = init_random(u, n, cfg.seed ^ 0x9e37_79b9_7f4a_7c15)?;
            a.into_iter().zip(b).collect()
        }
        Init::Fvt => plan
            .items
            .iter()
            .zip(plan.expanded.new_ids_since(&plan.original))
            .map(|(item, id)| {
                if cfg.method == Method::BpeExtend {
                    let ids = plan.original.bpe_bytes(&plan.expanded.token_bytes(id)?);
                    Ok((mean_of_rows(e, &ids)?, mean_of_rows(u, &ids)?))
                } else {
                    Ok((init_fvt(e, &plan.original, &item.surface)?, init_fvt(u, &plan.original, &item.surface)?))
                }
            })
            .collect::<Result<_>>()?,
        Init::SparseCombo => {
            let path = cfg.alpha.as_deref().expect("validated");
            let alpha = load_alpha(path)?;
            plan.items
                .iter()
                .map(|item| {
                    let w = alpha.get(&item.surface).ok_or_else(|| {
                        Error::input(format!("{}: no weights for {:?}", path.display(), item.surface))
                    })?;
                    Ok((init_sparse_combo(e, w)?, init_sparse_combo(u, w)?))
                })
                .collect::<Result<_>>()?
        }
        Init::TraceMapped => {
            let traces = inputs.traces.as_ref().expect("validated");
            let mapper_path = cfg.mapper_trace.as_deref().or(cfg.trace.as_deref()).expect("validated");
            let mappers = mappers_cached(mapper_path, e, u, cache_dir)?;
            let selected: Vec<SelectedItem> = plan
                .items
                .iter()
                .map(|i| SelectedItem {
                    surface: i.surface.clone(),
                    reduction: i.reduction.unwrap_or(Reduction::Mean),
                    occurrences: i.occurrences.clone(),
                })
                .collect();
            let acts = gather_activations(&selected, traces)?;
            selected
                .iter()
                .zip(&acts)
                .map(|(item, hs)| {
                    let mut ins = Vec::with_capacity(hs.len());
                    let mut outs = Vec::with_capacity(hs.len());
                    for (o, h) in item.occurrences.iter().zip(hs) {
                        ins.push(init_from_trace(&mappers, h, o.layer, Role::Input)?);
                        outs.push(init_from_trace(&mappers, h, o.layer, Role::Output)?);
                    }
                    Ok((average(&ins), average(&outs)))
                })
                .collect::<Result<_>>()?
        }
    };
    Ok(plan
        .items
        .iter()
        .zip(pairs)
        .map(|(item, (input, output))| NewItem {
            surface: item.surface.clone(),
            input,
            output,
        })
        .collect())
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub row: ResultRow,
    pub expanded: Tokenizer,
    pub input_embeddings: EmbeddingMatrix,
    pub output_embeddings: EmbeddingMatrix,
    pub items: Vec<PlannedItem>,
    pub perverse_words: usize,
    pub artifacts: Vec<PathBuf>,
}

pub const TOKENIZER_FILE: &str = "tokenizer.json";
pub const INPUT_FILE: &str = "input_embeddings.bin";
pub const OUTPUT_FILE: &str = "output_embeddings.bin";
pub const SELECTION_FILE: &str = "selection.jsonl";
pub const RESULT_FILE: &str = "result.json";

pub fn write_selection(path: &Path, items: &[PlannedItem]) -> Result<()> {
    let mut out = String::new();
    for i in items {
        out.push_str(&serde_json::to_string(i).expect("json"));
        out.push('\n');
    }
    fsutil::write_atomic(path, out.as_bytes())
}

/// Select, initialize, assemble and measure; write artifacts to
/// `output_dir` and append the result to the ledger if one is configured.
pub fn run_experiment(cfg: &ExperimentConfig, cache_dir: Option<&Path>) -> Result<RunOutput> {
    let inputs = Inputs::load(cfg)?;
    let (e, u) = load_embeddings(cfg)?;
    let plan = plan(cfg, &inputs)?;
    let new_items = initialize(cfg, &inputs, &plan, &e, &u, cache_dir)?;
    let (e2, u2) = assemble_expanded(&e, &u, &plan.original, &plan.expanded, &new_items)?;
    let reduction = token_reduction(&plan.original, &plan.expanded, &inputs.eval)?;
    let words: Vec<&str> = {
        let mut w: Vec<&str> = inputs.eval.iter().flat_map(|s| crate::candidates::split_words(s)).collect();
        w.sort_unstable();
        w.dedup();
        w
    };
    let perverse = perversity_audit(&plan.original, &plan.expanded, &words)?;
    if !perverse.is_empty() {
        log::warn!("{} evaluation words encode longer after expansion", perverse.len());
    }
    let row = ResultRow {
        fingerprint: cfg.fingerprint(),
        language: cfg.language.clone(),
        method: cfg.method.name().into(),
        init: cfg.init.name().into(),
        budget: cfg.budget,
        items_added: plan.items.len(),
        token_reduction: reduction,
        performance: cfg.performance,
        metric: cfg.metric.clone(),
        higher_is_better: cfg.higher_is_better,
    };
    let dir = &cfg.output_dir;
    let artifacts = vec![
        dir.join(TOKENIZER_FILE),
        dir.join(INPUT_FILE),
        dir.join(OUTPUT_FILE),
        dir.join(SELECTION_FILE),
        dir.join(RESULT_FILE),
    ];
    plan.expanded.save(&artifacts[0])?;
    e2.save(&artifacts[1])?;
    u2.save(&artifacts[2])?;
    write_selection(&artifacts[3], &plan.items)?;
    let summary = serde_json::json!({
        "result": &row,
        "perverse_words": perverse,
    });
    fsutil::write_atomic(&artifacts[4], serde_json::to_string_pretty(&summary).expect("json").as_bytes())?;
    if let Some(ledger) = &cfg.ledger {
        append_ledger(ledger, &row)?;
    }
    Ok(RunOutput {
        row,
        expanded: plan.expanded,
        input_embeddings: e2,
        output_embeddings: u2,
        items: plan.items,
        perverse_words: perverse.len(),
        artifacts,
    })
}

/// Selection only: write the planned items and the expanded tokenizer.
pub fn run_selection(cfg: &ExperimentConfig) -> Result<Plan> {
    let inputs = Inputs::load(cfg)?;
    let plan = plan(cfg, &inputs)?;
    write_selection(&cfg.output_dir.join(SELECTION_FILE), &plan.items)?;
    plan.expanded.save(&cfg.output_dir.join(TOKENIZER_FILE))?;
    Ok(plan)
}

/// Selection plus initialization: also write the assembled matrices.
pub fn run_init(cfg: &ExperimentConfig, cache_dir: Option<&Path>) -> Result<(Plan, EmbeddingMatrix, EmbeddingMatrix)> {
    let inputs = Inputs::load(cfg)?;
    let (e, u) = load_embeddings(cfg)?;
    let plan = plan(cfg, &inputs)?;
    let new_items = initialize(cfg, &inputs, &plan, &e, &u, cache_dir)?;
    let (e2, u2) = assemble_expanded(&e, &u, &plan.original, &plan.expanded, &new_items)?;
    write_selection(&cfg.output_dir.join(SELECTION_FILE), &plan.items)?;
    plan.expanded.save(&cfg.output_dir.join(TOKENIZER_FILE))?;
    e2.save(&cfg.output_dir.join(INPUT_FILE))?;
    u2.save(&cfg.output_dir.join(OUTPUT_FILE))?;
    Ok((plan, e2, u2))
}
