//! Detokenization verdicts over traces and selection of the expansion set.

mod matching;
mod trace;

pub use matching::{MatchRule, Substring, WordBoundary};
pub use trace::{HiddenRef, TraceBuilder, TraceHeader, TraceRecord, TraceSet, TRACE_FORMAT, TRACE_VERSION};

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bpe::Tokenizer;
use crate::candidates::{affixes_of, AffixSpan};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetokOutcome {
    pub target: String,
    pub source_word: String,
    pub success: bool,
    pub earliest_layer: Option<usize>,
    pub position: Option<usize>,
    /// The target is the whole source word rather than an affix of it.
    pub full_word: bool,
}

/// Minimum matching layer; among matches at that layer the largest
/// position wins.
fn earliest(
    trace: &TraceRecord,
    positions: impl Fn(usize) -> bool,
    target: &str,
    rule: &dyn MatchRule,
) -> Option<(usize, usize)> {
    trace
        .generations
        .iter()
        .filter(|((i, _), y)| positions(*i) && rule.matches(y, target))
        .map(|(&(i, l), _)| (l, i))
        .min_by_key(|&(l, i)| (l, std::cmp::Reverse(i)))
}

fn outcome(target: &str, trace: &TraceRecord, full_word: bool, hit: Option<(usize, usize)>) -> DetokOutcome {
    DetokOutcome {
        target: target.to_string(),
        source_word: trace.word.clone(),
        success: hit.is_some(),
        earliest_layer: hit.map(|(l, _)| l),
        position: hit.map(|(_, i)| i),
        full_word,
    }
}

/// Whole-word verdict with the default case-sensitive boundary matcher.
pub fn evaluate_word(trace: &TraceRecord, last_token_only: bool) -> Result<DetokOutcome> {
    evaluate_word_with(trace, last_token_only, &WordBoundary::default())
}

pub fn evaluate_word_with(trace: &TraceRecord, last_token_only: bool, rule: &dyn MatchRule) -> Result<DetokOutcome> {
    trace.check()?;
    let n = trace.len();
    let hit = earliest(trace, |i| !last_token_only || i == n, &trace.word, rule);
    Ok(outcome(&trace.word, trace, true, hit))
}

/// Affix verdict: generations at the span's last position only, any layer.
/// A span covering the whole word is judged as a word.
pub fn evaluate_affix(trace: &TraceRecord, span: &AffixSpan) -> Result<DetokOutcome> {
    evaluate_affix_with(trace, span, &Substring::default())
}

pub fn evaluate_affix_with(trace: &TraceRecord, span: &AffixSpan, rule: &dyn MatchRule) -> Result<DetokOutcome> {
    trace.check()?;
    let n = trace.len();
    if span.first == 0 || span.first > span.last || span.last > n || span.word_len != n {
        return Err(Error::input(format!(
            "span {}..={} (of {}) invalid for {:?} with {n} tokens",
            span.first, span.last, span.word_len, trace.word
        )));
    }
    if span.word != trace.word {
        return Err(Error::input(format!(
            "span belongs to {:?}, trace is for {:?}",
            span.word, trace.word
        )));
    }
    if span.is_full_word() {
        let mut o = evaluate_word(trace, true)?;
        o.target = span.surface.clone();
        return Ok(o);
    }
    let hit = earliest(trace, |i| i == span.last, &span.surface, rule);
    Ok(outcome(&span.surface, trace, false, hit))
}

/// Word verdicts only (one per record), evaluated in parallel.
pub fn evaluate_words(traces: &TraceSet, last_token_only: bool) -> Result<Vec<DetokOutcome>> {
    traces
        .records()
        .par_iter()
        .map(|r| evaluate_word(r, last_token_only))
        .collect()
}

/// Word verdict followed by every affix verdict for each record, in record
/// order. Affixes come from the record's token ids decoded under `tok`.
pub fn evaluate_with_affixes(traces: &TraceSet, tok: &Tokenizer, last_token_only: bool) -> Result<Vec<DetokOutcome>> {
    let per_record: Vec<Vec<DetokOutcome>> = traces
        .records()
        .par_iter()
        .map(|r| {
            let mut out = vec![evaluate_word(r, last_token_only)?];
            for span in affixes_of(&r.word, &r.token_ids, tok)? {
                if !span.is_full_word() {
                    out.push(evaluate_affix(r, &span)?);
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_record.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Average the initializations of all occurrences.
    Mean,
    /// Keep the occurrence detokenized at the lowest layer.
    Earliest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub reduction: Reduction,
    pub min_length_chars: usize,
    pub full_word_preference: bool,
    pub last_token_only: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            reduction: Reduction::Mean,
            min_length_chars: 0,
            full_word_preference: false,
            last_token_only: true,
        }
    }
}

/// Where a selected item's activation is read from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Occurrence {
    pub source_word: String,
    pub position: usize,
    pub layer: usize,
    pub full_word: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectedItem {
    pub surface: String,
    pub reduction: Reduction,
    /// One entry under `Earliest`; all surviving occurrences under `Mean`.
    pub occurrences: Vec<Occurrence>,
}

/// Filter, group and reduce `outcomes`. Surfaces appear in order of their
/// first successful, length-passing outcome.
pub fn select_expansion(outcomes: &[DetokOutcome], cfg: &SelectionConfig) -> Vec<SelectedItem> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&DetokOutcome>> = HashMap::new();
    for o in outcomes {
        if !o.success || o.target.chars().count() < cfg.min_length_chars {
            continue;
        }
        let g = groups.entry(o.target.as_str()).or_default();
        if g.is_empty() {
            order.push(&o.target);
        }
        g.push(o);
    }
    order
        .into_iter()
        .map(|surface| {
            let mut group = std::mem::take(groups.get_mut(surface).expect("grouped"));
            if cfg.full_word_preference && group.iter().any(|o| o.full_word) {
                group.retain(|o| o.full_word);
            }
            let occ = |o: &DetokOutcome| Occurrence {
                source_word: o.source_word.clone(),
                position: o.position.expect("success has position"),
                layer: o.earliest_layer.expect("success has layer"),
                full_word: o.full_word,
            };
            let occurrences = match cfg.reduction {
                Reduction::Mean => group.iter().map(|o| occ(o)).collect(),
                Reduction::Earliest => {
                    // min_by_key returns the first minimum
                    let best = group.iter().min_by_key(|o| o.earliest_layer).expect("non-empty group");
                    vec![occ(best)]
                }
            };
            SelectedItem {
                surface: surface.to_string(),
                reduction: cfg.reduction,
                occurrences,
            }
        })
        .collect()
}

/// The hidden vectors behind each selected item, in occurrence order.
/// A missing vector is an error.
pub fn gather_activations(items: &[SelectedItem], traces: &TraceSet) -> Result<Vec<Vec<Vec<f32>>>> {
    items
        .iter()
        .map(|item| {
            item.occurrences
                .iter()
                .map(|o| {
                    traces.hidden(&o.source_word, o.position, o.layer).map_err(|e| match e {
                        Error::Consistency(m) => Error::Consistency(format!("selected item {:?}: {m}", item.surface)),
                        other => other,
                    })
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(word: &str, n: usize, gens: &[(usize, usize, &str)]) -> TraceRecord {
        let mut r = TraceRecord::new(word, (1..=n as u32).collect(), 8);
        for &(i, l, y) in gens {
            r = r.with_generation(i, l, y);
        }
        r
    }

    fn span(word: &str, first: usize, last: usize, surface: &str, n: usize) -> AffixSpan {
        AffixSpan {
            word: word.into(),
            first,
            last,
            surface: surface.into(),
            word_len: n,
        }
    }

    #[test]
    fn empty_generations_fail() {
        let r = rec("Layla", 3, &[(1, 1, ""), (3, 2, "")]);
        let o = evaluate_word(&r, false).unwrap();
        assert!(!o.success && o.earliest_layer.is_none() && o.position.is_none());
    }

    #[test]
    fn word_found_on_last_token() {
        let r = rec("Layla", 3, &[(3, 5, "Layla, Layla, Layla"), (3, 4, "Lay"), (2, 6, "Layla")]);
        let o = evaluate_word(&r, true).unwrap();
        assert_eq!((o.success, o.earliest_layer, o.position), (true, Some(5), Some(3)));
        let r = rec("Layla", 3, &[(3, 5, "Laylas")]);
        assert!(!evaluate_word(&r, false).unwrap().success);
    }

    #[test]
    fn tie_on_layer_prefers_later_position() {
        let r = rec("ab", 3, &[(1, 2, "ab"), (2, 2, "ab"), (3, 3, "ab")]);
        let o = evaluate_word(&r, false).unwrap();
        assert_eq!((o.earliest_layer, o.position), (Some(2), Some(2)));
    }

    #[test]
    fn affix_uses_final_position_only() {
        let r = rec("Layla", 3, &[(2, 1, "Lay Lay"), (3, 1, "nothing")]);
        let o = evaluate_affix(&r, &span("Layla", 1, 2, "Lay", 3)).unwrap();
        assert_eq!((o.success, o.earliest_layer, o.position, o.full_word), (true, Some(1), Some(2), false));
        let r = rec("Layla", 3, &[(3, 1, "Lay"), (1, 1, "Lay")]);
        assert!(!evaluate_affix(&r, &span("Layla", 1, 2, "Lay", 3)).unwrap().success);
        // sub-lexical: no boundary needed
        let r = rec("Layla", 3, &[(2, 4, "Laying")]);
        assert!(evaluate_affix(&r, &span("Layla", 1, 2, "Lay", 3)).unwrap().success);
    }

    #[test]
    fn full_span_matches_word_verdict() {
        for gens in [
            vec![(3, 2, "Laylas"), (2, 1, "Layla")],
            vec![(3, 2, "x Layla")],
            vec![(1, 1, "Layla"), (3, 7, "Layla,")],
        ] {
            let r = rec("Layla", 3, &gens);
            let a = evaluate_affix(&r, &span("Layla", 1, 3, "Layla", 3)).unwrap();
            assert_eq!(a, evaluate_word(&r, true).unwrap());
        }
    }

    #[test]
    fn bad_spans_rejected() {
        let r = rec("Layla", 3, &[]);
        for s in [span("Layla", 0, 2, "x", 3), span("Layla", 2, 4, "x", 3), span("Layla", 3, 2, "x", 3), span("Other", 1, 2, "x", 3)] {
            assert!(matches!(evaluate_affix(&r, &s), Err(Error::InvalidInput(_))));
        }
    }

    #[test]
    fn malformed_trace_is_schema_error() {
        let r = rec("ab", 2, &[(3, 1, "ab")]);
        assert!(matches!(evaluate_word(&r, false), Err(Error::Schema { .. })));
    }

    fn ok(target: &str, source: &str, layer: usize, full: bool) -> DetokOutcome {
        DetokOutcome {
            target: target.into(),
            source_word: source.into(),
            success: true,
            earliest_layer: Some(layer),
            position: Some(2),
            full_word: full,
        }
    }

    #[test]
    fn earliest_picks_argmin() {
        let outs = vec![ok("the", "they", 2, false), ok("the", "either", 1, false)];
        let cfg = SelectionConfig {
            reduction: Reduction::Earliest,
            ..Default::default()
        };
        let sel = select_expansion(&outs, &cfg);
        assert_eq!(sel.len(), 1);
        assert_eq!(sel[0].occurrences[0].source_word, "either");
    }

    #[test]
    fn full_word_preference_overrides_layer() {
        let outs = vec![ok("cat", "caterpillar", 1, false), ok("cat", "cat", 4, true)];
        let cfg = SelectionConfig {
            reduction: Reduction::Earliest,
            full_word_preference: true,
            ..Default::default()
        };
        let sel = select_expansion(&outs, &cfg);
        assert_eq!(sel[0].occurrences[0].source_word, "cat");
        assert_eq!(sel[0].occurrences[0].layer, 4);
    }

    #[test]
    fn ties_keep_first_in_input_order() {
        let outs = vec![ok("ing", "going", 3, false), ok("ing", "doing", 3, false)];
        let cfg = SelectionConfig {
            reduction: Reduction::Earliest,
            ..Default::default()
        };
        assert_eq!(select_expansion(&outs, &cfg)[0].occurrences[0].source_word, "going");
    }

    #[test]
    fn gather_requires_vectors() {
        let mut b = TraceBuilder::new("toy", 2, 8);
        let mut h = std::collections::BTreeMap::new();
        h.insert((2, 1), vec![1.0, 2.0]);
        b.push(rec("ab", 2, &[(2, 1, "ab")]), h).unwrap();
        b.push(rec("cd", 2, &[(2, 1, "cd")]), Default::default()).unwrap();
        let set = b.build().unwrap();
        let outs = evaluate_words(&set, true).unwrap();
        let sel = select_expansion(&outs, &SelectionConfig::default());
        assert_eq!(sel.len(), 2);
        assert_eq!(gather_activations(&sel[..1], &set).unwrap(), vec![vec![vec![1.0, 2.0]]]);
        assert!(matches!(gather_activations(&sel, &set), Err(Error::Consistency(_))));
    }

    fn arb_record() -> impl Strategy<Value = (TraceRecord, Vec<(usize, usize, String)>)> {
        let frag = prop::sample::select(vec!["w", "wx", "x", " ", ",", "w w", "xw"]);
        let gen = (1usize..=4, 1usize..=3, prop::collection::vec(frag, 0..4).prop_map(|v| v.concat()));
        prop::collection::vec(gen, 0..10).prop_map(|gens| {
            let mut r = TraceRecord::new("w", vec![1, 2, 3, 4], 3);
            let mut kept = Vec::new();
            for (i, l, y) in gens {
                if !r.generations.contains_key(&(i, l)) {
                    r.generations.insert((i, l), y.clone());
                    kept.push((i, l, y));
                }
            }
            (r, kept)
        })
    }

    fn arb_outcomes() -> impl Strategy<Value = Vec<DetokOutcome>> {
        let surface = prop::sample::select(vec!["a", "ab", "abc", "abcd", "bcd", "cd"]);
        let source = prop::sample::select(vec!["abcd", "xabcd", "abcdy"]);
        prop::collection::vec((surface, source, any::<bool>(), 1usize..6, any::<bool>()), 0..30).prop_map(|v| {
            v.into_iter()
                .map(|(t, s, success, l, full)| DetokOutcome {
                    target: t.into(),
                    source_word: s.into(),
                    success,
                    earliest_layer: success.then_some(l),
                    position: success.then_some(1),
                    full_word: full,
                })
                .collect()
        })
    }

    fn arb_config() -> impl Strategy<Value = SelectionConfig> {
        (any::<bool>(), 0usize..5, any::<bool>()).prop_map(|(m, min, p)| SelectionConfig {
            reduction: if m { Reduction::Mean } else { Reduction::Earliest },
            min_length_chars: min,
            full_word_preference: p,
            last_token_only: true,
        })
    }

    proptest! {
        #[test]
        fn last_token_restriction_is_monotone((r, _) in arb_record()) {
            let all = evaluate_word(&r, false).unwrap();
            let last = evaluate_word(&r, true).unwrap();
            prop_assert!(!last.success || all.success);
            if let (Some(a), Some(b)) = (all.earliest_layer, last.earliest_layer) {
                prop_assert!(a <= b);
            }
        }

        #[test]
        fn verdict_ignores_generation_order((r, kept) in arb_record(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut shuffled = kept.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let mut b = TraceBuilder::new("toy", 1, 3);
            let mut r2 = TraceRecord::new("w", vec![1, 2, 3, 4], 3);
            for (i, l, y) in &shuffled {
                r2 = r2.with_generation(*i, *l, y);
            }
            b.push(r2, Default::default()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("t.jsonl");
            b.write(&p).unwrap();
            let loaded = TraceSet::load(&p).unwrap();
            for last in [false, true] {
                prop_assert_eq!(evaluate_word(&r, last).unwrap(), evaluate_word(&loaded.records()[0], last).unwrap());
            }
        }

        #[test]
        fn selection_invariants(outs in arb_outcomes(), cfg in arb_config()) {
            let sel = select_expansion(&outs, &cfg);
            let mut seen = std::collections::HashSet::new();
            for item in &sel {
                prop_assert!(seen.insert(item.surface.clone()));
                prop_assert!(item.surface.chars().count() >= cfg.min_length_chars);
                prop_assert!(outs.iter().any(|o| o.success && o.target == item.surface));
                prop_assert!(!item.occurrences.is_empty());
                if cfg.reduction == Reduction::Earliest {
                    prop_assert_eq!(item.occurrences.len(), 1);
                    if !cfg.full_word_preference {
                        let min = outs.iter().filter(|o| o.success && o.target == item.surface)
                            .filter_map(|o| o.earliest_layer).min().unwrap();
                        prop_assert_eq!(item.occurrences[0].layer, min);
                    }
                }
            }
        }
    }
}
