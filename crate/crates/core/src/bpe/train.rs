//! Greedy BPE merge learning, from scratch or continuing an existing
//! tokenizer's merge list.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, HashSet};

use super::{PretokenRule, TokenId, Tokenizer};
use crate::error::{Error, Result};

/// Learn `n_merges` merges from bytes with the default pretokenizer.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], n_merges: usize) -> Result<Tokenizer> {
    train_bpe_with(corpus, n_merges, PretokenRule::WhitespacePunct)
}

pub fn train_bpe_with<S: AsRef<str>>(
    corpus: &[S],
    n_merges: usize,
    pretokenizer: PretokenRule,
) -> Result<Tokenizer> {
    if corpus.is_empty() {
        return Err(Error::input("cannot train BPE on an empty corpus"));
    }
    let base = Tokenizer::byte_level(pretokenizer);
    extend_merges(&base, corpus, n_merges)
}

/// Continue BPE training from `tok`'s current merge state.
///
/// The corpus is first encoded with the existing merges; new merges are then
/// learned over those sequences and appended after all existing ones. Added
/// items play no part in training and are carried over unchanged.
pub fn extend_merges<S: AsRef<str>>(tok: &Tokenizer, corpus: &[S], budget: usize) -> Result<Tokenizer> {
    if corpus.is_empty() {
        return Err(Error::input("cannot extend BPE merges on an empty corpus"));
    }
    if budget == 0 {
        return Ok(tok.clone());
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for line in corpus {
        for piece in tok.pretokenizer().split(line.as_ref())? {
            *counts.entry(piece).or_default() += 1;
        }
    }
    // sorted so the learner's internal order does not depend on hash order
    let mut pieces: Vec<(&str, u64)> = counts.into_iter().collect();
    pieces.sort_unstable();
    let words = pieces
        .into_iter()
        .map(|(p, c)| (tok.bpe_bytes(p.as_bytes()), c))
        .collect();

    let mut learner = MergeLearner::new(tok, words);
    let mut new_tokens = Vec::new();
    let mut new_merges = Vec::new();
    let mut next_id = tok.len() as TokenId;
    while new_merges.len() < budget {
        let Some((left, right)) = learner.best_pair() else { break };
        let joined = format!("{}{}", learner.strings[&left], learner.strings[&right]);
        let out = match tok.token_id(&joined).or_else(|| learner.ids.get(&joined).copied()) {
            Some(id) => id,
            None => {
                let id = next_id;
                next_id += 1;
                new_tokens.push((joined.clone(), id));
                learner.strings.insert(id, joined.clone());
                learner.ids.insert(joined, id);
                id
            }
        };
        new_merges.push((learner.strings[&left].clone(), learner.strings[&right].clone()));
        learner.merge(left, right, out);
    }
    tok.with_extension(new_tokens, new_merges)
}

#[derive(Debug, PartialEq, Eq)]
struct Candidate {
    count: u64,
    left: String,
    right: String,
    pair: (TokenId, TokenId),
}

impl Ord for Candidate {
    // highest count first; on equal counts the lexicographically smallest pair
    fn cmp(&self, other: &Self) -> Ordering {
        (self.count, Reverse(&self.left), Reverse(&self.right))
            .cmp(&(other.count, Reverse(&other.left), Reverse(&other.right)))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct MergeLearner {
    words: Vec<(Vec<TokenId>, u64)>,
    pair_counts: HashMap<(TokenId, TokenId), u64>,
    pair_words: HashMap<(TokenId, TokenId), HashSet<usize>>,
    heap: BinaryHeap<Candidate>,
    strings: HashMap<TokenId, String>,
    ids: HashMap<String, TokenId>,
}

impl MergeLearner {
    fn new(tok: &Tokenizer, words: Vec<(Vec<TokenId>, u64)>) -> Self {
        let mut strings = HashMap::new();
        let mut pair_counts: HashMap<(TokenId, TokenId), u64> = HashMap::new();
        let mut pair_words: HashMap<(TokenId, TokenId), HashSet<usize>> = HashMap::new();
        for (w, (seq, count)) in words.iter().enumerate() {
            for &id in seq {
                strings
                    .entry(id)
                    .or_insert_with(|| tok.id_to_token(id).unwrap_or_default().to_string());
            }
            for pair in seq.windows(2) {
                let key = (pair[0], pair[1]);
                *pair_counts.entry(key).or_default() += count;
                pair_words.entry(key).or_default().insert(w);
            }
        }
        let mut learner = MergeLearner {
            words,
            pair_counts,
            pair_words,
            heap: BinaryHeap::new(),
            strings,
            ids: HashMap::new(),
        };
        let keys: Vec<_> = learner.pair_counts.keys().copied().collect();
        for key in keys {
            learner.push(key);
        }
        learner
    }

    fn push(&mut self, pair: (TokenId, TokenId)) {
        let count = self.pair_counts.get(&pair).copied().unwrap_or(0);
        if count == 0 {
            return;
        }
        self.heap.push(Candidate {
            count,
            left: self.strings[&pair.0].clone(),
            right: self.strings[&pair.1].clone(),
            pair,
        });
    }

    fn best_pair(&mut self) -> Option<(TokenId, TokenId)> {
        while let Some(top) = self.heap.pop() {
            // stale entries carry an outdated count
            if self.pair_counts.get(&top.pair).copied() == Some(top.count) && top.count > 0 {
                return Some(top.pair);
            }
        }
        None
    }

    fn merge(&mut self, left: TokenId, right: TokenId, out: TokenId) {
        let affected: Vec<usize> = self
            .pair_words
            .remove(&(left, right))
            .map(|s| {
                let mut v: Vec<usize> = s.into_iter().collect();
                v.sort_unstable();
                v
            })
            .unwrap_or_default();
        let mut touched = HashSet::new();
        for w in affected {
            let (seq, count) = &self.words[w];
            let count = *count;
            let mut merged = Vec::with_capacity(seq.len());
            let mut k = 0;
            while k < seq.len() {
                if k + 1 < seq.len() && seq[k] == left && seq[k + 1] == right {
                    merged.push(out);
                    k += 2;
                } else {
                    merged.push(seq[k]);
                    k += 1;
                }
            }
            for pair in seq.windows(2) {
                let key = (pair[0], pair[1]);
                if let Some(c) = self.pair_counts.get_mut(&key) {
                    *c -= count;
                }
                touched.insert(key);
            }
            for pair in merged.windows(2) {
                let key = (pair[0], pair[1]);
                *self.pair_counts.entry(key).or_default() += count;
                self.pair_words.entry(key).or_default().insert(w);
                touched.insert(key);
            }
            self.words[w].0 = merged;
        }
        self.pair_counts.insert((left, right), 0);
        let mut touched: Vec<_> = touched.into_iter().collect();
        touched.sort_unstable();
        for key in touched {
            self.push(key);
        }
    }
}
