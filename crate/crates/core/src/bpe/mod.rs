//! Byte-level BPE tokenizer with priority added items.
//!
//! Encoding runs in a fixed order: pretokenize, match added items
//! leftmost-longest inside each pretoken, then BPE-merge whatever residual
//! spans remain. Added items therefore take precedence over merges, which is
//! what makes vocabulary expansion able to lengthen some encodings.

mod bytes;
mod io;
mod pretokenize;
mod train;

use std::borrow::Cow;
use std::collections::{HashMap, HashSet};

use aho_corasick::{AhoCorasick, MatchKind};
use unicode_normalization::{is_nfc, UnicodeNormalization};

use crate::error::{Error, Result};

pub use bytes::{byte_table, ByteTable};
pub use pretokenize::{PretokenRule, GPT2_PATTERN};
pub use train::{extend_merges, train_bpe, train_bpe_with};

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AddedItem {
    pub surface: String,
    pub id: TokenId,
}

#[derive(Debug, Clone)]
enum Entry {
    /// Base token, stored in the printable byte alphabet.
    Base(String),
    /// Index into `added_items`.
    Added(usize),
}

/// Immutable tokenizer state. Cheap to share across threads.
#[derive(Clone)]
pub struct Tokenizer {
    entries: Vec<Entry>,
    vocab: HashMap<String, TokenId>,
    merges: Vec<(String, String)>,
    merge_index: HashMap<(TokenId, TokenId), (u32, TokenId)>,
    byte_ids: [TokenId; 256],
    pretokenizer: PretokenRule,
    added_items: Vec<AddedItem>,
    added_matcher: Option<AhoCorasick>,
    nfc: bool,
}

impl std::fmt::Debug for Tokenizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tokenizer")
            .field("vocab_size", &self.vocab.len())
            .field("merges", &self.merges.len())
            .field("added_items", &self.added_items.len())
            .field("pretokenizer", &self.pretokenizer)
            .finish()
    }
}

impl Tokenizer {
    /// Build and validate a tokenizer.
    ///
    /// `vocab` holds base tokens in the byte alphabet. Ids across `vocab` and
    /// `added_items` must be unique and cover `0..total` without gaps, and
    /// every one of the 256 byte symbols must be a base token.
    pub fn new(
        vocab: HashMap<String, TokenId>,
        merges: Vec<(String, String)>,
        pretokenizer: PretokenRule,
        added_items: Vec<AddedItem>,
    ) -> Result<Self> {
        let total = vocab.len() + added_items.len();
        let mut slots: Vec<Option<Entry>> = vec![None; total];
        let mut place = |id: TokenId, entry: Entry, label: &str| -> Result<()> {
            let slot = slots.get_mut(id as usize).ok_or_else(|| {
                Error::schema("tokenizer", format!("id {id} of {label} is outside 0..{total}"))
            })?;
            if slot.is_some() {
                return Err(Error::schema("tokenizer", format!("id {id} assigned twice (at {label})")));
            }
            *slot = Some(entry);
            Ok(())
        };
        for (token, &id) in &vocab {
            place(id, Entry::Base(token.clone()), token)?;
        }
        for (k, item) in added_items.iter().enumerate() {
            if item.surface.is_empty() {
                return Err(Error::schema("tokenizer", format!("added item {} is empty", item.id)));
            }
            place(item.id, Entry::Added(k), &item.surface)?;
        }
        let entries: Vec<Entry> = slots.into_iter().map(|s| s.expect("dense ids")).collect();

        let table = byte_table();
        let mut byte_ids = [0; 256];
        for b in 0..=255u8 {
            let sym = table.char_of(b).to_string();
            byte_ids[b as usize] = *vocab.get(&sym).ok_or_else(|| {
                Error::schema("tokenizer", format!("byte symbol {sym:?} (0x{b:02x}) missing from vocab"))
            })?;
        }

        let mut merge_index = HashMap::with_capacity(merges.len());
        for (rank, (left, right)) in merges.iter().enumerate() {
            let lookup = |s: &str| {
                vocab.get(s).copied().ok_or_else(|| {
                    Error::schema("tokenizer", format!("merge {rank} ({left} {right}): {s:?} not in vocab"))
                })
            };
            let l = lookup(left)?;
            let r = lookup(right)?;
            let out = lookup(&format!("{left}{right}"))?;
            merge_index.entry((l, r)).or_insert((rank as u32, out));
        }

        let added_matcher = build_matcher(&added_items)?;
        Ok(Tokenizer {
            entries,
            vocab,
            merges,
            merge_index,
            byte_ids,
            pretokenizer,
            added_items,
            added_matcher,
            nfc: false,
        })
    }

    /// A tokenizer with only the 256 byte symbols and no merges.
    pub fn byte_level(pretokenizer: PretokenRule) -> Self {
        let table = byte_table();
        let vocab = (0..=255u8)
            .map(|b| (table.char_of(b).to_string(), b as TokenId))
            .collect();
        Tokenizer::new(vocab, Vec::new(), pretokenizer, Vec::new()).expect("byte vocabulary is valid")
    }

    /// Total number of ids (base tokens plus added items).
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn base_vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &HashMap<String, TokenId> {
        &self.vocab
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn added_items(&self) -> &[AddedItem] {
        &self.added_items
    }

    pub fn pretokenizer(&self) -> &PretokenRule {
        &self.pretokenizer
    }

    /// Base-token id for a token given in the byte alphabet.
    pub fn token_id(&self, token: &str) -> Option<TokenId> {
        self.vocab.get(token).copied()
    }

    /// Id of the base token whose raw bytes equal `surface`, if any.
    pub fn base_id_of_surface(&self, surface: &str) -> Option<TokenId> {
        self.vocab.get(&byte_table().encode(surface.as_bytes())).copied()
    }

    pub fn is_added(&self, id: TokenId) -> bool {
        matches!(self.entries.get(id as usize), Some(Entry::Added(_)))
    }

    /// Token string as stored (byte alphabet for base tokens, raw surface for
    /// added items).
    pub fn id_to_token(&self, id: TokenId) -> Option<&str> {
        match self.entries.get(id as usize)? {
            Entry::Base(s) => Some(s),
            Entry::Added(k) => Some(&self.added_items[*k].surface),
        }
    }

    /// Raw bytes a single id decodes to.
    pub fn token_bytes(&self, id: TokenId) -> Result<Vec<u8>> {
        match self.entries.get(id as usize) {
            Some(Entry::Base(s)) => byte_table()
                .decode(s)
                .ok_or_else(|| Error::schema("tokenizer", format!("token {s:?} is outside the byte alphabet"))),
            Some(Entry::Added(k)) => Ok(self.added_items[*k].surface.as_bytes().to_vec()),
            None => Err(Error::input(format!("token id {id} out of range 0..{}", self.len()))),
        }
    }

    /// Apply NFC to all input before pretokenizing.
    pub fn with_nfc(mut self, on: bool) -> Self {
        self.nfc = on;
        self
    }

    pub fn nfc(&self) -> bool {
        self.nfc
    }

    fn normalized<'a>(&self, text: &'a str) -> Cow<'a, str> {
        if self.nfc && !is_nfc(text) {
            Cow::Owned(text.nfc().collect())
        } else {
            Cow::Borrowed(text)
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        let text = self.normalized(text);
        let mut out = Vec::new();
        for piece in self.pretokenizer.split(&text)? {
            self.encode_pretoken(piece, &mut out);
        }
        Ok(out)
    }

    /// Encode raw bytes, rejecting invalid UTF-8.
    pub fn encode_utf8(&self, bytes: &[u8]) -> Result<Vec<TokenId>> {
        let text = std::str::from_utf8(bytes)
            .map_err(|e| Error::input(format!("input is not valid UTF-8: {e}")))?;
        self.encode(text)
    }

    /// Encode ignoring added items: the base tokenizer's view of `text`.
    pub fn encode_base(&self, text: &str) -> Result<Vec<TokenId>> {
        let text = self.normalized(text);
        let mut out = Vec::new();
        for piece in self.pretokenizer.split(&text)? {
            out.extend(self.bpe_bytes(piece.as_bytes()));
        }
        Ok(out)
    }

    fn encode_pretoken(&self, piece: &str, out: &mut Vec<TokenId>) {
        let Some(matcher) = &self.added_matcher else {
            out.extend(self.bpe_bytes(piece.as_bytes()));
            return;
        };
        let mut last = 0;
        for m in matcher.find_iter(piece) {
            if m.start() > last {
                out.extend(self.bpe_bytes(&piece.as_bytes()[last..m.start()]));
            }
            out.push(self.added_items[m.pattern().as_usize()].id);
            last = m.end();
        }
        if last < piece.len() {
            out.extend(self.bpe_bytes(&piece.as_bytes()[last..]));
        }
    }

    /// Merge a byte span by rank: repeatedly apply the lowest-ranked adjacent
    /// pair, leftmost first among equal ranks.
    pub fn bpe_bytes(&self, bytes: &[u8]) -> Vec<TokenId> {
        let mut symbols: Vec<TokenId> = bytes.iter().map(|&b| self.byte_ids[b as usize]).collect();
        self.apply_merges(&mut symbols);
        symbols
    }

    fn apply_merges(&self, symbols: &mut Vec<TokenId>) {
        while symbols.len() > 1 {
            let mut best: Option<(u32, usize, TokenId)> = None;
            for (pos, pair) in symbols.windows(2).enumerate() {
                if let Some(&(rank, out)) = self.merge_index.get(&(pair[0], pair[1])) {
                    if best.is_none_or(|(r, _, _)| rank < r) {
                        best = Some((rank, pos, out));
                    }
                }
            }
            let Some((_, pos, out)) = best else { break };
            symbols[pos] = out;
            symbols.remove(pos + 1);
        }
    }

    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            out.extend(self.token_bytes(id)?);
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        String::from_utf8(self.decode_bytes(ids)?)
            .map_err(|e| Error::input(format!("decoded bytes are not valid UTF-8: {e}")))
    }

    /// Append items as priority added items, in order, with fresh ids.
    pub fn expand_vocabulary<S: AsRef<str>>(&self, items: &[S]) -> Result<Tokenizer> {
        if items.is_empty() {
            return Ok(self.clone());
        }
        let mut seen: HashSet<&str> = self.added_items.iter().map(|a| a.surface.as_str()).collect();
        let mut offenders = Vec::new();
        for item in items {
            let s = item.as_ref();
            if s.is_empty() {
                return Err(Error::input("added item surface must be non-empty"));
            }
            if !seen.insert(s) && !offenders.iter().any(|o: &String| o == s) {
                offenders.push(s.to_string());
            }
        }
        if !offenders.is_empty() {
            return Err(Error::Conflict {
                what: "added items".into(),
                items: offenders,
            });
        }
        let mut added = self.added_items.clone();
        for (id, item) in (self.len() as TokenId..).zip(items) {
            added.push(AddedItem {
                surface: item.as_ref().to_string(),
                id,
            });
        }
        Tokenizer::new(self.vocab.clone(), self.merges.clone(), self.pretokenizer.clone(), added)
            .map(|t| t.with_nfc(self.nfc))
    }

    /// Added items whose surface is already reachable as one base token.
    pub fn lint_added_items(&self) -> Vec<&AddedItem> {
        self.added_items
            .iter()
            .filter(|a| self.base_id_of_surface(&a.surface).is_some())
            .collect()
    }

    /// Merges whose output string is produced by an earlier merge too.
    pub fn lint_duplicate_merges(&self) -> Vec<usize> {
        let mut seen = HashSet::new();
        self.merges
            .iter()
            .enumerate()
            .filter(|(_, (l, r))| !seen.insert(format!("{l}{r}")))
            .map(|(k, _)| k)
            .collect()
    }

    /// Ids present here but not in `original`; these are the new items of an
    /// expansion, in id order.
    pub fn new_ids_since(&self, original: &Tokenizer) -> Vec<TokenId> {
        (original.len() as TokenId..self.len() as TokenId).collect()
    }

    /// Append base tokens and lower-priority merges.
    fn with_extension(
        &self,
        new_tokens: Vec<(String, TokenId)>,
        new_merges: Vec<(String, String)>,
    ) -> Result<Tokenizer> {
        let mut vocab = self.vocab.clone();
        vocab.extend(new_tokens);
        let mut merges = self.merges.clone();
        merges.extend(new_merges);
        Tokenizer::new(vocab, merges, self.pretokenizer.clone(), self.added_items.clone()).map(|t| t.with_nfc(self.nfc))
    }
}

fn build_matcher(items: &[AddedItem]) -> Result<Option<AhoCorasick>> {
    if items.is_empty() {
        return Ok(None);
    }
    AhoCorasick::builder()
        .match_kind(MatchKind::LeftmostLongest)
        .build(items.iter().map(|a| a.surface.as_str()))
        .map(Some)
        .map_err(|e| Error::input(format!("added item matcher: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tokenizer_with_merges(merges: &[(&str, &str)]) -> Tokenizer {
        let base = Tokenizer::byte_level(PretokenRule::WhitespacePunct);
        let mut vocab = base.vocab.clone();
        let mut list = Vec::new();
        for (l, r) in merges {
            let joined = format!("{l}{r}");
            let next = vocab.len() as TokenId;
            vocab.entry(joined).or_insert(next);
            list.push((l.to_string(), r.to_string()));
        }
        Tokenizer::new(vocab, list, PretokenRule::WhitespacePunct, Vec::new()).unwrap()
    }

    fn pieces(tok: &Tokenizer, text: &str) -> Vec<String> {
        tok.encode(text)
            .unwrap()
            .iter()
            .map(|&id| String::from_utf8(tok.token_bytes(id).unwrap()).unwrap())
            .collect()
    }

    #[test]
    fn merges_apply_in_rank_order() {
        let tok = tokenizer_with_merges(&[("a", "b"), ("ab", "c")]);
        assert_eq!(pieces(&tok, "abc"), vec!["abc"]);
        assert_eq!(pieces(&tok, "abab"), vec!["ab", "ab"]);
    }

    #[test]
    fn leftmost_wins_on_equal_rank() {
        let tok = tokenizer_with_merges(&[("a", "a")]);
        assert_eq!(pieces(&tok, "aaa"), vec!["aa", "a"]);
    }

    #[test]
    fn empty_text() {
        let tok = Tokenizer::byte_level(PretokenRule::WhitespacePunct);
        assert!(tok.encode("").unwrap().is_empty());
        assert_eq!(tok.decode(&[]).unwrap(), "");
    }

    #[test]
    fn perversity_example() {
        let tok = tokenizer_with_merges(&[
            ("d", "e"),
            ("v", "e"),
            ("de", "ve"),
            ("l", "o"),
            ("lo", "p"),
            ("m", "e"),
            ("n", "t"),
            ("me", "nt"),
        ]);
        assert_eq!(pieces(&tok, "development"), vec!["deve", "lop", "ment"]);
        let exp = tok.expand_vocabulary(&["elop"]).unwrap();
        assert_eq!(pieces(&exp, "development"), vec!["de", "v", "elop", "ment"]);
        let elop = exp.added_items()[0].id;
        assert_eq!(exp.decode(&[elop]).unwrap(), "elop");
    }

    #[test]
    fn added_item_becomes_single_id() {
        let tok = Tokenizer::byte_level(PretokenRule::WhitespacePunct);
        let exp = tok.expand_vocabulary(&["परिवार"]).unwrap();
        let ids = exp.encode("परिवार").unwrap();
        assert_eq!(ids, vec![exp.added_items()[0].id]);
        assert_eq!(exp.added_items()[0].id as usize, tok.len());
    }

    #[test]
    fn leftmost_longest_added_matching() {
        let tok = Tokenizer::byte_level(PretokenRule::WhitespacePunct);
        let exp = tok.expand_vocabulary(&["ab", "abc", "bcd"]).unwrap();
        let ids = exp.encode("abcd").unwrap();
        // "abc" starts leftmost and is longest there; "d" is residual
        assert_eq!(ids, vec![exp.added_items()[1].id, b'd' as TokenId]);
    }

    #[test]
    fn duplicate_items_conflict() {
        let tok = Tokenizer::byte_level(PretokenRule::WhitespacePunct);
        let err = tok.expand_vocabulary(&["xy", "zz", "xy"]).unwrap_err();
        match err {
            Error::Conflict { items, .. } => assert_eq!(items, vec!["xy".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
        let exp = tok.expand_vocabulary(&["xy"]).unwrap();
        assert!(matches!(exp.expand_vocabulary(&["xy"]), Err(Error::Conflict { .. })));
    }

    #[test]
    fn empty_item_list_is_identity() {
        let tok = tokenizer_with_merges(&[("a", "b")]);
        let exp = tok.expand_vocabulary::<&str>(&[]).unwrap();
        assert_eq!(exp.len(), tok.len());
        assert_eq!(exp.encode("abab").unwrap(), tok.encode("abab").unwrap());
    }

    #[test]
    fn decode_rejects_out_of_range() {
        let tok = Tokenizer::byte_level(PretokenRule::WhitespacePunct);
        assert!(matches!(tok.decode(&[256]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn invalid_utf8_is_input_error() {
        let tok = Tokenizer::byte_level(PretokenRule::WhitespacePunct);
        assert!(matches!(tok.encode_utf8(&[0xff, 0xfe]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn lint_flags_added_items_already_in_vocab() {
        let tok = tokenizer_with_merges(&[("a", "b")]);
        let exp = tok.expand_vocabulary(&["ab", "abc"]).unwrap();
        let flagged: Vec<&str> = exp.lint_added_items().iter().map(|a| a.surface.as_str()).collect();
        assert_eq!(flagged, vec!["ab"]);
    }

    #[test]
    fn rejects_merge_with_unknown_output() {
        let base = Tokenizer::byte_level(PretokenRule::WhitespacePunct);
        let err = Tokenizer::new(
            base.vocab.clone(),
            vec![("a".into(), "b".into())],
            PretokenRule::WhitespacePunct,
            Vec::new(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Schema { .. }));
    }

    #[test]
    fn rejects_sparse_ids() {
        let base = Tokenizer::byte_level(PretokenRule::WhitespacePunct);
        let err = Tokenizer::new(
            base.vocab.clone(),
            Vec::new(),
            PretokenRule::WhitespacePunct,
            vec![AddedItem { surface: "x".into(), id: 300 }],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Schema { .. }));
    }
}
