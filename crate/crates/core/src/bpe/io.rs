//! Tokenizer JSON files.
//!
//! The native layout is flat:
//! `{"vocab": {token: id}, "merges": ["left right", ...],
//!   "added_tokens": [{"content": s, "id": n}], "pretokenizer": {...}}`.
//! Published `tokenizer.json` files, which nest vocab and merges under
//! `"model"` and describe splitting under `"pre_tokenizer"`, load as well.

use std::collections::HashMap;
use std::path::Path;

use log::warn;
use serde_json::{json, Map, Value};

use super::{AddedItem, PretokenRule, TokenId, Tokenizer};
use crate::error::{Error, Result};
use crate::fsutil;

const NATIVE_FIELDS: &[&str] = &["version", "vocab", "merges", "added_tokens", "pretokenizer", "normalizer"];
const PUBLISHED_FIELDS: &[&str] = &[
    "version",
    "truncation",
    "padding",
    "added_tokens",
    "normalizer",
    "pre_tokenizer",
    "post_processor",
    "decoder",
    "model",
];

impl Tokenizer {
    pub fn from_json_str(text: &str) -> Result<Tokenizer> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| Error::schema("tokenizer", e.to_string()))?;
        Tokenizer::from_json_value(&value)
    }

    pub fn from_json_value(value: &Value) -> Result<Tokenizer> {
        let root = value
            .as_object()
            .ok_or_else(|| Error::schema("tokenizer", "top level must be an object"))?;
        if let Some(model) = root.get("model") {
            load_published(root, model)
        } else {
            load_native(root)
        }
    }

    pub fn load(path: &Path) -> Result<Tokenizer> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Tokenizer::from_json_str(&text).map_err(|e| e.in_file(path))
    }

    pub fn to_json_value(&self) -> Value {
        let mut vocab: Vec<(&String, &TokenId)> = self.vocab.iter().collect();
        vocab.sort_by_key(|(_, &id)| id);
        let mut vocab_obj = Map::new();
        for (token, id) in vocab {
            vocab_obj.insert(token.clone(), json!(id));
        }
        let merges: Vec<String> = self.merges.iter().map(|(l, r)| format!("{l} {r}")).collect();
        let added: Vec<Value> = self
            .added_items
            .iter()
            .map(|a| json!({"content": a.surface, "id": a.id}))
            .collect();
        let mut out = json!({
            "version": 1,
            "vocab": Value::Object(vocab_obj),
            "merges": merges,
            "added_tokens": added,
            "pretokenizer": self.pretokenizer.to_json(),
        });
        if self.nfc() {
            out["normalizer"] = json!("nfc");
        }
        out
    }

    /// Write the native layout atomically. Output is byte-stable for equal
    /// tokenizers.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json_value()).expect("json serialization");
        fsutil::write_atomic(path, text.as_bytes())
    }
}

fn warn_unknown(root: &Map<String, Value>, known: &[&str]) {
    for key in root.keys() {
        if !known.contains(&key.as_str()) {
            warn!("tokenizer file: ignoring unknown field {key:?}");
        }
    }
}

fn load_native(root: &Map<String, Value>) -> Result<Tokenizer> {
    warn_unknown(root, NATIVE_FIELDS);
    let vocab = parse_vocab(root.get("vocab"))?;
    let merges = parse_merges(root.get("merges"))?;
    let added = parse_added(root.get("added_tokens"), &vocab)?;
    let pretokenizer = match root.get("pretokenizer") {
        Some(v) => PretokenRule::from_json(v)?,
        None => PretokenRule::default(),
    };
    let nfc = match root.get("normalizer") {
        None | Some(Value::Null) => false,
        Some(Value::String(s)) if s == "nfc" => true,
        Some(other) => return Err(Error::schema("tokenizer", format!("unsupported normalizer {other}"))),
    };
    Tokenizer::new(vocab, merges, pretokenizer, added).map(|t| t.with_nfc(nfc))
}

fn load_published(root: &Map<String, Value>, model: &Value) -> Result<Tokenizer> {
    warn_unknown(root, PUBLISHED_FIELDS);
    if let Some(kind) = model.get("type").and_then(Value::as_str) {
        if kind != "BPE" {
            return Err(Error::schema("tokenizer", format!("model type {kind:?} is not BPE")));
        }
    }
    let nfc = match root.get("normalizer") {
        None | Some(Value::Null) => false,
        Some(n) => {
            let mut kinds = Vec::new();
            normalizer_kinds(n, &mut kinds);
            for k in kinds.iter().filter(|k| *k != "NFC" && *k != "Sequence") {
                warn!("tokenizer file: normalizer {k:?} is not applied");
            }
            kinds.iter().any(|k| k == "NFC")
        }
    };
    if model.get("ignore_merges").and_then(Value::as_bool) == Some(true) {
        warn!("tokenizer file: ignore_merges is not supported; whole-vocab pretokens are merged normally");
    }
    let vocab = parse_vocab(model.get("vocab"))?;
    let merges = parse_merges(model.get("merges"))?;
    let added = parse_added(root.get("added_tokens"), &vocab)?;
    let pretokenizer = PretokenRule::from_json(root.get("pre_tokenizer").unwrap_or(&Value::Null))?;
    Tokenizer::new(vocab, merges, pretokenizer, added).map(|t| t.with_nfc(nfc))
}

fn normalizer_kinds(value: &Value, out: &mut Vec<String>) {
    match value {
        Value::Object(map) => {
            if let Some(t) = map.get("type").and_then(Value::as_str) {
                out.push(t.to_string());
            }
            map.values().for_each(|v| normalizer_kinds(v, out));
        }
        Value::Array(items) => items.iter().for_each(|v| normalizer_kinds(v, out)),
        _ => {}
    }
}

fn parse_vocab(value: Option<&Value>) -> Result<HashMap<String, TokenId>> {
    let obj = value
        .and_then(Value::as_object)
        .ok_or_else(|| Error::schema("tokenizer", "missing vocab object"))?;
    obj.iter()
        .map(|(token, id)| {
            let id = id
                .as_u64()
                .and_then(|v| TokenId::try_from(v).ok())
                .ok_or_else(|| Error::schema("tokenizer", format!("vocab id for {token:?} is not a u32")))?;
            Ok((token.clone(), id))
        })
        .collect()
}

fn parse_merges(value: Option<&Value>) -> Result<Vec<(String, String)>> {
    let Some(value) = value else { return Ok(Vec::new()) };
    let items = value
        .as_array()
        .ok_or_else(|| Error::schema("tokenizer", "merges must be an array"))?;
    items
        .iter()
        .enumerate()
        .map(|(k, item)| match item {
            Value::String(s) => {
                let mut parts = s.split(' ');
                match (parts.next(), parts.next(), parts.next()) {
                    (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                        Ok((l.to_string(), r.to_string()))
                    }
                    _ => Err(Error::schema("tokenizer", format!("merge {k} {s:?} is not \"left right\""))),
                }
            }
            Value::Array(pair) if pair.len() == 2 => match (pair[0].as_str(), pair[1].as_str()) {
                (Some(l), Some(r)) => Ok((l.to_string(), r.to_string())),
                _ => Err(Error::schema("tokenizer", format!("merge {k} must hold two strings"))),
            },
            _ => Err(Error::schema("tokenizer", format!("merge {k} has an unsupported shape"))),
        })
        .collect()
}

fn parse_added(value: Option<&Value>, vocab: &HashMap<String, TokenId>) -> Result<Vec<AddedItem>> {
    let Some(value) = value else { return Ok(Vec::new()) };
    let items = value
        .as_array()
        .ok_or_else(|| Error::schema("tokenizer", "added_tokens must be an array"))?;
    let by_id: HashMap<TokenId, &str> = vocab.iter().map(|(t, &id)| (id, t.as_str())).collect();
    let mut out = Vec::new();
    for (k, item) in items.iter().enumerate() {
        let content = item
            .get("content")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::schema("tokenizer", format!("added token {k} lacks content")))?;
        let id = item
            .get("id")
            .and_then(Value::as_u64)
            .and_then(|v| TokenId::try_from(v).ok())
            .ok_or_else(|| Error::schema("tokenizer", format!("added token {k} lacks a u32 id")))?;
        if by_id.contains_key(&id) {
            // some published files repeat base tokens in added_tokens
            warn!("tokenizer file: added token {content:?} reuses base id {id}; keeping the base entry");
            continue;
        }
        out.push(AddedItem {
            surface: content.to_string(),
            id,
        });
    }
    out.sort_by_key(|a| a.id);
    Ok(out)
}
