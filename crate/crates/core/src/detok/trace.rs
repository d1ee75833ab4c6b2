//! Trace files: one JSON header line, one JSON record per word, and a binary
//! sidecar of little-endian `f32` hidden vectors.
//!
//! ```text
//! {"format":"lexpand-trace","version":1,"model":"m","hidden_dim":d,"num_layers":L,"sidecar":"x.bin"}
//! {"word":"Layla","token_ids":[43,352,4449],
//!  "generations":[{"position":3,"layer":5,"text":"Layla, Layla"}],
//!  "hidden":[{"position":3,"layer":5,"offset":0,"length":16}]}
//! ```
//!
//! Positions and layers are 1-based. `offset` and `length` are byte counts
//! into the sidecar; `length` must equal `4 * hidden_dim`. The sidecar path is
//! resolved relative to the JSONL file.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::bpe::TokenId;
use crate::corpus::read_lines;
use crate::error::{Error, Result};
use crate::fsutil;

pub const TRACE_FORMAT: &str = "lexpand-trace";
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: String,
    pub version: u32,
    pub model: String,
    pub hidden_dim: usize,
    pub num_layers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sidecar: Option<String>,
}

impl TraceHeader {
    pub fn new(model: &str, hidden_dim: usize, num_layers: usize) -> Self {
        TraceHeader {
            format: TRACE_FORMAT.into(),
            version: TRACE_VERSION,
            model: model.into(),
            hidden_dim,
            num_layers,
            sidecar: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenRef {
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct GenerationLine {
    position: usize,
    layer: usize,
    text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct HiddenLine {
    position: usize,
    layer: usize,
    offset: u64,
    length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct RecordLine {
    word: String,
    token_ids: Vec<TokenId>,
    #[serde(default)]
    generations: Vec<GenerationLine>,
    #[serde(default)]
    hidden: Vec<HiddenLine>,
}

/// One word's trace: its tokenization, the generation obtained by patching
/// each `(position, layer)` hidden state, and references to those states.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub word: String,
    pub token_ids: Vec<TokenId>,
    pub layers: usize,
    pub generations: BTreeMap<(usize, usize), String>,
    pub hidden: BTreeMap<(usize, usize), HiddenRef>,
}

impl TraceRecord {
    pub fn new(word: &str, token_ids: Vec<TokenId>, layers: usize) -> Self {
        TraceRecord {
            word: word.into(),
            token_ids,
            layers,
            generations: BTreeMap::new(),
            hidden: BTreeMap::new(),
        }
    }

    pub fn with_generation(mut self, position: usize, layer: usize, text: &str) -> Self {
        self.generations.insert((position, layer), text.into());
        self
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Positions in `1..=n`, layers in `1..=L`.
    pub fn check(&self) -> Result<()> {
        let ctx = || format!("trace record {:?}", self.word);
        if self.token_ids.is_empty() {
            return Err(Error::schema(ctx(), "no token ids"));
        }
        let n = self.len();
        for &(i, l) in self.generations.keys().chain(self.hidden.keys()) {
            if i == 0 || i > n {
                return Err(Error::schema(ctx(), format!("position {i} outside 1..={n}")));
            }
            if l == 0 || l > self.layers {
                return Err(Error::schema(ctx(), format!("layer {l} outside 1..={}", self.layers)));
            }
        }
        Ok(())
    }
}

enum Sidecar {
    None,
    Memory(Vec<u8>),
    File { path: PathBuf, file: Mutex<File>, len: u64 },
}

impl Sidecar {
    fn len(&self) -> u64 {
        match self {
            Sidecar::None => 0,
            Sidecar::Memory(b) => b.len() as u64,
            Sidecar::File { len, .. } => *len,
        }
    }

    fn read(&self, r: HiddenRef) -> Result<Vec<u8>> {
        let end = r.offset + r.length;
        if end > self.len() {
            return Err(Error::schema("trace sidecar", format!("range {}..{end} past end {}", r.offset, self.len())));
        }
        match self {
            Sidecar::None => Err(Error::schema("trace sidecar", "hidden vector referenced but trace has no sidecar")),
            Sidecar::Memory(b) => Ok(b[r.offset as usize..end as usize].to_vec()),
            Sidecar::File { path, file, .. } => {
                let mut f = file.lock().expect("sidecar lock");
                let mut buf = vec![0u8; r.length as usize];
                f.seek(SeekFrom::Start(r.offset))
                    .and_then(|_| f.read_exact(&mut buf))
                    .map_err(|e| Error::io(path, e))?;
                Ok(buf)
            }
        }
    }
}

/// A loaded trace file. Hidden vectors are read from the sidecar on demand.
pub struct TraceSet {
    pub header: TraceHeader,
    records: Vec<TraceRecord>,
    by_word: HashMap<String, usize>,
    sidecar: Sidecar,
}

impl std::fmt::Debug for TraceSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TraceSet")
            .field("header", &self.header)
            .field("records", &self.records.len())
            .finish()
    }
}

fn le_floats(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

impl TraceSet {
    fn assemble(header: TraceHeader, records: Vec<TraceRecord>, sidecar: Sidecar) -> Result<TraceSet> {
        if header.format != TRACE_FORMAT {
            return Err(Error::schema("trace header", format!("unknown format {:?}", header.format)));
        }
        if header.version != TRACE_VERSION {
            return Err(Error::schema("trace header", format!("unsupported version {}", header.version)));
        }
        if header.hidden_dim == 0 || header.num_layers == 0 {
            return Err(Error::schema("trace header", "hidden_dim and num_layers must be positive"));
        }
        let mut by_word = HashMap::with_capacity(records.len());
        let expected_len = 4 * header.hidden_dim as u64;
        for (k, rec) in records.iter().enumerate() {
            if rec.layers != header.num_layers {
                return Err(Error::schema(
                    format!("trace record {:?}", rec.word),
                    format!("layer count {} differs from header {}", rec.layers, header.num_layers),
                ));
            }
            rec.check()?;
            for (&(i, l), r) in &rec.hidden {
                let ctx = format!("trace record {:?} hidden ({i}, {l})", rec.word);
                if r.length != expected_len {
                    return Err(Error::schema(ctx, format!("length {} != 4 * hidden_dim = {expected_len}", r.length)));
                }
                if r.offset % 4 != 0 {
                    return Err(Error::schema(ctx, format!("offset {} is not 4-byte aligned", r.offset)));
                }
                if r.offset + r.length > sidecar.len() {
                    return Err(Error::schema(ctx, format!("range ends past sidecar size {}", sidecar.len())));
                }
            }
            if by_word.insert(rec.word.clone(), k).is_some() {
                return Err(Error::schema("trace file", format!("duplicate record for {:?}", rec.word)));
            }
        }
        Ok(TraceSet {
            header,
            records,
            by_word,
            sidecar,
        })
    }

    pub fn load(path: &Path) -> Result<TraceSet> {
        Self::load_inner(path).map_err(|e| e.in_file(path))
    }

    fn load_inner(path: &Path) -> Result<TraceSet> {
        let lines = read_lines(path)?;
        let mut iter = lines.iter().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = iter
            .next()
            .ok_or_else(|| Error::schema("trace file", "missing header line"))?;
        let header: TraceHeader =
            serde_json::from_str(first).map_err(|e| Error::schema("trace header", e.to_string()))?;
        let mut records = Vec::new();
        for (k, line) in iter {
            let rec: RecordLine = serde_json::from_str(line)
                .map_err(|e| Error::schema(format!("line {}", k + 1), e.to_string()))?;
            records.push(record_from_line(rec, header.num_layers)?);
        }
        let sidecar = match &header.sidecar {
            None => Sidecar::None,
            Some(name) => {
                let p = path.parent().unwrap_or(Path::new(".")).join(name);
                let file = File::open(&p).map_err(|e| Error::io(&p, e))?;
                let len = file.metadata().map_err(|e| Error::io(&p, e))?.len();
                Sidecar::File {
                    path: p,
                    file: Mutex::new(file),
                    len,
                }
            }
        };
        TraceSet::assemble(header, records, sidecar)
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn get(&self, word: &str) -> Option<&TraceRecord> {
        self.by_word.get(word).map(|&k| &self.records[k])
    }

    /// The hidden vector stored for `word` at `(position, layer)`.
    pub fn hidden(&self, word: &str, position: usize, layer: usize) -> Result<Vec<f32>> {
        let rec = self
            .get(word)
            .ok_or_else(|| Error::Consistency(format!("no trace record for {word:?}")))?;
        let r = rec.hidden.get(&(position, layer)).ok_or_else(|| {
            Error::Consistency(format!("trace for {word:?} has no hidden vector at position {position}, layer {layer}"))
        })?;
        Ok(le_floats(&self.sidecar.read(*r)?))
    }

    /// Non-fatal findings; a clean file yields none.
    pub fn validate(&self) -> Vec<String> {
        let mut warnings = Vec::new();
        let mut referenced: Vec<(u64, u64)> = Vec::new();
        for rec in &self.records {
            if rec.generations.is_empty() && rec.hidden.is_empty() {
                warnings.push(format!("record {:?} has neither generations nor hidden vectors", rec.word));
            }
            referenced.extend(rec.hidden.values().map(|r| (r.offset, r.offset + r.length)));
        }
        referenced.sort_unstable();
        for w in referenced.windows(2) {
            if w[1].0 < w[0].1 {
                warnings.push(format!("sidecar ranges overlap at byte {}", w[1].0));
                break;
            }
        }
        let used: u64 = referenced.iter().map(|(a, b)| b - a).sum();
        if used < self.sidecar.len() {
            warnings.push(format!(
                "sidecar holds {} bytes not referenced by any record",
                self.sidecar.len() - used
            ));
        }
        warnings
    }
}

fn record_from_line(line: RecordLine, layers: usize) -> Result<TraceRecord> {
    let mut rec = TraceRecord::new(&line.word, line.token_ids, layers);
    for g in line.generations {
        if rec.generations.insert((g.position, g.layer), g.text).is_some() {
            return Err(Error::schema(
                format!("trace record {:?}", rec.word),
                format!("duplicate generation at ({}, {})", g.position, g.layer),
            ));
        }
    }
    for h in line.hidden {
        let r = HiddenRef {
            offset: h.offset,
            length: h.length,
        };
        if rec.hidden.insert((h.position, h.layer), r).is_some() {
            return Err(Error::schema(
                format!("trace record {:?}", rec.word),
                format!("duplicate hidden vector at ({}, {})", h.position, h.layer),
            ));
        }
    }
    Ok(rec)
}

/// Accumulates records and their hidden vectors, then writes the JSONL and
/// sidecar pair (or builds an in-memory [`TraceSet`]).
pub struct TraceBuilder {
    header: TraceHeader,
    records: Vec<TraceRecord>,
    sidecar: Vec<u8>,
}

impl TraceBuilder {
    pub fn new(model: &str, hidden_dim: usize, num_layers: usize) -> Self {
        TraceBuilder {
            header: TraceHeader::new(model, hidden_dim, num_layers),
            records: Vec::new(),
            sidecar: Vec::new(),
        }
    }

    /// Add a record; `hidden` maps `(position, layer)` to a `hidden_dim`
    /// vector.
    pub fn push(&mut self, mut record: TraceRecord, hidden: BTreeMap<(usize, usize), Vec<f32>>) -> Result<()> {
        record.layers = self.header.num_layers;
        record.hidden.clear();
        for (key, v) in hidden {
            if v.len() != self.header.hidden_dim {
                return Err(Error::input(format!(
                    "hidden vector for {:?} at {key:?} has dim {} (expected {})",
                    record.word,
                    v.len(),
                    self.header.hidden_dim
                )));
            }
            let offset = self.sidecar.len() as u64;
            for x in &v {
                self.sidecar.extend_from_slice(&x.to_le_bytes());
            }
            record.hidden.insert(
                key,
                HiddenRef {
                    offset,
                    length: 4 * v.len() as u64,
                },
            );
        }
        record.check()?;
        self.records.push(record);
        Ok(())
    }

    pub fn build(self) -> Result<TraceSet> {
        let sidecar = if self.sidecar.is_empty() {
            Sidecar::None
        } else {
            Sidecar::Memory(self.sidecar)
        };
        TraceSet::assemble(self.header, self.records, sidecar)
    }

    /// Write `path` and its sidecar `path.bin` atomically.
    pub fn write(mut self, path: &Path) -> Result<()> {
        let sidecar_name = format!(
            "{}.bin",
            path.file_name()
                .ok_or_else(|| Error::input("trace path has no file name"))?
                .to_string_lossy()
        );
        self.header.sidecar = (!self.sidecar.is_empty()).then(|| sidecar_name.clone());
        let mut out = serde_json::to_string(&self.header).expect("json");
        out.push('\n');
        for rec in &self.records {
            let line = RecordLine {
                word: rec.word.clone(),
                token_ids: rec.token_ids.clone(),
                generations: rec
                    .generations
                    .iter()
                    .map(|(&(position, layer), text)| GenerationLine {
                        position,
                        layer,
                        text: text.clone(),
                    })
                    .collect(),
                hidden: rec
                    .hidden
                    .iter()
                    .map(|(&(position, layer), r)| HiddenLine {
                        position,
                        layer,
                        offset: r.offset,
                        length: r.length,
                    })
                    .collect(),
            };
            out.push_str(&serde_json::to_string(&line).expect("json"));
            out.push('\n');
        }
        if !self.sidecar.is_empty() {
            let side = path.with_file_name(&sidecar_name);
            fsutil::write_atomic(&side, &self.sidecar)?;
        }
        fsutil::write_atomic(path, out.as_bytes())
    }
}
