//! Binary containers for embedding matrices and mapper sets, and the JSONL
//! weight files for sparse combinations.
//!
//! Both containers start with `LXPD`, a `u16` version and a `u8` kind, all
//! little-endian.
//!
//! Embedding (kind 0): `role u8` (0 input, 1 output), `flags u8` (bit 0:
//! tied), `rows u64`, `dim u64`, then `rows × dim` row-major `f32`.
//!
//! Mapper (kind 1): `dim u64`, `layers u64`, then per layer `layer u64`,
//! `rescale_in f64`, `rescale_out f64`, `T_in` and `T_out` as `dim × dim`
//! row-major `f64`.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{EmbeddingMatrix, LayerMapper, MapperSet, Role};
use crate::bpe::TokenId;
use crate::corpus::read_lines;
use crate::error::{Error, Result};
use crate::fsutil;

pub const EMBED_MAGIC: &[u8; 4] = b"LXPD";
pub const FORMAT_VERSION: u16 = 1;
const KIND_EMBEDDING: u8 = 0;
const KIND_MAPPER: u8 = 1;
const FLAG_TIED: u8 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::schema(self.what, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn header(&mut self, kind: u8) -> Result<()> {
        if self.take(4)? != EMBED_MAGIC {
            return Err(Error::schema(self.what, "bad magic"));
        }
        let v = self.u16()?;
        if v != FORMAT_VERSION {
            return Err(Error::schema(self.what, format!("unsupported version {v}")));
        }
        let k = self.u8()?;
        if k != kind {
            return Err(Error::schema(self.what, format!("container kind {k}, expected {kind}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::schema(self.what, format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn header(kind: u8) -> Vec<u8> {
    let mut out = EMBED_MAGIC.to_vec();
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(kind);
    out
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

impl EmbeddingMatrix {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = header(KIND_EMBEDDING);
        out.push(match self.role {
            Role::Input => 0,
            Role::Output => 1,
        });
        out.push(if self.tied { FLAG_TIED } else { 0 });
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.reserve(self.data.len() * 4);
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<EmbeddingMatrix> {
        let mut r = Reader {
            buf,
            pos: 0,
            what: "embedding file",
        };
        r.header(KIND_EMBEDDING)?;
        let role = match r.u8()? {
            0 => Role::Input,
            1 => Role::Output,
            x => return Err(Error::schema("embedding file", format!("unknown role {x}"))),
        };
        let flags = r.u8()?;
        let rows = r.u64()? as usize;
        let dim = r.u64()? as usize;
        let n = rows
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::schema("embedding file", "shape overflows"))?;
        let data = r.take(n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        r.finish()?;
        let mut m = EmbeddingMatrix::new(role, rows, dim, data)
            .map_err(|e| Error::schema("embedding file", e.to_string()))?;
        m.tied = flags & FLAG_TIED != 0;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<EmbeddingMatrix> {
        EmbeddingMatrix::from_bytes(&read_file(path)?).map_err(|e| e.in_file(path))
    }

    /// Load and require `role`; a tied matrix is accepted for either role.
    pub fn load_role(path: &Path, role: Role) -> Result<EmbeddingMatrix> {
        let m = EmbeddingMatrix::load(path)?;
        if m.role == role {
            Ok(m)
        } else if m.tied {
            Ok(m.as_role(role))
        } else {
            Err(Error::schema(
                path.display().to_string(),
                format!("holds the {} matrix, expected {}", m.role.name(), role.name()),
            ))
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes())
    }
}

impl MapperSet {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = header(KIND_MAPPER);
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u64).to_le_bytes());
        for (&l, m) in &self.layers {
            out.extend_from_slice(&(l as u64).to_le_bytes());
            out.extend_from_slice(&m.rescale_in.to_le_bytes());
            out.extend_from_slice(&m.rescale_out.to_le_bytes());
            for t in [&m.t_in, &m.t_out] {
                for i in 0..self.dim {
                    for j in 0..self.dim {
                        out.extend_from_slice(&t[(i, j)].to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<MapperSet> {
        let mut r = Reader {
            buf,
            pos: 0,
            what: "mapper file",
        };
        r.header(KIND_MAPPER)?;
        let dim = r.u64()? as usize;
        let count = r.u64()?;
        let mut layers = BTreeMap::new();
        for _ in 0..count {
            let l = r.u64()? as usize;
            let rescale_in = r.f64()?;
            let rescale_out = r.f64()?;
            let mut mats = Vec::with_capacity(2);
            for _ in 0..2 {
                let mut t = DMatrix::<f64>::zeros(dim, dim);
                for i in 0..dim {
                    for j in 0..dim {
                        t[(i, j)] = r.f64()?;
                    }
                }
                mats.push(t);
            }
            let t_out = mats.pop().expect("two maps");
            let t_in = mats.pop().expect("two maps");
            if layers
                .insert(l, LayerMapper { t_in, t_out, rescale_in, rescale_out })
                .is_some()
            {
                return Err(Error::schema("mapper file", format!("layer {l} stored twice")));
            }
        }
        r.finish()?;
        MapperSet::new(dim, layers)
    }

    pub fn load(path: &Path) -> Result<MapperSet> {
        MapperSet::from_bytes(&read_file(path)?).map_err(|e| match e {
            Error::Consistency(m) => Error::Consistency(format!("{}: {m}", path.display())),
            other => other.in_file(path),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes())
    }
}

/// One line of a weight file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaEntry {
    pub surface: String,
    pub weights: BTreeMap<String, f64>,
}

/// Weight file `{surface, weights: {id: α}}` per line, keyed by surface.
/// Weight validity is checked when the combination is computed.
pub fn load_alpha(path: &Path) -> Result<BTreeMap<String, BTreeMap<TokenId, f64>>> {
    let mut out = BTreeMap::new();
    let mut seen = HashSet::new();
    for (k, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ctx = || format!("{} line {}", path.display(), k + 1);
        let entry: AlphaEntry = serde_json::from_str(line).map_err(|e| Error::schema(ctx(), e.to_string()))?;
        if !seen.insert(entry.surface.clone()) {
            return Err(Error::schema(ctx(), format!("duplicate surface {:?}", entry.surface)));
        }
        let weights = entry
            .weights
            .iter()
            .map(|(id, &a)| {
                id.parse::<TokenId>()
                    .map(|id| (id, a))
                    .map_err(|_| Error::schema(ctx(), format!("weight key {id:?} is not a token id")))
            })
            .collect::<Result<_>>()?;
        out.insert(entry.surface, weights);
    }
    Ok(out)
}
