//! Embedding matrices and initialization of rows for new vocabulary items.

mod io;
mod procrustes;

pub use io::{load_alpha, AlphaEntry, EMBED_MAGIC, FORMAT_VERSION};
pub use procrustes::{
    fit_mappers, fit_procrustes, init_from_trace, orthogonality_defect, LayerMapper, MapperSet, Procrustes, ORTHO_TOL,
};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bpe::{TokenId, Tokenizer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Input,
    Output,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Input => "input",
            Role::Output => "output",
        }
    }
}

/// Row-major `rows × dim` matrix of `f32`. Row `k` belongs to token id `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub role: Role,
    /// The model shares this matrix between the input and output roles.
    pub tied: bool,
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(role: Role, rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::input("embedding dim must be positive"));
        }
        if data.len() != rows * dim {
            return Err(Error::input(format!(
                "embedding data has {} values, expected {rows} × {dim}",
                data.len()
            )));
        }
        if let Some(k) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::input(format!("non-finite embedding entry at row {}", k / dim)));
        }
        Ok(EmbeddingMatrix {
            role,
            tied: false,
            rows,
            dim,
            data,
        })
    }

    pub fn from_rows(role: Role, rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::input("embedding rows differ in length"));
        }
        EmbeddingMatrix::new(role, rows.len(), dim, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, id: TokenId) -> Result<&[f32]> {
        let k = id as usize;
        if k >= self.rows {
            return Err(Error::input(format!(
                "token id {id} has no row in the {} embedding matrix ({} rows)",
                self.role.name(),
                self.rows
            )));
        }
        Ok(&self.data[k * self.dim..(k + 1) * self.dim])
    }

    /// Same data under the other role (for tied models).
    pub fn as_role(&self, role: Role) -> EmbeddingMatrix {
        EmbeddingMatrix { role, ..self.clone() }
    }

    fn set_row(&mut self, k: usize, v: &[f32]) {
        self.data[k * self.dim..(k + 1) * self.dim].copy_from_slice(v);
    }
}

fn check_finite(v: &[f32], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Degenerate(format!("{what} produced a non-finite vector")))
    }
}

/// `n_new` rows drawn from `Normal(μ_j, σ_j²)` with per-dimension statistics
/// of the existing rows (population standard deviation).
pub fn init_random(e: &EmbeddingMatrix, n_new: usize, seed: u64) -> Result<Vec<Vec<f32>>> {
    if n_new == 0 {
        return Err(Error::input("init_random needs n_new ≥ 1"));
    }
    if e.rows < 2 {
        return Err(Error::InsufficientStatistics(format!(
            "need at least 2 rows to estimate statistics, have {}",
            e.rows
        )));
    }
    let d = e.dim;
    let n = e.rows as f64;
    let mut mean = vec![0f64; d];
    for r in e.data.chunks_exact(d) {
        for (m, &x) in mean.iter_mut().zip(r) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0f64; d];
    for r in e.data.chunks_exact(d) {
        for ((v, &m), &x) in var.iter_mut().zip(&mean).zip(r) {
            *v += (x as f64 - m).powi(2);
        }
    }
    let dists: Vec<Normal<f64>> = var
        .iter()
        .zip(&mean)
        .map(|(&v, &m)| Normal::new(m, (v / n).sqrt()).expect("finite σ ≥ 0"))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_new)
        .map(|_| dists.iter().map(|dist| dist.sample(&mut rng) as f32).collect())
        .collect())
}

/// Mean of the given rows.
pub fn mean_of_rows(e: &EmbeddingMatrix, ids: &[TokenId]) -> Result<Vec<f32>> {
    if ids.is_empty() {
        return Err(Error::input("cannot average zero rows"));
    }
    let mut acc = vec![0f64; e.dim];
    for &id in ids {
        for (a, &x) in acc.iter_mut().zip(e.row(id)?) {
            *a += x as f64;
        }
    }
    let n = ids.len() as f64;
    Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// Mean of the rows of `surface`'s tokens under the original tokenizer.
pub fn init_fvt(e: &EmbeddingMatrix, tok: &Tokenizer, surface: &str) -> Result<Vec<f32>> {
    let ids = tok.encode(surface)?;
    if ids.is_empty() {
        return Err(Error::input(format!("{surface:?} encodes to no tokens")));
    }
    mean_of_rows(e, &ids)
}

pub const WEIGHT_SUM_TOL: f64 = 1e-6;

/// `Σ αᵢ eᵢ` for non-negative weights summing to one.
pub fn init_sparse_combo(e: &EmbeddingMatrix, weights: &BTreeMap<TokenId, f64>) -> Result<Vec<f32>> {
    if weights.is_empty() {
        return Err(Error::input("sparse combination needs at least one weight"));
    }
    if let Some((id, a)) = weights.iter().find(|(_, a)| !(**a >= 0.0 && a.is_finite())) {
        return Err(Error::input(format!("weight for id {id} is {a}; weights must be finite and non-negative")));
    }
    let sum: f64 = weights.values().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::input(format!("weights sum to {sum}, expected 1 within {WEIGHT_SUM_TOL}")));
    }
    let mut acc = vec![0f64; e.dim];
    for (&id, &a) in weights {
        for (s, &x) in acc.iter_mut().zip(e.row(id)?) {
            *s += a * x as f64;
        }
    }
    Ok(acc.into_iter().map(|s| s as f32).collect())
}

/// A new item's vectors for both roles.
#[derive(Debug, Clone, PartialEq)]
pub struct NewItem {
    pub surface: String,
    pub input: Vec<f32>,
    pub output: Vec<f32>,
}

/// Place `items` at the rows of the ids `expanded` adds over `original`.
///
/// Rows below `original.len()` are never touched. Ids inside an existing
/// padded matrix overwrite the padding row; the rest are appended.
pub fn assemble_expanded(
    e: &EmbeddingMatrix,
    u: &EmbeddingMatrix,
    original: &Tokenizer,
    expanded: &Tokenizer,
    items: &[NewItem],
) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
    let ids = expanded.new_ids_since(original);
    if ids.len() != items.len() {
        return Err(Error::Consistency(format!(
            "expanded tokenizer adds {} items but {} vectors were supplied",
            ids.len(),
            items.len()
        )));
    }
    for (&id, item) in ids.iter().zip(items) {
        let surface = String::from_utf8_lossy(&expanded.token_bytes(id)?).into_owned();
        if surface != item.surface {
            return Err(Error::Consistency(format!(
                "id {id} is {surface:?} in the tokenizer but the vector is for {:?}",
                item.surface
            )));
        }
    }
    let place = |m: &EmbeddingMatrix, pick: fn(&NewItem) -> &[f32]| -> Result<EmbeddingMatrix> {
        if m.rows < original.len() {
            return Err(Error::Consistency(format!(
                "{} embedding matrix has {} rows but the tokenizer has {} ids",
                m.role.name(),
                m.rows,
                original.len()
            )));
        }
        let mut out = m.clone();
        for (&id, item) in ids.iter().zip(items) {
            let v = pick(item);
            if v.len() != m.dim {
                return Err(Error::input(format!(
                    "{} vector for {:?} has dim {} (expected {})",
                    m.role.name(),
                    item.surface,
                    v.len(),
                    m.dim
                )));
            }
            check_finite(v, &format!("initialization of {:?}", item.surface))?;
            let k = id as usize;
            if k < out.rows {
                out.set_row(k, v);
            } else {
                debug_assert_eq!(k, out.rows);
                out.data.extend_from_slice(v);
                out.rows += 1;
            }
        }
        Ok(out)
    };
    Ok((place(e, |i| &i.input)?, place(u, |i| &i.output)?))
}
