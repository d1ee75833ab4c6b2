//! Orthogonal maps from hidden-state space into embedding space.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::{EmbeddingMatrix, Role};
use crate::detok::TraceSet;
use crate::error::{Error, Result};

/// Maximum entry of `TᵀT − I` accepted for a fitted map.
pub const ORTHO_TOL: f64 = 1e-4;

/// Ratio of smallest to largest singular value below which a fit is
/// reported as ill-conditioned.
const CONDITION_FLOOR: f64 = 1e-10;

fn rms(row: impl Iterator<Item = f64>) -> f64 {
    let (n, sq) = row.fold((0usize, 0f64), |(n, s), x| (n + 1, s + x * x));
    (sq / n as f64).sqrt()
}

fn rms_normalize_rows(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = m.clone();
    for (k, mut row) in out.row_iter_mut().enumerate() {
        let r = rms(row.iter().copied());
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::Degenerate(format!("hidden row {k} has RMS {r}; cannot normalize")));
        }
        row /= r;
    }
    Ok(out)
}

pub fn orthogonality_defect(t: &DMatrix<f64>) -> f64 {
    let g = t.transpose() * t - DMatrix::identity(t.ncols(), t.ncols());
    g.amax()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Procrustes {
    pub t: DMatrix<f64>,
    pub rms_rescale: f64,
    /// `M = BᵀA` was rank-deficient; `t` is orthogonal but not unique.
    pub ill_conditioned: bool,
}

/// Orthogonal `T` minimizing `‖A·Tᵀ − B‖_F`, where `A` is `hidden` with each
/// row RMS-normalized and `B` is `targets`. With `BᵀA = UΣVᵀ`, `T = UVᵀ`.
/// `rms_rescale` is the mean row RMS of `targets`.
pub fn fit_procrustes(hidden: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<Procrustes> {
    let (n, d) = hidden.shape();
    if targets.shape() != (n, d) {
        return Err(Error::input(format!(
            "hidden is {n}×{d} but targets are {}×{}",
            targets.nrows(),
            targets.ncols()
        )));
    }
    if n < 2 || d == 0 {
        return Err(Error::InsufficientStatistics(format!("Procrustes fit needs n ≥ 2 rows, have {n}")));
    }
    if n < d {
        log::warn!("Procrustes fit with n = {n} < d = {d}; map is underdetermined");
    }
    let a = rms_normalize_rows(hidden)?;
    let m = targets.transpose() * &a;
    let svd = m.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let ill_conditioned = !(smin > CONDITION_FLOOR * smax);
    if ill_conditioned {
        log::warn!("Procrustes cross-covariance is rank-deficient (σ_min/σ_max = {:e})", smin / smax);
    }
    let (u, v_t) = (svd.u.expect("requested U"), svd.v_t.expect("requested Vᵀ"));
    let t = u * v_t;
    let defect = orthogonality_defect(&t);
    if defect > ORTHO_TOL {
        return Err(Error::Degenerate(format!("fitted map is not orthogonal (defect {defect:e})")));
    }
    let rms_rescale = targets.row_iter().map(|r| rms(r.iter().copied())).sum::<f64>() / n as f64;
    if !(rms_rescale > 0.0) {
        return Err(Error::Degenerate("targets have zero RMS".into()));
    }
    Ok(Procrustes {
        t,
        rms_rescale,
        ill_conditioned,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMapper {
    pub t_in: DMatrix<f64>,
    pub t_out: DMatrix<f64>,
    pub rescale_in: f64,
    pub rescale_out: f64,
}

impl LayerMapper {
    pub fn for_role(&self, role: Role) -> (&DMatrix<f64>, f64) {
        match role {
            Role::Input => (&self.t_in, self.rescale_in),
            Role::Output => (&self.t_out, self.rescale_out),
        }
    }
}

/// One map pair per fitted layer (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct MapperSet {
    pub dim: usize,
    pub layers: BTreeMap<usize, LayerMapper>,
}

impl MapperSet {
    pub fn new(dim: usize, layers: BTreeMap<usize, LayerMapper>) -> Result<Self> {
        for (l, m) in &layers {
            for (name, t, s) in [("input", &m.t_in, m.rescale_in), ("output", &m.t_out, m.rescale_out)] {
                if t.shape() != (dim, dim) {
                    return Err(Error::Consistency(format!("layer {l} {name} map is not {dim}×{dim}")));
                }
                let defect = orthogonality_defect(t);
                if defect > ORTHO_TOL {
                    return Err(Error::Consistency(format!("layer {l} {name} map has orthogonality defect {defect:e}")));
                }
                if !(s > 0.0 && s.is_finite()) {
                    return Err(Error::Consistency(format!("layer {l} {name} rescale {s} must be positive")));
                }
            }
        }
        Ok(MapperSet { dim, layers })
    }

    pub fn layer(&self, l: usize) -> Result<&LayerMapper> {
        self.layers.get(&l).ok_or_else(|| {
            Error::input(format!(
                "no mapper fitted for layer {l} (have {:?})",
                self.layers.keys().collect::<Vec<_>>()
            ))
        })
    }
}

/// RMS-normalize `h`, apply the role's map for `layer`, scale by its rescale.
pub fn init_from_trace(mappers: &MapperSet, h: &[f32], layer: usize, role: Role) -> Result<Vec<f32>> {
    if h.len() != mappers.dim {
        return Err(Error::input(format!(
            "hidden vector has dim {} but mappers are {}-dimensional",
            h.len(),
            mappers.dim
        )));
    }
    let (t, s) = mappers.layer(layer)?.for_role(role);
    let r = rms(h.iter().map(|&x| x as f64));
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::Degenerate(format!("hidden vector has RMS {r}")));
    }
    let x = nalgebra::DVector::from_iterator(h.len(), h.iter().map(|&v| v as f64 / r));
    Ok((t * x * s).iter().map(|&v| v as f32).collect())
}

/// Fit a mapper pair per layer from single-token records, pairing the hidden
/// state at position 1 with that token's rows of `e` and `u`. Layers with
/// fewer than two usable records are skipped.
pub fn fit_mappers(traces: &TraceSet, e: &EmbeddingMatrix, u: &EmbeddingMatrix) -> Result<MapperSet> {
    let d = traces.header.hidden_dim;
    if e.dim() != d || u.dim() != d {
        return Err(Error::input(format!(
            "trace hidden_dim {d} differs from embedding dims {} / {}",
            e.dim(),
            u.dim()
        )));
    }
    let singles: Vec<_> = traces
        .records()
        .iter()
        .filter(|r| r.token_ids.len() == 1 && (r.token_ids[0] as usize) < e.rows().min(u.rows()))
        .collect();
    let fitted: Vec<Option<(usize, LayerMapper)>> = (1..=traces.header.num_layers)
        .into_par_iter()
        .map(|l| {
            let rows: Vec<_> = singles.iter().filter(|r| r.hidden.contains_key(&(1, l))).collect();
            if rows.len() < 2 {
                log::warn!("layer {l}: {} single-token records with hidden states; skipping", rows.len());
                return Ok(None);
            }
            let n = rows.len();
            let mut hidden = DMatrix::<f64>::zeros(n, d);
            let mut te = DMatrix::<f64>::zeros(n, d);
            let mut tu = DMatrix::<f64>::zeros(n, d);
            for (k, r) in rows.iter().enumerate() {
                let h = traces.hidden(&r.word, 1, l)?;
                let id = r.token_ids[0];
                for j in 0..d {
                    hidden[(k, j)] = h[j] as f64;
                    te[(k, j)] = e.row(id)?[j] as f64;
                    tu[(k, j)] = u.row(id)?[j] as f64;
                }
            }
            let fin = fit_procrustes(&hidden, &te)?;
            let fout = fit_procrustes(&hidden, &tu)?;
            Ok(Some((
                l,
                LayerMapper {
                    t_in: fin.t,
                    t_out: fout.t,
                    rescale_in: fin.rms_rescale,
                    rescale_out: fout.rms_rescale,
                },
            )))
        })
        .collect::<Result<_>>()?;
    let layers: BTreeMap<_, _> = fitted.into_iter().flatten().collect();
    if layers.is_empty() {
        return Err(Error::InsufficientStatistics(
            "no layer has at least two single-token records with hidden states".into(),
        ));
    }
    MapperSet::new(d, layers)
}
