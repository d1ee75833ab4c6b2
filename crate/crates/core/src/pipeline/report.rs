use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

/// One experiment outcome, as stored in the results ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub fingerprint: String,
    pub language: String,
    pub method: String,
    pub init: String,
    pub budget: Option<usize>,
    pub items_added: usize,
    pub token_reduction: f64,
    pub performance: Option<f64>,
    pub metric: String,
    pub higher_is_better: bool,
}

impl ResultRow {
    /// Performance oriented so that larger is better.
    fn signed_performance(&self) -> Option<f64> {
        self.performance.map(|p| if self.higher_is_better { p } else { -p })
    }
}

pub const LEDGER_HEADER: &str =
    "fingerprint,language,method,init,budget,items_added,token_reduction,performance,metric,higher_is_better\n";

pub fn rows_to_csv(rows: &[ResultRow]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv");
    format!("{LEDGER_HEADER}{body}")
}

pub fn rows_from_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .enumerate()
        .map(|(k, row)| row.map_err(|e| Error::schema(format!("ledger row {}", k + 1), e.to_string())))
        .collect()
}

pub fn read_ledger(path: &Path) -> Result<Vec<ResultRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    rows_from_csv(&text).map_err(|e| e.in_file(path))
}

/// Append under a lock; the header is written when the ledger is new.
pub fn append_ledger(path: &Path, row: &ResultRow) -> Result<()> {
    let csv = rows_to_csv(std::slice::from_ref(row));
    fsutil::append_locked(path, Some(LEDGER_HEADER), &csv[LEDGER_HEADER.len()..])
}

/// Rows not dominated in (token reduction, oriented performance), sorted by
/// token reduction ascending with input order kept among equals. Identical
/// points do not dominate each other, so duplicates survive together.
pub fn pareto_front(rows: &[ResultRow]) -> Result<Vec<ResultRow>> {
    let mut pts = Vec::with_capacity(rows.len());
    for (k, r) in rows.iter().enumerate() {
        let p = r.signed_performance().ok_or_else(|| {
            Error::input(format!("row {} ({}) has no performance value", k + 1, r.fingerprint))
        })?;
        if !p.is_finite() || !r.token_reduction.is_finite() {
            return Err(Error::input(format!("row {} ({}) has a non-finite coordinate", k + 1, r.fingerprint)));
        }
        pts.push((r.token_reduction, p, k));
    }
    // sweep from the largest reduction down
    pts.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
    let mut keep = vec![false; rows.len()];
    let mut best_greater = f64::NEG_INFINITY;
    let mut i = 0;
    while i < pts.len() {
        let mut j = i;
        while j < pts.len() && pts[j].0 == pts[i].0 {
            j += 1;
        }
        let group_max = pts[i].1;
        for p in &pts[i..j] {
            if p.1 == group_max && p.1 > best_greater {
                keep[p.2] = true;
            }
        }
        best_greater = best_greater.max(group_max);
        i = j;
    }
    let mut front: Vec<&ResultRow> = rows.iter().zip(&keep).filter(|(_, &k)| k).map(|(r, _)| r).collect();
    front.sort_by(|a, b| a.token_reduction.total_cmp(&b.token_reduction));
    Ok(front.into_iter().cloned().collect())
}

const W: f64 = 640.0;
const H: f64 = 480.0;
const PAD: f64 = 56.0;

fn span(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        let m = (hi - lo) * 0.05;
        (lo - m, hi + m)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Scatter of (token reduction, performance) with the front as a polyline.
/// Rows without performance are not plotted.
pub fn render_svg(rows: &[ResultRow], front: &[ResultRow]) -> String {
    let plotted: Vec<&ResultRow> = rows.iter().filter(|r| r.performance.is_some()).collect();
    let (x0, x1) = span(plotted.iter().map(|r| r.token_reduction));
    let (y0, y1) = span(plotted.iter().filter_map(|r| r.performance));
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let metric = plotted.first().map_or("performance", |r| r.metric.as_str());
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<g class="axes" stroke="black"><line x1="{PAD}" y1="{}" x2="{}" y2="{}"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}"/></g>"#,
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">token reduction</text>"#,
        W / 2.0,
        H - 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" font-size="14" transform="rotate(-90 18 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(metric)
    );
    for (v, x) in [(x0, sx(x0)), (x1, sx(x1))] {
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{}" text-anchor="middle" font-size="11">{v:.3}</text>"#, H - PAD + 16.0);
    }
    for (v, y) in [(y0, sy(y0)), (y1, sy(y1))] {
        let _ = writeln!(s, r#"<text x="{}" y="{y:.2}" text-anchor="end" font-size="11">{v:.3}</text>"#, PAD - 6.0);
    }
    let pts: Vec<String> = front
        .iter()
        .filter_map(|r| r.performance.map(|p| format!("{:.2},{:.2}", sx(r.token_reduction), sy(p))))
        .collect();
    if !pts.is_empty() {
        let _ = writeln!(
            s,
            r#"<polyline class="front" fill="none" stroke="crimson" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
    }
    for r in &plotted {
        let p = r.performance.expect("filtered");
        let _ = writeln!(
            s,
            r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="4" fill="steelblue"><title>{} {} {} ({}, {})</title></circle>"#,
            sx(r.token_reduction),
            sy(p),
            escape(&r.method),
            escape(&r.init),
            escape(&r.fingerprint),
            r.token_reduction,
            p
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Write `rows` as CSV and the scatter as SVG.
pub fn emit_report(rows: &[ResultRow], front: &[ResultRow], csv_path: &Path, svg_path: &Path) -> Result<()> {
    fsutil::write_atomic(csv_path, rows_to_csv(rows).as_bytes())?;
    fsutil::write_atomic(svg_path, render_svg(rows, front).as_bytes())
}
