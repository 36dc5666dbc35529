//! AUCs, neighbor confusion, PGM grids and result tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::rng;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("evaluation error: {0}")]
    Input(String),
    #[error("report error: {0}")]
    Report(String),
    #[error("malformed PGM: {0}")]
    Pgm(String),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucResult {
    pub auc: f64,
    /// Unknown-class count.
    pub positives: usize,
    /// Known-class count.
    pub negatives: usize,
    pub source: String,
}

/// Mann-Whitney AUC with label 1 as the positive (anomalous) class and
/// higher scores meaning more anomalous. Ties count one half.
///
/// Computed from average ranks; every intermediate is a multiple of 0.5
/// below 2^52, so the result equals the pair count exactly.
pub fn compute_auc(scores: &[f64], labels: &[u8], source: &str) -> Result<AucResult> {
    if scores.len() != labels.len() {
        return Err(EvalError::Input(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(EvalError::Input(format!("label {l} is not binary")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::Input("NaN score".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::Input("both classes must be present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of the positives, kept integral.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 averaged: (i + j + 2) / 2.
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        twice_rank_sum += pos_in_group * (i + j + 2) as u64;
        i = j + 1;
    }
    let p = positives as u64;
    let twice_u = twice_rank_sum - p * (p + 1);
    let auc = (twice_u as f64 / 2.0) / (positives as f64 * negatives as f64);
    Ok(AucResult { auc, positives, negatives, source: source.to_string() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborConfusion {
    /// `matrix[true][neighbor]` tallies.
    pub matrix: Vec<Vec<u64>>,
    pub samples_per_class: usize,
    pub k_neighbors: usize,
}

pub const DEFAULT_K_NEIGHBORS: usize = 5;
pub const DEFAULT_SAMPLES_PER_CLASS: usize = 10;

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Samples `samples_per_class` queries per class and up to `pool_per_class`
/// reference points per class (seeded), then tallies the classes of each
/// query's `k` most cosine-similar pool members, never counting the query
/// itself. Similarity ties go to the lower index.
pub fn neighbor_confusion(
    embeddings: &[Vec<f32>],
    labels: &[u8],
    classes: usize,
    samples_per_class: usize,
    pool_per_class: usize,
    k: usize,
    seed: u64,
) -> Result<NeighborConfusion> {
    if embeddings.len() != labels.len() {
        return Err(EvalError::Input(format!("{} embeddings but {} labels", embeddings.len(), labels.len())));
    }
    if k == 0 || samples_per_class == 0 {
        return Err(EvalError::Input("k and samples_per_class must be positive".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        let slot = by_class.get_mut(l as usize).ok_or_else(|| EvalError::Input(format!("label {l} out of range")))?;
        slot.push(i);
    }
    let mut queries = Vec::new();
    let mut pool = Vec::new();
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < samples_per_class {
            return Err(EvalError::Input(format!(
                "class {c} has {} examples, need {samples_per_class}",
                members.len()
            )));
        }
        let mut r = rng::stream(seed, "confusion_queries", c as u64);
        queries.extend(members.choose_multiple(&mut r, samples_per_class).copied());
        let mut r = rng::stream(seed, "confusion_pool", c as u64);
        pool.extend(members.choose_multiple(&mut r, pool_per_class.min(members.len())).copied());
    }
    pool.sort_unstable();
    let mut matrix = vec![vec![0u64; classes]; classes];
    for &q in &queries {
        let mut sims: Vec<(f64, usize)> =
            pool.iter().filter(|&&p| p != q).map(|&p| (cosine(embeddings[q].as_slice(), embeddings[p].as_slice()), p)).collect();
        if sims.len() < k {
            return Err(EvalError::Input(format!("reference pool has {} candidates, need {k}", sims.len())));
        }
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, p) in &sims[..k] {
            matrix[labels[q] as usize][labels[p] as usize] += 1;
        }
    }
    Ok(NeighborConfusion { matrix, samples_per_class, k_neighbors: k })
}

impl NeighborConfusion {
    /// Class pairs `(a, b)` with `a < b` ranked by symmetric off-diagonal mass,
    /// lower pair first on ties. Pairs never confused are left out.
    pub fn suggested_pairs(&self, top: usize) -> Vec<(u8, u8, u64)> {
        let n = self.matrix.len();
        let mut pairs = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                let mass = self.matrix[a][b] + self.matrix[b][a];
                if mass > 0 {
                    pairs.push((a as u8, b as u8, mass));
                }
            }
        }
        pairs.sort_by(|x, y| y.2.cmp(&x.2).then((x.0, x.1).cmp(&(y.0, y.1))));
        pairs.truncate(top);
        pairs
    }

    pub fn off_diagonal(&self) -> Vec<u64> {
        let n = self.matrix.len();
        (0..n).flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| (a, b))).map(|(a, b)| self.matrix[a][b]).collect()
    }

    pub fn to_csv(&self) -> String {
        let n = self.matrix.len();
        let mut out = String::from("true");
        for c in 0..n {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
        for (c, row) in self.matrix.iter().enumerate() {
            let _ = write!(out, "{c}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

pub const GRID_GAP: usize = 2;

pub fn pixel_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Binary P5 grid, row-major tiles with white gaps between tiles. Cells past
/// the last image are white.
pub fn render_grid_pgm(images: &ImageBatch, cols: usize) -> Result<Vec<u8>> {
    let n = images.len();
    if n == 0 {
        return Err(EvalError::Input("empty batch".into()));
    }
    let cols = cols.clamp(1, n);
    let rows = n.div_ceil(cols);
    let s = images.side();
    let width = cols * s + (cols - 1) * GRID_GAP;
    let height = rows * s + (rows - 1) * GRID_GAP;
    let mut pixels = vec![255u8; width * height];
    for i in 0..n {
        let (r, c) = (i / cols, i % cols);
        let (top, left) = (r * (s + GRID_GAP), c * (s + GRID_GAP));
        let img = images.images.row(i);
        for y in 0..s {
            let dst = &mut pixels[(top + y) * width + left..][..s];
            for (d, &v) in dst.iter_mut().zip(&img[y * s..(y + 1) * s]) {
                *d = pixel_byte(v);
            }
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

/// Parses a maxval-255 P5 file into `(width, height, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(EvalError::Pgm("truncated header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| EvalError::Pgm("non-ASCII header".into()))?);
    }
    if fields[0] != "P5" {
        return Err(EvalError::Pgm(format!("magic {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| EvalError::Pgm(format!("bad number {s:?}")));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(EvalError::Pgm(format!("maxval {maxval}")));
    }
    let payload = bytes.get(pos + 1..).unwrap_or(&[]);
    if payload.len() != w * h {
        return Err(EvalError::Pgm(format!("payload {} bytes, expected {}", payload.len(), w * h)));
    }
    Ok((w, h, payload.to_vec()))
}

/// Table columns, in order.
pub const MODEL_COLUMNS: [&str; 5] = ["IF", "AnoGAN", "NoiseGAN", "DeepSVDD", "VTGAN"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub known: String,
    pub unknown: String,
    pub model: String,
    pub auc: f64,
}

/// One row per (known, unknown) pair sorted by name, one column per model,
/// AUCs to two decimals. Missing cells are empty.
pub fn emit_results_table(entries: &[TableEntry]) -> Result<String> {
    let mut rows: BTreeMap<(&str, &str), [Option<f64>; MODEL_COLUMNS.len()]> = BTreeMap::new();
    for e in entries {
        let col = MODEL_COLUMNS
            .iter()
            .position(|&m| m == e.model)
            .ok_or_else(|| EvalError::Report(format!("unknown model {:?}", e.model)))?;
        let cell = &mut rows.entry((&e.known, &e.unknown)).or_default()[col];
        if cell.is_some() {
            return Err(EvalError::Report(format!("duplicate entry for {}/{} {}", e.known, e.unknown, e.model)));
        }
        *cell = Some(e.auc);
    }
    let mut out = format!("known,unknown,{}\n", MODEL_COLUMNS.join(","));
    for ((known, unknown), cells) in rows {
        let _ = write!(out, "{},{}", csv_field(known), csv_field(unknown));
        for cell in cells {
            match cell {
                Some(v) => {
                    let _ = write!(out, ",{v:.2}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    Ok(out)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_auc_example() {
        let r = compute_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1], "v").unwrap();
        assert_eq!(r.auc, 0.75);
        assert_eq!((r.positives, r.negatives), (2, 2));
    }

    #[test]
    fn ties_and_single_class() {
        assert_eq!(compute_auc(&[1.0; 6], &[0, 1, 0, 1, 1, 0], "").unwrap().auc, 0.5);
        assert!(compute_auc(&[1.0, 2.0], &[1, 1], "").is_err());
    }

    #[test]
    fn pixel_mapping_endpoints() {
        assert_eq!(pixel_byte(-1.0), 0);
        assert_eq!(pixel_byte(1.0), 255);
        assert_eq!(pixel_byte(0.0), 128);
    }
}
