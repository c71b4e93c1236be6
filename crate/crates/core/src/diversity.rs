//! How much the added data differs from the errors it was made from, and
//! how well a synthetic set covers the gold data once both are projected
//! to the plane.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::text::tokenize;

#[derive(Debug, Error, PartialEq)]
pub enum DiversityError {
    #[error("vectors have dimensions {0} and {1}")]
    DimensionMismatch(usize, usize),
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("embedding dimension must be at least {0}")]
    TooFewDimensions(usize),
    #[error("added example `{0}` has no source error in the misclassified set")]
    Unlinked(String),
    #[error("no embedding for `{0}`")]
    MissingEmbedding(String),
    #[error("no (error, addition) pairs to compare")]
    NoPairs,
    #[error("synthetic point set is empty")]
    EmptySynthetic,
    #[error("gold point set is empty")]
    EmptyGold,
    #[error("radius must be finite and >= 0, got {0}")]
    BadRadius(f64),
    #[error("need at least two gold points to pick a default radius")]
    TooFewForRadius,
    #[error("external coordinates lack id `{0}`")]
    MissingCoords(String),
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
}

/// Vectors keyed by example id, all of one dimension.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingSet {
    dim: Option<usize>,
    vectors: BTreeMap<String, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingLine {
    id: String,
    vector: Vec<f64>,
}

impl EmbeddingSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, v: Vec<f64>) -> Result<(), DiversityError> {
        if v.is_empty() {
            return Err(DiversityError::TooFewDimensions(1));
        }
        match self.dim {
            Some(d) if d != v.len() => return Err(DiversityError::DimensionMismatch(d, v.len())),
            _ => self.dim = Some(v.len()),
        }
        self.vectors.insert(id.into(), v);
        Ok(())
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.vectors.get(id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Adds every entry of `other`; ids already present are overwritten.
    pub fn extend(&mut self, other: &EmbeddingSet) -> Result<(), DiversityError> {
        for (id, v) in other.iter() {
            self.insert(id, v.to_vec())?;
        }
        Ok(())
    }

    /// JSON lines of `{"id": ..., "vector": [...]}`.
    pub fn from_jsonl(text: &str) -> Result<Self, DiversityError> {
        let mut set = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let l: EmbeddingLine =
                serde_json::from_str(line).map_err(|e| DiversityError::Format { line: i + 1, msg: e.to_string() })?;
            set.insert(l.id, l.vector).map_err(|e| DiversityError::Format { line: i + 1, msg: e.to_string() })?;
        }
        Ok(set)
    }

    pub fn to_jsonl(&self) -> String {
        self.vectors
            .iter()
            .map(|(id, v)| serde_json::to_string(&EmbeddingLine { id: id.clone(), vector: v.clone() }).unwrap() + "\n")
            .collect()
    }
}

/// Bag-of-words feature hashing: each token adds ±1 to one of `dim`
/// buckets (64-bit FNV-1a; the top bit picks the sign), and the result is
/// L2-normalized. Text without tokens maps to the zero vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedEmbedder {
    pub dim: usize,
}

impl Default for HashedEmbedder {
    fn default() -> Self {
        Self { dim: 256 }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl HashedEmbedder {
    pub fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for t in tokenize(text) {
            let h = fnv1a(t.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }

    /// Embeds each example's target text (the `x` or the question).
    pub fn embed_dataset(&self, d: &Dataset) -> EmbeddingSet {
        let mut set = EmbeddingSet::new();
        for ex in d {
            set.insert(ex.id.clone(), self.embed(ex.payload.target_text())).expect("uniform dimension");
        }
        set
    }
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, DiversityError> {
    if u.len() != v.len() {
        return Err(DiversityError::DimensionMismatch(u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum();
    let nv: f64 = v.iter().map(|a| a * a).sum();
    if nu == 0.0 || nv == 0.0 {
        return Err(DiversityError::ZeroVector);
    }
    Ok((dot / (nu * nv).sqrt()).clamp(-1.0, 1.0))
}

/// Levenshtein distance over Unicode scalar values.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub n_pairs: usize,
    pub avg_cos_sim: f64,
    pub avg_edit_dist: f64,
    /// Mean character length.
    pub avg_len_mis: f64,
    pub avg_len_add: f64,
}

/// Pairs every added example with the error it came from (by
/// `source_error_id`) and averages similarity, edit distance and lengths of
/// their target texts.
pub fn quality_report(mis: &Dataset, add: &Dataset, emb: &EmbeddingSet) -> Result<DiversityReport, DiversityError> {
    let (mut cos, mut edit, mut len_m, mut len_a) = (0.0, 0.0, 0.0, 0.0);
    for a in add {
        let src = a
            .provenance
            .source_error_id
            .as_deref()
            .and_then(|id| mis.get(id))
            .ok_or_else(|| DiversityError::Unlinked(a.id.clone()))?;
        let vm = emb.get(&src.id).ok_or_else(|| DiversityError::MissingEmbedding(src.id.clone()))?;
        let va = emb.get(&a.id).ok_or_else(|| DiversityError::MissingEmbedding(a.id.clone()))?;
        let (tm, ta) = (src.payload.target_text(), a.payload.target_text());
        cos += cosine_similarity(vm, va)?;
        edit += edit_distance(tm, ta) as f64;
        len_m += tm.chars().count() as f64;
        len_a += ta.chars().count() as f64;
    }
    if add.is_empty() {
        return Err(DiversityError::NoPairs);
    }
    let n = add.len() as f64;
    Ok(DiversityReport {
        n_pairs: add.len(),
        avg_cos_sim: cos / n,
        avg_edit_dist: edit / n,
        avg_len_mis: len_m / n,
        avg_len_add: len_a / n,
    })
}

pub type Point = [f64; 2];

/// Projection onto the top two principal axes of the centered data. Each
/// axis is signed so that its largest-magnitude component is positive,
/// which makes the output deterministic.
pub fn pca_2d(emb: &EmbeddingSet) -> Result<BTreeMap<String, Point>, DiversityError> {
    let d = emb.dim().unwrap_or(0);
    if d < 2 {
        return Err(DiversityError::TooFewDimensions(2));
    }
    let n = emb.len();
    let ids: Vec<&str> = emb.iter().map(|(id, _)| id).collect();
    let mut m = DMatrix::<f64>::zeros(n, d);
    for (r, (_, v)) in emb.iter().enumerate() {
        for (c, x) in v.iter().enumerate() {
            m[(r, c)] = *x;
        }
    }
    let mean = m.row_mean();
    for mut row in m.row_iter_mut() {
        row -= &mean;
    }
    let svd = m.clone().svd(false, true);
    let vt = svd.v_t.expect("requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut axes = Vec::with_capacity(2);
    for k in 0..2 {
        let mut axis: Vec<f64> = match order.get(k) {
            Some(&i) => vt.row(i).iter().copied().collect(),
            None => vec![0.0; d],
        };
        let lead = axis.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            axis.iter_mut().for_each(|x| *x = -*x);
        }
        axes.push(axis);
    }
    let mut out = BTreeMap::new();
    for (r, id) in ids.iter().enumerate() {
        let row = m.row(r);
        let p = [0, 1].map(|k| row.iter().zip(&axes[k]).map(|(a, b)| a * b).sum::<f64>());
        out.insert(id.to_string(), p);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct CoordLine {
    id: String,
    x: f64,
    y: f64,
}

/// JSON lines of `{"id", "x", "y"}`, e.g. from an external t-SNE run.
pub fn load_coords(text: &str) -> Result<BTreeMap<String, Point>, DiversityError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let c: CoordLine =
            serde_json::from_str(line).map_err(|e| DiversityError::Format { line: i + 1, msg: e.to_string() })?;
        out.insert(c.id, [c.x, c.y]);
    }
    Ok(out)
}

pub fn coords_to_jsonl(points: &BTreeMap<String, Point>) -> String {
    points
        .iter()
        .map(|(id, p)| serde_json::to_string(&CoordLine { id: id.clone(), x: p[0], y: p[1] }).unwrap() + "\n")
        .collect()
}

pub enum Projection<'a> {
    Pca,
    /// Precomputed coordinates; must cover every id in the embedding set.
    External(&'a BTreeMap<String, Point>),
}

pub fn project_2d(emb: &EmbeddingSet, method: Projection<'_>) -> Result<BTreeMap<String, Point>, DiversityError> {
    match method {
        Projection::Pca => pca_2d(emb),
        Projection::External(coords) => emb
            .iter()
            .map(|(id, _)| {
                coords
                    .get(id)
                    .map(|p| (id.to_string(), *p))
                    .ok_or_else(|| DiversityError::MissingCoords(id.to_string()))
            })
            .collect(),
    }
}

/// Euclidean distance, computed as `sqrt(dx² + dy²)`.
pub fn distance(a: Point, b: Point) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    (dx * dx + dy * dy).sqrt()
}

fn nearest(p: Point, set: &[Point]) -> f64 {
    set.iter().map(|&q| distance(p, q)).fold(f64::INFINITY, f64::min)
}

/// Fraction of gold points with a synthetic point within `gamma`.
pub fn coverage_rate(gold: &[Point], syn: &[Point], gamma: f64) -> Result<f64, DiversityError> {
    if syn.is_empty() {
        return Err(DiversityError::EmptySynthetic);
    }
    if gold.is_empty() {
        return Err(DiversityError::EmptyGold);
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(DiversityError::BadRadius(gamma));
    }
    let covered = gold.iter().filter(|&&g| nearest(g, syn) <= gamma).count();
    Ok(covered as f64 / gold.len() as f64)
}

/// Median distance from each gold point to its nearest other gold point.
pub fn default_gamma(gold: &[Point]) -> Result<f64, DiversityError> {
    if gold.len() < 2 {
        return Err(DiversityError::TooFewForRadius);
    }
    let mut nn: Vec<f64> = (0..gold.len())
        .map(|i| {
            gold.iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &q)| distance(gold[i], q))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    nn.sort_by(f64::total_cmp);
    let k = nn.len();
    Ok(if k % 2 == 1 { nn[k / 2] } else { (nn[k / 2 - 1] + nn[k / 2]) / 2.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[1.0, -2.0], &[-1.0, 2.0]).unwrap(), -1.0);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]), Err(DiversityError::ZeroVector));
        assert_eq!(cosine_similarity(&[1.0], &[1.0, 2.0]), Err(DiversityError::DimensionMismatch(1, 2)));
    }

    #[test]
    fn edit_cases() {
        assert_eq!(edit_distance("abc", "abc"), 0);
        assert_eq!(edit_distance("", "hello"), 5);
        assert_eq!(edit_distance("kitten", "sitting"), 3);
    }

    #[test]
    fn coverage_cases() {
        assert_eq!(coverage_rate(&[[0.0, 0.0], [2.0, 0.0]], &[[0.0, 0.5]], 1.0).unwrap(), 0.5);
        assert_eq!(coverage_rate(&[[0.0, 0.0]], &[[1.0, 0.0]], 0.0).unwrap(), 0.0);
        assert_eq!(coverage_rate(&[[1.0, 1.0]], &[[1.0, 1.0], [5.0, 5.0]], 0.1).unwrap(), 1.0);
        assert_eq!(coverage_rate(&[[1.0, 1.0]], &[], 0.1), Err(DiversityError::EmptySynthetic));
    }

    #[test]
    fn embedder_is_normalized() {
        let e = HashedEmbedder::default();
        let v = e.embed("a great movie with great acting");
        assert_eq!(v.len(), 256);
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(e.embed("..."), vec![0.0; 256]);
        assert_eq!(e.embed("Great Acting"), e.embed("great, acting!"));
    }

    #[test]
    fn single_point_centers_to_origin() {
        let mut s = EmbeddingSet::new();
        s.insert("a", vec![3.0, 4.0, 5.0]).unwrap();
        assert_eq!(pca_2d(&s).unwrap()["a"], [0.0, 0.0]);
        let mut one_d = EmbeddingSet::new();
        one_d.insert("a", vec![1.0]).unwrap();
        assert_eq!(pca_2d(&one_d), Err(DiversityError::TooFewDimensions(2)));
    }

    #[test]
    fn default_gamma_median() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]];
        // nearest distances: 1, 1, 2
        assert_eq!(default_gamma(&pts).unwrap(), 1.0);
    }
}
