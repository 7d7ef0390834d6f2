//! Exact exemplar retrieval over pooled encoder vectors.

use std::cmp::Ordering;
use std::hash::Hash;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::SemanticVector;
use crate::error::{Error, Result};
use crate::metrics::sentence_bleu;

pub const DEFAULT_TOP_K: usize = 8;
const INDEX_MAGIC: &[u8; 4] = b"BCIX";

/// Immutable repository of semantic vectors, stored as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeIndex {
    vectors: Vec<f32>,
    sample_ids: Vec<u32>,
    dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub sample_id: u32,
    pub semantic_distance: f64,
    pub lexical_sim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    /// Euclidean top-k, then the highest lexical similarity.
    #[default]
    Standard,
    /// Lexical top-k over the whole repository, then the smallest distance.
    Reverse,
    /// Cosine top-k, then the highest smoothed sentence BLEU-4 on code tokens.
    NnGen,
}

pub fn build_index(repository: &[(u32, SemanticVector)]) -> Result<CodeIndex> {
    let Some((_, first)) = repository.first() else {
        return Err(Error::EmptyRepository);
    };
    let dim = first.dim();
    let mut vectors = Vec::with_capacity(dim * repository.len());
    let mut sample_ids = Vec::with_capacity(repository.len());
    for (id, v) in repository {
        if v.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, actual: v.dim() });
        }
        vectors.extend(v.0.iter().map(|&x| x as f32));
        sample_ids.push(*id);
    }
    Ok(CodeIndex { vectors, sample_ids, dim })
}

impl CodeIndex {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample_ids(&self) -> &[u32] {
        &self.sample_ids
    }

    pub fn vector(&self, pos: usize) -> &[f32] {
        &self.vectors[pos * self.dim..(pos + 1) * self.dim]
    }

    pub fn position(&self, sample_id: u32) -> Option<usize> {
        self.sample_ids.iter().position(|&id| id == sample_id)
    }

    fn check_query(&self, query: &SemanticVector) -> Result<Vec<f32>> {
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, actual: query.dim() });
        }
        Ok(query.0.iter().map(|&x| x as f32).collect())
    }

    fn distance(&self, pos: usize, q: &[f32]) -> f64 {
        self.vector(pos)
            .iter()
            .zip(q)
            .map(|(&a, &b)| {
                let d = f64::from(a) - f64::from(b);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    fn cosine(&self, pos: usize, q: &[f32]) -> f64 {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for (&a, &b) in self.vector(pos).iter().zip(q) {
            let (a, b) = (f64::from(a), f64::from(b));
            dot += a * b;
            na += a * a;
            nb += b * b;
        }
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na.sqrt() * nb.sqrt())
        }
    }

    fn candidates(&self, exclude_id: Option<u32>) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&p| Some(self.sample_ids[p]) != exclude_id)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for x in &self.vectors {
            w.write_all(&x.to_le_bytes())?;
        }
        for id in &self.sample_ids {
            w.write_all(&id.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("index: {m}"));
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| bad(&e.to_string()))?;
        if bytes.len() < 12 || &bytes[..4] != INDEX_MAGIC {
            return Err(bad("bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let dim = word(4) as usize;
        let n = word(8) as usize;
        if bytes.len() != 12 + 4 * n * dim + 4 * n {
            return Err(bad("truncated file"));
        }
        let vectors = (0..n * dim)
            .map(|i| f32::from_le_bytes(bytes[12 + 4 * i..16 + 4 * i].try_into().unwrap()))
            .collect();
        let base = 12 + 4 * n * dim;
        let sample_ids = (0..n).map(|i| word(base + 4 * i)).collect();
        Ok(Self { vectors, sample_ids, dim })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// The `k` nearest entries by Euclidean distance, ascending, ties to the
/// smaller sample id.
pub fn semantic_topk(
    index: &CodeIndex,
    query: &SemanticVector,
    k: usize,
    exclude_id: Option<u32>,
) -> Result<Vec<RetrievalResult>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let q = index.check_query(query)?;
    let mut scored: Vec<(f64, u32)> = index
        .candidates(exclude_id)
        .map(|p| (index.distance(p, &q), index.sample_ids[p]))
        .collect();
    if scored.is_empty() {
        return Err(Error::EmptyRepository);
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    Ok(scored
        .into_iter()
        .map(|(d, id)| RetrievalResult { sample_id: id, semantic_distance: d, lexical_sim: 0.0 })
        .collect())
}

/// Token-level Levenshtein distance with unit costs.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - dis(a, b) / max(|a|, |b|)`.
pub fn lexical_similarity<T: PartialEq>(a: &[T], b: &[T]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySequence);
    }
    Ok(1.0 - levenshtein(a, b) as f64 / a.len().max(b.len()) as f64)
}

/// Descending by score, ties to the smaller id.
fn by_score_desc(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Picks one exemplar. `codes[p]` holds the code tokens of index entry `p`.
pub fn retrieve<T, C>(
    index: &CodeIndex,
    codes: &[C],
    query_code: &[T],
    query_vec: &SemanticVector,
    k: usize,
    mode: RetrievalMode,
    exclude_id: Option<u32>,
) -> Result<RetrievalResult>
where
    T: Eq + Hash,
    C: AsRef<[T]>,
{
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if codes.len() != index.len() {
        return Err(Error::DimensionMismatch { expected: index.len(), actual: codes.len() });
    }
    if query_code.is_empty() {
        return Err(Error::EmptySequence);
    }
    let q = index.check_query(query_vec)?;
    let lexical = |p: usize| lexical_similarity(query_code, codes[p].as_ref());
    let result = |p: usize, lexical_sim: f64| RetrievalResult {
        sample_id: index.sample_ids[p],
        semantic_distance: index.distance(p, &q),
        lexical_sim,
    };
    let positions: Vec<usize> = index.candidates(exclude_id).collect();
    if positions.is_empty() {
        return Err(Error::EmptyRepository);
    }
    let pick = |mut scored: Vec<(f64, u32, usize)>| -> Vec<usize> {
        scored.sort_by(|a, b| by_score_desc(&(a.0, a.1), &(b.0, b.1)));
        scored.truncate(k);
        scored.into_iter().map(|s| s.2).collect()
    };
    match mode {
        RetrievalMode::Standard => {
            let top = semantic_topk(index, query_vec, k, exclude_id)?;
            let mut best: Option<(f64, u32, usize)> = None;
            for r in top {
                let p = index.position(r.sample_id).expect("id from index");
                let s = lexical(p)?;
                if best.is_none_or(|b| by_score_desc(&(s, r.sample_id), &(b.0, b.1)).is_lt()) {
                    best = Some((s, r.sample_id, p));
                }
            }
            let (s, _, p) = best.expect("non-empty top-k");
            Ok(result(p, s))
        }
        RetrievalMode::Reverse => {
            let scored = positions
                .iter()
                .map(|&p| Ok((lexical(p)?, index.sample_ids[p], p)))
                .collect::<Result<Vec<_>>>()?;
            let top = pick(scored);
            let p = top
                .into_iter()
                .min_by(|&a, &b| {
                    index
                        .distance(a, &q)
                        .total_cmp(&index.distance(b, &q))
                        .then(index.sample_ids[a].cmp(&index.sample_ids[b]))
                })
                .expect("non-empty top-k");
            Ok(result(p, lexical(p)?))
        }
        RetrievalMode::NnGen => {
            let scored = positions
                .iter()
                .map(|&p| (index.cosine(p, &q), index.sample_ids[p], p))
                .collect();
            let top = pick(scored);
            let scored = top
                .into_iter()
                .map(|p| (sentence_bleu(query_code, codes[p].as_ref(), 4, true), index.sample_ids[p], p))
                .collect();
            let p = pick(scored)[0];
            Ok(result(p, lexical(p)?))
        }
    }
}
