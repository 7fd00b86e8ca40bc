//! Exact Euclidean retrieval and re-identification metrics (CMC, mAP).

mod embfile;

pub use embfile::{
    decode_embeddings, encode_embeddings, read_embeddings, read_jsonl, write_embeddings,
    write_jsonl, EmbeddingFile, EMBEDDING_MAGIC, EMBEDDING_VERSION,
};

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledEmbedding {
    pub vector: Vec<f32>,
    pub person_id: i32,
    pub camera_id: u32,
}

#[derive(Clone, Debug)]
pub struct GalleryIndex {
    dim: usize,
    vectors: Vec<f32>,
    person_ids: Vec<i32>,
    camera_ids: Vec<u32>,
}

impl GalleryIndex {
    pub fn new(entries: &[LabeledEmbedding]) -> Result<Self> {
        let dim = entries.first().map(|e| e.vector.len()).unwrap_or(0);
        let mut vectors = Vec::with_capacity(dim * entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.vector.len() != dim {
                return Err(Error::dim(format!(
                    "gallery entry {i} has dimension {}, expected {dim}",
                    e.vector.len()
                )));
            }
            if e.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gallery entry {i}")));
            }
            vectors.extend_from_slice(&e.vector);
        }
        Ok(Self {
            dim,
            vectors,
            person_ids: entries.iter().map(|e| e.person_id).collect(),
            camera_ids: entries.iter().map(|e| e.camera_id).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.person_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.person_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn person_id(&self, i: usize) -> i32 {
        self.person_ids[i]
    }

    pub fn camera_id(&self, i: usize) -> u32 {
        self.camera_ids[i]
    }
}

/// Euclidean distance accumulated in `f64`.
pub fn distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Length of the CMC curve.
    pub max_rank: usize,
    /// Drop gallery entries sharing both identity and camera with the query.
    pub exclude_same_camera: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            max_rank: 10,
            exclude_same_camera: true,
        }
    }
}

fn rank_query(
    qi: usize,
    query: &LabeledEmbedding,
    index: &GalleryIndex,
    exclude_same_camera: bool,
) -> Result<Vec<usize>> {
    if query.vector.len() != index.dim() && !index.is_empty() {
        return Err(Error::dim(format!(
            "query dimension {} does not match gallery dimension {}",
            query.vector.len(),
            index.dim()
        )));
    }
    let mut scored: Vec<(f64, usize)> = (0..index.len())
        .filter(|&g| {
            !(exclude_same_camera
                && index.person_id(g) == query.person_id
                && index.camera_id(g) == query.camera_id)
        })
        .map(|g| (distance(&query.vector, index.vector(g)), g))
        .collect();
    if scored.is_empty() {
        return Err(Error::NoValidGallery { query: qi });
    }
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, g)| g).collect())
}

/// Gallery indices by ascending distance to `query`, ties by ascending index.
pub fn rank(
    query: &LabeledEmbedding,
    index: &GalleryIndex,
    exclude_same_camera: bool,
) -> Result<Vec<usize>> {
    rank_query(0, query, index, exclude_same_camera)
}

/// Relevance flags of a ranking: same person as the query.
pub fn relevance(query: &LabeledEmbedding, index: &GalleryIndex, ranking: &[usize]) -> Vec<bool> {
    ranking
        .iter()
        .map(|&g| index.person_id(g) == query.person_id)
        .collect()
}

/// `cmc[k-1]` = fraction of queries whose first relevant entry is at rank `<= k`.
pub fn cmc(relevances: &[Vec<bool>], max_rank: usize) -> Vec<f64> {
    let mut hits = vec![0usize; max_rank];
    for rel in relevances {
        if let Some(first) = rel.iter().position(|&r| r) {
            for h in hits.iter_mut().skip(first) {
                *h += 1;
            }
        }
    }
    let n = relevances.len().max(1) as f64;
    hits.into_iter().map(|h| h as f64 / n).collect()
}

/// `AP = (1/R) Σ_{relevant p} (relevant in top p) / p`; `None` when nothing is relevant.
pub fn average_precision(relevance: &[bool]) -> Option<f64> {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (p, _) in relevance.iter().enumerate().filter(|(_, &r)| r) {
        found += 1;
        sum += found as f64 / (p + 1) as f64;
    }
    (found > 0).then(|| sum / found as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cmc: Vec<f64>,
    pub mean_ap: f64,
    /// `None` for queries without any relevant gallery entry; those are excluded from both metrics.
    pub per_query_ap: Vec<Option<f64>>,
    pub valid_queries: usize,
}

impl EvalReport {
    /// CMC at rank `k` (1-based), saturating at the curve's end.
    pub fn rank(&self, k: usize) -> f64 {
        let i = k.clamp(1, self.cmc.len().max(1)) - 1;
        self.cmc.get(i).copied().unwrap_or(0.0)
    }

    pub fn rank1(&self) -> f64 {
        self.rank(1)
    }
}

pub fn evaluate(
    queries: &[LabeledEmbedding],
    index: &GalleryIndex,
    options: &EvalOptions,
) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::Malformed("empty query set".into()));
    }
    if options.max_rank == 0 {
        return Err(Error::Config(vec!["max_rank must be at least 1".into()]));
    }
    let relevances = queries
        .par_iter()
        .enumerate()
        .map(|(qi, q)| {
            let ranking = rank_query(qi, q, index, options.exclude_same_camera)?;
            Ok(relevance(q, index, &ranking))
        })
        .collect::<Result<Vec<_>>>()?;
    let per_query_ap: Vec<Option<f64>> = relevances.iter().map(|r| average_precision(r)).collect();
    let valid: Vec<Vec<bool>> = relevances
        .into_iter()
        .zip(&per_query_ap)
        .filter(|(_, ap)| ap.is_some())
        .map(|(r, _)| r)
        .collect();
    if valid.is_empty() {
        return Err(Error::Malformed(
            "no query has a relevant gallery entry".into(),
        ));
    }
    let aps: Vec<f64> = per_query_ap.iter().flatten().copied().collect();
    Ok(EvalReport {
        cmc: cmc(&valid, options.max_rank),
        mean_ap: aps.iter().sum::<f64>() / aps.len() as f64,
        per_query_ap,
        valid_queries: valid.len(),
    })
}
