//! Independent brute-force retrieval oracle and random instance generators.
#![allow(dead_code)]

use la_transformer::reid::LabeledEmbedding;
use rand::Rng;
use rand_distr::StandardNormal;

pub struct OracleReport {
    pub rankings: Vec<Vec<usize>>,
    pub relevance: Vec<Vec<bool>>,
    pub cmc: Vec<f64>,
    pub mean_ap: f64,
    pub per_query_ap: Vec<Option<f64>>,
}

fn dist(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for i in 0..a.len() {
        let d = a[i] as f64 - b[i] as f64;
        s += d * d;
    }
    s.sqrt()
}

/// Selection-sort ranking by `(distance, index)` after the same-person-same-camera filter.
pub fn oracle_rank(q: &LabeledEmbedding, gallery: &[LabeledEmbedding], exclude: bool) -> Vec<usize> {
    let mut left: Vec<usize> = (0..gallery.len())
        .filter(|&g| !(exclude && gallery[g].person_id == q.person_id && gallery[g].camera_id == q.camera_id))
        .collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for j in 1..left.len() {
            let (dj, db) = (dist(&q.vector, &gallery[left[j]].vector), dist(&q.vector, &gallery[left[best]].vector));
            if dj < db || (dj == db && left[j] < left[best]) {
                best = j;
            }
        }
        out.push(left.remove(best));
    }
    out
}

/// `None` when evaluation must fail: a query with an empty filtered gallery, or no query with a match.
pub fn oracle_evaluate(
    queries: &[LabeledEmbedding],
    gallery: &[LabeledEmbedding],
    max_rank: usize,
    exclude: bool,
) -> Option<OracleReport> {
    let mut rankings = Vec::new();
    let mut relevance = Vec::new();
    let mut per_query_ap = Vec::new();
    for q in queries {
        let r = oracle_rank(q, gallery, exclude);
        if r.is_empty() {
            return None;
        }
        let rel: Vec<bool> = r.iter().map(|&g| gallery[g].person_id == q.person_id).collect();
        let total = rel.iter().filter(|&&x| x).count();
        let ap = if total == 0 {
            None
        } else {
            let mut s = 0.0;
            for p in 0..rel.len() {
                if rel[p] {
                    let hits = rel[..=p].iter().filter(|&&x| x).count();
                    s += hits as f64 / (p + 1) as f64;
                }
            }
            Some(s / total as f64)
        };
        rankings.push(r);
        relevance.push(rel);
        per_query_ap.push(ap);
    }
    let valid: Vec<usize> = (0..queries.len()).filter(|&i| per_query_ap[i].is_some()).collect();
    if valid.is_empty() {
        return None;
    }
    let mut cmc = Vec::new();
    for k in 1..=max_rank {
        let hits = valid
            .iter()
            .filter(|&&i| relevance[i].iter().take(k).any(|&x| x))
            .count();
        cmc.push(hits as f64 / valid.len() as f64);
    }
    let mut sum = 0.0;
    for &i in &valid {
        sum += per_query_ap[i].unwrap();
    }
    Some(OracleReport {
        rankings,
        relevance,
        cmc,
        mean_ap: sum / valid.len() as f64,
        per_query_ap,
    })
}

/// Random query and gallery sets of up to 30 and 50 entries with dimension up to 8.
/// Half of the instances use small integer coordinates so that distance ties occur.
pub fn random_instance<R: Rng>(rng: &mut R) -> (Vec<LabeledEmbedding>, Vec<LabeledEmbedding>) {
    let e = rng.random_range(1..=8);
    let ids = rng.random_range(1..=6);
    let integer = rng.random_bool(0.5);
    let make = |n: usize, rng: &mut R| -> Vec<LabeledEmbedding> {
        (0..n)
            .map(|_| LabeledEmbedding {
                vector: (0..e)
                    .map(|_| {
                        if integer {
                            rng.random_range(-2i32..=2) as f32
                        } else {
                            rng.sample::<f32, _>(StandardNormal)
                        }
                    })
                    .collect(),
                person_id: rng.random_range(1..=ids),
                camera_id: rng.random_range(1..=3),
            })
            .collect()
    };
    let nq = rng.random_range(1..=30);
    let ng = rng.random_range(1..=50);
    let q = make(nq, rng);
    let g = make(ng, rng);
    (q, g)
}

/// Random orthogonal `n×n` matrix from Gram-Schmidt on Gaussian columns.
pub fn random_rotation<R: Rng>(rng: &mut R, n: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

pub fn rotate(m: &[Vec<f64>], e: &LabeledEmbedding) -> LabeledEmbedding {
    LabeledEmbedding {
        vector: m
            .iter()
            .map(|row| row.iter().zip(&e.vector).map(|(a, &b)| a * b as f64).sum::<f64>() as f32)
            .collect(),
        ..e.clone()
    }
}
