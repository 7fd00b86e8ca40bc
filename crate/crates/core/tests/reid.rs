mod common;

use common::{oracle_evaluate, oracle_rank, random_instance, random_rotation, rotate};
use la_transformer::reid::{distance, evaluate, rank, EvalOptions, GalleryIndex, LabeledEmbedding};
use la_transformer::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn opts(max_rank: usize, exclude: bool) -> EvalOptions {
    EvalOptions {
        max_rank,
        exclude_same_camera: exclude,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matches_brute_force(seed in any::<u64>(), exclude in any::<bool>(), k in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, g) = random_instance(&mut rng);
        let index = GalleryIndex::new(&g).unwrap();
        for query in &q {
            match rank(query, &index, exclude) {
                Ok(r) => prop_assert_eq!(r, oracle_rank(query, &g, exclude)),
                Err(Error::NoValidGallery { .. }) => prop_assert!(oracle_rank(query, &g, exclude).is_empty()),
                Err(e) => panic!("{e}"),
            }
        }
        match (evaluate(&q, &index, &opts(k, exclude)), oracle_evaluate(&q, &g, k, exclude)) {
            (Ok(r), Some(o)) => {
                prop_assert_eq!(&r.cmc, &o.cmc);
                prop_assert_eq!(r.mean_ap, o.mean_ap);
                prop_assert_eq!(&r.per_query_ap, &o.per_query_ap);
            }
            (Err(_), None) => {}
            (r, o) => panic!("implementation {:?} vs oracle {}", r.map(|r| r.mean_ap), o.is_some()),
        }
    }

    #[test]
    fn cmc_monotone_and_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, g) = random_instance(&mut rng);
        if let Ok(r) = evaluate(&q, &GalleryIndex::new(&g).unwrap(), &opts(20, false)) {
            prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(r.cmc.iter().all(|&c| (0.0..=1.0).contains(&c)));
            prop_assert!((0.0..=1.0).contains(&r.mean_ap));
            let aps: Vec<f64> = r.per_query_ap.iter().flatten().copied().collect();
            prop_assert_eq!(aps.len(), r.valid_queries);
            prop_assert!((r.mean_ap - aps.iter().sum::<f64>() / aps.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_ap_iff_relevant_first(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, g) = random_instance(&mut rng);
        let index = GalleryIndex::new(&g).unwrap();
        if let (Ok(r), Some(o)) = (evaluate(&q, &index, &opts(5, false)), oracle_evaluate(&q, &g, 5, false)) {
            for (ap, rel) in r.per_query_ap.iter().zip(&o.relevance) {
                if let Some(ap) = ap {
                    let first_miss = rel.iter().position(|&x| !x).unwrap_or(rel.len());
                    let perfect = rel[first_miss..].iter().all(|&x| !x);
                    prop_assert_eq!(*ap == 1.0, perfect);
                }
            }
            let all_perfect = o.relevance.iter().filter(|rel| rel.iter().any(|&x| x)).all(|rel| {
                let first_miss = rel.iter().position(|&x| !x).unwrap_or(rel.len());
                rel[first_miss..].iter().all(|&x| !x)
            });
            prop_assert_eq!(r.mean_ap == 1.0, all_perfect);
        }
    }

    #[test]
    fn distance_symmetric(a in prop::collection::vec(-1e3f32..1e3, 1..16), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f32> = a.iter().map(|_| rng.random_range(-1e3f32..1e3)).collect();
        prop_assert_eq!(distance(&a, &b), distance(&b, &a));
        prop_assert_eq!(distance(&a, &a), 0.0);
    }

    #[test]
    fn rotation_invariance(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, g) = random_instance(&mut rng);
        let dim = q[0].vector.len();
        let m = random_rotation(&mut rng, dim);
        let (rq, rg): (Vec<_>, Vec<_>) = (q.iter().map(|e| rotate(&m, e)).collect(), g.iter().map(|e| rotate(&m, e)).collect());
        let (index, rindex) = (GalleryIndex::new(&g).unwrap(), GalleryIndex::new(&rg).unwrap());
        let mut near_tie = false;
        for (a, b) in q.iter().zip(&rq) {
            let (Ok(r0), Ok(r1)) = (rank(a, &index, false), rank(b, &rindex, false)) else { continue };
            let d: Vec<f64> = r1.iter().map(|&i| distance(&a.vector, &g[i].vector)).collect();
            prop_assert!(d.windows(2).all(|w| w[0] <= w[1] + 1e-4));
            let mut sorted = r0.iter().map(|&i| distance(&a.vector, &g[i].vector)).collect::<Vec<_>>();
            sorted.dedup();
            near_tie |= sorted.windows(2).any(|w| w[1] - w[0] < 1e-4) || sorted.len() < r0.len();
        }
        if !near_tie {
            let (a, b) = (evaluate(&q, &index, &opts(10, false)), evaluate(&rq, &rindex, &opts(10, false)));
            if let (Ok(a), Ok(b)) = (a, b) {
                prop_assert_eq!(a.cmc, b.cmc);
                prop_assert_eq!(a.mean_ap, b.mean_ap);
            }
        }
    }
}

#[test]
fn signed_permutation_preserves_reports_exactly() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, g) = random_instance(&mut rng);
        let dim = q[0].vector.len();
        let mut perm: Vec<usize> = (0..dim).collect();
        perm.reverse();
        let flip = |e: &LabeledEmbedding| LabeledEmbedding {
            vector: perm.iter().enumerate().map(|(i, &p)| if i % 2 == 0 { -e.vector[p] } else { e.vector[p] }).collect(),
            ..e.clone()
        };
        let a = evaluate(&q, &GalleryIndex::new(&g).unwrap(), &opts(10, true));
        let fq: Vec<_> = q.iter().map(flip).collect();
        let fg: Vec<_> = g.iter().map(flip).collect();
        let b = evaluate(&fq, &GalleryIndex::new(&fg).unwrap(), &opts(10, true));
        match (a, b) {
            (Ok(a), Ok(b)) => assert_eq!(a, b),
            (Err(_), Err(_)) => {}
            _ => panic!("seed {seed}: outcomes differ"),
        }
    }
}

/// Identity `k` sits at `100·e_k`; every entry is jittered by at most 0.1.
fn clustered(rng: &mut ChaCha8Rng, ids: usize, per_id: usize, camera: u32) -> Vec<LabeledEmbedding> {
    let mut out = Vec::new();
    for k in 0..ids {
        for _ in 0..per_id {
            let mut v: Vec<f32> = (0..ids).map(|_| rng.random_range(-0.1f32..0.1)).collect();
            v[k] += 100.0;
            out.push(LabeledEmbedding {
                vector: v,
                person_id: k as i32 + 1,
                camera_id: camera,
            });
        }
    }
    out
}

#[test]
fn separable_clusters_are_perfect() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = clustered(&mut rng, 6, 3, 1);
    let g = clustered(&mut rng, 6, 5, 2);
    let r = evaluate(&q, &GalleryIndex::new(&g).unwrap(), &EvalOptions::default()).unwrap();
    assert_eq!(r.rank1(), 1.0);
    assert_eq!(r.mean_ap, 1.0);
    let again = evaluate(&q, &GalleryIndex::new(&g).unwrap(), &EvalOptions::default()).unwrap();
    assert_eq!(r, again);
}

#[test]
fn random_embeddings_give_chance_rank1() {
    let (ids, queries) = (10usize, 500usize);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let gallery: Vec<LabeledEmbedding> = (0..ids * 10)
        .map(|i| LabeledEmbedding {
            vector: (0..8).map(|_| rng.sample(StandardNormal)).collect(),
            person_id: (i % ids) as i32,
            camera_id: 2,
        })
        .collect();
    let q: Vec<LabeledEmbedding> = (0..queries)
        .map(|_| LabeledEmbedding {
            vector: (0..8).map(|_| rng.sample(StandardNormal)).collect(),
            person_id: rng.random_range(0..ids as i32),
            camera_id: 1,
        })
        .collect();
    let r = evaluate(&q, &GalleryIndex::new(&gallery).unwrap(), &EvalOptions::default()).unwrap();
    let p = 1.0 / ids as f64;
    let sigma = (p * (1.0 - p) / queries as f64).sqrt();
    assert!((r.rank1() - p).abs() <= 3.0 * sigma, "rank-1 {} vs {p} ± {}", r.rank1(), 3.0 * sigma);
}

#[test]
fn evaluation_errors() {
    let g = vec![LabeledEmbedding {
        vector: vec![0.0, 1.0],
        person_id: 1,
        camera_id: 1,
    }];
    let index = GalleryIndex::new(&g).unwrap();
    assert!(evaluate(&[], &index, &EvalOptions::default()).is_err());
    let bad_dim = LabeledEmbedding {
        vector: vec![0.0],
        person_id: 2,
        camera_id: 2,
    };
    assert!(matches!(evaluate(&[bad_dim], &index, &EvalOptions::default()), Err(Error::Dimension(_))));
    let nan = LabeledEmbedding {
        vector: vec![f32::NAN, 0.0],
        ..g[0].clone()
    };
    assert!(GalleryIndex::new(&[nan]).is_err());
    assert!(evaluate(&g, &index, &opts(0, true)).is_err());
}
