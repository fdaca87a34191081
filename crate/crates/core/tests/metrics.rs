use proptest::prelude::*;

use snmpnet::retrieval::{average_precision_at_k, evaluate_embeddings, precision_at_k, rank, Embedded};

fn relevance() -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), 0..40)
}

proptest! {
    #[test]
    fn metrics_lie_in_unit_interval(rel in relevance(), k in 1usize..50, extra in 0usize..5) {
        let r = rel.iter().filter(|x| **x).count() + extra;
        let p = precision_at_k(&rel, k);
        let ap = average_precision_at_k(&rel, r, k);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!((0.0..=1.0).contains(&ap));
    }

    #[test]
    fn all_relevant_prefix_scores_one(len in 1usize..30, k in 1usize..30) {
        let rel = vec![true; len];
        prop_assert_eq!(precision_at_k(&rel, k), 1.0);
        prop_assert_eq!(average_precision_at_k(&rel, len, k), 1.0);
    }

    #[test]
    fn promoting_a_hit_never_lowers_ap(rel in prop::collection::vec(any::<bool>(), 2..20), k in 1usize..20) {
        let r = rel.iter().filter(|x| **x).count();
        // Swap the first (miss, hit) adjacent pair.
        if let Some(i) = (0..rel.len() - 1).find(|&i| !rel[i] && rel[i + 1]) {
            let mut better = rel.clone();
            better.swap(i, i + 1);
            prop_assert!(average_precision_at_k(&better, r, k) >= average_precision_at_k(&rel, r, k));
        }
    }

    #[test]
    fn ranking_is_sorted_and_complete(points in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..30),
                                      query in prop::collection::vec(-5.0f64..5.0, 3)) {
        let search: Vec<(usize, &[f64])> = points.iter().enumerate().map(|(i, p)| (i, p.as_slice())).collect();
        let ranked = rank(0, &query, &search).unwrap();
        let mut ids = ranked.ids.clone();
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..points.len()).collect::<Vec<_>>());
        for w in ranked.distances.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn ranking_ignores_uniform_scaling_and_translation(points in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 2..25),
                                                       query in prop::collection::vec(-5.0f64..5.0, 4),
                                                       shift in prop::collection::vec(-10.0f64..10.0, 4)) {
        let moved: Vec<Vec<f64>> = points.iter().map(|p| p.iter().zip(&shift).map(|(x, s)| x + s).collect()).collect();
        let q2: Vec<f64> = query.iter().zip(&shift).map(|(x, s)| x + s).collect();
        let a: Vec<(usize, &[f64])> = points.iter().enumerate().map(|(i, p)| (i, p.as_slice())).collect();
        let b: Vec<(usize, &[f64])> = moved.iter().enumerate().map(|(i, p)| (i, p.as_slice())).collect();
        let ra = rank(0, &query, &a).unwrap();
        let rb = rank(0, &q2, &b).unwrap();
        for (pos, (x, y)) in ra.ids.iter().zip(&rb.ids).enumerate() {
            prop_assert!(x == y || (ra.distances[pos] - rb.distances[pos]).abs() < 1e-9);
        }
    }
}

fn item(id: usize, class_id: usize, feature: Vec<f64>) -> Embedded {
    Embedded { id, class_id, domain_id: 0, feature }
}

#[test]
fn perfect_embedding_scores_one() {
    let queries: Vec<Embedded> = (0..4).map(|c| item(100 + c, c, vec![c as f64 * 10.0, 0.0])).collect();
    let search: Vec<Embedded> = (0..12).map(|i| item(i, i % 4, vec![(i % 4) as f64 * 10.0, 0.1 * i as f64])).collect();
    let report = evaluate_embeddings(&queries, &search, None).unwrap();
    assert_eq!(report.k, 12);
    assert_eq!(report.map_at_k, 1.0);
    assert!((report.prec_at_k - 0.25).abs() < 1e-12);
}

#[test]
fn evaluation_rejects_empty_sets() {
    let q = vec![item(0, 0, vec![0.0])];
    assert!(evaluate_embeddings(&q, &[], None).is_err());
    assert!(evaluate_embeddings(&[], &q, None).is_err());
}
