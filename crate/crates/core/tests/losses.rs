use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use snmpnet::autodiff::{ParamStore, Tape};
use snmpnet::data::{ClassAnchors, Sample, SemanticTable};
use snmpnet::losses::{mixture_prediction_term, semantic_neighbourhood_term, weight_vector};
use snmpnet::mixup::{make_mixup_batch, make_soft_label, mix_inputs, sample_coefficients};

fn table() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..8, 2usize..6).prop_flat_map(|(n, m)| {
        prop::collection::vec(prop::collection::vec(-1.0f64..1.0, m), n)
            .prop_filter("non-degenerate", |v| v.iter().all(|x| x.iter().map(|a| a * a).sum::<f64>() > 1e-2))
    })
}

fn anchors(vectors: Vec<Vec<f64>>) -> ClassAnchors {
    let n = vectors.len();
    SemanticTable::normalized(vectors).unwrap().anchors(&(0..n).collect::<Vec<_>>()).unwrap()
}

proptest! {
    #[test]
    fn weights_decay_with_distance(vectors in table(), kappa in 0.0f64..6.0, c in 0usize..8) {
        let a = anchors(vectors);
        let c = c % a.len();
        let anchor = a.vector(c).to_vec();
        prop_assume!(a.vectors().iter().any(|v| v != &anchor));
        let w = weight_vector(&anchor, &a, kappa).unwrap().0;
        let d: Vec<f64> = a.vectors().iter().map(|v| v.iter().zip(&anchor).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()).collect();
        for j in 0..w.len() {
            prop_assert!(w[j] > 0.0 && w[j] <= 1.0);
            prop_assert!(w[j] >= (-kappa).exp() - 1e-12);
            for k in 0..w.len() {
                if d[j] < d[k] {
                    prop_assert!(w[j] >= w[k]);
                }
            }
        }
    }

    #[test]
    fn neighbourhood_term_is_non_negative(vectors in table(), kappa in 0.0f64..4.0, seed in any::<u64>()) {
        let a = anchors(vectors);
        let m = a.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feature: Vec<f64> = (0..m).map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0)).collect();
        let target = a.vector(0).to_vec();
        prop_assume!(a.vectors().iter().any(|v| v != &target));
        let empty = ParamStore::new();
        let mut tape = Tape::new(&empty);
        let f = tape.constant(feature);
        let sn = semantic_neighbourhood_term(&mut tape, f, &target, &a, kappa).unwrap();
        prop_assert!(tape.scalar(sn) >= 0.0);
    }

    #[test]
    fn soft_cross_entropy_is_at_least_the_entropy(logits in prop::collection::vec(-4.0f64..4.0, 2..8), seed in any::<u64>()) {
        let n = logits.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (alpha, beta) = sample_coefficients(2.0, 0.5, &mut rng).unwrap();
        let c = rand::Rng::random_range(&mut rng, 0..n);
        let p = rand::Rng::random_range(&mut rng, 0..n);
        let r = rand::Rng::random_range(&mut rng, 0..n);
        let label = make_soft_label(c, p, r, alpha, beta, n).unwrap();
        prop_assert!((label.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let entropy: f64 = -label.iter().filter(|l| **l > 0.0).map(|l| l * l.ln()).sum::<f64>();
        let empty = ParamStore::new();
        let mut tape = Tape::new(&empty);
        let z = tape.constant(logits);
        let mp = mixture_prediction_term(&mut tape, z, &label).unwrap();
        prop_assert!(tape.scalar(mp) >= entropy - 1e-12);
    }

    #[test]
    fn mixed_inputs_stay_on_the_segment(a in prop::collection::vec(-3.0f64..3.0, 4),
                                        b in prop::collection::vec(-3.0f64..3.0, 4),
                                        alpha in 0.0f64..=1.0, beta in any::<bool>()) {
        let zeros = vec![0.0; 4];
        let (intra, cross) = if beta { (&b, &zeros) } else { (&zeros, &b) };
        let mixed = mix_inputs(&a, intra, cross, alpha, beta).unwrap();
        for i in 0..4 {
            let lo = a[i].min(b[i]) - 1e-12;
            let hi = a[i].max(b[i]) + 1e-12;
            prop_assert!(mixed[i] >= lo && mixed[i] <= hi);
        }
    }

    #[test]
    fn mixup_batches_are_well_formed(seed in any::<u64>(), size in 2usize..10, domains in 1usize..4) {
        let a = anchors(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.2]]);
        let samples: Vec<Sample> = (0..size)
            .map(|i| Sample { id: i, input: vec![i as f64, 1.0], class_id: i % 3, domain_id: i % domains })
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = make_mixup_batch(&refs, &a, 2.0, 0.5, &mut rng).unwrap();
        prop_assert_eq!(batch.len(), size);
        for (i, m) in batch.iter().enumerate() {
            prop_assert!((0.0..=1.0).contains(&m.alpha));
            prop_assert_eq!(m.anchor, i);
            prop_assert!((m.soft_label.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let partner = &samples[m.partner.index()];
            if m.beta() {
                prop_assert_eq!(partner.domain_id, samples[i].domain_id);
            } else {
                prop_assert_ne!(partner.domain_id, samples[i].domain_id);
            }
        }
    }
}
