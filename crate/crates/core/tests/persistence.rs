use proptest::prelude::*;

use snmpnet::checkpoint::{decode, encode};
use snmpnet::data::{Dataset, Sample, SemanticTable};
use snmpnet::io::{export, import};
use snmpnet::model::{ModelDims, SnMpModel};
use snmpnet::trainer::TrainState;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e3f64..1e3,
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE),
        Just(1e-300),
        Just(f64::MAX),
    ]
}

fn dataset() -> impl Strategy<Value = Dataset> {
    (2usize..5, 1usize..4, 1usize..6).prop_flat_map(|(classes, domains, dim)| {
        prop::collection::vec(
            (prop::collection::vec(finite(), dim), 0..classes, 0..domains),
            1..12,
        )
        .prop_map(move |rows| {
            let samples = rows
                .into_iter()
                .enumerate()
                .map(|(id, (input, class_id, domain_id))| Sample { id, input, class_id, domain_id })
                .collect();
            Dataset::new(samples, classes, domains, dim)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn export_then_import_is_identity(ds in dataset(), m in 1usize..5, with_sem in any::<bool>()) {
        let sem = SemanticTable::normalized(
            (0..ds.num_classes).map(|c| (0..m).map(|i| (c * m + i) as f64 + 0.5).collect()).collect(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        export(&ds, with_sem.then_some(&sem), dir.path()).unwrap();
        let back = import(dir.path()).unwrap();
        prop_assert_eq!(back.dataset, ds);
        prop_assert_eq!(back.semantics, with_sem.then_some(sem));
    }

    #[test]
    fn checkpoint_encoding_round_trips(seed in any::<u64>(), epoch in 0usize..100, best in prop_oneof![Just(f64::NEG_INFINITY), 0.0f64..1.0],
                                       widths in prop::collection::vec(1usize..6, 0..3)) {
        let dims = ModelDims { input_dim: 3, widths, num_classes: 2, latent_dim: 2 };
        let mut state = TrainState::new(SnMpModel::init(dims, seed).unwrap(), seed.rotate_left(7));
        state.epoch = epoch;
        state.best_epoch = epoch / 2;
        state.best_val_map = best;
        state.velocity.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64).sin());
        let bytes = encode(&state).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(&back, &state);
        prop_assert_eq!(encode(&back).unwrap(), bytes.clone());
        // Any truncation is rejected rather than misread.
        let cut = (seed as usize) % bytes.len();
        prop_assert!(decode(&bytes[..cut]).is_err());
    }
}
