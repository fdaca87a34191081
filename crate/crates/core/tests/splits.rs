use std::collections::BTreeSet;

use proptest::prelude::*;

use snmpnet::data::{build_split, training_indices, validation_sets, Dataset, Protocol, Sample, SplitRequest};

fn grid(classes: usize, domains: usize) -> Dataset {
    let samples = (0..classes * domains)
        .map(|i| Sample { id: i, input: vec![0.0], class_id: i % classes, domain_id: i / classes })
        .collect();
    Dataset::new(samples, classes, domains, 1)
}

fn protocol() -> impl Strategy<Value = Protocol> {
    prop_oneof![Just(Protocol::UcCdr), Just(Protocol::UdCdr), Just(Protocol::Ucdr)]
}

proptest! {
    #[test]
    fn training_never_sees_held_out_data(classes in 8usize..40, domains in 3usize..6, p in protocol(), seed in any::<u64>()) {
        let held = p.needs_held_out_domain().then_some(domains - 1);
        let mut req = SplitRequest::new(p, held);
        req.seed = seed;
        let split = build_split(classes, domains, &req).unwrap();
        let ds = grid(classes, domains);
        let seen: BTreeSet<_> = split.seen_classes.iter().collect();
        for i in training_indices(&ds, &split) {
            let s = &ds.samples[i];
            prop_assert!(seen.contains(&s.class_id));
            prop_assert!(Some(s.domain_id) != split.held_out_domain);
        }
        if !split.val_classes.is_empty() {
            let val = validation_sets(&ds, &split).unwrap();
            for i in val.queries.iter().chain(&val.search) {
                prop_assert!(split.val_classes.contains(&ds.samples[*i].class_id));
                prop_assert!(Some(ds.samples[*i].domain_id) != split.held_out_domain);
            }
        }
    }

    #[test]
    fn different_seeds_keep_the_counts(classes in 8usize..40, s1 in any::<u64>(), s2 in any::<u64>()) {
        let mut a = SplitRequest::new(Protocol::Ucdr, Some(1));
        a.seed = s1;
        let mut b = a.clone();
        b.seed = s2;
        let x = build_split(classes, 3, &a).unwrap();
        let y = build_split(classes, 3, &b).unwrap();
        prop_assert_eq!(x.seen_classes.len(), y.seen_classes.len());
        prop_assert_eq!(x.val_classes.len(), y.val_classes.len());
        prop_assert_eq!(x.unseen_classes.len(), y.unseen_classes.len());
    }
}
