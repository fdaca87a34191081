use snmpnet::gradsuite::{random_instance, InstanceLimits, LossPart, DEFAULT_TOLERANCE};

#[test]
fn every_loss_matches_central_differences_on_twenty_seeds() {
    for seed in 0..20 {
        let inst = random_instance(seed, InstanceLimits::default()).unwrap();
        for part in LossPart::ALL {
            let report = inst.check(part, None).unwrap();
            assert!(
                report.passed(DEFAULT_TOLERANCE),
                "seed {seed} {part}: {report:?}"
            );
            assert!(report.checked > 0);
        }
    }
}
