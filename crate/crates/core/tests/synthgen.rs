use snmpnet::data::{validate_dataset, Dataset, Sample};
use snmpnet::synthgen::{generate, prototypes, GeneratorSpec};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn in_domain(ds: &Dataset, d: usize) -> Vec<&Sample> {
    ds.samples.iter().filter(|s| s.domain_id == d).collect()
}

/// 1-NN class accuracy of queries from `query` against samples of `search`,
/// excluding the query itself.
fn nn_accuracy(ds: &Dataset, query: usize, search: usize) -> f64 {
    let gallery = in_domain(ds, search);
    let queries = in_domain(ds, query);
    let hits = queries
        .iter()
        .filter(|q| {
            let best = gallery
                .iter()
                .filter(|g| g.id != q.id)
                .min_by(|a, b| sq_dist(&a.input, &q.input).total_cmp(&sq_dist(&b.input, &q.input)))
                .expect("gallery has other samples");
            best.class_id == q.class_id
        })
        .count();
    hits as f64 / queries.len() as f64
}

#[test]
fn default_spec_is_valid_and_deterministic() {
    let spec = GeneratorSpec::default();
    let (ds, sem) = generate(&spec).unwrap();
    assert_eq!(ds.samples.len(), 3000);
    assert!(validate_dataset(&ds, &sem).is_ok());
    assert_eq!(generate(&spec).unwrap(), (ds, sem));
}

#[test]
fn prototypes_separate_classes_without_shift() {
    let spec = GeneratorSpec {
        class_spread: 0.02,
        domain_shift_strength: 0.0,
        ..GeneratorSpec::default()
    };
    let (ds, sem) = generate(&spec).unwrap();
    let protos = prototypes(&spec, &sem).unwrap();
    for s in &ds.samples {
        let nearest = (0..protos.len())
            .min_by(|&a, &b| sq_dist(&s.input, &protos[a]).total_cmp(&sq_dist(&s.input, &protos[b])))
            .unwrap();
        assert_eq!(nearest, s.class_id, "sample {}", s.id);
    }
}

#[test]
fn default_shift_opens_a_domain_gap() {
    let spec = GeneratorSpec::default();
    let (ds, _) = generate(&spec).unwrap();
    let n = ds.num_domains;
    let within: f64 = (0..n).map(|d| nn_accuracy(&ds, d, d)).sum::<f64>() / n as f64;
    let mut cross = 0.0;
    for q in 0..n {
        for s in (0..n).filter(|&s| s != q) {
            cross += nn_accuracy(&ds, q, s);
        }
    }
    cross /= (n * (n - 1)) as f64;
    assert!(within - cross >= 0.20, "within {within:.3}, cross {cross:.3}");
    // Far above chance within a domain, so the classes are learnable.
    assert!(within > 3.0 / ds.num_classes as f64, "within {within:.3}");
}
