//! Mixed-sample construction for training.
//!
//! Each anchor is blended with one partner: a same-domain sample when
//! β = 1, a sample from another domain when β = 0. The mixing coefficient α
//! is shared by the input, the soft label and the mixed semantic vector.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::data::{ClassAnchors, DomainId, Sample};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partner {
    /// Same-domain partner (β = 1). `index` is the position in the batch.
    Intra { index: usize, class: usize },
    /// Other-domain partner (β = 0).
    Cross {
        index: usize,
        class: usize,
        domain: DomainId,
    },
}

impl Partner {
    pub fn index(&self) -> usize {
        match *self {
            Partner::Intra { index, .. } | Partner::Cross { index, .. } => index,
        }
    }

    pub fn class(&self) -> usize {
        match *self {
            Partner::Intra { class, .. } | Partner::Cross { class, .. } => class,
        }
    }

    pub fn beta(&self) -> bool {
        matches!(self, Partner::Intra { .. })
    }
}

/// One element of the mixed training set. Class indices are local to the
/// training-class anchors, not dataset class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct MixupSample {
    pub input: Vec<f64>,
    pub alpha: f64,
    /// Position of the anchor in its batch.
    pub anchor: usize,
    pub anchor_class: usize,
    pub anchor_domain: DomainId,
    pub partner: Partner,
    pub soft_label: Vec<f64>,
    pub mixed_semantics: Vec<f64>,
}

impl MixupSample {
    pub fn beta(&self) -> bool {
        self.partner.beta()
    }
}

/// Draws α ~ Beta(λ, λ) and β ~ Bernoulli(γ_mix).
pub fn sample_coefficients<R: Rng + ?Sized>(lambda: f64, gamma_mix: f64, rng: &mut R) -> Result<(f64, bool)> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("Beta parameter must be positive, got {lambda}")));
    }
    if !(0.0..=1.0).contains(&gamma_mix) {
        return Err(Error::InvalidArgument(format!(
            "Bernoulli parameter must lie in [0, 1], got {gamma_mix}"
        )));
    }
    let beta_dist = Beta::new(lambda, lambda).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let alpha = beta_dist.sample(rng).clamp(0.0, 1.0);
    let beta = rng.random_bool(gamma_mix);
    Ok((alpha, beta))
}

/// `α·anchor + (1−α)·[β·intra + (1−β)·cross]`.
pub fn mix_inputs(anchor: &[f64], intra: &[f64], cross: &[f64], alpha: f64, beta: bool) -> Result<Vec<f64>> {
    if anchor.len() != intra.len() || anchor.len() != cross.len() {
        return Err(Error::Shape(format!(
            "mixup components have lengths {}, {}, {}",
            anchor.len(),
            intra.len(),
            cross.len()
        )));
    }
    let b = if beta { 1.0 } else { 0.0 };
    Ok(anchor
        .iter()
        .zip(intra)
        .zip(cross)
        .map(|((a, i), c)| alpha * a + (1.0 - alpha) * (b * i + (1.0 - b) * c))
        .collect())
}

/// Semantic counterpart of [`mix_inputs`], with the same coefficients.
pub fn mix_semantics(a_c: &[f64], a_p: &[f64], a_r: &[f64], alpha: f64, beta: bool) -> Result<Vec<f64>> {
    mix_inputs(a_c, a_p, a_r, alpha, beta)
}

/// Soft label with α at `c` and 1 − α at `p` (β = 1) or `r` (β = 0).
/// Coinciding indices accumulate.
pub fn make_soft_label(c: usize, p: usize, r: usize, alpha: f64, beta: bool, num_classes: usize) -> Result<Vec<f64>> {
    if let Some(bad) = [c, p, r].into_iter().find(|&k| k >= num_classes) {
        return Err(Error::InvalidArgument(format!(
            "class index {bad} out of range for {num_classes} classes"
        )));
    }
    let mut label = vec![0.0; num_classes];
    label[c] += alpha;
    label[if beta { p } else { r }] += 1.0 - alpha;
    Ok(label)
}

/// Builds one mixed sample per anchor in `batch`.
///
/// The intra partner is a random same-domain sample, excluding the anchor
/// unless it is alone in its domain. The cross partner is a random sample
/// from any other domain. When β = 0 is drawn but the batch has no other
/// domain, the sample falls back to β = 1 with a warning.
pub fn make_mixup_batch<R: Rng + ?Sized>(
    batch: &[&Sample],
    anchors: &ClassAnchors,
    lambda: f64,
    gamma_mix: f64,
    rng: &mut R,
) -> Result<Vec<MixupSample>> {
    if batch.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "mixup needs at least 2 samples per batch, got {}",
            batch.len()
        )));
    }
    let locals = local_classes(batch, anchors)?;
    let mut out = Vec::with_capacity(batch.len());
    for (i, anchor) in batch.iter().enumerate() {
        let (alpha, mut beta) = sample_coefficients(lambda, gamma_mix, rng)?;
        if !beta {
            let cross: Vec<usize> = (0..batch.len())
                .filter(|&j| batch[j].domain_id != anchor.domain_id)
                .collect();
            if cross.is_empty() {
                log::warn!(
                    "batch has no sample outside domain {}; using an intra-domain partner",
                    anchor.domain_id
                );
                beta = true;
            } else {
                let j = cross[rng.random_range(0..cross.len())];
                let partner = Partner::Cross {
                    index: j,
                    class: locals[j],
                    domain: batch[j].domain_id,
                };
                out.push(assemble(batch, anchors, &locals, i, partner, alpha)?);
                continue;
            }
        }
        debug_assert!(beta);
        let same: Vec<usize> = (0..batch.len())
            .filter(|&j| j != i && batch[j].domain_id == anchor.domain_id)
            .collect();
        let j = if same.is_empty() {
            i
        } else {
            same[rng.random_range(0..same.len())]
        };
        let partner = Partner::Intra {
            index: j,
            class: locals[j],
        };
        out.push(assemble(batch, anchors, &locals, i, partner, alpha)?);
    }
    Ok(out)
}

/// Unmixed samples in the same representation: α = 1 and the anchor as its
/// own intra partner, so the soft label is one-hot.
pub fn pure_batch(batch: &[&Sample], anchors: &ClassAnchors) -> Result<Vec<MixupSample>> {
    let locals = local_classes(batch, anchors)?;
    (0..batch.len())
        .map(|i| {
            let partner = Partner::Intra {
                index: i,
                class: locals[i],
            };
            assemble(batch, anchors, &locals, i, partner, 1.0)
        })
        .collect()
}

fn local_classes(batch: &[&Sample], anchors: &ClassAnchors) -> Result<Vec<usize>> {
    batch
        .iter()
        .map(|s| {
            anchors.local_index(s.class_id).ok_or_else(|| {
                Error::InvalidArgument(format!("class {} is not a training class", s.class_id))
            })
        })
        .collect()
}

fn assemble(
    batch: &[&Sample],
    anchors: &ClassAnchors,
    locals: &[usize],
    i: usize,
    partner: Partner,
    alpha: f64,
) -> Result<MixupSample> {
    let beta = partner.beta();
    let (c, j) = (locals[i], partner.index());
    let x_anchor = &batch[i].input;
    let x_partner = &batch[j].input;
    let a_anchor = anchors.vector(c);
    let a_partner = anchors.vector(partner.class());
    // The unused slot is multiplied by zero; feed it the partner as well.
    let input = mix_inputs(x_anchor, x_partner, x_partner, alpha, beta)?;
    let mixed_semantics = mix_semantics(a_anchor, a_partner, a_partner, alpha, beta)?;
    let soft_label = make_soft_label(c, partner.class(), partner.class(), alpha, beta, anchors.len())?;
    Ok(MixupSample {
        input,
        alpha,
        anchor: i,
        anchor_class: c,
        anchor_domain: batch[i].domain_id,
        partner,
        soft_label,
        mixed_semantics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(id: usize, class_id: usize, domain_id: usize) -> Sample {
        Sample {
            id,
            input: vec![id as f64, 1.0 - id as f64, 0.5 * id as f64],
            class_id,
            domain_id,
        }
    }

    fn one_hot_anchors(n: usize) -> ClassAnchors {
        let vectors = (0..n)
            .map(|c| (0..n).map(|k| if k == c { 1.0 } else { 0.0 }).collect())
            .collect();
        ClassAnchors::new((0..n).collect(), vectors).unwrap()
    }

    #[test]
    fn uniform_alpha_for_lambda_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| sample_coefficients(1.0, 0.5, &mut rng).unwrap().0)
            .sum::<f64>()
            / n as f64;
        assert!((0.49..=0.51).contains(&mean), "mean {mean}");
    }

    #[test]
    fn degenerate_bernoulli() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert!(sample_coefficients(2.0, 1.0, &mut rng).unwrap().1);
            assert!(!sample_coefficients(2.0, 0.0, &mut rng).unwrap().1);
        }
        assert!(sample_coefficients(0.0, 0.5, &mut rng).is_err());
        assert!(sample_coefficients(1.0, 1.5, &mut rng).is_err());
    }

    #[test]
    fn mix_inputs_cases() {
        let a = [2.0, 0.0];
        let p = [0.0, 4.0];
        let z = [9.0, 9.0];
        assert_eq!(mix_inputs(&a, &p, &z, 1.0, true).unwrap(), a.to_vec());
        assert_eq!(mix_inputs(&a, &p, &z, 0.5, true).unwrap(), vec![1.0, 2.0]);
        assert_eq!(mix_inputs(&a, &z, &p, 0.5, false).unwrap(), vec![1.0, 2.0]);
        assert!(mix_inputs(&a, &[1.0], &z, 0.5, true).is_err());
    }

    #[test]
    fn soft_label_cases() {
        let l = make_soft_label(2, 5, 0, 0.7, true, 10).unwrap();
        assert_eq!(l[2], 0.7);
        assert!((l[5] - 0.3).abs() < 1e-15);
        assert_eq!(l.iter().filter(|v| **v != 0.0).count(), 2);
        let l = make_soft_label(3, 1, 4, 1.0, false, 6).unwrap();
        assert_eq!(l, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let l = make_soft_label(1, 1, 0, 0.4, true, 3).unwrap();
        assert_eq!(l[1], 1.0);
        assert!(make_soft_label(0, 3, 1, 0.5, true, 3).is_err());
    }

    #[test]
    fn mix_semantics_cases() {
        assert_eq!(mix_semantics(&[1.0, 0.0], &[5.0, 5.0], &[0.0, 1.0], 1.0, false).unwrap(), vec![1.0, 0.0]);
        assert_eq!(
            mix_semantics(&[1.0, 0.0], &[5.0, 5.0], &[0.0, 1.0], 0.5, false).unwrap(),
            vec![0.5, 0.5]
        );
    }

    #[test]
    fn intra_only_batch() {
        let samples = [sample(0, 0, 0), sample(1, 1, 0), sample(2, 2, 1), sample(3, 0, 1)];
        let batch: Vec<&Sample> = samples.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mixed = make_mixup_batch(&batch, &one_hot_anchors(3), 2.0, 1.0, &mut rng).unwrap();
        assert_eq!(mixed.len(), 4);
        for m in &mixed {
            assert!(m.beta());
            let j = m.partner.index();
            assert_ne!(j, m.anchor);
            assert_eq!(batch[j].domain_id, m.anchor_domain);
        }
    }

    #[test]
    fn same_seed_same_batch() {
        let samples: Vec<Sample> = (0..6).map(|i| sample(i, i % 3, i % 2)).collect();
        let batch: Vec<&Sample> = samples.iter().collect();
        let anchors = one_hot_anchors(3);
        let a = make_mixup_batch(&batch, &anchors, 2.0, 0.5, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = make_mixup_batch(&batch, &anchors, 2.0, 0.5, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cross_partners_leave_the_anchor_domain() {
        let samples: Vec<Sample> = (0..8).map(|i| sample(i, i % 3, i % 2)).collect();
        let batch: Vec<&Sample> = samples.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mixed = make_mixup_batch(&batch, &one_hot_anchors(3), 2.0, 0.0, &mut rng).unwrap();
        for m in &mixed {
            match m.partner {
                Partner::Cross { index, domain, .. } => {
                    assert_ne!(domain, m.anchor_domain);
                    assert_eq!(batch[index].domain_id, domain);
                }
                Partner::Intra { .. } => panic!("expected a cross-domain partner"),
            }
        }
    }

    #[test]
    fn single_domain_batch_falls_back_to_intra() {
        let samples: Vec<Sample> = (0..4).map(|i| sample(i, i % 2, 0)).collect();
        let batch: Vec<&Sample> = samples.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mixed = make_mixup_batch(&batch, &one_hot_anchors(2), 2.0, 0.0, &mut rng).unwrap();
        assert!(mixed.iter().all(MixupSample::beta));
    }

    #[test]
    fn rejects_tiny_batches_and_unknown_classes() {
        let s = [sample(0, 0, 0), sample(1, 7, 1)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(make_mixup_batch(&[&s[0]], &one_hot_anchors(2), 2.0, 0.5, &mut rng).is_err());
        assert!(make_mixup_batch(&[&s[0], &s[1]], &one_hot_anchors(2), 2.0, 0.5, &mut rng).is_err());
    }

    #[test]
    fn pure_batch_is_one_hot() {
        let samples: Vec<Sample> = (0..3).map(|i| sample(i, i, 0)).collect();
        let batch: Vec<&Sample> = samples.iter().collect();
        let pure = pure_batch(&batch, &one_hot_anchors(3)).unwrap();
        for (i, m) in pure.iter().enumerate() {
            assert_eq!(m.input, samples[i].input);
            assert_eq!(m.soft_label, m.mixed_semantics);
            assert_eq!(m.soft_label[i], 1.0);
        }
    }
}
