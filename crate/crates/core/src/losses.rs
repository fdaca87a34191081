//! Loss terms, built on the autodiff tape.
//!
//! Per-sample terms are exposed so the trainer can evaluate samples
//! independently; [`combined_loss`] averages each term over a batch and
//! weights them as `L = L_ce_mix + γ1·L_mp + γ2·L_sn`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tape, Var};
use crate::data::ClassAnchors;
use crate::mixup::{make_soft_label, MixupSample};
use crate::{Error, Result};

/// Distances from one point to every training-class anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceProfile(pub Vec<f64>);

pub fn distance_profile(point: &[f64], anchors: &ClassAnchors) -> Result<DistanceProfile> {
    if point.len() != anchors.dim() {
        return Err(Error::Shape(format!(
            "point has dimension {}, anchors have {}",
            point.len(),
            anchors.dim()
        )));
    }
    Ok(DistanceProfile(
        anchors.vectors().iter().map(|a| kernels::euclidean(point, a)).collect(),
    ))
}

/// Per-class penalty weights, strict near the anchor and relaxed far from it.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(pub Vec<f64>);

/// `w_j = exp(−κ · D(anchor, a_j) / max_k D(anchor, a_k))`.
pub fn weight_vector(anchor: &[f64], anchors: &ClassAnchors, kappa: f64) -> Result<WeightVector> {
    if !(kappa.is_finite() && kappa >= 0.0) {
        return Err(Error::InvalidArgument(format!("kappa must be non-negative, got {kappa}")));
    }
    if anchors.len() < 2 {
        return Err(Error::InvalidArgument("weight vector needs at least 2 classes".into()));
    }
    let DistanceProfile(d) = distance_profile(anchor, anchors)?;
    let max = d.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(Error::InvalidArgument(
            "all semantic vectors coincide with the anchor; distance normalizer is zero".into(),
        ));
    }
    Ok(WeightVector(d.iter().map(|dj| (-kappa * dj / max).exp()).collect()))
}

/// Weighted squared mismatch between the feature's distance profile and the
/// profile of its (mixed) semantic vector, for one sample.
pub fn semantic_neighbourhood_term(
    tape: &mut Tape<'_>,
    feature: Var,
    mixed_semantics: &[f64],
    anchors: &ClassAnchors,
    kappa: f64,
) -> Result<Var> {
    if tape.value(feature).len() != anchors.dim() {
        return Err(Error::Shape(format!(
            "feature has dimension {}, semantics have {}",
            tape.value(feature).len(),
            anchors.dim()
        )));
    }
    let WeightVector(weights) = weight_vector(mixed_semantics, anchors, kappa)?;
    let DistanceProfile(target) = distance_profile(mixed_semantics, anchors)?;
    let distances = anchors
        .vectors()
        .iter()
        .map(|a| {
            let a = tape.constant(a.clone());
            tape.distance(feature, a)
        })
        .collect::<Result<Vec<_>>>()?;
    let profile = tape.stack(&distances)?;
    let neg_target: Vec<f64> = target.iter().map(|t| -t).collect();
    let diff = tape.add_const(profile, &neg_target)?;
    let sq = tape.square(diff);
    tape.dot_const(sq, &weights)
}

/// Sum of [`semantic_neighbourhood_term`] over `(feature, mixed semantics)` pairs.
pub fn semantic_neighbourhood_loss(
    tape: &mut Tape<'_>,
    items: &[(Var, &[f64])],
    anchors: &ClassAnchors,
    kappa: f64,
) -> Result<Var> {
    let terms = items
        .iter()
        .map(|(f, a)| semantic_neighbourhood_term(tape, *f, a, anchors, kappa))
        .collect::<Result<Vec<_>>>()?;
    tape.sum(&terms)
}

/// `−Σ_t l_t · log p_t` for a probability node `p`.
fn soft_cross_entropy(tape: &mut Tape<'_>, probs: Var, target: &[f64]) -> Result<Var> {
    let log_p = tape.log(probs);
    let neg: Vec<f64> = target.iter().map(|t| -t).collect();
    tape.dot_const(log_p, &neg)
}

/// Soft cross-entropy of the mixture-prediction logits against the soft label.
pub fn mixture_prediction_term(tape: &mut Tape<'_>, logits: Var, soft_label: &[f64]) -> Result<Var> {
    if tape.value(logits).len() != soft_label.len() {
        return Err(Error::Shape(format!(
            "{} logits for a {}-class label",
            tape.value(logits).len(),
            soft_label.len()
        )));
    }
    if tape.value(logits).iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mixture-prediction logits".into()));
    }
    let probs = tape.softmax(logits)?;
    soft_cross_entropy(tape, probs, soft_label)
}

/// Softmax over cosine similarities between the feature and each anchor.
pub fn semantic_logits(tape: &mut Tape<'_>, feature: Var, anchors: &ClassAnchors) -> Result<Var> {
    if tape.value(feature).iter().all(|v| *v == 0.0) {
        return Err(Error::InvalidArgument("zero-norm feature".into()));
    }
    let sims = anchors
        .vectors()
        .iter()
        .map(|a| {
            let a = tape.constant(a.clone());
            tape.cosine(feature, a)
        })
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.stack(&sims)?;
    tape.softmax(stacked)
}

/// `α·CE(y_c, s) + (1−α)·CE(β·y_p + (1−β)·y_r, s)`.
pub fn mixup_classification_term(
    tape: &mut Tape<'_>,
    probs: Var,
    alpha: f64,
    beta: bool,
    classes: (usize, usize, usize),
) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let (c, p, r) = classes;
    let target = make_soft_label(c, p, r, alpha, beta, tape.value(probs).len())?;
    soft_cross_entropy(tape, probs, &target)
}

/// Weights of the three terms plus the neighbourhood sharpness κ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub kappa: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

/// Network outputs for one mixed sample.
#[derive(Debug, Clone, Copy)]
pub struct SampleOutputs {
    pub logits: Var,
    pub feature: Var,
}

/// The three per-sample terms, unweighted.
#[derive(Debug, Clone, Copy)]
pub struct SampleTerms {
    pub ce_mix: Var,
    pub mp: Var,
    pub sn: Var,
}

pub fn sample_terms(
    tape: &mut Tape<'_>,
    sample: &MixupSample,
    outputs: SampleOutputs,
    anchors: &ClassAnchors,
    kappa: f64,
) -> Result<SampleTerms> {
    let probs = semantic_logits(tape, outputs.feature, anchors)?;
    let partner = sample.partner.class();
    let ce_mix = mixup_classification_term(
        tape,
        probs,
        sample.alpha,
        sample.beta(),
        (sample.anchor_class, partner, partner),
    )?;
    let mp = mixture_prediction_term(tape, outputs.logits, &sample.soft_label)?;
    let sn = semantic_neighbourhood_term(tape, outputs.feature, &sample.mixed_semantics, anchors, kappa)?;
    Ok(SampleTerms { ce_mix, mp, sn })
}

/// `ce_mix + γ1·mp + γ2·sn` for already-built terms.
pub fn weighted_total(tape: &mut Tape<'_>, terms: SampleTerms, weights: &LossWeights) -> Result<Var> {
    let mp = tape.scale(terms.mp, weights.gamma1);
    let sn = tape.scale(terms.sn, weights.gamma2);
    tape.sum(&[terms.ce_mix, mp, sn])
}

/// Batch-mean terms and their weighted total.
#[derive(Debug, Clone, Copy)]
pub struct CombinedLoss {
    pub total: Var,
    pub ce_mix: Var,
    pub mp: Var,
    pub sn: Var,
}

pub fn combined_loss(
    tape: &mut Tape<'_>,
    batch: &[MixupSample],
    outputs: &[SampleOutputs],
    anchors: &ClassAnchors,
    weights: &LossWeights,
) -> Result<CombinedLoss> {
    if batch.is_empty() || batch.len() != outputs.len() {
        return Err(Error::Shape(format!(
            "{} mixed samples for {} network outputs",
            batch.len(),
            outputs.len()
        )));
    }
    let terms = batch
        .iter()
        .zip(outputs)
        .map(|(s, o)| sample_terms(tape, s, *o, anchors, weights.kappa))
        .collect::<Result<Vec<_>>>()?;
    let inv = 1.0 / batch.len() as f64;
    let mean = |pick: fn(&SampleTerms) -> Var, tape: &mut Tape<'_>| -> Result<Var> {
        let vars: Vec<Var> = terms.iter().map(pick).collect();
        let s = tape.sum(&vars)?;
        Ok(tape.scale(s, inv))
    };
    let ce_mix = mean(|t| t.ce_mix, tape)?;
    let mp = mean(|t| t.mp, tape)?;
    let sn = mean(|t| t.sn, tape)?;
    let total = weighted_total(tape, SampleTerms { ce_mix, mp, sn }, weights)?;
    Ok(CombinedLoss { total, ce_mix, mp, sn })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;

    fn anchors(vectors: Vec<Vec<f64>>) -> ClassAnchors {
        ClassAnchors::new((0..vectors.len()).collect(), vectors).unwrap()
    }

    #[test]
    fn weight_vector_hand_values() {
        let a = anchors(vec![vec![0.0, 0.0], vec![3.0, 0.0], vec![4.0, 0.0]]);
        let WeightVector(w) = weight_vector(&[0.0, 0.0], &a, 2.0).unwrap();
        assert_eq!(w[0], 1.0);
        assert!((w[1] - 0.223_130_160_148_429_8).abs() < 1e-12);
        assert!((w[2] - 0.135_335_283_236_612_7).abs() < 1e-12);
        let WeightVector(w) = weight_vector(&[0.0, 0.0], &a, 0.0).unwrap();
        assert_eq!(w, vec![1.0; 3]);
    }

    #[test]
    fn weight_vector_errors() {
        let same = anchors(vec![vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert!(weight_vector(&[1.0, 0.0], &same, 1.0).is_err());
        let one = anchors(vec![vec![1.0, 0.0]]);
        assert!(weight_vector(&[1.0, 0.0], &one, 1.0).is_err());
        let two = anchors(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(weight_vector(&[1.0, 0.0], &two, -1.0).is_err());
    }

    fn sn_value(f: &[f64], a: &[f64], anchors: &ClassAnchors, kappa: f64) -> f64 {
        let p = ParamStore::new();
        let mut t = Tape::new(&p);
        let fv = t.constant(f.to_vec());
        let v = semantic_neighbourhood_loss(&mut t, &[(fv, a)], anchors, kappa).unwrap();
        t.scalar(v)
    }

    #[test]
    fn semantic_neighbourhood_hand_values() {
        let a = anchors(vec![vec![0.0, 0.0], vec![2.0, 0.0]]);
        assert_eq!(sn_value(&[1.0, 0.0], &[0.0, 0.0], &a, 0.0), 2.0);
        assert!((sn_value(&[1.0, 0.0], &[0.0, 0.0], &a, 1.0) - 1.367_879_441_171_442_2).abs() < 1e-12);
        assert_eq!(sn_value(&[2.0, 0.0], &[2.0, 0.0], &a, 1.0), 0.0);
    }

    #[test]
    fn semantic_neighbourhood_dimension_mismatch() {
        let a = anchors(vec![vec![0.0, 0.0], vec![2.0, 0.0]]);
        let p = ParamStore::new();
        let mut t = Tape::new(&p);
        let f = t.constant(vec![1.0, 0.0, 0.0]);
        assert!(semantic_neighbourhood_term(&mut t, f, &[0.0, 0.0], &a, 1.0).is_err());
    }

    #[test]
    fn mixture_prediction_uniform_logits() {
        let p = ParamStore::new();
        let mut t = Tape::new(&p);
        let z = t.constant(vec![0.3; 4]);
        let l = [0.1, 0.2, 0.3, 0.4];
        let v = mixture_prediction_term(&mut t, z, &l).unwrap();
        assert!((t.scalar(v) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn semantic_logits_orthogonal_anchors() {
        let a = anchors(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let p = ParamStore::new();
        let mut t = Tape::new(&p);
        let f = t.constant(vec![1.0, 0.0]);
        let s = semantic_logits(&mut t, f, &a).unwrap();
        let e = std::f64::consts::E;
        assert!((t.value(s)[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((t.value(s)[1] - 1.0 / (e + 1.0)).abs() < 1e-12);

        let f = t.constant(vec![1.0, 1.0]);
        let s = semantic_logits(&mut t, f, &a).unwrap();
        assert!((t.value(s)[0] - 0.5).abs() < 1e-15);

        let f = t.constant(vec![0.0, 0.0]);
        assert!(semantic_logits(&mut t, f, &a).is_err());
    }

    #[test]
    fn mixup_classification_half_half() {
        let p = ParamStore::new();
        let mut t = Tape::new(&p);
        let s = t.constant(vec![0.5, 0.5]);
        let v = mixup_classification_term(&mut t, s, 0.5, true, (0, 1, 1)).unwrap();
        assert!((t.scalar(v) - 2f64.ln()).abs() < 1e-12);
        let v = mixup_classification_term(&mut t, s, 1.0, false, (0, 1, 1)).unwrap();
        assert!((t.scalar(v) - 2f64.ln()).abs() < 1e-12);
        assert!(mixup_classification_term(&mut t, s, 0.5, true, (0, 2, 1)).is_err());
    }
}
