//! Finite-difference checks of the training loss on small random instances.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{grad_check, GradCheckReport, GradResult, ParamStore, Tape};
use crate::data::{ClassAnchors, Sample, SemanticTable};
use crate::losses::{combined_loss, LossWeights, SampleOutputs};
use crate::mixup::{make_mixup_batch, MixupSample};
use crate::model::{ModelDims, SnMpModel};
use crate::{Error, Result};

/// Finite-difference step used by the suite.
pub const STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Which scalar the check differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossPart {
    Combined,
    CeMix,
    Mp,
    Sn,
}

impl LossPart {
    pub const ALL: [LossPart; 4] = [LossPart::Combined, LossPart::CeMix, LossPart::Mp, LossPart::Sn];
}

impl fmt::Display for LossPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossPart::Combined => "combined",
            LossPart::CeMix => "ce",
            LossPart::Mp => "mp",
            LossPart::Sn => "sn",
        })
    }
}

impl FromStr for LossPart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossPart::ALL
            .into_iter()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown loss {s:?} (expected combined, ce, mp or sn)")))
    }
}

/// A deliberately wrong backward pass, for checking that the suite notices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Reverses the sign of the neighbourhood term's gradient contribution.
    SnSignFlip,
}

/// Size limits for random instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceLimits {
    pub max_classes: usize,
    pub max_input_dim: usize,
    pub max_latent_dim: usize,
}

impl Default for InstanceLimits {
    fn default() -> Self {
        Self {
            max_classes: 8,
            max_input_dim: 16,
            max_latent_dim: 8,
        }
    }
}

/// A model, a mixed batch and loss weights drawn from one seed.
#[derive(Debug, Clone)]
pub struct Instance {
    pub model: SnMpModel,
    pub batch: Vec<MixupSample>,
    pub anchors: ClassAnchors,
    pub weights: LossWeights,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_instance(seed: u64, limits: InstanceLimits) -> Result<Instance> {
    if limits.max_classes < 2 || limits.max_input_dim < 2 || limits.max_latent_dim < 2 {
        return Err(Error::InvalidArgument("instance limits must each be at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_classes = rng.random_range(2..=limits.max_classes);
    let input_dim = rng.random_range(2..=limits.max_input_dim);
    let latent_dim = rng.random_range(2..=limits.max_latent_dim);
    let widths = vec![rng.random_range(3..=10)];
    let dims = ModelDims {
        input_dim,
        widths,
        num_classes,
        latent_dim,
    };
    let mut model = SnMpModel::init(dims, rng.random())?;
    // Non-zero biases so no coordinate is identically zero by construction.
    for v in model.params_mut().flat_mut() {
        *v += 0.1 * normal(&mut rng);
    }
    let sem = SemanticTable::normalized(
        (0..num_classes)
            .map(|_| (0..latent_dim).map(|_| normal(&mut rng)).collect())
            .collect(),
    )?;
    let anchors = sem.anchors(&(0..num_classes).collect::<Vec<_>>())?;
    let batch_size = rng.random_range(3..=6);
    let samples: Vec<Sample> = (0..batch_size)
        .map(|i| Sample {
            id: i,
            input: (0..input_dim).map(|_| normal(&mut rng)).collect(),
            class_id: rng.random_range(0..num_classes),
            domain_id: i % 2,
        })
        .collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    let batch = make_mixup_batch(&refs, &anchors, 2.0, 0.5, &mut rng)?;
    let weights = LossWeights {
        kappa: rng.random_range(0.0..3.0),
        gamma1: rng.random_range(0.5..1.5),
        gamma2: rng.random_range(0.5..1.5),
    };
    Ok(Instance {
        model,
        batch,
        anchors,
        weights,
    })
}

impl Instance {
    /// Value and gradient of `part` at `params`.
    pub fn loss(&self, params: &ParamStore, part: LossPart, fault: Option<Fault>) -> Result<GradResult> {
        let mut tape = Tape::new(params);
        let outputs = self
            .batch
            .iter()
            .map(|m| {
                let f = self.model.forward(&mut tape, &m.input)?;
                Ok(SampleOutputs {
                    logits: f.logits,
                    feature: f.feature,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = combined_loss(&mut tape, &self.batch, &outputs, &self.anchors, &self.weights)?;
        let out = match part {
            LossPart::Combined => loss.total,
            LossPart::CeMix => loss.ce_mix,
            LossPart::Mp => loss.mp,
            LossPart::Sn => loss.sn,
        };
        let mut result = tape.grad_result(out)?;
        if fault == Some(Fault::SnSignFlip) && matches!(part, LossPart::Combined | LossPart::Sn) {
            let scale = if part == LossPart::Combined { self.weights.gamma2 } else { 1.0 };
            let sn = tape.backward(loss.sn)?;
            for (g, s) in result.gradient.iter_mut().zip(sn) {
                *g -= 2.0 * scale * s;
            }
        }
        Ok(result)
    }

    pub fn check(&self, part: LossPart, fault: Option<Fault>) -> Result<GradCheckReport> {
        grad_check(|p| self.loss(p, part, fault), self.model.params(), STEP)
    }
}
