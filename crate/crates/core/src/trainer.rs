//! The optimization loop: mixup batches, SGD with Nesterov momentum, an
//! exponential learning-rate decay and early stopping on validation mAP@k.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{training_indices, validation_sets, ClassAnchors, Dataset, RunConfig, SemanticTable, SplitSpec};
use crate::losses::{sample_terms, weighted_total, LossWeights, SampleOutputs};
use crate::mixup::{make_mixup_batch, pure_batch, MixupSample};
use crate::model::{ModelDims, SnMpModel};
use crate::retrieval::{embed_samples, evaluate_embeddings};
use crate::{Error, Result};

/// `lr_start · (lr_end / lr_start)^(min(epoch, D) / D)`.
pub fn lr_at(epoch: usize, lr_start: f64, lr_end: f64, decay_epochs: usize) -> Result<f64> {
    if !(lr_start > 0.0 && lr_end > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "learning rates must be positive, got {lr_start} and {lr_end}"
        )));
    }
    if decay_epochs == 0 {
        return Err(Error::InvalidArgument("decay_epochs must be at least 1".into()));
    }
    let t = epoch.min(decay_epochs) as f64 / decay_epochs as f64;
    Ok(lr_start * (lr_end / lr_start).powf(t))
}

/// One Nesterov step: `v ← μv − lr·g`, then `θ ← θ + μv − lr·g`.
/// Nothing is modified when the gradient has a non-finite entry.
pub fn sgd_nesterov_step(params: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, momentum: f64) -> Result<()> {
    if params.len() != grad.len() || velocity.len() != grad.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} velocity entries, {} gradient entries",
            params.len(),
            velocity.len(),
            grad.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i} is {}", grad[i])));
    }
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v - lr * g;
        *p += momentum * *v - lr * g;
    }
    Ok(())
}

/// Serializable position of the training RNG.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to resume a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: SnMpModel,
    pub velocity: Vec<f64>,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_map: f64,
    pub best_epoch: usize,
    /// Parameters at `best_epoch`; the initial parameters before any epoch.
    pub best_params: Vec<f64>,
    pub rng: RngState,
}

impl TrainState {
    pub fn new(model: SnMpModel, seed: u64) -> Self {
        let n = model.params().len();
        let best_params = model.params().flat().to_vec();
        Self {
            model,
            velocity: vec![0.0; n],
            epoch: 0,
            best_val_map: f64::NEG_INFINITY,
            best_epoch: 0,
            best_params,
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn best_model(&self) -> Result<SnMpModel> {
        let params = self.model.params().with_flat(&self.best_params)?;
        SnMpModel::from_params(self.model.dims().clone(), params)
    }

    pub fn check(&self) -> Result<()> {
        let n = self.model.params().len();
        if self.velocity.len() != n || self.best_params.len() != n {
            return Err(Error::Shape(format!(
                "velocity has {} entries and best parameters {}, model has {n}",
                self.velocity.len(),
                self.best_params.len()
            )));
        }
        if self.best_epoch > self.epoch {
            return Err(Error::InvalidArgument(format!(
                "best epoch {} is after current epoch {}",
                self.best_epoch, self.epoch
            )));
        }
        Ok(())
    }
}

/// Per-epoch means over all trained samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub ce_mix: f64,
    pub mp: f64,
    pub sn: f64,
    pub lr: f64,
    pub val_map: f64,
    /// Excluded from `train_log.csv` so the file is reproducible.
    #[serde(skip)]
    pub wall_seconds: f64,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,loss,ce_mix,mp,sn,lr,val_map";

pub fn write_train_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut out = String::from(TRAIN_LOG_HEADER);
    out.push('\n');
    for l in logs {
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            l.epoch, l.loss, l.ce_mix, l.mp, l.sn, l.lr, l.val_map
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Stops once `patience` epochs pass without a strict improvement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
        }
    }

    /// Records `value` for `epoch`; returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        if value > self.best {
            self.best = value;
            self.best_epoch = epoch;
            true
        } else {
            false
        }
    }

    pub fn should_stop(&self, epoch: usize) -> bool {
        epoch.saturating_sub(self.best_epoch) >= self.patience
    }
}

/// The ablation ladder, from the plain semantic-similarity CE on unmixed
/// samples up to the full objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Base,
    BaseSnUniform,
    BaseSn,
    BaseCeMix,
    BaseCeMixMp,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Base,
        Variant::BaseSnUniform,
        Variant::BaseSn,
        Variant::BaseCeMix,
        Variant::BaseCeMixMp,
        Variant::Full,
    ];

    pub fn uses_mixup(self) -> bool {
        matches!(self, Variant::BaseCeMix | Variant::BaseCeMixMp | Variant::Full)
    }

    pub fn loss_weights(self, config: &RunConfig) -> LossWeights {
        let (kappa, gamma1, gamma2) = match self {
            Variant::Base | Variant::BaseCeMix => (config.kappa, 0.0, 0.0),
            Variant::BaseSnUniform => (0.0, 0.0, config.gamma2),
            Variant::BaseSn => (config.kappa, 0.0, config.gamma2),
            Variant::BaseCeMixMp => (config.kappa, config.gamma1, 0.0),
            Variant::Full => (config.kappa, config.gamma1, config.gamma2),
        };
        LossWeights { kappa, gamma1, gamma2 }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::BaseSnUniform => "base+sn(kappa=0)",
            Variant::BaseSn => "base+sn",
            Variant::BaseCeMix => "base+cemix",
            Variant::BaseCeMixMp => "base+cemix+mp",
            Variant::Full => "full",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.label() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

/// Model dimensions implied by the data, split, semantics and config.
pub fn model_dims(ds: &Dataset, split: &SplitSpec, sem: &SemanticTable, config: &RunConfig) -> Result<ModelDims> {
    let latent_dim = config.latent_dim.unwrap_or(sem.dim);
    if latent_dim != sem.dim {
        return Err(Error::Config(format!(
            "latent_dim {latent_dim} differs from the semantic dimension {}",
            sem.dim
        )));
    }
    let dims = ModelDims {
        input_dim: ds.input_dim,
        widths: config.widths.clone(),
        num_classes: split.seen_classes.len(),
        latent_dim,
    };
    dims.validate()?;
    Ok(dims)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub logs: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn best_model(&self) -> Result<SnMpModel> {
        self.state.best_model()
    }
}

/// Trains the full objective from a fresh initialisation.
pub fn train(ds: &Dataset, split: &SplitSpec, sem: &SemanticTable, config: &RunConfig) -> Result<TrainOutcome> {
    train_variant(ds, split, sem, config, Variant::Full)
}

pub fn train_variant(
    ds: &Dataset,
    split: &SplitSpec,
    sem: &SemanticTable,
    config: &RunConfig,
    variant: Variant,
) -> Result<TrainOutcome> {
    let dims = model_dims(ds, split, sem, config)?;
    let model = SnMpModel::init(dims, config.seed)?;
    // A separate stream keeps data order independent of the init draws.
    let state = TrainState::new(model, config.seed ^ 0x005e_ed0f_da7a);
    resume(state, ds, split, sem, config, variant)
}

/// Continues `state` until early stopping or `config.max_epochs`.
pub fn resume(
    mut state: TrainState,
    ds: &Dataset,
    split: &SplitSpec,
    sem: &SemanticTable,
    config: &RunConfig,
    variant: Variant,
) -> Result<TrainOutcome> {
    config.validate()?;
    state.check()?;
    split.check(ds.num_classes, ds.num_domains)?;
    if *state.model.dims() != model_dims(ds, split, sem, config)? {
        return Err(Error::Shape("model dimensions do not match the data and config".into()));
    }
    let anchors = sem.anchors(&split.seen_classes)?;
    let train_idx = training_indices(ds, split);
    if train_idx.len() < 2 {
        return Err(Error::Empty(format!("training set has {} samples", train_idx.len())));
    }
    let val = validation_sets(ds, split)?;
    let weights = variant.loss_weights(config);

    let mut stopper = EarlyStopping {
        patience: config.patience,
        best: state.best_val_map,
        best_epoch: state.best_epoch,
    };
    let mut rng = state.rng.restore();
    let mut logs = Vec::new();

    while state.epoch < config.max_epochs && !(state.epoch > 0 && stopper.should_stop(state.epoch)) {
        let started = Instant::now();
        let epoch = state.epoch + 1;
        let lr = lr_at(state.epoch, config.lr_start, config.lr_end, config.decay_epochs)?;

        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut seen = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let samples: Vec<_> = chunk.iter().map(|&i| ds.sample(i)).collect();
            let batch = if variant.uses_mixup() {
                make_mixup_batch(&samples, &anchors, config.mix_lambda, config.gamma_mix, &mut rng)?
            } else {
                pure_batch(&samples, &anchors)?
            };
            let step = batch_gradient(&state.model, &batch, &anchors, &weights)?;
            if !step.terms.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("loss at epoch {epoch}, batch {b}")));
            }
            for (s, t) in sums.iter_mut().zip(step.terms) {
                *s += t;
            }
            seen += batch.len();
            sgd_nesterov_step(
                state.model.params_mut().flat_mut(),
                &mut state.velocity,
                &step.grad,
                lr,
                config.momentum,
            )
            .map_err(|e| Error::NonFinite(format!("epoch {epoch}, batch {b}: {e}")))?;
        }

        let val_map = validation_map(&state.model, ds, &val, config.val_k)?;
        state.epoch = epoch;
        if stopper.observe(epoch, val_map) {
            state.best_params = state.model.params().flat().to_vec();
        }
        state.best_val_map = stopper.best;
        state.best_epoch = stopper.best_epoch;

        let n = seen as f64;
        let log = EpochLog {
            epoch,
            loss: sums[0] / n,
            ce_mix: sums[1] / n,
            mp: sums[2] / n,
            sn: sums[3] / n,
            lr,
            val_map,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} val mAP {:.4} lr {:.3e} ({:.2}s)",
            log.loss,
            val_map,
            lr,
            log.wall_seconds
        );
        logs.push(log);
    }
    state.rng = RngState::capture(&rng);
    Ok(TrainOutcome { state, logs })
}

/// Summed loss terms `[total, ce_mix, mp, sn]` and the batch-mean gradient.
struct BatchStep {
    terms: [f64; 4],
    grad: Vec<f64>,
}

/// Per-sample forward and backward passes run in parallel; their results
/// are reduced in batch order so the sum is independent of scheduling.
fn batch_gradient(
    model: &SnMpModel,
    batch: &[MixupSample],
    anchors: &ClassAnchors,
    weights: &LossWeights,
) -> Result<BatchStep> {
    let per_sample = batch
        .par_iter()
        .map(|m| {
            let mut tape = Tape::new(model.params());
            let fwd = model.forward(&mut tape, &m.input)?;
            let outputs = SampleOutputs {
                logits: fwd.logits,
                feature: fwd.feature,
            };
            let terms = sample_terms(&mut tape, m, outputs, anchors, weights.kappa)?;
            let total = weighted_total(&mut tape, terms, weights)?;
            let grad = tape.backward(total)?;
            let values = [
                tape.scalar(total),
                tape.scalar(terms.ce_mix),
                tape.scalar(terms.mp),
                tape.scalar(terms.sn),
            ];
            Ok((values, grad))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut terms = [0.0; 4];
    let mut grad = vec![0.0; model.params().len()];
    for (values, g) in &per_sample {
        for (t, v) in terms.iter_mut().zip(values) {
            *t += v;
        }
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok(BatchStep { terms, grad })
}

fn validation_map(model: &SnMpModel, ds: &Dataset, val: &crate::data::QuerySearchSets, val_k: usize) -> Result<f64> {
    let queries = embed_samples(model, ds, &val.queries)?;
    let search = embed_samples(model, ds, &val.search)?;
    let k = val_k.min(search.len());
    Ok(evaluate_embeddings(&queries, &search, Some(k))?.map_at_k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_values() {
        assert_eq!(lr_at(0, 1e-3, 1e-6, 20).unwrap(), 1e-3);
        assert!((lr_at(20, 1e-3, 1e-6, 20).unwrap() - 1e-6).abs() < 1e-18);
        assert!((lr_at(35, 1e-3, 1e-6, 20).unwrap() - 1e-6).abs() < 1e-18);
        let mid = lr_at(10, 1e-3, 1e-6, 20).unwrap();
        assert!((mid - 3.16228e-5).abs() < 1e-9);
        assert!(lr_at(1, 0.0, 1e-6, 20).is_err());
        assert!(lr_at(1, 1e-3, 1e-6, 0).is_err());
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0, 0.0];
        sgd_nesterov_step(&mut p, &mut v, &[0.5, -1.0], 0.1, 0.0).unwrap();
        assert_eq!(p, vec![0.95, -1.9]);
    }

    #[test]
    fn zero_gradient_coasts_on_velocity() {
        let mut p = vec![1.0];
        let mut v = vec![0.5];
        sgd_nesterov_step(&mut p, &mut v, &[0.0], 0.1, 0.9).unwrap();
        assert!((v[0] - 0.45).abs() < 1e-15);
        assert!((p[0] - 1.405).abs() < 1e-15);
    }

    #[test]
    fn quadratic_two_steps() {
        let (mut p, mut v) = (vec![1.0], vec![0.0]);
        let g = [2.0 * p[0]];
        sgd_nesterov_step(&mut p, &mut v, &g, 0.1, 0.9).unwrap();
        assert!((p[0] - 0.62).abs() < 1e-12);
        let g = [2.0 * p[0]];
        sgd_nesterov_step(&mut p, &mut v, &g, 0.1, 0.9).unwrap();
        // v = 0.9·(−0.2) − 0.124 = −0.304; θ = 0.62 − 0.2736 − 0.124.
        assert!((p[0] - 0.2224).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_leaves_state_untouched() {
        let mut p = vec![1.0, 2.0];
        let mut v = vec![0.1, 0.1];
        assert!(sgd_nesterov_step(&mut p, &mut v, &[0.0, f64::NAN], 0.1, 0.9).is_err());
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(v, vec![0.1, 0.1]);
    }

    #[test]
    fn early_stopping_halts_after_patience() {
        let mut s = EarlyStopping::new(15);
        let curve = [0.1, 0.2, 0.3];
        let mut stopped_at = None;
        for epoch in 1..=100 {
            let value = curve.get(epoch - 1).copied().unwrap_or(0.25);
            s.observe(epoch, value);
            if s.should_stop(epoch) {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(s.best_epoch, 3);
        assert_eq!(stopped_at, Some(18));
    }

    #[test]
    fn variant_ladder() {
        let cfg = RunConfig::default();
        assert!(!Variant::Base.uses_mixup());
        let base = Variant::Base.loss_weights(&cfg);
        assert_eq!((base.gamma1, base.gamma2), (0.0, 0.0));
        assert_eq!(Variant::BaseSnUniform.loss_weights(&cfg).kappa, 0.0);
        assert_eq!(Variant::Full.loss_weights(&cfg), LossWeights { kappa: 2.0, gamma1: 1.0, gamma2: 1.0 });
        for v in Variant::ALL {
            assert_eq!(v.label().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn rng_state_round_trip() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let _: u64 = rng.random();
        let mut restored = RngState::capture(&rng).restore();
        assert_eq!(rng.random::<u64>(), restored.random::<u64>());
    }
}
