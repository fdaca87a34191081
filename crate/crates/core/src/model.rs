//! The embedding network: an MLP backbone followed by two linear heads that
//! both read the backbone output `g`.
//!
//! - mixture-prediction head: `g → logits` over the training classes
//! - semantic-neighbourhood head: `g → f`, the m-dimensional retrieval embedding

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{kernels, ParamStore, Tape, TensorId, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDims {
    pub input_dim: usize,
    /// Hidden widths of the backbone; each layer is affine followed by ReLU.
    pub widths: Vec<usize>,
    pub num_classes: usize,
    pub latent_dim: usize,
}

impl ModelDims {
    pub fn backbone_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(self.input_dim)
    }

    /// `(fan_in, fan_out)` of every affine layer in declaration order.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut layers = Vec::with_capacity(self.widths.len() + 2);
        let mut fan_in = self.input_dim;
        for &w in &self.widths {
            layers.push((fan_in, w));
            fan_in = w;
        }
        layers.push((fan_in, self.num_classes));
        layers.push((fan_in, self.latent_dim));
        layers
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(i, o)| (i + 1) * o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 || self.latent_dim == 0 || self.widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("all model dimensions must be at least 1: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    weight: TensorId,
    bias: TensorId,
}

/// Tape nodes produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub backbone: Var,
    pub logits: Var,
    pub feature: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnMpModel {
    dims: ModelDims,
    params: ParamStore,
}

impl SnMpModel {
    /// Uniform weights in ±1/√fan_in, zero biases, deterministic in `seed`.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, (fan_in, fan_out)) in layer_names(&dims).into_iter().zip(dims.layers()) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            params.add(format!("{name}.weight"), &[fan_out, fan_in], w)?;
            params.add(format!("{name}.bias"), &[fan_out], vec![0.0; fan_out])?;
        }
        Ok(Self { dims, params })
    }

    /// Wraps existing parameters, checking they match the layout of `dims`.
    pub fn from_params(dims: ModelDims, params: ParamStore) -> Result<Self> {
        dims.validate()?;
        let expected: Vec<(String, Vec<usize>)> = layer_names(&dims)
            .into_iter()
            .zip(dims.layers())
            .flat_map(|(name, (i, o))| [(format!("{name}.weight"), vec![o, i]), (format!("{name}.bias"), vec![o])])
            .collect();
        let actual: Vec<(String, Vec<usize>)> = params
            .specs()
            .iter()
            .map(|s| (s.name.clone(), s.shape.clone()))
            .collect();
        if expected != actual {
            return Err(Error::Shape("parameter layout does not match model dimensions".into()));
        }
        Ok(Self { dims, params })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn layers(&self) -> Vec<Layer> {
        // Tensors are added weight, bias per layer, in declaration order.
        (0..self.dims.widths.len() + 2)
            .map(|l| Layer {
                weight: self.params.id_at(2 * l),
                bias: self.params.id_at(2 * l + 1),
            })
            .collect()
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.dims.input_dim {
            return Err(Error::Shape(format!(
                "input has {len} entries, model expects {}",
                self.dims.input_dim
            )));
        }
        Ok(())
    }

    /// Records `g = backbone(x)`, `logits = mp(g)` and `f = sn(g)` on `tape`.
    /// The tape may hold any store with this model's layout.
    pub fn forward(&self, tape: &mut Tape<'_>, x: &[f64]) -> Result<Forward> {
        self.check_input(x.len())?;
        if tape.params().len() != self.params.len() {
            return Err(Error::Shape("tape parameters do not match the model layout".into()));
        }
        let layers = self.layers();
        let (backbone, heads) = layers.split_at(self.dims.widths.len());
        let mut h = tape.constant(x.to_vec());
        for layer in backbone {
            let w = tape.param(layer.weight);
            let b = tape.param(layer.bias);
            let z = tape.affine(h, w, b)?;
            h = tape.relu(z);
        }
        let head = |layer: &Layer, tape: &mut Tape<'_>| {
            let w = tape.param(layer.weight);
            let b = tape.param(layer.bias);
            tape.affine(h, w, b)
        };
        let logits = head(&heads[0], tape)?;
        let feature = head(&heads[1], tape)?;
        Ok(Forward {
            backbone: h,
            logits,
            feature,
        })
    }

    /// Inference-only embedding; bit-identical to [`Forward::feature`].
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        let layers = self.layers();
        let (backbone, heads) = layers.split_at(self.dims.widths.len());
        let mut h = x.to_vec();
        for layer in backbone {
            let z = kernels::affine(self.params.tensor(layer.weight), self.params.tensor(layer.bias), &h);
            h = kernels::relu(&z);
        }
        let sn = &heads[1];
        Ok(kernels::affine(self.params.tensor(sn.weight), self.params.tensor(sn.bias), &h))
    }

    /// Embeds every input; equal to calling [`SnMpModel::embed`] on each.
    pub fn embed_batch(&self, inputs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        inputs.par_iter().map(|x| self.embed(x)).collect()
    }
}

fn layer_names(dims: &ModelDims) -> Vec<String> {
    (0..dims.widths.len())
        .map(|i| format!("backbone.{i}"))
        .chain(["mp".to_string(), "sn".to_string()])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(input_dim: usize, widths: &[usize], num_classes: usize, latent_dim: usize) -> ModelDims {
        ModelDims {
            input_dim,
            widths: widths.to_vec(),
            num_classes,
            latent_dim,
        }
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        let d = dims(4, &[8], 3, 2);
        assert_eq!(d.param_count(), 85);
        let m = SnMpModel::init(d, 0).unwrap();
        assert_eq!(m.params().len(), 85);
    }

    #[test]
    fn output_shapes() {
        let m = SnMpModel::init(dims(16, &[32, 24], 8, 8), 1).unwrap();
        let mut tape = Tape::new(m.params());
        let out = m.forward(&mut tape, &[0.1; 16]).unwrap();
        assert_eq!(tape.value(out.backbone).len(), 24);
        assert_eq!(tape.value(out.logits).len(), 8);
        assert_eq!(tape.value(out.feature).len(), 8);
        assert!(m.forward(&mut tape, &[0.1; 15]).is_err());
        assert!(m.embed(&[0.1; 17]).is_err());
    }

    #[test]
    fn zero_heads_output_their_biases() {
        let mut m = SnMpModel::init(dims(3, &[4], 2, 2), 2).unwrap();
        let names = ["mp.weight", "sn.weight"];
        let mut flat = m.params().flat().to_vec();
        for spec in m.params().specs() {
            let range = spec.offset..spec.offset + spec.len();
            if names.contains(&spec.name.as_str()) {
                flat[range].fill(0.0);
            } else if spec.name == "mp.bias" {
                flat[range].copy_from_slice(&[0.5, -0.25]);
            } else if spec.name == "sn.bias" {
                flat[range].copy_from_slice(&[1.5, 2.5]);
            }
        }
        m.params_mut().flat_mut().copy_from_slice(&flat);
        for x in [[1.0, 2.0, 3.0], [-4.0, 0.0, 9.0]] {
            let mut tape = Tape::new(m.params());
            let out = m.forward(&mut tape, &x).unwrap();
            assert_eq!(tape.value(out.logits), &[0.5, -0.25]);
            assert_eq!(tape.value(out.feature), &[1.5, 2.5]);
        }
    }

    #[test]
    fn identity_backbone_passes_positive_input() {
        let d = dims(3, &[3], 2, 2);
        let mut m = SnMpModel::init(d, 3).unwrap();
        let id = m.params().id("backbone.0.weight").unwrap();
        let offset = m.params().spec(id).offset;
        let identity = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        m.params_mut().flat_mut()[offset..offset + 9].copy_from_slice(&identity);
        let mut tape = Tape::new(m.params());
        let out = m.forward(&mut tape, &[0.5, 1.0, 2.0]).unwrap();
        assert_eq!(tape.value(out.backbone), &[0.5, 1.0, 2.0]);
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let d = dims(5, &[7, 6], 4, 3);
        let a = SnMpModel::init(d.clone(), 10).unwrap();
        let b = SnMpModel::init(d.clone(), 10).unwrap();
        let c = SnMpModel::init(d.clone(), 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params().flat(), c.params().flat());
        for spec in a.params().specs() {
            let values = a.params().tensor(a.params().id(&spec.name).unwrap());
            if spec.name.ends_with(".bias") {
                assert!(values.iter().all(|v| *v == 0.0));
            } else {
                let bound = 1.0 / (spec.shape[1] as f64).sqrt();
                assert!(values.iter().all(|v| v.abs() <= bound));
            }
        }
        assert!(SnMpModel::init(dims(0, &[], 2, 2), 0).is_err());
        assert!(SnMpModel::init(dims(3, &[0], 2, 2), 0).is_err());
    }

    #[test]
    fn embed_matches_forward_bitwise() {
        let m = SnMpModel::init(dims(6, &[9, 5], 4, 3), 4).unwrap();
        let inputs: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..6).map(|j| ((i * 7 + j * 3) as f64).sin()).collect())
            .collect();
        let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
        let batch = m.embed_batch(&refs).unwrap();
        for (x, e) in inputs.iter().zip(&batch) {
            let mut tape = Tape::new(m.params());
            let out = m.forward(&mut tape, x).unwrap();
            let f = tape.value(out.feature);
            assert_eq!(f.len(), e.len());
            for (a, b) in f.iter().zip(e) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
            assert_eq!(&m.embed(x).unwrap(), e);
        }
    }

    #[test]
    fn from_params_checks_layout() {
        let d = dims(4, &[8], 3, 2);
        let m = SnMpModel::init(d.clone(), 0).unwrap();
        assert!(SnMpModel::from_params(d, m.params().clone()).is_ok());
        assert!(SnMpModel::from_params(dims(4, &[8], 3, 3), m.params().clone()).is_err());
    }
}
