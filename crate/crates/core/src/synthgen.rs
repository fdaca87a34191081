//! Synthetic multi-domain datasets with a known ground truth.
//!
//! Class semantics are unit vectors grouped into clusters of about four
//! classes. A class prototype is a fixed linear lift of its semantic vector
//! into input space. Each domain applies its own rotation and offset to the
//! prototypes, and every sample adds isotropic Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels;
use crate::data::{Dataset, Sample, SemanticTable};
use crate::{Error, Result};

/// Classes per semantic cluster.
pub const CLUSTER_SIZE: usize = 4;
/// Regeneration budget for semantics whose clusters overlap.
pub const MAX_ATTEMPTS: u64 = 10;
/// Per-coordinate noise on a class around its cluster centre.
const CLUSTER_NOISE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub num_classes: usize,
    pub num_domains: usize,
    pub samples_per_class_per_domain: usize,
    pub input_dim: usize,
    pub semantic_dim: usize,
    /// Per-coordinate standard deviation of sample noise.
    pub class_spread: f64,
    /// Scales the domain rotation angles and offsets; 0 makes domains identical.
    pub domain_shift_strength: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            num_classes: 20,
            num_domains: 5,
            samples_per_class_per_domain: 30,
            input_dim: 32,
            semantic_dim: 16,
            class_spread: 0.4,
            domain_shift_strength: 0.25,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("at least 2 classes are required".into()));
        }
        if self.num_domains == 0 || self.samples_per_class_per_domain == 0 || self.input_dim == 0 {
            return Err(Error::InvalidArgument("domain, sample and input counts must be at least 1".into()));
        }
        if self.semantic_dim < 4 {
            return Err(Error::InvalidArgument(format!(
                "semantic dimension {} is too small for clustered semantics (need at least 4)",
                self.semantic_dim
            )));
        }
        if self.input_dim < self.semantic_dim {
            return Err(Error::InvalidArgument(format!(
                "input_dim {} is smaller than semantic_dim {}",
                self.input_dim, self.semantic_dim
            )));
        }
        for (name, v) in [
            ("class_spread", self.class_spread),
            ("domain_shift_strength", self.domain_shift_strength),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        self.num_classes * self.num_domains * self.samples_per_class_per_domain
    }
}

/// Cluster index of each class: consecutive runs of [`CLUSTER_SIZE`].
pub fn cluster_of(class: usize) -> usize {
    class / CLUSTER_SIZE
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = kernels::norm(v);
    v.iter_mut().for_each(|x| *x /= n);
}

/// Orthonormal centres while they fit in `m` dimensions, random unit
/// vectors beyond that.
fn cluster_centres(rng: &mut ChaCha8Rng, k: usize, m: usize) -> Vec<Vec<f64>> {
    let mut centres: Vec<Vec<f64>> = Vec::with_capacity(k);
    for i in 0..k {
        let mut v = gaussian_vec(rng, m);
        if i < m {
            for c in &centres {
                let d = kernels::dot(&v, c);
                v.iter_mut().zip(c).for_each(|(x, y)| *x -= d * y);
            }
        }
        normalize(&mut v);
        centres.push(v);
    }
    centres
}

/// Minimum within-cluster and maximum cross-cluster cosine of a table.
pub fn cluster_cosines(sem: &SemanticTable) -> Result<(f64, f64)> {
    let entries: Vec<(usize, &Vec<f64>)> = sem.vectors.iter().map(|(c, v)| (*c, v)).collect();
    let (mut min_within, mut max_cross) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, (ci, vi)) in entries.iter().enumerate() {
        for (cj, vj) in &entries[i + 1..] {
            let cos = kernels::cosine(vi, vj)?;
            if cluster_of(*ci) == cluster_of(*cj) {
                min_within = min_within.min(cos);
            } else {
                max_cross = max_cross.max(cos);
            }
        }
    }
    Ok((min_within, max_cross))
}

fn semantics_attempt(num_classes: usize, m: usize, seed: u64) -> Result<SemanticTable> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = num_classes.div_ceil(CLUSTER_SIZE);
    let centres = cluster_centres(&mut rng, k, m);
    let noise = CLUSTER_NOISE / (m as f64).sqrt();
    let vectors = (0..num_classes)
        .map(|c| {
            let centre = &centres[cluster_of(c)];
            let mut v: Vec<f64> = centre
                .iter()
                .map(|x| x + noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
            normalize(&mut v);
            v
        })
        .collect();
    SemanticTable::normalized(vectors)
}

/// Unit-norm class semantics in `⌈num_classes / 4⌉` clusters. Tables where
/// some within-cluster cosine does not exceed every cross-cluster cosine are
/// regenerated from a derived seed, up to [`MAX_ATTEMPTS`] times.
pub fn generate_semantics(num_classes: usize, m: usize, seed: u64) -> Result<SemanticTable> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument("at least 2 classes are required".into()));
    }
    if m < 4 {
        return Err(Error::InvalidArgument(format!(
            "semantic dimension {m} is too small for clustered semantics (need at least 4)"
        )));
    }
    for attempt in 0..MAX_ATTEMPTS {
        let table = semantics_attempt(num_classes, m, seed.wrapping_add(attempt.wrapping_mul(0x9e37_79b9_7f4a_7c15)))?;
        let (within, cross) = cluster_cosines(&table)?;
        // A single cluster has no cross pairs; a cluster of one has no within pairs.
        if within.is_infinite() || cross.is_infinite() || within > cross {
            return Ok(table);
        }
        log::debug!("semantic attempt {attempt}: within {within:.3} <= cross {cross:.3}, regenerating");
    }
    Err(Error::InvalidArgument(format!(
        "could not separate semantic clusters for {num_classes} classes in {m} dimensions"
    )))
}

/// A domain's affine map: Givens rotations followed by an offset.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainMap {
    /// `(i, j, angle)` applied in order.
    pub rotations: Vec<(usize, usize, f64)>,
    pub offset: Vec<f64>,
}

impl DomainMap {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for &(i, j, angle) in &self.rotations {
            let (s, c) = angle.sin_cos();
            let (a, b) = (y[i], y[j]);
            y[i] = c * a - s * b;
            y[j] = s * a + c * b;
        }
        y.iter_mut().zip(&self.offset).for_each(|(v, o)| *v += o);
        y
    }
}

/// Per-domain maps; at strength 0 every map is the identity.
pub fn domain_maps(spec: &GeneratorSpec) -> Vec<DomainMap> {
    let n = spec.input_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    (0..spec.num_domains)
        .map(|_| {
            let rotations = if n < 2 {
                Vec::new()
            } else {
                (0..2 * n)
                    .map(|_| {
                        let i = rng.random_range(0..n);
                        let j = (i + rng.random_range(1..n)) % n;
                        let angle = spec.domain_shift_strength * std::f64::consts::PI * rng.random_range(-1.0..1.0);
                        (i, j, angle)
                    })
                    .collect()
            };
            let scale = spec.domain_shift_strength / (n as f64).sqrt();
            let offset = gaussian_vec(&mut rng, n).into_iter().map(|v| v * scale).collect();
            DomainMap { rotations, offset }
        })
        .collect()
}

/// Fixed `input_dim × m` lift with entries of variance `1/m`.
pub fn lift_matrix(spec: &GeneratorSpec) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(0);
    let scale = 1.0 / (spec.semantic_dim as f64).sqrt();
    gaussian_vec(&mut rng, spec.input_dim * spec.semantic_dim)
        .into_iter()
        .map(|v| v * scale)
        .collect()
}

/// Class prototypes in input space, before any domain map.
pub fn prototypes(spec: &GeneratorSpec, sem: &SemanticTable) -> Result<Vec<Vec<f64>>> {
    let lift = lift_matrix(spec);
    let zero = vec![0.0; spec.input_dim];
    (0..spec.num_classes)
        .map(|c| {
            let a = sem
                .get(c)
                .ok_or_else(|| Error::InvalidArgument(format!("missing semantic vector for class {c}")))?;
            Ok(kernels::affine(&lift, &zero, a))
        })
        .collect()
}

/// Samples ordered by domain, then class; ids are positions.
pub fn generate_dataset(spec: &GeneratorSpec, sem: &SemanticTable) -> Result<Dataset> {
    spec.validate()?;
    if sem.dim != spec.semantic_dim {
        return Err(Error::Shape(format!(
            "semantic table has dimension {}, spec says {}",
            sem.dim, spec.semantic_dim
        )));
    }
    let protos = prototypes(spec, sem)?;
    let maps = domain_maps(spec);
    let per_domain = spec.num_classes * spec.samples_per_class_per_domain;
    let samples: Vec<Sample> = (0..spec.num_domains)
        .into_par_iter()
        .flat_map_iter(|d| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(2 + d as u64);
            let mapped: Vec<Vec<f64>> = protos.iter().map(|p| maps[d].apply(p)).collect();
            let mut out = Vec::with_capacity(per_domain);
            for (c, centre) in mapped.iter().enumerate() {
                for i in 0..spec.samples_per_class_per_domain {
                    let input = centre
                        .iter()
                        .map(|v| v + spec.class_spread * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    out.push(Sample {
                        id: d * per_domain + c * spec.samples_per_class_per_domain + i,
                        input,
                        class_id: c,
                        domain_id: d,
                    });
                }
            }
            out
        })
        .collect();
    Ok(Dataset::new(samples, spec.num_classes, spec.num_domains, spec.input_dim))
}

/// Semantics and dataset from one spec.
pub fn generate(spec: &GeneratorSpec) -> Result<(Dataset, SemanticTable)> {
    spec.validate()?;
    let sem = generate_semantics(spec.num_classes, spec.semantic_dim, spec.seed)?;
    let ds = generate_dataset(spec, &sem)?;
    Ok((ds, sem))
}
