//! Samples, datasets, per-class semantic vectors and their validation.

mod config;
mod split;

pub use config::RunConfig;
pub use split::{
    build_split, query_and_search_sets, training_indices, validation_sets, Protocol,
    QuerySearchSets, SearchSetMode, SplitFractions, SplitRequest, SplitSpec,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type ClassId = usize;
pub type DomainId = usize;

/// Tolerance on unit norm for tables flagged as L2-normalized.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub input: Vec<f64>,
    pub class_id: ClassId,
    pub domain_id: DomainId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub num_domains: usize,
    pub input_dim: usize,
    pub class_names: Vec<String>,
    pub domain_names: Vec<String>,
}

impl Dataset {
    /// Creates a dataset with generated names (`class_0`, `domain_0`, ...).
    pub fn new(samples: Vec<Sample>, num_classes: usize, num_domains: usize, input_dim: usize) -> Self {
        Self {
            samples,
            num_classes,
            num_domains,
            input_dim,
            class_names: (0..num_classes).map(|c| format!("class_{c}")).collect(),
            domain_names: (0..num_domains).map(|d| format!("domain_{d}")).collect(),
        }
    }

    pub fn sample(&self, index: usize) -> &Sample {
        &self.samples[index]
    }

    /// Classes referenced by at least one sample, ascending.
    pub fn referenced_classes(&self) -> Vec<ClassId> {
        let mut classes: Vec<ClassId> = self.samples.iter().map(|s| s.class_id).collect();
        classes.sort_unstable();
        classes.dedup();
        classes
    }
}

/// Class id → semantic vector of a fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTable {
    pub dim: usize,
    pub vectors: BTreeMap<ClassId, Vec<f64>>,
    pub l2_normalized: bool,
}

impl SemanticTable {
    pub fn new(dim: usize, vectors: BTreeMap<ClassId, Vec<f64>>, l2_normalized: bool) -> Result<Self> {
        let table = Self {
            dim,
            vectors,
            l2_normalized,
        };
        table.check()?;
        Ok(table)
    }

    /// Builds a table from vectors indexed by class id, normalizing each to unit length.
    pub fn normalized(vectors: Vec<Vec<f64>>) -> Result<Self> {
        let dim = vectors.first().map_or(0, Vec::len);
        let mut map = BTreeMap::new();
        for (class, v) in vectors.into_iter().enumerate() {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "semantic vector for class {class} has zero norm"
                )));
            }
            map.insert(class, v.into_iter().map(|x| x / norm).collect());
        }
        Self::new(dim, map, true)
    }

    pub fn get(&self, class: ClassId) -> Option<&[f64]> {
        self.vectors.get(&class).map(Vec::as_slice)
    }

    pub fn check(&self) -> Result<()> {
        for (class, v) in &self.vectors {
            if v.len() != self.dim {
                return Err(Error::Shape(format!(
                    "semantic vector for class {class} has length {}, expected {}",
                    v.len(),
                    self.dim
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("semantic vector for class {class}")));
            }
            if self.l2_normalized {
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                    return Err(Error::InvalidArgument(format!(
                        "semantic vector for class {class} has norm {norm}, table is flagged L2-normalized"
                    )));
                }
            }
        }
        Ok(())
    }

    /// The anchors of `classes`, in the given order. That order defines the
    /// local class index used by the loss heads.
    pub fn anchors(&self, classes: &[ClassId]) -> Result<ClassAnchors> {
        let vectors = classes
            .iter()
            .map(|&c| {
                self.get(c)
                    .map(<[f64]>::to_vec)
                    .ok_or_else(|| Error::InvalidArgument(format!("missing semantic vector for class {c}")))
            })
            .collect::<Result<Vec<_>>>()?;
        ClassAnchors::new(classes.to_vec(), vectors)
    }
}

/// Semantic vectors of the training classes, addressed by local index.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAnchors {
    class_ids: Vec<ClassId>,
    vectors: Vec<Vec<f64>>,
    local: BTreeMap<ClassId, usize>,
}

impl ClassAnchors {
    pub fn new(class_ids: Vec<ClassId>, vectors: Vec<Vec<f64>>) -> Result<Self> {
        if class_ids.len() != vectors.len() {
            return Err(Error::Shape(format!(
                "{} class ids for {} anchor vectors",
                class_ids.len(),
                vectors.len()
            )));
        }
        if let Some(first) = vectors.first() {
            if vectors.iter().any(|v| v.len() != first.len()) {
                return Err(Error::Shape("anchor vectors differ in length".into()));
            }
        }
        let mut local = BTreeMap::new();
        for (i, &c) in class_ids.iter().enumerate() {
            if local.insert(c, i).is_some() {
                return Err(Error::InvalidArgument(format!("class {c} listed twice")));
            }
        }
        Ok(Self {
            class_ids,
            vectors,
            local,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn vector(&self, local: usize) -> &[f64] {
        &self.vectors[local]
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn class_ids(&self) -> &[ClassId] {
        &self.class_ids
    }

    pub fn local_index(&self, class: ClassId) -> Option<usize> {
        self.local.get(&class).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub sample: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, sample: Option<usize>, message: String) {
        self.violations.push(Violation { sample, message });
    }
}

/// Checks every dataset invariant and that each referenced class has a
/// semantic vector. Collects all violations instead of stopping at the first.
pub fn validate_dataset(ds: &Dataset, sem: &SemanticTable) -> ValidationReport {
    let mut report = ValidationReport::default();
    for (i, s) in ds.samples.iter().enumerate() {
        if s.input.len() != ds.input_dim {
            report.push(
                Some(i),
                format!("sample {i}: input has {} entries, expected {}", s.input.len(), ds.input_dim),
            );
        }
        if let Some(j) = s.input.iter().position(|x| !x.is_finite()) {
            report.push(Some(i), format!("sample {i}: non-finite input entry at position {j}"));
        }
        if s.class_id >= ds.num_classes {
            report.push(
                Some(i),
                format!("sample {i}: class {} out of range (num_classes = {})", s.class_id, ds.num_classes),
            );
        }
        if s.domain_id >= ds.num_domains {
            report.push(
                Some(i),
                format!("sample {i}: domain {} out of range (num_domains = {})", s.domain_id, ds.num_domains),
            );
        }
    }
    for class in ds.referenced_classes() {
        if sem.get(class).is_none() {
            report.push(None, format!("missing semantic vector for class {class}"));
        }
    }
    if let Err(e) = sem.check() {
        report.push(None, e.to_string());
    }
    report
}
