//! Embedding training and evaluation for universal cross-domain retrieval.
//!
//! A query may come from a class, a domain, or both that were never seen
//! during training. The network maps every input into a latent space
//! aligned with fixed per-class semantic vectors; retrieval ranks a search
//! set by Euclidean distance in that space.
//!
//! Training combines three objectives on mixup samples:
//!
//! - a semantic-similarity cross-entropy over the component classes,
//! - a mixture-prediction loss that asks a linear head to recover the exact
//!   class-mixing proportions,
//! - a semantic-neighbourhood loss that matches the feature's distance
//!   profile to all seen-class semantics against the ground-truth profile,
//!   with weights that relax for semantically distant classes.
//!
//! Module map:
//!
//! - [`data`]: samples, datasets, semantic tables, protocol splits, run config
//! - [`autodiff`]: the reverse-mode tape and a finite-difference checker
//! - [`gradsuite`]: gradient checks of the training loss on random instances
//! - [`mixup`]: coefficient sampling and mixed-sample construction
//! - [`losses`]: the three loss terms and their combination
//! - [`model`]: backbone plus the two linear heads
//! - [`trainer`]: SGD with Nesterov momentum, lr schedule, early stopping
//! - [`checkpoint`]: the binary checkpoint format
//! - [`retrieval`]: Euclidean ranking, mAP@k and Prec@k
//! - [`synthgen`]: synthetic multi-domain datasets
//! - [`io`]: the on-disk dataset directory format

pub mod autodiff;
pub mod checkpoint;
pub mod data;
mod error;
pub mod gradsuite;
pub mod io;
pub mod losses;
pub mod mixup;
pub mod model;
pub mod retrieval;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
