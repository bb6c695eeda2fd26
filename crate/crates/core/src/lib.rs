//! Learning with evolving class ontologies.
//!
//! A label ontology that refines itself over time periods (TPs) — coarse
//! classes splitting into fine ones — poses a continual-learning problem:
//! how to annotate under the new ontology, how to initialize the next
//! model, and how to exploit the accumulated coarse-labeled history.
//! This crate implements the full protocol on synthetic hierarchical
//! Gaussian data:
//!
//! - [`ontology`]: multi-level taxonomies, ancestor edge matrices, and
//!   probability marginalization between levels.
//! - [`hierinfer`]: recovering the old→new parent map from doubly-labeled
//!   data by majority co-occurrence, plus mismatch masking.
//! - [`synthdata`]: hierarchical Gaussian-mixture pools, annotation
//!   strategies (label new / relabel old / all fine), and the weak/strong
//!   feature augmentations.
//! - [`model`]: an MLP feature extractor with one softmax head per TP,
//!   manual backprop, SGD with momentum, and EMA shadow weights.
//! - [`losses`]: cross-entropy, four semi-supervised losses, joint
//!   multi-head training, marginalized partial-label loss, and
//!   pseudo-label filtering/conditioning.
//! - [`trainer`]: the iteration loop with cosine learning-rate decay,
//!   two-pool batch composition, validation, and best-checkpoint
//!   selection; teacher–student self-training on top.
//! - [`metrics`]: class-mean accuracy at any taxonomy level.
//! - [`harness`]: config-driven multi-TP experiments, seed sweeps,
//!   hyperparameter grids, and result tables.

pub mod error;
pub mod harness;
pub mod hierinfer;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ontology;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
