//! Multimodal fusion model zoo with a three-axis evaluation harness.
//!
//! The crate is organized around a small differentiable-computation substrate
//! ([`graph`]) on top of which everything else is built:
//!
//! - [`synthdata`] — seeded synthetic multimodal datasets with known
//!   structure (redundant views, planted cross-modal interactions, temporal
//!   co-occurrence) plus on-disk dataset directories.
//! - [`encoders`] — per-modality encoders (MLP, GRU, transformer, conv,
//!   deep set) producing vector or sequence representations.
//! - [`fusion`] — the fusion operator zoo: concatenation, tensor and
//!   low-rank tensor fusion, multiplicative interactions, FiLM, NL-gate,
//!   and crossmodal-attention transformers.
//! - [`objectives`] — task losses and auxiliary objectives (canonical
//!   correlation, contrastive alignment, factorized reconstruction with an
//!   MMD prior, cycle-consistent translation).
//! - [`training`] — optimizers and the four training structures
//!   (supervised, gradient-blend reweighting, translation, factorized).
//! - [`perturb`] — the typed perturbation families used to build noisy
//!   test grids, organized per modality.
//! - [`evalmetrics`] — performance metrics, complexity profiling, and
//!   robustness curves/scores, plus cross-experiment aggregation.
//! - [`experiment`] — config-driven experiment runner with deterministic
//!   on-disk results, auditing, and comparison reports.

pub mod encoders;
pub mod error;
pub mod evalmetrics;
pub mod experiment;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod objectives;
pub mod params;
pub mod perturb;
pub mod report;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Gradients, Tape, Var};
pub use params::{BoundParams, ParamSet, Scope};
