//! Gated activation editing for compact decoder-only transformers.
//!
//! The crate trains small additive and multiplicative edits on attention-head
//! outputs (or MLP outputs) of a frozen model. Each edit carries stochastic
//! Hard-Concrete gates whose expected-L0 penalty drives most gates to exact
//! zero, so training jointly decides *where* to intervene and *what* to
//! apply. At inference gates freeze to their expected values and edits below
//! a threshold are pruned away with no effect on behavior.
//!
//! Synthetic tasks with planted ground-truth heads make the localization
//! claim testable end to end: a teacher model built from known offsets on
//! known heads labels the data, and training must rediscover those heads.

pub mod error;
pub mod hardconcrete;
pub mod interventions;
pub mod model;
pub mod numerics;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
