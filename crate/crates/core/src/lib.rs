//! Identity obfuscation with local differential privacy, evaluated on a
//! synthetic identity world.
//!
//! The crate is organised bottom-up: [`nn`] is a small dense-network engine;
//! [`world`] generates the synthetic data and trains the stand-in experts and
//! the ensemble identity extractor; [`obfuscator`] holds the identity
//! transformations and their Laplace-mechanism accounting; [`swap`] is the
//! feature-space swap generator and its losses; [`eval`] produces every
//! verdict; [`pipeline`] wires the stages into reproducible runs.

pub mod error;
pub mod eval;
pub mod math;
pub mod nn;
pub mod obfuscator;
pub mod pipeline;
pub mod rng;
pub mod swap;
pub mod world;

pub use error::{CheckpointError, Error, Result};
pub use eval::{Anonymizer, PrivacyReport, ScoreSet};
pub use nn::{AdamState, Checkpoint, DenseNet};
pub use obfuscator::{IdVector, Obfuscator, ObfuscatorConfig, PrivacyBudget, Variant};
pub use pipeline::{Pipeline, RunConfig};
pub use world::{EnsembleExtractor, ExpertModel, Sample, World, WorldConfig};
