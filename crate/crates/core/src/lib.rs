//! Self-generated preference pairs for a toy vision-language policy.
//!
//! The crate synthesizes chosen/rejected answers by querying one frozen
//! policy on clean and augmented glyph-grid images, filters identical pairs,
//! and aligns the policy with direct preference optimization.

pub mod augment;
pub mod dpo;
pub mod eval;
pub mod optim;
pub mod pipeline;
pub mod policy;
pub mod prefgen;
pub mod rng;
pub mod svg;
pub mod tensor;
pub mod tokenizer;
pub mod world;

pub use augment::AugmentSpec;
pub use dpo::{DpoConfig, MultiForm};
pub use pipeline::{PipelineError, RunConfig, RunDir, Stage};
pub use policy::{LoraConfig, Policy, PolicyConfig, SftConfig};
pub use prefgen::{PreferenceDataset, PreferenceRecord};
pub use world::{Episode, WorldConfig};
