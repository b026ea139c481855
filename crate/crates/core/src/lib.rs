//! Concept erasure for autoregressive token-image models, at a scale where
//! every quantity can be computed exactly.
//!
//! The crate is organised the way the pipeline runs:
//!
//! * [`synthworld`]: the synthetic concept world, the oracle renderer, prompt
//!   refinement and preference-pair construction.
//! * [`armodel`]: a first-order log-linear next-token model with analytic
//!   gradients, sampling and exact concept expectations.
//! * [`losses`]: cross-entropy, DPO, token-averaged DPO with token drop, the
//!   empty-prompt alignment baseline and logit-space safe guidance.
//! * [`trainer`]: Adam, pretraining, erasure fine-tuning, loss curves and the
//!   finite-difference gradient checker.
//! * [`eval`]: erase / preserve / decouple scores, occurrence counts and the
//!   removal-accuracy table.

pub mod armodel;
pub mod error;
pub mod eval;
pub mod losses;
pub mod rng;
pub mod synthworld;
pub mod trainer;

pub use armodel::{ConditionedModel, GenerationConfig, ModelParams, NextTokenModel, ParamBlock};
pub use error::{Error, Result};
pub use eval::{EvalMode, EvalReport};
pub use losses::{DpoConfig, LossValue};
pub use synthworld::{ConceptSpec, GridImage, PairSet, PreferencePair, Prompt, Vocab, World};
pub use trainer::{LossCurve, Method, Preset, TrainConfig, TrainOutcome};

/// Seed used by the reference pipeline runs.
pub const DEFAULT_SEED: u64 = 2024;

/// Version string written into run manifests and reports.
pub const VERSION: &str = concat!("erasure-core ", env!("CARGO_PKG_VERSION"));
