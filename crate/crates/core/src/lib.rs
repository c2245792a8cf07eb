//! Attention-head circuit identification on desk-scale transformers.
//!
//! The library trains small decoder-only models on synthetic tasks, then runs a
//! three-step circuit identification recipe over the saved checkpoints:
//!
//! 1. **Spectral signal** ([`spectral`]) — per-head participation-ratio
//!    trajectories and their log-token time integral, used to rank heads by
//!    sustained content-dependent computation.
//! 2. **Task-pattern screen** ([`screen`]) — attention selectivity against
//!    canonical target positions (induction, previous-token, duplicate-token,
//!    first-token, self, local, key-retrieval), with thresholded circuit
//!    extraction and null calibration.
//! 3. **Causal verification** ([`ablate`]) — group ablation of the candidate
//!    circuit against matched-random and all-heads-in-layer controls.
//!
//! [`model`] provides the transformer with deterministic training, per-head
//! capture, and per-head ablation masking; [`taskgen`] the synthetic corpora;
//! [`capture`] activation extraction and caching; [`pipeline`] the CLI-facing
//! orchestration with reproducible run directories.

pub mod ablate;
pub mod capture;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod planted;
pub mod rng;
pub mod screen;
pub mod spectral;
pub mod taskgen;

pub use error::{Error, Result};
pub use model::{AblationMask, Checkpoint, HeadId, Model, ModelConfig};
