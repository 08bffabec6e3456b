//! Offline analysis of visual tokens in multimodal language models.
//!
//! Everything operates on activation-dump bundles ([`dumpio`]) so the numerical
//! core has no dependency on a model framework:
//!
//! - [`probe`]: nearest-vocabulary retrieval by cosine (embedding lens) and by
//!   logits (logit lens), label matching accuracy and the sparsity curve.
//! - [`cluster`]: greedy anchor clustering of projected visual tokens and
//!   cross-image centroid statistics.
//! - [`sinks`]: ViT high-norm sinks, LLM sink-channel sinks, and bos-alignment traces.
//! - [`partition`]: dead-token detection and the sink / dead / alive split.
//! - [`dynamics`]: layer-wise group metrics (consistency, attention flow, norms,
//!   layer similarity, output entropy, late-entry grounding).
//! - [`intervene`]: declarative inference-time intervention specs.
//! - [`patchbench`]: the single-patch diagnostic benchmark generator and scorer.

pub mod cluster;
pub mod dumpio;
pub mod dynamics;
pub mod error;
pub mod intervene;
pub mod linalg;
pub mod partition;
pub mod patchbench;
pub mod probe;
pub mod sinks;
pub mod synth;

pub use error::{Error, Result};
pub use linalg::Matrix;
