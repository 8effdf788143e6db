//! Structural-distortion reward modeling for generated video frames.
//!
//! Label taxonomy, response parsing, composite rewards, a desk-scale GRPO
//! engine, two-stage frame sampling, benchmark metrics, dataset ingestion
//! and a scorer gateway.

// `!(x > y)` comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod dataset;
pub mod gateway;
pub mod grpo;
pub mod parser;
pub mod reward;
pub mod sampler;
pub mod taxonomy;

pub use reward::{Preference, RewardWeights};
pub use taxonomy::{BoundingBox, DistortionLabel, FrameAnnotation, LabelSet};
