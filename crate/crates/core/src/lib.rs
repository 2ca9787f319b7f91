//! Taxonomy-adaptive domain adaptation for semantic segmentation, at desk scale.
//!
//! The crate covers the whole loop: taxonomy relations between a source and a
//! target label space, synthetic paired-domain data, a small segmentation
//! network with hand-written gradients, label-level adaptation (stochastic
//! label mapping, pseudo-label relabeling, bilateral mixed sampling),
//! pixel-wise contrastive learning with an uncertainty-rectified variant, a
//! mean-teacher trainer and segmentation metrics.

pub mod contrastive;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod labelops;
pub mod loss;
pub mod mixing;
pub mod model;
pub mod rng;
pub mod taxonomy;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
