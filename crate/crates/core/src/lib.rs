//! Multi-label image classification with label-level embeddings and a
//! multi-label supervised contrastive loss.
//!
//! Everything runs on a small CPU autodiff engine in [`tensor`]. The network
//! encodes an image with a CNN, attends one learnable query per label over the
//! spatial features ([`attention`]), and produces one embedding per
//! (image, label) pair ([`model`]). Those embeddings feed per-label classifiers
//! and, after projection, the contrastive objective in [`losses`].

pub mod error;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub mod attention;
pub mod data;
pub mod eval;
pub mod labels;
pub mod losses;
pub mod model;
pub mod training;
pub mod gradcheck;
