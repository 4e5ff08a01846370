//! Multi-source domain adaptation over feature vectors.
//!
//! Each labelled source domain owns a branch network (disentangler, adaptor,
//! classifier) on top of a shared encoder. Training alternates a
//! disentangling step, which pushes each branch's representation away from
//! the other branches' classifiers, with an adaptation step that aligns
//! class-conditional source and target distributions under a kernel MMD.
//! Target predictions combine the branches with weights derived from the
//! Mahalanobis distance between a target encoding and each source.

pub mod dataset;
pub mod distance;
pub mod eval;
pub mod error;
pub mod losses;
pub mod model;
pub mod netcore;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
