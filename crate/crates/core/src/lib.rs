//! Unsupervised RGB-D point cloud registration with multi-scale bidirectional
//! fusion of visual and geometric features.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gather;
pub mod grad;
pub mod gradcheck;
pub mod matching;
pub mod network;
pub mod render;
pub mod rgbd;
pub mod robust;
pub mod spatial;
pub mod tape;

pub use error::{Error, Result};
