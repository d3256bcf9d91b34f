//! Reduced two-branch, three-scale U-shaped feature extractor.

mod config;
mod geometric;
mod subsample;
mod visual;
mod weights;

pub use config::{NetworkConfig, ScaleLevel, NUM_LEVELS};
pub use geometric::{encoder_conv, geometric_forward_stage, radius_edges, to_full_resolution, GeometricPyramid};
pub use subsample::{grid_subsample, Subsampled};
pub use visual::{image_tensor, upsample_index, visual_forward_stage, VisualMap};
pub use weights::{ParamSpec, ParamTensor, WeightsBundle};
