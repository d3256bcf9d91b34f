//! Camera model, depth/point-cloud conversion and rigid-transform algebra.
//!
//! All geometry is `f64`. Pixel coordinates are `(column, row)` with integer
//! pixel centers.

mod camera;
mod cloud;
mod image;
pub mod io;
mod transform;

pub use camera::{project_point, CameraIntrinsics, Projection};
pub use cloud::{apply_transform, unproject_depth, PointCloud};
pub use image::{ColorImage, DepthImage};
pub use transform::{project_to_rotation, RigidTransform};
