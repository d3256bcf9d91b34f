use nalgebra::Vector3;

use super::camera::CameraIntrinsics;
use super::image::{ColorImage, DepthImage};
use super::transform::RigidTransform;
use crate::error::{Error, Result};

/// Points unprojected from a depth frame. `source_pixel[i]` is the
/// `(column, row)` that produced `points[i]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub source_pixel: Vec<(usize, usize)>,
    pub colors: Option<Vec<[f64; 3]>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Attaches per-point colors sampled at each source pixel.
    pub fn with_colors(mut self, color: &ColorImage) -> Self {
        let colors = self.source_pixel.iter().map(|&(c, r)| color.get(c, r)).collect();
        self.colors = Some(colors);
        self
    }

    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        apply_transform(t, self)
    }
}

/// Emits one point per pixel with `z > 0`, in row-major pixel order.
pub fn unproject_depth(depth: &DepthImage, intr: &CameraIntrinsics) -> Result<PointCloud> {
    if depth.width() != intr.width || depth.height() != intr.height {
        return Err(Error::InvalidInput(format!(
            "depth is {}x{} but intrinsics describe {}x{}",
            depth.width(),
            depth.height(),
            intr.width,
            intr.height
        )));
    }
    let mut cloud = PointCloud::default();
    for row in 0..depth.height() {
        for col in 0..depth.width() {
            let z = depth.get(col, row);
            if z > 0.0 {
                cloud.points.push(intr.unproject(col as f64, row as f64, z));
                cloud.source_pixel.push((col, row));
            }
        }
    }
    Ok(cloud)
}

pub fn apply_transform(t: &RigidTransform, cloud: &PointCloud) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| t.apply(p)).collect(),
        source_pixel: cloud.source_pixel.clone(),
        colors: cloud.colors.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 64.0, 64.0, 200, 128).unwrap()
    }

    #[test]
    fn principal_point_pixel_maps_to_optical_axis() {
        let mut d = DepthImage::zeros(200, 128);
        d.set(64, 64, 2.0);
        let c = unproject_depth(&d, &cam()).unwrap();
        assert_eq!(c.points, vec![Vector3::new(0.0, 0.0, 2.0)]);
        assert_eq!(c.source_pixel, vec![(64, 64)]);
    }

    #[test]
    fn off_axis_pixel() {
        // (164 - 64) * 1 / 100 = 1
        let mut d = DepthImage::zeros(200, 128);
        d.set(164, 64, 1.0);
        let c = unproject_depth(&d, &cam()).unwrap();
        assert!((c.points[0] - Vector3::new(1.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn all_invalid_depth_gives_empty_cloud() {
        let c = unproject_depth(&DepthImage::zeros(200, 128), &cam()).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        assert!(unproject_depth(&DepthImage::zeros(10, 10), &cam()).is_err());
    }

    #[test]
    fn transform_preserves_pixels_and_colors() {
        let mut d = DepthImage::zeros(200, 128);
        d.set(3, 4, 1.0);
        let c = unproject_depth(&d, &cam()).unwrap().with_colors(&ColorImage::black(200, 128));
        let t = RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let moved = apply_transform(&t, &c);
        assert_eq!(moved.source_pixel, c.source_pixel);
        assert_eq!(moved.colors, c.colors);
        assert_eq!(moved.points[0], c.points[0] + Vector3::new(1.0, 0.0, 0.0));
    }
}
