use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole intrinsics. Pixel `(u, v)` is `(column, row)` with pixel centers at
/// integer coordinates and the origin at the top-left pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// Result of projecting a 3D point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub valid: bool,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let intr = Self { fx, fy, cx, cy, width, height };
        intr.validate()?;
        Ok(intr)
    }

    /// Square-pixel camera with roughly 60 degrees of horizontal field of view,
    /// principal point at the image center.
    pub fn default_for(width: usize, height: usize) -> Self {
        let f = 0.866 * width as f64;
        Self { fx: f, fy: f, cx: (width as f64 - 1.0) / 2.0, cy: (height as f64 - 1.0) / 2.0, width, height }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive and finite (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("image size must be at least 1x1".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::InvalidInput(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    /// `valid` iff `z > 0` and the projection falls inside the image, where the
    /// image covers `[-0.5, width - 0.5) x [-0.5, height - 0.5)`.
    pub fn project(&self, p: &Vector3<f64>) -> Projection {
        if !(p.z > 0.0) {
            return Projection { u: f64::NAN, v: f64::NAN, valid: false };
        }
        let u = self.fx * p.x / p.z + self.cx;
        let v = self.fy * p.y / p.z + self.cy;
        Projection { u, v, valid: self.contains(u, v) }
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= -0.5 && u < self.width as f64 - 0.5 && v >= -0.5 && v < self.height as f64 - 0.5
    }

    /// Inverse projection of a (possibly fractional) pixel at depth `z`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Nearest pixel `(column, row)` for a continuous image coordinate, if inside.
    pub fn pixel_of(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        if !self.contains(u, v) {
            return None;
        }
        let col = (u + 0.5).floor() as usize;
        let row = (v + 0.5).floor() as usize;
        Some((col.min(self.width - 1), row.min(self.height - 1)))
    }
}

/// `project_point` in free-function form.
pub fn project_point(p: &Vector3<f64>, intr: &CameraIntrinsics) -> Projection {
    intr.project(p)
}
