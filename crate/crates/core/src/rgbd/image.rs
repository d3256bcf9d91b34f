use crate::error::{Error, Result};

/// Row-major depth in meters; `0.0` marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "depth buffer has {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if let Some(bad) = data.iter().find(|z| !z.is_finite() || **z < 0.0) {
            return Err(Error::InvalidInput(format!("depth value {bad} is not a finite non-negative number")));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, z: f64) {
        assert!(z.is_finite() && z >= 0.0);
        self.data[row * self.width + col] = z;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|z| **z > 0.0).count()
    }
}

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    width: usize,
    height: usize,
    data: Vec<[f64; 3]>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize, data: Vec<[f64; 3]>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "color buffer has {} pixels, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if data.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidInput("color channel outside [0, 1]".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn black(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![[0.0; 3]; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, col: usize, row: usize) -> [f64; 3] {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, rgb: [f64; 3]) {
        self.data[row * self.width + col] = rgb.map(|c| c.clamp(0.0, 1.0));
    }

    pub fn data(&self) -> &[[f64; 3]] {
        &self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_negative_depth_and_bad_sizes() {
        assert!(DepthImage::new(2, 1, vec![0.0, -1.0]).is_err());
        assert!(DepthImage::new(2, 1, vec![0.0, f64::NAN]).is_err());
        assert!(DepthImage::new(2, 2, vec![0.0; 3]).is_err());
        assert!(ColorImage::new(1, 1, vec![[0.0, 1.5, 0.0]]).is_err());
    }

    #[test]
    fn valid_count_skips_zero() {
        let d = DepthImage::new(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        assert_eq!(d.valid_count(), 2);
    }
}
