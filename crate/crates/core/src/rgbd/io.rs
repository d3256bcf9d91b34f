//! On-disk formats: 16-bit millimeter depth PNG, 8-bit RGB PNG, intrinsics
//! JSON and whitespace-separated 4x4 row-major pose text.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use nalgebra::Matrix4;

use super::{CameraIntrinsics, ColorImage, DepthImage, RigidTransform};
use crate::error::{Error, Result};

pub fn load_depth_png(path: &Path) -> Result<DepthImage> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let gray = match img {
        image::DynamicImage::ImageLuma16(g) => g,
        other => {
            return Err(Error::format(path, format!("expected 16-bit grayscale depth, found {:?}", other.color())))
        }
    };
    let (w, h) = gray.dimensions();
    let data = gray.pixels().map(|p| p.0[0] as f64 / 1000.0).collect();
    DepthImage::new(w as usize, h as usize, data)
}

/// Depth is rounded to the nearest millimeter and saturates at 65.535 m.
pub fn save_depth_png(depth: &DepthImage, path: &Path) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(depth.width() as u32, depth.height() as u32, |c, r| {
            let mm = (depth.get(c as usize, r as usize) * 1000.0).round().min(u16::MAX as f64);
            Luma([mm as u16])
        });
    buf.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn load_color_png(path: &Path) -> Result<ColorImage> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0.map(|c| c as f64 / 255.0)).collect();
    ColorImage::new(w as usize, h as usize, data)
}

pub fn save_color_png(color: &ColorImage, path: &Path) -> Result<()> {
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_fn(color.width() as u32, color.height() as u32, |c, r| {
            Rgb(color.get(c as usize, r as usize).map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        });
    buf.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn load_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let intr: CameraIntrinsics = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    intr.validate()?;
    Ok(intr)
}

pub fn save_intrinsics(intr: &CameraIntrinsics, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(intr)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn parse_pose(text: &str) -> Result<RigidTransform> {
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|tok| tok.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidInput(format!("pose: {e}")))?;
    if values.len() != 16 {
        return Err(Error::InvalidInput(format!("pose has {} numbers, expected 16", values.len())));
    }
    RigidTransform::from_matrix4(&Matrix4::from_row_slice(&values))
}

pub fn format_pose(t: &RigidTransform) -> String {
    let m = t.to_matrix4();
    let mut out = String::new();
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{:e}", m[(r, c)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn load_pose(path: &Path) -> Result<RigidTransform> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pose(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_pose(t: &RigidTransform, path: &Path) -> Result<()> {
    fs::write(path, format_pose(t)).map_err(|e| Error::io(path, e))
}
