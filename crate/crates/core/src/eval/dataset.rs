//! `pair_<id>/` directories holding two RGB-D frames, intrinsics and an
//! optional ground-truth pose.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rgbd::io::{
    load_color_png, load_depth_png, load_intrinsics, load_pose, save_color_png, save_depth_png, save_intrinsics,
    save_pose,
};
use crate::rgbd::{CameraIntrinsics, ColorImage, DepthImage, RigidTransform};

#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub src_color: ColorImage,
    pub src_depth: DepthImage,
    pub tgt_color: ColorImage,
    pub tgt_depth: DepthImage,
    pub intr: CameraIntrinsics,
    /// Maps target-camera points into the source camera.
    pub gt: Option<RigidTransform>,
}

impl PairRecord {
    pub fn validate(&self) -> Result<()> {
        self.intr.validate()?;
        let (w, h) = (self.intr.width, self.intr.height);
        let dims = [
            (self.src_color.width(), self.src_color.height()),
            (self.src_depth.width(), self.src_depth.height()),
            (self.tgt_color.width(), self.tgt_color.height()),
            (self.tgt_depth.width(), self.tgt_depth.height()),
        ];
        if dims.iter().any(|&d| d != (w, h)) {
            return Err(Error::InvalidInput(format!("pair images {dims:?} do not match intrinsics {w}x{h}")));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_color_png(&self.src_color, &dir.join("src_color.png"))?;
        save_depth_png(&self.src_depth, &dir.join("src_depth.png"))?;
        save_color_png(&self.tgt_color, &dir.join("tgt_color.png"))?;
        save_depth_png(&self.tgt_depth, &dir.join("tgt_depth.png"))?;
        save_intrinsics(&self.intr, &dir.join("intrinsics.json"))?;
        if let Some(gt) = &self.gt {
            save_pose(gt, &dir.join("gt_pose.txt"))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let gt_path = dir.join("gt_pose.txt");
        let pair = Self {
            src_color: load_color_png(&dir.join("src_color.png"))?,
            src_depth: load_depth_png(&dir.join("src_depth.png"))?,
            tgt_color: load_color_png(&dir.join("tgt_color.png"))?,
            tgt_depth: load_depth_png(&dir.join("tgt_depth.png"))?,
            intr: load_intrinsics(&dir.join("intrinsics.json"))?,
            gt: if gt_path.exists() { Some(load_pose(&gt_path)?) } else { None },
        };
        pair.validate()?;
        Ok(pair)
    }
}

/// `pair_<id>` subdirectories of `root` as `(id, path)`, sorted by id.
pub fn list_pairs(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_prefix("pair_") {
            if entry.path().is_dir() {
                out.push((id.to_string(), entry.path()));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidInput(format!("no pair_<id> directories in {}", root.display())));
    }
    out.sort();
    Ok(out)
}

/// Stable per-pair seed: FNV-1a of the id mixed with the run seed.
pub fn pair_seed(seed: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ seed.wrapping_mul(0x9e3779b97f4a7c15)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::synth::{generate_synthetic_pair, SynthConfig};

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { width: 16, height: 12, ..SynthConfig::default() };
        let pair = generate_synthetic_pair(1, 5.0, &cfg);
        pair.save(&dir.path().join("pair_000")).unwrap();
        let back = PairRecord::load(&dir.path().join("pair_000")).unwrap();
        assert_eq!(back.intr, pair.intr);
        // depth is stored in whole millimeters, color in 8 bits
        for (a, b) in back.src_depth.data().iter().zip(pair.src_depth.data()) {
            assert!((a - b).abs() <= 0.0005 + 1e-12);
        }
        let (g, h) = (back.gt.unwrap(), pair.gt.unwrap());
        assert!((g.rotation - h.rotation).norm() < 1e-9);
        let ids = list_pairs(dir.path()).unwrap();
        assert_eq!(ids.len(), 1);
        assert_eq!(ids[0].0, "000");
    }

    #[test]
    fn empty_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(list_pairs(dir.path()).is_err());
    }
}
