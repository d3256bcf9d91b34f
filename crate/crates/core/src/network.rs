//! Both branches run stage by stage with bidirectional fusion after each
//! stage, then the final undirected fusion on the keypoints.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::{
    geometric_forward_stage, image_tensor, to_full_resolution, visual_forward_stage, GeometricPyramid, NetworkConfig,
    VisualMap, WeightsBundle, NUM_LEVELS,
};
use crate::error::{Error, Result};
use crate::fusion::{bidirectional_fuse_stage, fuse_final, FusionBlock, LevelGathers};
use crate::gather::{gather_g2v, gather_v2g, Direction, GatherSpec, PixelGrid};
use crate::rgbd::{unproject_depth, CameraIntrinsics, ColorImage, DepthImage, PointCloud};
use crate::tape::{Tape, Var};

/// Which fusion sites are active: encoder stages, decoder stages and the
/// final learned fusion. With `concat` off the matching features are the
/// plain concatenation of both branch outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionToggles {
    pub encode: bool,
    pub decode: bool,
    pub concat: bool,
}

impl Default for FusionToggles {
    fn default() -> Self {
        Self::all(true)
    }
}

impl FusionToggles {
    pub fn all(on: bool) -> Self {
        Self { encode: on, decode: on, concat: on }
    }

    pub fn at_level(&self, level: usize) -> bool {
        if level < 3 {
            self.encode
        } else {
            self.decode
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub network: NetworkConfig,
    pub k_v2g: usize,
    pub k_g2v: usize,
    pub fusion: FusionToggles,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { network: NetworkConfig::default(), k_v2g: 32, k_g2v: 1, fusion: FusionToggles::default() }
    }
}

impl PipelineConfig {
    pub fn training() -> Self {
        Self { k_v2g: 16, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.k_v2g == 0 || self.k_g2v == 0 {
            return Err(Error::Config("gather sizes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything about one RGB-D frame that does not depend on weights.
#[derive(Debug, Clone)]
pub struct FramePrep {
    pub intr: CameraIntrinsics,
    pub color: ColorImage,
    /// Keypoints: every valid-depth pixel.
    pub cloud: PointCloud,
    pub pyramid: GeometricPyramid,
    pub grids: Vec<PixelGrid>,
    /// Per resolution (0, 1, 2).
    pub gathers: Vec<LevelGathers>,
    /// Visual feature row of each keypoint.
    pub source_rows: Arc<Vec<Option<usize>>>,
}

impl FramePrep {
    pub fn new(
        color: &ColorImage,
        depth: &DepthImage,
        intr: &CameraIntrinsics,
        config: &PipelineConfig,
    ) -> Result<Self> {
        config.validate()?;
        if color.width() != intr.width || color.height() != intr.height {
            return Err(Error::InvalidInput(format!(
                "color is {}x{}, intrinsics say {}x{}",
                color.width(),
                color.height(),
                intr.width,
                intr.height
            )));
        }
        let cloud = unproject_depth(depth, intr)?.with_colors(color);
        let pyramid = GeometricPyramid::build(cloud.points.clone(), &config.network)?;
        let mut grids = Vec::with_capacity(3);
        let mut gathers = Vec::with_capacity(3);
        for res in 0..3 {
            let grid = PixelGrid::new(depth, intr, config.network.level(res).stride)?;
            let r = config.network.radius(res);
            let pts = pyramid.points(res);
            let v2g = gather_v2g(pts, &grid, &GatherSpec::new(Direction::V2G, config.k_v2g, r)?)?;
            let cells: Vec<usize> = (0..grid.len()).collect();
            let g2v = gather_g2v(&cells, &grid, pts, &GatherSpec::new(Direction::G2V, config.k_g2v, r)?)?;
            gathers.push(LevelGathers { v2g, g2v });
            grids.push(grid);
        }
        let source_rows = Arc::new(cloud.source_pixel.iter().map(|&(u, v)| Some(v * intr.width + u)).collect());
        Ok(Self { intr: *intr, color: color.clone(), cloud, pyramid, grids, gathers, source_rows })
    }

    pub fn num_keypoints(&self) -> usize {
        self.cloud.len()
    }
}

/// Tape handles of one frame's outputs.
#[derive(Debug, Clone, Copy)]
pub struct FrameFeatures {
    /// Matching features, one row per keypoint.
    pub features: Var,
    /// Geometric branch output copied to every keypoint.
    pub geometric: Var,
    /// Visual branch output, one row per pixel.
    pub visual: Var,
}

pub fn extract_features(
    tape: &mut Tape,
    weights: &WeightsBundle,
    config: &PipelineConfig,
    frame: &FramePrep,
) -> Result<FrameFeatures> {
    let net = &config.network;
    let slope = net.leaky_slope;
    let img = tape.constant(image_tensor(&frame.color));
    let mut vis = VisualMap { feats: img, h: frame.intr.height, w: frame.intr.width };
    let mut geo = tape.constant(frame.pyramid.input_features(net));
    let mut vis_levels: Vec<VisualMap> = Vec::with_capacity(NUM_LEVELS);
    let mut geo_levels: Vec<Var> = Vec::with_capacity(NUM_LEVELS);
    for l in 0..NUM_LEVELS {
        let skip_v = (l >= 4).then(|| vis_levels[5 - l]);
        let skip_g = (l >= 4).then(|| geo_levels[5 - l]);
        vis = visual_forward_stage(tape, weights, net, l, &vis, skip_v.as_ref())?;
        geo = geometric_forward_stage(tape, weights, net, &frame.pyramid, l, geo, skip_g)?;
        if config.fusion.at_level(l) {
            let res = net.level(l).resolution();
            let v2g = FusionBlock::from_bundle(tape, weights, l, "v2g", slope);
            let g2v = FusionBlock::from_bundle(tape, weights, l, "g2v", slope);
            let (g, v) = bidirectional_fuse_stage(tape, geo, vis.feats, &frame.gathers[res], &v2g, &g2v)?;
            geo = g;
            vis.feats = v;
        }
        vis_levels.push(vis);
        geo_levels.push(geo);
    }
    let geometric = to_full_resolution(tape, &frame.pyramid, geo);
    let visual = vis.feats;
    let features = if config.fusion.concat {
        let map = weights.var(tape, "fusion.final.map.weight");
        fuse_final(tape, geometric, visual, frame.source_rows.clone(), map)?
    } else {
        let v = tape.gather_rows(visual, frame.source_rows.clone());
        tape.concat(geometric, v)
    };
    tape.check_finite(features, "matching features")?;
    Ok(FrameFeatures { features, geometric, visual })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(n: usize) -> (ColorImage, DepthImage, CameraIntrinsics) {
        let intr = CameraIntrinsics::default_for(n, n);
        let mut depth = DepthImage::zeros(n, n);
        let mut color = ColorImage::black(n, n);
        for v in 0..n {
            for u in 0..n {
                if (u + v) % 7 != 0 {
                    depth.set(u, v, 1.0 + 0.02 * u as f64 + 0.01 * v as f64);
                }
                color.set(u, v, [u as f64 / n as f64, v as f64 / n as f64, ((u * v) % 5) as f64 / 5.0]);
            }
        }
        (color, depth, intr)
    }

    fn run(weights: &WeightsBundle, config: &PipelineConfig, prep: &FramePrep) -> (Tape, FrameFeatures) {
        let mut tape = Tape::new();
        let f = extract_features(&mut tape, weights, config, prep).unwrap();
        (tape, f)
    }

    #[test]
    fn every_toggle_combination_is_finite() {
        let (c, d, i) = frame(24);
        let w = WeightsBundle::init(&NetworkConfig::default(), 1);
        for mask in 0..8 {
            let config = PipelineConfig {
                fusion: FusionToggles { encode: mask & 1 != 0, decode: mask & 2 != 0, concat: mask & 4 != 0 },
                ..PipelineConfig::default()
            };
            let prep = FramePrep::new(&c, &d, &i, &config).unwrap();
            let (tape, f) = run(&w, &config, &prep);
            let t = tape.value(f.features);
            assert_eq!(t.rows, prep.num_keypoints());
            assert_eq!(t.cols, if config.fusion.concat { 32 } else { 64 });
            assert!(t.is_finite());
        }
    }

    #[test]
    fn zero_fusion_weights_equal_no_fusion() {
        let (c, d, i) = frame(20);
        let mut w = WeightsBundle::init(&NetworkConfig::default(), 2);
        for l in 0..6 {
            w.zero_prefix(&format!("fusion.l{l}."));
        }
        let on = PipelineConfig::default();
        let off = PipelineConfig {
            fusion: FusionToggles { encode: false, decode: false, concat: true },
            ..PipelineConfig::default()
        };
        let prep = FramePrep::new(&c, &d, &i, &on).unwrap();
        let (ta, a) = run(&w, &on, &prep);
        let (tb, b) = run(&w, &off, &prep);
        assert_eq!(ta.value(a.geometric).data, tb.value(b.geometric).data);
        assert_eq!(ta.value(a.visual).data, tb.value(b.visual).data);
        assert_eq!(ta.value(a.features).data, tb.value(b.features).data);
    }
}
