//! Visual branch: a small strided CNN encoder and a nearest-upsampling decoder.

use std::sync::Arc;

use super::config::NetworkConfig;
use super::weights::WeightsBundle;
use crate::error::{Error, Result};
use crate::rgbd::ColorImage;
use crate::tape::{ConvGeom, Tape, Tensor, Var};

/// A per-pixel feature grid on the tape, `(h*w) × channels`, row-major.
#[derive(Debug, Clone, Copy)]
pub struct VisualMap {
    pub feats: Var,
    pub h: usize,
    pub w: usize,
}

impl VisualMap {
    pub fn channels(&self, tape: &Tape) -> usize {
        tape.value(self.feats).cols
    }
}

/// Image as an `(h*w) × 3` tensor.
pub fn image_tensor(color: &ColorImage) -> Tensor {
    let data = color.data().iter().flat_map(|c| c.iter().copied()).collect();
    Tensor::new(color.height() * color.width(), 3, data)
}

/// For every fine pixel, the coarse pixel covering it under 2x nearest upsampling.
pub fn upsample_index(fine_h: usize, fine_w: usize, coarse_h: usize, coarse_w: usize) -> Arc<Vec<Option<usize>>> {
    let mut idx = Vec::with_capacity(fine_h * fine_w);
    for y in 0..fine_h {
        for x in 0..fine_w {
            let (cy, cx) = ((y / 2).min(coarse_h - 1), (x / 2).min(coarse_w - 1));
            idx.push(Some(cy * coarse_w + cx));
        }
    }
    Arc::new(idx)
}

fn check_channels(tape: &Tape, map: &VisualMap, expected: usize, what: &str) -> Result<()> {
    let t = tape.value(map.feats);
    if t.rows != map.h * map.w {
        return Err(Error::Config(format!("{what}: {} rows for a {}x{} grid", t.rows, map.h, map.w)));
    }
    if t.cols != expected {
        return Err(Error::Config(format!("{what}: expected {expected} channels, got {}", t.cols)));
    }
    Ok(())
}

/// One stage of the visual branch.
///
/// Encoder levels (0..3) take the previous level's map (the image for level 0)
/// and apply two 3x3 convolutions, the first with the level's stride. Decoder
/// levels take the previous decoder map and the encoder skip at the target
/// resolution (none at level 3, which sits at the bottleneck), upsample 2x,
/// concatenate and apply a 1x1 block. The last level is the linear output head.
pub fn visual_forward_stage(
    tape: &mut Tape,
    weights: &WeightsBundle,
    config: &NetworkConfig,
    level: usize,
    input: &VisualMap,
    skip: Option<&VisualMap>,
) -> Result<VisualMap> {
    let slope = config.leaky_slope;
    if level < 3 {
        let c_in = if level == 0 { 3 } else { config.dim(level - 1) };
        check_channels(tape, input, c_in, &format!("visual level {level} input"))?;
        let stride = if level == 0 { 1 } else { 2 };
        let mut map = *input;
        for (i, s) in [(1, stride), (2, 1)] {
            let geom = ConvGeom { in_h: map.h, in_w: map.w, stride: s };
            let w = weights.var(tape, &format!("visual.enc{level}.conv{i}.weight"));
            let b = weights.var(tape, &format!("visual.enc{level}.conv{i}.bias"));
            let y = tape.conv3x3(map.feats, w, b, geom);
            map = VisualMap { feats: tape.leaky_relu(y, slope), h: geom.out_h(), w: geom.out_w() };
        }
        return Ok(map);
    }
    if level >= 6 {
        return Err(Error::Config(format!("no visual level {level}")));
    }
    check_channels(tape, input, config.dim(level - 1), &format!("visual level {level} input"))?;
    let x = match (level, skip) {
        (3, _) => *input,
        (_, Some(skip)) => {
            check_channels(tape, skip, config.dim(5 - level), &format!("visual level {level} skip"))?;
            if input.h != skip.h.div_ceil(2) || input.w != skip.w.div_ceil(2) {
                return Err(Error::Config(format!("visual level {level}: skip grid does not match 2x upsampling")));
            }
            let up = tape.gather_rows(input.feats, upsample_index(skip.h, skip.w, input.h, input.w));
            VisualMap { feats: tape.concat(up, skip.feats), h: skip.h, w: skip.w }
        }
        (_, None) => return Err(Error::Config(format!("visual level {level} needs a skip input"))),
    };
    let w = weights.var(tape, &format!("visual.dec{level}.linear.weight"));
    let b = weights.var(tape, &format!("visual.dec{level}.linear.bias"));
    let mut y = tape.linear(x.feats, w, Some(b));
    if level < 5 {
        y = tape.leaky_relu(y, slope);
    }
    Ok(VisualMap { feats: y, h: x.h, w: x.w })
}
