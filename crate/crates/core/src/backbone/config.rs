use serde::{Deserialize, Serialize};

use super::weights::ParamSpec;
use crate::error::{Error, Result};

/// Number of backbone stages: three encoder levels then three decoder levels.
pub const NUM_LEVELS: usize = 6;

/// One stage of the U-shaped backbones. Decoder level `l` mirrors encoder
/// level `5 - l`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleLevel {
    pub index: usize,
    /// Visual downsampling factor, `2^min(l, 5-l)`.
    pub stride: usize,
    /// Geometric grid size in meters, doubling per encoder level.
    pub voxel: f64,
}

impl ScaleLevel {
    pub fn is_encoder(&self) -> bool {
        self.index < 3
    }

    /// Encoder level sharing this level's resolution.
    pub fn resolution(&self) -> usize {
        self.index.min(NUM_LEVELS - 1 - self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub base_voxel: f64,
    /// Neighborhood radius as a multiple of the level's voxel size.
    pub radius_factor: f64,
    pub encoder_channels: [usize; 3],
    pub decoder_channels: [usize; 3],
    pub geometric_input_dim: usize,
    pub leaky_slope: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            base_voxel: 0.025,
            radius_factor: 2.5,
            encoder_channels: [16, 32, 64],
            decoder_channels: [64, 32, 32],
            geometric_input_dim: 1,
            leaky_slope: 0.1,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_voxel > 0.0) || !(self.radius_factor > 0.0) {
            return Err(Error::Config("voxel size and radius factor must be positive".into()));
        }
        if self.encoder_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0) || self.geometric_input_dim == 0
        {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.decoder_channels[0] != self.encoder_channels[2] {
            return Err(Error::Config("first decoder level must keep the bottleneck width".into()));
        }
        Ok(())
    }

    pub fn level(&self, index: usize) -> ScaleLevel {
        assert!(index < NUM_LEVELS);
        let res = index.min(NUM_LEVELS - 1 - index);
        ScaleLevel { index, stride: 1 << res, voxel: self.base_voxel * (1 << res) as f64 }
    }

    pub fn levels(&self) -> impl Iterator<Item = ScaleLevel> + '_ {
        (0..NUM_LEVELS).map(|l| self.level(l))
    }

    /// Feature width `d^l` at a level.
    pub fn dim(&self, level: usize) -> usize {
        if level < 3 {
            self.encoder_channels[level]
        } else {
            self.decoder_channels[level - 3]
        }
    }

    pub fn output_dim(&self) -> usize {
        self.decoder_channels[2]
    }

    pub fn radius(&self, level: usize) -> f64 {
        self.radius_factor * self.level(level).voxel
    }

    /// Input width of decoder level `l`: the upsampled previous level plus the
    /// encoder skip (level 3 sits at the bottleneck and has no skip).
    pub fn decoder_in(&self, level: usize) -> usize {
        match level {
            3 => self.dim(2),
            4 => self.dim(3) + self.dim(1),
            5 => self.dim(4) + self.dim(0),
            _ => panic!("level {level} is not a decoder level"),
        }
    }

    /// Every parameter tensor, in a fixed order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        fn dense(specs: &mut Vec<ParamSpec>, name: String, fan_in: usize, out: usize, bias: bool) {
            specs.push(ParamSpec { name: format!("{name}.weight"), shape: vec![fan_in, out], fan_in });
            if bias {
                specs.push(ParamSpec { name: format!("{name}.bias"), shape: vec![out], fan_in });
            }
        }
        let mut specs = Vec::new();
        let mut c_in = 3;
        for l in 0..3 {
            let c = self.dim(l);
            dense(&mut specs, format!("visual.enc{l}.conv1"), 9 * c_in, c, true);
            dense(&mut specs, format!("visual.enc{l}.conv2"), 9 * c, c, true);
            c_in = c;
        }
        for l in 3..NUM_LEVELS {
            dense(&mut specs, format!("visual.dec{l}.linear"), self.decoder_in(l), self.dim(l), true);
        }
        let mut g_in = self.geometric_input_dim;
        for l in 0..3 {
            // One linear layer on (offset ⊕ feature), stored as its two row
            // blocks; both use the fan-in of the concatenated input.
            let (d, fan_in) = (self.dim(l), 3 + g_in);
            for (part, rows) in [("offset", 3), ("feat", g_in)] {
                specs.push(ParamSpec { name: format!("geometric.enc{l}.{part}.weight"), shape: vec![rows, d], fan_in });
            }
            specs.push(ParamSpec { name: format!("geometric.enc{l}.bias"), shape: vec![d], fan_in });
            g_in = d;
        }
        for l in 3..NUM_LEVELS {
            dense(&mut specs, format!("geometric.dec{l}.mlp"), self.decoder_in(l), self.dim(l), true);
        }
        for l in 0..NUM_LEVELS {
            let d = self.dim(l);
            for dir in ["v2g", "g2v"] {
                dense(&mut specs, format!("fusion.l{l}.{dir}.mlp1"), d, d, true);
                dense(&mut specs, format!("fusion.l{l}.{dir}.mlp2"), d, d, true);
                dense(&mut specs, format!("fusion.l{l}.{dir}.map"), 2 * d, d, false);
            }
        }
        let out = self.output_dim();
        dense(&mut specs, "fusion.final.map".to_string(), 2 * out, out, false);
        specs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stride_and_voxel_schedule() {
        let c = NetworkConfig::default();
        let strides: Vec<_> = c.levels().map(|l| l.stride).collect();
        assert_eq!(strides, vec![1, 2, 4, 4, 2, 1]);
        assert_eq!(c.level(0).voxel, 0.025);
        assert_eq!(c.level(1).voxel, 0.05);
        assert_eq!(c.level(2).voxel, 0.1);
        assert_eq!(c.level(5).voxel, 0.025);
        assert!((c.radius(1) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn spec_names_are_unique() {
        let specs = NetworkConfig::default().param_specs();
        let names: std::collections::BTreeSet<_> = specs.iter().map(|s| &s.name).collect();
        assert_eq!(names.len(), specs.len());
        assert!(names.contains(&"fusion.final.map.weight".to_string()));
    }
}
