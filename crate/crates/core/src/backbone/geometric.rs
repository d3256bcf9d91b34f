//! Geometric branch: radius point convolutions with density normalization,
//! grid-subsampling max pools, and a nearest-parent decoder.

use std::sync::Arc;

use nalgebra::Vector3;

use super::config::NetworkConfig;
use super::subsample::{grid_subsample, Subsampled};
use super::weights::WeightsBundle;
use crate::error::{Error, Result};
use crate::spatial::HashGrid;
use crate::tape::{EdgeList, Tape, Tensor, Var};

/// Radius neighborhoods of every point in `points` among `points` itself,
/// neighbors in ascending index order. A point without neighbors gets a single
/// self edge with zero offset.
pub fn radius_edges(points: &[Vector3<f64>], radius: f64) -> EdgeList {
    let mut edges = EdgeList { offsets: Vec::with_capacity(points.len() + 1), ..Default::default() };
    edges.offsets.push(0);
    if points.is_empty() {
        return edges;
    }
    let grid = HashGrid::new(points, radius);
    let mut nbrs = Vec::new();
    for (qi, q) in points.iter().enumerate() {
        nbrs.clear();
        grid.for_each_within(q, radius, |_, i| nbrs.push(i));
        nbrs.sort_unstable();
        if nbrs.is_empty() {
            nbrs.push(qi);
        }
        for &s in &nbrs {
            let d = points[s] - q;
            edges.support.push(s);
            edges.rel.push([d.x, d.y, d.z]);
        }
        edges.offsets.push(edges.support.len());
    }
    edges
}

/// Point sets and fixed index structures of the geometric branch for one cloud.
///
/// `levels[l]` holds the level-`l` points, subsampled from the level below
/// (the full-resolution cloud for level 0) with that level's voxel.
#[derive(Debug, Clone)]
pub struct GeometricPyramid {
    pub full: Vec<Vector3<f64>>,
    pub levels: Vec<Subsampled>,
    conv_edges: Vec<Arc<EdgeList>>,
    pool_order: Vec<Arc<Vec<Option<usize>>>>,
    pool_offsets: Vec<Arc<Vec<usize>>>,
    parent_index: Vec<Arc<Vec<Option<usize>>>>,
}

impl GeometricPyramid {
    pub fn build(full: Vec<Vector3<f64>>, config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut pyr = GeometricPyramid {
            full,
            levels: Vec::with_capacity(3),
            conv_edges: Vec::with_capacity(3),
            pool_order: Vec::with_capacity(3),
            pool_offsets: Vec::with_capacity(3),
            parent_index: Vec::with_capacity(3),
        };
        for l in 0..3 {
            let fine = if l == 0 { &pyr.full } else { &pyr.levels[l - 1].points };
            let edges = radius_edges(fine, config.radius(l));
            let sub = grid_subsample(fine, config.level(l).voxel)?;
            let (order, offsets) = sub.children();
            pyr.conv_edges.push(Arc::new(edges));
            pyr.pool_order.push(Arc::new(order.into_iter().map(Some).collect()));
            pyr.pool_offsets.push(Arc::new(offsets));
            pyr.parent_index.push(Arc::new(sub.parent.iter().map(|&p| Some(p)).collect()));
            pyr.levels.push(sub);
        }
        Ok(pyr)
    }

    /// Points at a resolution: 0, 1, 2 are the pooled levels.
    pub fn points(&self, resolution: usize) -> &[Vector3<f64>] {
        &self.levels[resolution].points
    }

    /// Points a level's encoder convolution runs on.
    fn conv_points(&self, level: usize) -> usize {
        if level == 0 {
            self.full.len()
        } else {
            self.levels[level - 1].points.len()
        }
    }

    pub fn edges(&self, level: usize) -> &Arc<EdgeList> {
        &self.conv_edges[level]
    }

    /// Constant `n × d` input features (all ones) for the full cloud.
    pub fn input_features(&self, config: &NetworkConfig) -> Tensor {
        Tensor::filled(self.full.len(), config.geometric_input_dim, 1.0)
    }
}

fn check_rows(tape: &Tape, v: Var, rows: usize, cols: usize, what: &str) -> Result<()> {
    let (r, c) = tape.value(v).shape();
    if (r, c) != (rows, cols) {
        return Err(Error::Config(format!("{what}: expected {rows}x{cols}, got {r}x{c}")));
    }
    Ok(())
}

/// Density-normalized encoder convolution of `level` before pooling: for
/// every point, the mean over its radius neighbors of one leaky linear layer
/// applied to (neighbor offset ⊕ neighbor feature).
pub fn encoder_conv(
    tape: &mut Tape,
    weights: &WeightsBundle,
    config: &NetworkConfig,
    edges: Arc<EdgeList>,
    level: usize,
    input: Var,
) -> Var {
    let wf = weights.var(tape, &format!("geometric.enc{level}.feat.weight"));
    let wo = weights.var(tape, &format!("geometric.enc{level}.offset.weight"));
    let b = weights.var(tape, &format!("geometric.enc{level}.bias"));
    let h = tape.linear(input, wf, None);
    tape.point_conv(h, wo, b, edges, config.leaky_slope)
}

/// One stage of the geometric branch, mirroring the visual one. Encoder levels
/// convolve on the previous level's points and max-pool onto this level's
/// points. Decoder levels copy the previous decoder features to children via
/// the parent map, concatenate the encoder skip and apply one linear layer
/// (leaky except at the output level).
pub fn geometric_forward_stage(
    tape: &mut Tape,
    weights: &WeightsBundle,
    config: &NetworkConfig,
    pyramid: &GeometricPyramid,
    level: usize,
    input: Var,
    skip: Option<Var>,
) -> Result<Var> {
    if level < 3 {
        let c_in = if level == 0 { config.geometric_input_dim } else { config.dim(level - 1) };
        check_rows(tape, input, pyramid.conv_points(level), c_in, &format!("geometric level {level} input"))?;
        let conv = encoder_conv(tape, weights, config, pyramid.conv_edges[level].clone(), level, input);
        let grouped = tape.gather_rows(conv, pyramid.pool_order[level].clone());
        return Ok(tape.segment_max(grouped, pyramid.pool_offsets[level].clone()));
    }
    if level >= 6 {
        return Err(Error::Config(format!("no geometric level {level}")));
    }
    let res = 5 - level;
    let in_res = (res + 1).min(2);
    check_rows(
        tape,
        input,
        pyramid.points(in_res).len(),
        config.dim(level - 1),
        &format!("geometric level {level} input"),
    )?;
    let x = if level == 3 {
        input
    } else {
        let skip = skip.ok_or_else(|| Error::Config(format!("geometric level {level} needs a skip input")))?;
        check_rows(tape, skip, pyramid.points(res).len(), config.dim(res), &format!("geometric level {level} skip"))?;
        let up = tape.gather_rows(input, pyramid.parent_index[res + 1].clone());
        tape.concat(up, skip)
    };
    let w = weights.var(tape, &format!("geometric.dec{level}.mlp.weight"));
    let b = weights.var(tape, &format!("geometric.dec{level}.mlp.bias"));
    let y = tape.linear(x, w, Some(b));
    Ok(if level < 5 { tape.leaky_relu(y, config.leaky_slope) } else { y })
}

/// Copies level-0 features to every full-resolution point.
pub fn to_full_resolution(tape: &mut Tape, pyramid: &GeometricPyramid, level0: Var) -> Var {
    tape.gather_rows(level0, pyramid.parent_index[0].clone())
}
