//! Bidirectional cross-modal fusion: max aggregation of gathered features,
//! residual injection, and the final undirected fusion.

use std::sync::Arc;

use crate::backbone::WeightsBundle;
use crate::error::{Error, Result};
use crate::gather::GatherResult;
use crate::tape::{Tape, Var};

/// Two linear layers with a leaky rectifier in between.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub slope: f64,
}

impl Mlp {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let h = tape.linear(x, self.w1, Some(self.b1));
        let h = tape.leaky_relu(h, self.slope);
        tape.linear(h, self.w2, Some(self.b2))
    }
}

/// Weights of one (level, direction) fusion block on a tape.
#[derive(Debug, Clone, Copy)]
pub struct FusionBlock {
    pub mlp: Mlp,
    /// `2d × d`, applied to `aggregated ⊕ query`.
    pub map: Var,
}

impl FusionBlock {
    /// `dir` is `"v2g"` or `"g2v"`.
    pub fn from_bundle(tape: &mut Tape, weights: &WeightsBundle, level: usize, dir: &str, slope: f64) -> Self {
        let p = format!("fusion.l{level}.{dir}");
        let mut v = |s: &str| weights.var(tape, &format!("{p}.{s}"));
        FusionBlock {
            mlp: Mlp { w1: v("mlp1.weight"), b1: v("mlp1.bias"), w2: v("mlp2.weight"), b2: v("mlp2.bias"), slope },
            map: v("map.weight"),
        }
    }
}

/// Max over each query's `k` slots of `mlp(slot feature)`, pads reading the
/// zero feature. Queries whose slots are all pads get the zero vector.
pub fn aggregate(tape: &mut Tape, features: Var, gather: &GatherResult, mlp: &Mlp) -> Var {
    let g = tape.gather_rows(features, gather.slots.clone());
    let h = mlp.apply(tape, g);
    let m = tape.segment_max(h, gather.offsets());
    tape.row_scale(m, gather.query_mask())
}

/// `F_q + W(F_agg ⊕ F_q)` per row, leaving rows with `mask = 0` unchanged.
pub fn fuse_residual(tape: &mut Tape, query: Var, aggregated: Var, map: Var, mask: Arc<Vec<f64>>) -> Result<Var> {
    let (q, a, w) = (tape.value(query).shape(), tape.value(aggregated).shape(), tape.value(map).shape());
    if q != a || w != (2 * q.1, q.1) || mask.len() != q.0 {
        return Err(Error::Config(format!(
            "fusion shapes: query {q:?}, aggregated {a:?}, map {w:?}, mask {}",
            mask.len()
        )));
    }
    let cat = tape.concat(aggregated, query);
    let r = tape.linear(cat, map, None);
    let r = tape.row_scale(r, mask);
    Ok(tape.add(query, r))
}

/// `W_final(F_g ⊕ F_v[pixel])` for every point, reading the visual feature at
/// the point's source pixel row.
pub fn fuse_final(
    tape: &mut Tape,
    geometric: Var,
    visual: Var,
    source_rows: Arc<Vec<Option<usize>>>,
    map: Var,
) -> Result<Var> {
    let n = tape.value(geometric).rows;
    if source_rows.len() != n || source_rows.iter().any(|r| r.is_none()) {
        return Err(Error::InvalidInput("every point needs a source pixel".into()));
    }
    let v = tape.gather_rows(visual, source_rows);
    let cat = tape.concat(geometric, v);
    if tape.value(map).rows != tape.value(cat).cols {
        return Err(Error::Config(format!(
            "final fusion map expects {} inputs, features have {}",
            tape.value(map).rows,
            tape.value(cat).cols
        )));
    }
    Ok(tape.linear(cat, map, None))
}

/// Gathers linking one level's points and pixel grid.
#[derive(Debug, Clone)]
pub struct LevelGathers {
    /// Point queries into visual grid rows.
    pub v2g: GatherResult,
    /// Grid cell queries into point rows.
    pub g2v: GatherResult,
}

/// Fuses both directions from the same pre-fusion features and returns the
/// replacements `(F_g, F_v)`.
pub fn bidirectional_fuse_stage(
    tape: &mut Tape,
    geometric: Var,
    visual: Var,
    gathers: &LevelGathers,
    v2g: &FusionBlock,
    g2v: &FusionBlock,
) -> Result<(Var, Var)> {
    let agg_g = aggregate(tape, visual, &gathers.v2g, &v2g.mlp);
    let agg_v = aggregate(tape, geometric, &gathers.g2v, &g2v.mlp);
    let g = fuse_residual(tape, geometric, agg_g, v2g.map, gathers.v2g.query_mask())?;
    let v = fuse_residual(tape, visual, agg_v, g2v.map, gathers.g2v.query_mask())?;
    Ok((g, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tensor;

    fn eye(d: usize) -> Tensor {
        let mut t = Tensor::zeros(d, d);
        for i in 0..d {
            t.data[i * d + i] = 1.0;
        }
        t
    }

    /// Identity on non-negative inputs: `I · leaky(I · x)`.
    fn identity_mlp(tape: &mut Tape, d: usize) -> Mlp {
        Mlp {
            w1: tape.constant(eye(d)),
            b1: tape.constant(Tensor::zeros(1, d)),
            w2: tape.constant(eye(d)),
            b2: tape.constant(Tensor::zeros(1, d)),
            slope: 0.1,
        }
    }

    fn gather(k: usize, slots: Vec<Option<usize>>) -> GatherResult {
        let distances = slots.iter().map(|s| if s.is_some() { 0.0 } else { f64::INFINITY }).collect();
        GatherResult { k, slots: Arc::new(slots), distances }
    }

    #[test]
    fn aggregate_examples() {
        let mut tape = Tape::new();
        let m = identity_mlp(&mut tape, 2);
        let f = tape.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 2.0]]));
        let one = aggregate(&mut tape, f, &gather(1, vec![Some(0)]), &m);
        assert_eq!(tape.value(one).data, vec![1.0, 0.0]);
        let same = aggregate(&mut tape, f, &gather(3, vec![Some(1); 3]), &m);
        assert_eq!(tape.value(same).data, vec![0.0, 2.0]);
        let both = aggregate(&mut tape, f, &gather(2, vec![Some(0), Some(1)]), &m);
        assert_eq!(tape.value(both).data, vec![1.0, 2.0]);
        let pads = aggregate(&mut tape, f, &gather(2, vec![None, None]), &m);
        assert_eq!(tape.value(pads).data, vec![0.0, 0.0]);
    }

    #[test]
    fn residual_examples() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[[1.0, 0.0]]));
        let a = tape.constant(Tensor::from_rows(&[[0.0, 1.0]]));
        // maps the aggregated half through the identity, ignores the query half
        let w = tape.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]]));
        let out = fuse_residual(&mut tape, q, a, w, Arc::new(vec![1.0])).unwrap();
        assert_eq!(tape.value(out).data, vec![1.0, 1.0]);
        let out = fuse_residual(&mut tape, q, a, w, Arc::new(vec![0.0])).unwrap();
        assert_eq!(tape.value(out).data, vec![1.0, 0.0]);
        let z = tape.constant(Tensor::zeros(4, 2));
        let out = fuse_residual(&mut tape, q, a, z, Arc::new(vec![1.0])).unwrap();
        assert_eq!(tape.value(out).data, vec![1.0, 0.0]);
        let bad = tape.constant(Tensor::zeros(3, 2));
        assert!(matches!(fuse_residual(&mut tape, q, a, bad, Arc::new(vec![1.0])), Err(Error::Config(_))));
    }

    #[test]
    fn final_fusion_projection_and_zero() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let v = tape.constant(Tensor::from_rows(&[[5.0, 6.0], [7.0, 8.0], [9.0, 10.0]]));
        let rows = Arc::new(vec![Some(2), Some(0)]);
        let first = tape.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]]));
        let out = fuse_final(&mut tape, g, v, rows.clone(), first).unwrap();
        assert_eq!(tape.value(out).data, tape.value(g).data);
        let second = tape.constant(Tensor::from_rows(&[[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]));
        let out = fuse_final(&mut tape, g, v, rows.clone(), second).unwrap();
        assert_eq!(tape.value(out).data, vec![9.0, 10.0, 5.0, 6.0]);
        let zero = tape.constant(Tensor::zeros(4, 2));
        let out = fuse_final(&mut tape, g, v, rows, zero).unwrap();
        assert_eq!(tape.value(out).max_abs(), 0.0);
        assert!(fuse_final(&mut tape, g, v, Arc::new(vec![Some(0), None]), first).is_err());
    }
}
