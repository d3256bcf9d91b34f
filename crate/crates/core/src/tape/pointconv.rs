//! Density-normalized point convolution:
//! `out[q] = mean over edges e of q of leaky(h[support_e] + rel_e · W + b)`.
//!
//! `h` is the neighbor feature already multiplied by its weight block, so the
//! per-edge work is only the offset term; nothing per-edge is stored.

use std::sync::Arc;

use super::{Op, Tape, Tensor, Var};

/// Query → neighbor edges in CSR form.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EdgeList {
    /// `offsets[q]..offsets[q+1]` are the edges of query `q`.
    pub offsets: Vec<usize>,
    pub support: Vec<usize>,
    /// Neighbor position minus query position.
    pub rel: Vec<[f64; 3]>,
}

impl EdgeList {
    pub fn num_queries(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn num_edges(&self) -> usize {
        self.support.len()
    }

    pub fn degree(&self, q: usize) -> usize {
        self.offsets[q + 1] - self.offsets[q]
    }
}

#[inline]
fn pre_activation(hrow: &[f64], rel: &[f64; 3], w: &Tensor, b: &[f64], out: &mut [f64]) {
    let d = out.len();
    for j in 0..d {
        out[j] = hrow[j] + b[j] + rel[0] * w.data[j] + rel[1] * w.data[d + j] + rel[2] * w.data[2 * d + j];
    }
}

impl Tape {
    pub fn point_conv(&mut self, h: Var, w_rel: Var, bias: Var, edges: Arc<EdgeList>, slope: f64) -> Var {
        let (hi, wi, bi) = (self.idx(h), self.idx(w_rel), self.idx(bias));
        let hv = &self.nodes[hi].value;
        let wv = &self.nodes[wi].value;
        let bv = &self.nodes[bi].value;
        let d = hv.cols;
        assert_eq!(wv.shape(), (3, d), "point_conv: offset weight must be 3×d");
        assert_eq!(bv.shape(), (1, d), "point_conv: bias must be 1×d");
        let q = edges.num_queries();
        let mut out = Tensor::zeros(q, d);
        let mut pre = vec![0.0; d];
        for qi in 0..q {
            let (lo, hi_e) = (edges.offsets[qi], edges.offsets[qi + 1]);
            if lo == hi_e {
                continue;
            }
            let inv = 1.0 / (hi_e - lo) as f64;
            let orow = &mut out.data[qi * d..(qi + 1) * d];
            for e in lo..hi_e {
                pre_activation(hv.row(edges.support[e]), &edges.rel[e], wv, &bv.data, &mut pre);
                for j in 0..d {
                    let p = pre[j];
                    orow[j] += if p > 0.0 { p } else { slope * p };
                }
            }
            orow.iter_mut().for_each(|v| *v *= inv);
        }
        let g = self.grad_of(&[hi, wi, bi]);
        self.push(out, Op::PointConv { h: hi, w: wi, b: bi, edges, slope }, g)
    }
}

/// Returns `(d h, d w_rel, d bias)`.
pub(crate) fn point_conv_backward(
    h: &Tensor,
    w: &Tensor,
    b: &Tensor,
    edges: &EdgeList,
    slope: f64,
    grad: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = h.cols;
    let mut gh = Tensor::zeros(h.rows, d);
    let mut gw = Tensor::zeros(3, d);
    let mut gb = Tensor::zeros(1, d);
    let mut pre = vec![0.0; d];
    for qi in 0..edges.num_queries() {
        let (lo, hi_e) = (edges.offsets[qi], edges.offsets[qi + 1]);
        if lo == hi_e {
            continue;
        }
        let inv = 1.0 / (hi_e - lo) as f64;
        let grow = grad.row(qi);
        for e in lo..hi_e {
            let s = edges.support[e];
            let rel = &edges.rel[e];
            pre_activation(h.row(s), rel, w, &b.data, &mut pre);
            for j in 0..d {
                let gp = grow[j] * inv * if pre[j] > 0.0 { 1.0 } else { slope };
                gh.data[s * d + j] += gp;
                gb.data[j] += gp;
                gw.data[j] += rel[0] * gp;
                gw.data[d + j] += rel[1] * gp;
                gw.data[2 * d + j] += rel[2] * gp;
            }
        }
    }
    (gh, gw, gb)
}

/// Appends the sign of every pre-activation, one entry per edge and channel.
pub(crate) fn point_conv_signs(h: &Tensor, w: &Tensor, b: &Tensor, edges: &EdgeList, out: &mut Vec<u64>) {
    let mut pre = vec![0.0; h.cols];
    for e in 0..edges.num_edges() {
        pre_activation(h.row(edges.support[e]), &edges.rel[e], w, &b.data, &mut pre);
        out.extend(pre.iter().map(|&v| u64::from(v > 0.0)));
    }
}

/// Smallest |pre-activation| over all edges.
pub(crate) fn point_conv_margin(h: &Tensor, w: &Tensor, b: &Tensor, edges: &EdgeList) -> f64 {
    let mut pre = vec![0.0; h.cols];
    let mut m = f64::INFINITY;
    for e in 0..edges.num_edges() {
        pre_activation(h.row(edges.support[e]), &edges.rel[e], w, &b.data, &mut pre);
        m = pre.iter().fold(m, |m, v| m.min(v.abs()));
    }
    m
}
