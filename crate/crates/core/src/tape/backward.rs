use std::collections::BTreeMap;

use super::pointconv::point_conv_backward;
use super::splat::splat_backward;
use super::{Op, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::grad::GradientMap;

/// Gradients of one scalar w.r.t. every gradient-carrying leaf of a tape.
pub struct Gradients {
    tape_id: u64,
    leaves: BTreeMap<usize, Tensor>,
    params: GradientMap,
}

impl Gradients {
    /// Gradient w.r.t. a leaf created with [`Tape::variable`] or [`Tape::param`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape_id {
            return None;
        }
        self.leaves.get(&v.index)
    }

    pub fn params(&self) -> &GradientMap {
        &self.params
    }

    pub fn into_params(self) -> GradientMap {
        self.params
    }
}

pub(super) fn run(tape: &Tape, loss: Var) -> Result<Gradients> {
    if !tape.owns(loss) {
        return Err(Error::Usage(
            "backward called with a node that is not on this tape (run the forward pass first)".into(),
        ));
    }
    let li = loss.index;
    if tape.nodes[li].value.shape() != (1, 1) {
        return Err(Error::Usage(format!("backward needs a scalar loss, got {:?}", tape.nodes[li].value.shape())));
    }
    let n = li + 1;
    let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
    grads[li] = Some(Tensor::scalar(1.0));
    let mut leaves = BTreeMap::new();
    let mut params = GradientMap::default();

    for i in (0..n).rev() {
        let Some(g) = grads[i].take() else { continue };
        let node = &tape.nodes[i];
        if !node.needs_grad {
            continue;
        }
        let val = |j: usize| &tape.nodes[j].value;
        let wants = |j: usize| tape.nodes[j].needs_grad;
        let send = |j: usize, t: Tensor, grads: &mut Vec<Option<Tensor>>| {
            if !tape.nodes[j].needs_grad {
                return;
            }
            match &mut grads[j] {
                Some(acc) => acc.data.iter_mut().zip(&t.data).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf { param } => {
                if let Some(name) = param {
                    params.accumulate(name, &g);
                }
                leaves.insert(i, g);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (rows, i_dim, o) = (xv.rows, xv.cols, wv.cols);
                if wants(*x) {
                    let mut gx = Tensor::zeros(rows, i_dim);
                    for r in 0..rows {
                        let grow = g.row(r);
                        for k in 0..i_dim {
                            let wrow = &wv.data[k * o..(k + 1) * o];
                            gx.data[r * i_dim + k] = dot(grow, wrow);
                        }
                    }
                    send(*x, gx, &mut grads);
                }
                if wants(*w) {
                    let mut gw = Tensor::zeros(i_dim, o);
                    for r in 0..rows {
                        let grow = g.row(r);
                        for (k, &a) in xv.row(r).iter().enumerate() {
                            if a == 0.0 {
                                continue;
                            }
                            axpy(&mut gw.data[k * o..(k + 1) * o], a, grow);
                        }
                    }
                    send(*w, gw, &mut grads);
                }
                if let Some(b) = b {
                    if wants(*b) {
                        send(*b, col_sums(&g), &mut grads);
                    }
                }
            }
            Op::Conv3x3 { x, w, b, geom } => {
                let (xv, wv) = (val(*x), val(*w));
                let c_in = xv.cols;
                let c_out = wv.cols;
                let (oh, ow) = (geom.out_h(), geom.out_w());
                let want_x = wants(*x);
                let want_w = wants(*w);
                let mut gx = Tensor::zeros(if want_x { xv.rows } else { 0 }, c_in);
                let mut gw = Tensor::zeros(if want_w { wv.rows } else { 0 }, c_out);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let grow = g.row(oy * ow + ox);
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let Some(src) = geom.tap(oy, ox, ky, kx) else { continue };
                                let base = (ky * 3 + kx) * c_in;
                                for ci in 0..c_in {
                                    let wrow = &wv.data[(base + ci) * c_out..(base + ci + 1) * c_out];
                                    if want_x {
                                        gx.data[src * c_in + ci] += dot(grow, wrow);
                                    }
                                    if want_w {
                                        let a = xv.data[src * c_in + ci];
                                        if a != 0.0 {
                                            axpy(&mut gw.data[(base + ci) * c_out..(base + ci + 1) * c_out], a, grow);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if want_x {
                    send(*x, gx, &mut grads);
                }
                if want_w {
                    send(*w, gw, &mut grads);
                }
                if wants(*b) {
                    send(*b, col_sums(&g), &mut grads);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = val(*x);
                let data = xv.data.iter().zip(&g.data).map(|(&v, &gi)| if v > 0.0 { gi } else { slope * gi }).collect();
                send(*x, Tensor::new(xv.rows, xv.cols, data), &mut grads);
            }
            Op::Concat { a, b } => {
                let ca = val(*a).cols;
                let cb = val(*b).cols;
                let rows = g.rows;
                if wants(*a) {
                    let mut ga = Tensor::zeros(rows, ca);
                    for r in 0..rows {
                        ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    }
                    send(*a, ga, &mut grads);
                }
                if wants(*b) {
                    let mut gb = Tensor::zeros(rows, cb);
                    for r in 0..rows {
                        gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                    }
                    send(*b, gb, &mut grads);
                }
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let mut gx = Tensor::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    gx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                send(*x, gx, &mut grads);
            }
            Op::GatherRows { x, index } => {
                let xv = val(*x);
                let mut gx = Tensor::zeros(xv.rows, xv.cols);
                for (r, src) in index.iter().enumerate() {
                    if let Some(s) = *src {
                        axpy(gx.row_mut(s), 1.0, g.row(r));
                    }
                }
                send(*x, gx, &mut grads);
            }
            Op::SegmentMax { x, argmax, .. } => {
                let xv = val(*x);
                let c = xv.cols;
                let mut gx = Tensor::zeros(xv.rows, c);
                for (k, &src) in argmax.iter().enumerate() {
                    gx.data[src * c + k % c] += g.data[k];
                }
                send(*x, gx, &mut grads);
            }
            Op::SegmentMean { x, offsets } => {
                let xv = val(*x);
                let c = xv.cols;
                let mut gx = Tensor::zeros(xv.rows, c);
                for s in 0..offsets.len() - 1 {
                    let (lo, hi) = (offsets[s], offsets[s + 1]);
                    if hi == lo {
                        continue;
                    }
                    let inv = 1.0 / (hi - lo) as f64;
                    for r in lo..hi {
                        axpy(gx.row_mut(r), inv, g.row(s));
                    }
                }
                send(*x, gx, &mut grads);
            }
            Op::RowScale { x, factors } => {
                let mut gx = g.clone();
                for (r, f) in factors.iter().enumerate() {
                    gx.row_mut(r).iter_mut().for_each(|v| *v *= f);
                }
                send(*x, gx, &mut grads);
            }
            Op::Add { a, b } => {
                send(*a, g.clone(), &mut grads);
                send(*b, g, &mut grads);
            }
            Op::Sub { a, b } => {
                send(*a, g.clone(), &mut grads);
                send(*b, map(&g, |v| -v), &mut grads);
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                send(*a, zip(&g, bv, |gi, y| gi * y), &mut grads);
                send(*b, zip(&g, av, |gi, x| gi * x), &mut grads);
            }
            Op::Div { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                send(*a, zip(&g, bv, |gi, y| gi / y), &mut grads);
                if wants(*b) {
                    let data =
                        g.data.iter().zip(&av.data).zip(&bv.data).map(|((&gi, &x), &y)| -gi * x / (y * y)).collect();
                    send(*b, Tensor::new(g.rows, g.cols, data), &mut grads);
                }
            }
            Op::Affine { x, scale } => send(*x, map(&g, |v| v * scale), &mut grads),
            Op::Sqrt { x } => {
                let out = &node.value;
                send(*x, zip(&g, out, |gi, s| if s > 0.0 { gi * 0.5 / s } else { 0.0 }), &mut grads);
            }
            Op::Exp { x } => send(*x, zip(&g, &node.value, |gi, e| gi * e), &mut grads),
            Op::Square { x } => send(*x, zip(&g, val(*x), |gi, v| 2.0 * gi * v), &mut grads),
            Op::Abs { x } => send(
                *x,
                zip(&g, val(*x), |gi, v| {
                    if v > 0.0 {
                        gi
                    } else if v < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                }),
                &mut grads,
            ),
            Op::SumRows { x } => {
                let xv = val(*x);
                let mut gx = Tensor::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    gx.row_mut(r).iter_mut().for_each(|v| *v = g.data[r]);
                }
                send(*x, gx, &mut grads);
            }
            Op::Sum { x } => {
                let xv = val(*x);
                send(*x, Tensor::filled(xv.rows, xv.cols, g.data[0]), &mut grads);
            }
            Op::Splat { pos, attr, cfg } => {
                let (gp, ga) = splat_backward(cfg, val(*pos), val(*attr), &g);
                send(*pos, gp, &mut grads);
                send(*attr, ga, &mut grads);
            }
            Op::PointConv { h, w, b, edges, slope } => {
                let (gh, gw, gb) = point_conv_backward(val(*h), val(*w), val(*b), edges, *slope, &g);
                send(*h, gh, &mut grads);
                send(*w, gw, &mut grads);
                send(*b, gb, &mut grads);
            }
            Op::Normalize { acc } => {
                let av = val(*acc);
                let c = av.cols - 1;
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for r in 0..av.rows {
                    let row = av.row(r);
                    let den = row[c];
                    if den <= 0.0 {
                        continue;
                    }
                    let grow = g.row(r);
                    let mut gden = 0.0;
                    for j in 0..c {
                        ga.data[r * av.cols + j] = grow[j] / den;
                        gden -= grow[j] * row[j] / (den * den);
                    }
                    ga.data[r * av.cols + c] = gden;
                }
                send(*acc, ga, &mut grads);
            }
        }
    }

    Ok(Gradients { tape_id: loss.tape, leaves, params })
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn col_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols);
    for r in 0..g.rows {
        axpy(&mut out.data, 1.0, g.row(r));
    }
    out
}

fn map(g: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(g.rows, g.cols, g.data.iter().map(|&v| f(v)).collect())
}

fn zip(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(g.rows, g.cols, g.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect())
}
