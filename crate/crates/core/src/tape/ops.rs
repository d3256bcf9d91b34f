//! Forward implementations. Each method computes its output eagerly and
//! records enough to run the matching backward rule.

use std::sync::Arc;

use super::{ConvGeom, Op, Tape, Tensor, Var};

impl Tape {
    /// `x · w + b`, with `x: n×i`, `w: i×o`, `b: 1×o`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xi, wi) = (self.idx(x), self.idx(w));
        let bi = b.map(|b| self.idx(b));
        let xv = &self.nodes[xi].value;
        let wv = &self.nodes[wi].value;
        assert_eq!(xv.cols, wv.rows, "linear: input has {} columns, weight expects {}", xv.cols, wv.rows);
        let (n, i_dim, o) = (xv.rows, xv.cols, wv.cols);
        let mut out = Tensor::zeros(n, o);
        if let Some(bi) = bi {
            let bv = &self.nodes[bi].value;
            assert_eq!(bv.shape(), (1, o), "linear: bias shape");
            for r in 0..n {
                out.row_mut(r).copy_from_slice(&bv.data);
            }
        }
        for r in 0..n {
            let xrow = &xv.data[r * i_dim..(r + 1) * i_dim];
            let orow = &mut out.data[r * o..(r + 1) * o];
            for (k, &a) in xrow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let wrow = &wv.data[k * o..(k + 1) * o];
                for (acc, &wv) in orow.iter_mut().zip(wrow) {
                    *acc += a * wv;
                }
            }
        }
        let mut ids = vec![xi, wi];
        ids.extend(bi);
        let g = self.grad_of(&ids);
        self.push(out, Op::Linear { x: xi, w: wi, b: bi }, g)
    }

    /// 3x3 convolution with zero padding. `x` is `(in_h*in_w) × c_in`, `w` is
    /// `(9*c_in) × c_out` with row index `(ky*3 + kx)*c_in + ci`, `b` is `1 × c_out`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let (xi, wi, bi) = (self.idx(x), self.idx(w), self.idx(b));
        let xv = &self.nodes[xi].value;
        let wv = &self.nodes[wi].value;
        let bv = &self.nodes[bi].value;
        let c_in = xv.cols;
        let c_out = wv.cols;
        assert_eq!(xv.rows, geom.in_h * geom.in_w, "conv3x3: input rows do not match geometry");
        assert_eq!(wv.rows, 9 * c_in, "conv3x3: weight rows must be 9 * c_in");
        assert_eq!(bv.shape(), (1, c_out), "conv3x3: bias shape");
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let mut out = Tensor::zeros(oh * ow, c_out);
        for oy in 0..oh {
            for ox in 0..ow {
                let orow = &mut out.data[(oy * ow + ox) * c_out..(oy * ow + ox + 1) * c_out];
                orow.copy_from_slice(&bv.data);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let Some(src) = geom.tap(oy, ox, ky, kx) else { continue };
                        let xrow = &xv.data[src * c_in..(src + 1) * c_in];
                        let base = (ky * 3 + kx) * c_in;
                        for (ci, &a) in xrow.iter().enumerate() {
                            if a == 0.0 {
                                continue;
                            }
                            let wrow = &wv.data[(base + ci) * c_out..(base + ci + 1) * c_out];
                            for (acc, &wv) in orow.iter_mut().zip(wrow) {
                                *acc += a * wv;
                            }
                        }
                    }
                }
            }
        }
        let g = self.grad_of(&[xi, wi, bi]);
        self.push(out, Op::Conv3x3 { x: xi, w: wi, b: bi, geom }, g)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let xi = self.idx(x);
        let data = self.nodes[xi].value.data.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        let (r, c) = self.nodes[xi].value.shape();
        let g = self.grad_of(&[xi]);
        self.push(Tensor::new(r, c, data), Op::LeakyRelu { x: xi, slope }, g)
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let av = &self.nodes[ai].value;
        let bv = &self.nodes[bi].value;
        assert_eq!(av.rows, bv.rows, "concat: row counts differ");
        let cols = av.cols + bv.cols;
        let mut data = Vec::with_capacity(av.rows * cols);
        for r in 0..av.rows {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let out = Tensor::new(av.rows, cols, data);
        let g = self.grad_of(&[ai, bi]);
        self.push(out, Op::Concat { a: ai, b: bi }, g)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        assert!(start < end && end <= xv.cols, "slice_cols: bad range");
        let mut data = Vec::with_capacity(xv.rows * (end - start));
        for r in 0..xv.rows {
            data.extend_from_slice(&xv.row(r)[start..end]);
        }
        let out = Tensor::new(xv.rows, end - start, data);
        let g = self.grad_of(&[xi]);
        self.push(out, Op::SliceCols { x: xi, start }, g)
    }

    /// Row `r` of the output is row `index[r]` of `x`, or zeros for `None`.
    /// Indices are constants.
    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<Option<usize>>>) -> Var {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        let c = xv.cols;
        let mut data = vec![0.0; index.len() * c];
        for (r, src) in index.iter().enumerate() {
            if let Some(s) = *src {
                assert!(s < xv.rows, "gather_rows: index {s} out of range {}", xv.rows);
                data[r * c..(r + 1) * c].copy_from_slice(xv.row(s));
            }
        }
        let out = Tensor::new(index.len(), c, data);
        let g = self.grad_of(&[xi]);
        self.push(out, Op::GatherRows { x: xi, index }, g)
    }

    /// Column-wise max over row segments `offsets[s]..offsets[s+1]`. Ties go to
    /// the lowest row.
    pub fn segment_max(&mut self, x: Var, offsets: Arc<Vec<usize>>) -> Var {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        let c = xv.cols;
        let segs = offsets.len() - 1;
        assert_eq!(*offsets.last().unwrap(), xv.rows, "segment_max: offsets do not cover input");
        let mut out = Tensor::zeros(segs, c);
        let mut argmax = vec![0usize; segs * c];
        for s in 0..segs {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            assert!(hi > lo, "segment_max: empty segment {s}");
            for j in 0..c {
                let mut best = lo;
                let mut best_v = xv.data[lo * c + j];
                for r in lo + 1..hi {
                    let v = xv.data[r * c + j];
                    if v > best_v {
                        best_v = v;
                        best = r;
                    }
                }
                out.data[s * c + j] = best_v;
                argmax[s * c + j] = best;
            }
        }
        let g = self.grad_of(&[xi]);
        self.push(out, Op::SegmentMax { x: xi, offsets, argmax }, g)
    }

    /// Column-wise mean over row segments; empty segments yield zeros.
    pub fn segment_mean(&mut self, x: Var, offsets: Arc<Vec<usize>>) -> Var {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        let c = xv.cols;
        let segs = offsets.len() - 1;
        assert_eq!(*offsets.last().unwrap(), xv.rows, "segment_mean: offsets do not cover input");
        let mut out = Tensor::zeros(segs, c);
        for s in 0..segs {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            if hi == lo {
                continue;
            }
            let orow = &mut out.data[s * c..(s + 1) * c];
            for r in lo..hi {
                for (o, v) in orow.iter_mut().zip(xv.row(r)) {
                    *o += v;
                }
            }
            let inv = 1.0 / (hi - lo) as f64;
            orow.iter_mut().for_each(|o| *o *= inv);
        }
        let g = self.grad_of(&[xi]);
        self.push(out, Op::SegmentMean { x: xi, offsets }, g)
    }

    /// Multiplies row `r` by the constant `factors[r]`.
    pub fn row_scale(&mut self, x: Var, factors: Arc<Vec<f64>>) -> Var {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        assert_eq!(factors.len(), xv.rows, "row_scale: factor count");
        let mut out = xv.clone();
        for (r, f) in factors.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|v| *v *= f);
        }
        let g = self.grad_of(&[xi]);
        self.push(out, Op::RowScale { x: xi, factors }, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, |a, b| Op::Div { a, b })
    }

    /// `scale * x + offset`; only `scale` enters the backward rule.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Var {
        let xi = self.idx(x);
        self.unary(xi, |v| scale * v + offset, Op::Affine { x: xi, scale })
    }

    /// Square root; the backward rule treats `sqrt'(0)` as zero.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        self.unary(xi, f64::sqrt, Op::Sqrt { x: xi })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        self.unary(xi, f64::exp, Op::Exp { x: xi })
    }

    pub fn square(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        self.unary(xi, |v| v * v, Op::Square { x: xi })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        self.unary(xi, f64::abs, Op::Abs { x: xi })
    }

    /// Per-row sum, `n×c → n×1`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        let data = (0..xv.rows).map(|r| xv.row(r).iter().sum()).collect();
        let out = Tensor::new(xv.rows, 1, data);
        let g = self.grad_of(&[xi]);
        self.push(out, Op::SumRows { x: xi }, g)
    }

    /// Sum of all entries, `→ 1×1`.
    pub fn sum(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let s = self.nodes[xi].value.data.iter().sum();
        let g = self.grad_of(&[xi]);
        self.push(Tensor::scalar(s), Op::Sum { x: xi }, g)
    }

    /// `acc` is `n × (c+1)` holding weighted sums and the weight total in the
    /// last column; returns `n × c` weighted means, zero where the total is zero.
    pub fn normalize(&mut self, acc: Var) -> Var {
        let ai = self.idx(acc);
        let av = &self.nodes[ai].value;
        assert!(av.cols >= 2, "normalize: needs at least one attribute column");
        let c = av.cols - 1;
        let mut out = Tensor::zeros(av.rows, c);
        for r in 0..av.rows {
            let row = av.row(r);
            let den = row[c];
            if den > 0.0 {
                for (o, v) in out.data[r * c..(r + 1) * c].iter_mut().zip(row) {
                    *o = v / den;
                }
            }
        }
        let g = self.grad_of(&[ai]);
        self.push(out, Op::Normalize { acc: ai }, g)
    }

    fn unary(&mut self, xi: usize, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = &self.nodes[xi].value;
        let out = Tensor::new(xv.rows, xv.cols, xv.data.iter().map(|&v| f(v)).collect());
        let g = self.grad_of(&[xi]);
        self.push(out, op, g)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: impl FnOnce(usize, usize) -> Op) -> Var {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let av = &self.nodes[ai].value;
        let bv = &self.nodes[bi].value;
        assert_eq!(av.shape(), bv.shape(), "elementwise op: shapes differ");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.rows, av.cols, data);
        let g = self.grad_of(&[ai, bi]);
        self.push(out, op(ai, bi), g)
    }
}

/// Smallest gap between each segment's winner and its runner-up.
pub(crate) fn segment_max_gap(input: &Tensor, offsets: &[usize], argmax: &[usize], out: &Tensor) -> f64 {
    let c = input.cols;
    let mut gap = f64::INFINITY;
    for s in 0..offsets.len() - 1 {
        for j in 0..c {
            let win = argmax[s * c + j];
            let best = out.data[s * c + j];
            for r in offsets[s]..offsets[s + 1] {
                if r != win {
                    gap = gap.min(best - input.data[r * c + j]);
                }
            }
        }
    }
    gap
}
