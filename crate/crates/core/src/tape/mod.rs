//! Reverse-mode gradient tape over a fixed op vocabulary.
//!
//! Every forward pass in the crate goes through a [`Tape`]: inference simply
//! never calls [`Tape::backward`]. Values are `f64` so the same code path serves
//! both the pipeline and the finite-difference checks.

mod backward;
mod ops;
mod pointconv;
mod splat;
mod tensor;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub use backward::Gradients;
pub use pointconv::EdgeList;
pub use splat::{splat_kernel, SplatConfig};
pub use tensor::Tensor;

use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Geometry of a 3x3, padding-1 convolution over a row-major pixel grid.
/// Output pixel `o` is centered on input pixel `o * stride + stride / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.in_h.div_ceil(self.stride)
    }

    pub fn out_w(&self) -> usize {
        self.in_w.div_ceil(self.stride)
    }

    /// Input pixel sampled by kernel tap `(ky, kx)` of output pixel `(oy, ox)`.
    #[inline]
    pub(crate) fn tap(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let c0 = self.stride / 2;
        let iy = (oy * self.stride + c0 + ky) as isize - 1;
        let ix = (ox * self.stride + c0 + kx) as isize - 1;
        if iy < 0 || ix < 0 || iy >= self.in_h as isize || ix >= self.in_w as isize {
            None
        } else {
            Some(iy as usize * self.in_w + ix as usize)
        }
    }
}

/// Op kinds, used for introspection and by the gradient checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Linear,
    Conv3x3,
    LeakyRelu,
    Concat,
    SliceCols,
    GatherRows,
    SegmentMax,
    SegmentMean,
    RowScale,
    Add,
    Sub,
    Mul,
    Div,
    Affine,
    Sqrt,
    Exp,
    Square,
    Abs,
    SumRows,
    Sum,
    Splat,
    Normalize,
    PointConv,
}

impl OpKind {
    /// Every differentiable kind (all but `Leaf`).
    pub const DIFFERENTIABLE: [OpKind; 23] = [
        OpKind::Linear,
        OpKind::Conv3x3,
        OpKind::LeakyRelu,
        OpKind::Concat,
        OpKind::SliceCols,
        OpKind::GatherRows,
        OpKind::SegmentMax,
        OpKind::SegmentMean,
        OpKind::RowScale,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Affine,
        OpKind::Sqrt,
        OpKind::Exp,
        OpKind::Square,
        OpKind::Abs,
        OpKind::SumRows,
        OpKind::Sum,
        OpKind::Splat,
        OpKind::Normalize,
        OpKind::PointConv,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Linear => "linear",
            OpKind::Conv3x3 => "conv3x3",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::Concat => "concat",
            OpKind::SliceCols => "slice_cols",
            OpKind::GatherRows => "gather_rows",
            OpKind::SegmentMax => "segment_max",
            OpKind::SegmentMean => "segment_mean",
            OpKind::RowScale => "row_scale",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Affine => "affine",
            OpKind::Sqrt => "sqrt",
            OpKind::Exp => "exp",
            OpKind::Square => "square",
            OpKind::Abs => "abs",
            OpKind::SumRows => "sum_rows",
            OpKind::Sum => "sum",
            OpKind::Splat => "splat",
            OpKind::Normalize => "normalize",
            OpKind::PointConv => "point_conv",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::DIFFERENTIABLE.iter().copied().find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf { param: Option<String> },
    Linear { x: usize, w: usize, b: Option<usize> },
    Conv3x3 { x: usize, w: usize, b: usize, geom: ConvGeom },
    LeakyRelu { x: usize, slope: f64 },
    Concat { a: usize, b: usize },
    SliceCols { x: usize, start: usize },
    GatherRows { x: usize, index: Arc<Vec<Option<usize>>> },
    SegmentMax { x: usize, offsets: Arc<Vec<usize>>, argmax: Vec<usize> },
    SegmentMean { x: usize, offsets: Arc<Vec<usize>> },
    RowScale { x: usize, factors: Arc<Vec<f64>> },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Affine { x: usize, scale: f64 },
    Sqrt { x: usize },
    Exp { x: usize },
    Square { x: usize },
    Abs { x: usize },
    SumRows { x: usize },
    Sum { x: usize },
    Splat { pos: usize, attr: usize, cfg: SplatConfig },
    Normalize { acc: usize },
    PointConv { h: usize, w: usize, b: usize, edges: Arc<EdgeList>, slope: f64 },
}

impl Op {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf { .. } => OpKind::Leaf,
            Op::Linear { .. } => OpKind::Linear,
            Op::Conv3x3 { .. } => OpKind::Conv3x3,
            Op::LeakyRelu { .. } => OpKind::LeakyRelu,
            Op::Concat { .. } => OpKind::Concat,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::SegmentMax { .. } => OpKind::SegmentMax,
            Op::SegmentMean { .. } => OpKind::SegmentMean,
            Op::RowScale { .. } => OpKind::RowScale,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Div { .. } => OpKind::Div,
            Op::Affine { .. } => OpKind::Affine,
            Op::Sqrt { .. } => OpKind::Sqrt,
            Op::Exp { .. } => OpKind::Exp,
            Op::Square { .. } => OpKind::Square,
            Op::Abs { .. } => OpKind::Abs,
            Op::SumRows { .. } => OpKind::SumRows,
            Op::Sum { .. } => OpKind::Sum,
            Op::Splat { .. } => OpKind::Splat,
            Op::Normalize { .. } => OpKind::Normalize,
            Op::PointConv { .. } => OpKind::PointConv,
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) needs_grad: bool,
}

/// Records values and ops in creation order, which is a topological order.
pub struct Tape {
    id: u64,
    pub(crate) nodes: Vec<Node>,
    params: HashMap<String, Var>,
    /// Smallest distance of any recorded decision threshold to its input, keyed
    /// by a caller label. See [`Tape::note_threshold`].
    thresholds: BTreeMap<&'static str, f64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
            thresholds: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v)].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[self.idx(v)].op.kind()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.shape(), (1, 1), "not a scalar node");
        t.data[0]
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// Unnamed leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None }, true)
    }

    /// Named parameter leaf. A second request for the same name returns the
    /// existing node, so shared weights accumulate a single gradient.
    pub fn param(&mut self, name: &str, value: impl FnOnce() -> Tensor) -> Var {
        if let Some(v) = self.params.get(name) {
            return *v;
        }
        let v = self.push(value(), Op::Leaf { param: Some(name.to_string()) }, true);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        backward::run(self, loss)
    }

    /// Records how close a non-differentiable decision (a mask threshold the
    /// caller derived from tape values) came to flipping.
    pub fn note_threshold(&mut self, label: &'static str, margin: f64) {
        let entry = self.thresholds.entry(label).or_insert(f64::INFINITY);
        *entry = entry.min(margin);
    }

    /// Smallest margin to any kink on the tape: leaky-rectifier (including
    /// inside point convolutions) and absolute
    /// value inputs near zero, near-ties inside max segments, square roots near
    /// zero and caller-recorded thresholds. Finite-difference checks are only
    /// meaningful when this exceeds the perturbation size.
    pub fn kink_margin(&self) -> f64 {
        let mut m = self.thresholds.values().copied().fold(f64::INFINITY, f64::min);
        for node in &self.nodes {
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::LeakyRelu { x, .. } | Op::Abs { x } => {
                    for v in &self.nodes[*x].value.data {
                        m = m.min(v.abs());
                    }
                }
                Op::Sqrt { x } => {
                    for v in &self.nodes[*x].value.data {
                        m = m.min(*v);
                    }
                }
                Op::PointConv { h, w, b, edges, .. } => {
                    let v = |i: usize| &self.nodes[i].value;
                    m = m.min(pointconv::point_conv_margin(v(*h), v(*w), v(*b), edges));
                }
                Op::SegmentMax { x, offsets, argmax } => {
                    m = m.min(ops::segment_max_gap(&self.nodes[*x].value, offsets, argmax, &node.value));
                }
                _ => {}
            }
        }
        m
    }

    /// Every discrete decision taken on the forward pass: op kinds, rectifier
    /// and absolute-value sides, square-root and normalizer zero tests, max
    /// winners and constant row factors. Two forward passes with equal patterns
    /// ran through the same smooth piece of the function.
    pub fn branch_pattern(&self) -> Vec<u64> {
        let mut out = Vec::new();
        let signs = |t: &Tensor, out: &mut Vec<u64>| out.extend(t.data.iter().map(|&v| u64::from(v > 0.0)));
        for node in &self.nodes {
            out.push(node.op.kind() as u64);
            match &node.op {
                Op::LeakyRelu { x, .. } | Op::Abs { x } | Op::Sqrt { x } => signs(&self.nodes[*x].value, &mut out),
                Op::SegmentMax { argmax, .. } => out.extend(argmax.iter().map(|&a| a as u64)),
                Op::RowScale { factors, .. } => out.extend(factors.iter().map(|f| f.to_bits())),
                Op::Normalize { acc } => {
                    let a = &self.nodes[*acc].value;
                    out.extend((0..a.rows).map(|r| u64::from(a.get(r, a.cols - 1) > 0.0)));
                }
                Op::PointConv { h, w, b, edges, .. } => {
                    let v = |i: usize| &self.nodes[i].value;
                    pointconv::point_conv_signs(v(*h), v(*w), v(*b), edges, &mut out);
                }
                _ => {}
            }
        }
        out
    }

    pub(crate) fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        v.index
    }

    pub(crate) fn owns(&self, v: Var) -> bool {
        v.tape == self.id && v.index < self.nodes.len()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node { value, op, needs_grad });
        Var { tape: self.id, index }
    }

    fn grad_of(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub(crate) fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }
}
