//! Central finite-difference checks of every tape op, the composed fusion
//! block and the soft renderer.
//!
//! Each instance draws random inputs, reduces the output to a scalar with a
//! random projection and compares every input-gradient entry against
//! `(L(x + ε) - L(x - ε)) / 2ε`. An instance is redrawn when a perturbed forward
//! pass takes a different branch at a kink than the unperturbed one (see
//! [`Tape::branch_pattern`]); the redraw comes from the same seeded stream.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{aggregate, fuse_residual, Mlp};
use crate::gather::GatherResult;
use crate::render::{geometric_loss, photometric_loss, soft_render, LossConfig};
use crate::rgbd::{CameraIntrinsics, ColorImage, DepthImage};
use crate::tape::{ConvGeom, EdgeList, OpKind, SplatConfig, Tape, Tensor, Var};

pub const EPSILON: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
pub const SEEDS: u64 = 20;
/// Denominator floor of the relative error, so entries whose true gradient is
/// zero are judged by absolute error.
pub const REL_FLOOR: f64 = 1e-3;
const MAX_DRAWS: usize = 200;

/// Something the suite checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckTarget {
    Op(OpKind),
    FusionBlock,
    Renderer,
}

impl CheckTarget {
    pub fn all() -> Vec<CheckTarget> {
        let mut v: Vec<_> = OpKind::DIFFERENTIABLE.iter().map(|&k| CheckTarget::Op(k)).collect();
        v.push(CheckTarget::FusionBlock);
        v.push(CheckTarget::Renderer);
        v
    }

    pub fn name(&self) -> &'static str {
        match self {
            CheckTarget::Op(k) => k.name(),
            CheckTarget::FusionBlock => "fusion_block",
            CheckTarget::Renderer => "renderer",
        }
    }

    pub fn from_name(name: &str) -> Option<CheckTarget> {
        Self::all().into_iter().find(|t| t.name() == name)
    }
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

/// Random inputs plus the computation under test.
pub struct Instance {
    pub inputs: Vec<Tensor>,
    build: Build,
}

impl Instance {
    fn new(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var + 'static) -> Self {
        Self { inputs, build: Box::new(build) }
    }
}

/// Worst errors of one instance over its input tensors.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct InstanceErrors {
    /// Largest [`entry_error`]; the pass criterion.
    pub entrywise: f64,
    /// `‖a - f‖ / max(‖a‖, ‖f‖)` per input gradient tensor, for information.
    pub tensor: f64,
}

/// Outcome of checking one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InstanceCheck {
    Checked(InstanceErrors),
    /// A perturbation crossed a kink.
    Rejected,
}

fn scalar_loss(tape: &mut Tape, inst: &Instance, values: &[Tensor], proj: &Tensor) -> (Var, Vec<Var>) {
    let vars: Vec<Var> = values.iter().map(|t| tape.variable(t.clone())).collect();
    let out = (inst.build)(tape, &vars);
    let r = tape.constant(proj.clone());
    let m = tape.mul(out, r);
    (tape.sum(m), vars)
}

/// Analytic gradient vs central differences on every input entry.
pub fn check_instance(inst: &Instance, rng: &mut impl Rng, epsilon: f64) -> Result<InstanceCheck> {
    let mut probe = Tape::new();
    let vars: Vec<Var> = inst.inputs.iter().map(|t| probe.variable(t.clone())).collect();
    let out = (inst.build)(&mut probe, &vars);
    let (r, c) = probe.value(out).shape();
    let proj = Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect());

    let mut tape = Tape::new();
    let (loss, vars) = scalar_loss(&mut tape, inst, &inst.inputs, &proj);
    let pattern = tape.branch_pattern();
    let grads = tape.backward(loss)?;

    let mut errors = InstanceErrors::default();
    let mut values = inst.inputs.clone();
    for (i, var) in vars.iter().enumerate() {
        let (mut diff, mut an_norm, mut fd_norm) = (0.0, 0.0, 0.0);
        for j in 0..inst.inputs[i].len() {
            let x0 = inst.inputs[i].data[j];
            let mut side = |x: f64| -> Option<f64> {
                values[i].data[j] = x;
                let mut t = Tape::new();
                let (l, _) = scalar_loss(&mut t, inst, &values, &proj);
                (t.branch_pattern() == pattern).then(|| t.scalar(l))
            };
            let (Some(plus), Some(minus)) = (side(x0 + epsilon), side(x0 - epsilon)) else {
                return Ok(InstanceCheck::Rejected);
            };
            values[i].data[j] = x0;
            let fd = (plus - minus) / (2.0 * epsilon);
            let an = grads.wrt(*var).map_or(0.0, |g| g.data[j]);
            if !(fd.is_finite() && an.is_finite()) {
                return Err(Error::NonFinite(format!("gradient check entry {i}/{j}")));
            }
            errors.entrywise = errors.entrywise.max(entry_error(an, fd));
            diff += (an - fd) * (an - fd);
            an_norm += an * an;
            fd_norm += fd * fd;
        }
        let scale = an_norm.sqrt().max(fd_norm.sqrt());
        if scale > 0.0 {
            errors.tensor = errors.tensor.max(diff.sqrt() / scale);
        }
    }
    Ok(InstanceCheck::Checked(errors))
}

/// Per-entry error `|a - f| / max(|a|, |f|, REL_FLOOR)`.
pub fn entry_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn uniform(rng: &mut impl Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Magnitudes in `[lo, hi)` with random signs.
fn away_from_zero(rng: &mut impl Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    let mut t = uniform(rng, r, c, lo, hi);
    t.data.iter_mut().for_each(|v| {
        if rng.gen_bool(0.5) {
            *v = -*v
        }
    });
    t
}

fn std_normalish(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
    uniform(rng, r, c, -1.0, 1.0)
}

/// Draws one instance of a target.
pub fn draw_instance(target: CheckTarget, rng: &mut impl Rng) -> Instance {
    use OpKind as K;
    let mut n = |lo: usize, hi: usize| rng.gen_range(lo..=hi);
    let (rows, cols) = (n(2, 4), n(1, 4));
    match target {
        CheckTarget::Op(K::Linear) => {
            let o = n(1, 3);
            let inputs = vec![std_normalish(rng, rows, cols), std_normalish(rng, cols, o), std_normalish(rng, 1, o)];
            Instance::new(inputs, |t, v| t.linear(v[0], v[1], Some(v[2])))
        }
        CheckTarget::Op(K::Conv3x3) => {
            let geom = ConvGeom { in_h: n(2, 4), in_w: n(2, 5), stride: n(1, 2) };
            let (ci, co) = (n(1, 2), n(1, 2));
            let inputs = vec![
                std_normalish(rng, geom.in_h * geom.in_w, ci),
                std_normalish(rng, 9 * ci, co),
                std_normalish(rng, 1, co),
            ];
            Instance::new(inputs, move |t, v| t.conv3x3(v[0], v[1], v[2], geom))
        }
        CheckTarget::Op(K::LeakyRelu) => {
            let slope = rng.gen_range(0.05..0.3);
            Instance::new(vec![std_normalish(rng, rows, cols)], move |t, v| t.leaky_relu(v[0], slope))
        }
        CheckTarget::Op(K::Concat) => {
            let c2 = n(1, 3);
            let inputs = vec![std_normalish(rng, rows, cols), std_normalish(rng, rows, c2)];
            Instance::new(inputs, |t, v| t.concat(v[0], v[1]))
        }
        CheckTarget::Op(K::SliceCols) => {
            let c = n(2, 5);
            let start = n(0, c - 1);
            let end = n(start + 1, c);
            Instance::new(vec![std_normalish(rng, rows, c)], move |t, v| t.slice_cols(v[0], start, end))
        }
        CheckTarget::Op(K::GatherRows) => {
            let out = n(1, 6);
            let index: Arc<Vec<Option<usize>>> =
                Arc::new((0..out).map(|_| rng.gen_bool(0.8).then(|| rng.gen_range(0..rows))).collect());
            Instance::new(vec![std_normalish(rng, rows, cols)], move |t, v| t.gather_rows(v[0], index.clone()))
        }
        CheckTarget::Op(K::SegmentMax) | CheckTarget::Op(K::SegmentMean) => {
            let segs = n(1, 4);
            let empty_ok = target == CheckTarget::Op(K::SegmentMean);
            let mut offsets = vec![0];
            for _ in 0..segs {
                let len = rng.gen_range(usize::from(!empty_ok)..=3);
                offsets.push(offsets.last().unwrap() + len);
            }
            let total = *offsets.last().unwrap();
            let offsets = Arc::new(offsets);
            let x = std_normalish(rng, total, cols);
            if empty_ok {
                Instance::new(vec![x], move |t, v| t.segment_mean(v[0], offsets.clone()))
            } else {
                Instance::new(vec![x], move |t, v| t.segment_max(v[0], offsets.clone()))
            }
        }
        CheckTarget::Op(K::RowScale) => {
            let f: Arc<Vec<f64>> = Arc::new((0..rows).map(|_| rng.gen_range(-2.0..2.0)).collect());
            Instance::new(vec![std_normalish(rng, rows, cols)], move |t, v| t.row_scale(v[0], f.clone()))
        }
        CheckTarget::Op(k @ (K::Add | K::Sub | K::Mul | K::Div)) => {
            let a = std_normalish(rng, rows, cols);
            let b =
                if k == K::Div { away_from_zero(rng, rows, cols, 0.5, 2.0) } else { std_normalish(rng, rows, cols) };
            Instance::new(vec![a, b], move |t, v| match k {
                K::Add => t.add(v[0], v[1]),
                K::Sub => t.sub(v[0], v[1]),
                K::Mul => t.mul(v[0], v[1]),
                _ => t.div(v[0], v[1]),
            })
        }
        CheckTarget::Op(K::Affine) => {
            let (s, o) = (rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0));
            Instance::new(vec![std_normalish(rng, rows, cols)], move |t, v| t.affine(v[0], s, o))
        }
        CheckTarget::Op(K::Sqrt) => Instance::new(vec![uniform(rng, rows, cols, 0.5, 2.0)], |t, v| t.sqrt(v[0])),
        CheckTarget::Op(K::Exp) => Instance::new(vec![std_normalish(rng, rows, cols)], |t, v| t.exp(v[0])),
        CheckTarget::Op(K::Square) => Instance::new(vec![std_normalish(rng, rows, cols)], |t, v| t.square(v[0])),
        CheckTarget::Op(K::Abs) => Instance::new(vec![std_normalish(rng, rows, cols)], |t, v| t.abs(v[0])),
        CheckTarget::Op(K::SumRows) => Instance::new(vec![std_normalish(rng, rows, cols)], |t, v| t.sum_rows(v[0])),
        CheckTarget::Op(K::Sum) => Instance::new(vec![std_normalish(rng, rows, cols)], |t, v| t.sum(v[0])),
        CheckTarget::Op(K::Normalize) => {
            let mut acc = std_normalish(rng, rows, cols + 1);
            for r in 0..rows {
                // Include an empty pixel now and then.
                acc.row_mut(r)[cols] = if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.5..2.0) };
            }
            Instance::new(vec![acc], |t, v| t.normalize(v[0]))
        }
        CheckTarget::Op(K::Splat) => {
            let intr = CameraIntrinsics::default_for(8, 6);
            let pts = n(1, 5);
            let cfg = SplatConfig::new(intr);
            let pos = scene_points(rng, pts, &intr);
            let attr = std_normalish(rng, pts, cols);
            Instance::new(vec![pos, attr], move |t, v| t.splat(v[0], v[1], cfg))
        }
        CheckTarget::Op(K::PointConv) => {
            let d = cols;
            let (supports, queries) = (n(1, 5), n(1, 4));
            let mut edges = EdgeList { offsets: vec![0], ..Default::default() };
            for _ in 0..queries {
                let deg = rng.gen_range(0..=supports.min(3));
                for s in sample(rng, supports, deg).into_vec() {
                    edges.support.push(s);
                    edges.rel.push([0; 3].map(|_| rng.gen_range(-1.0..1.0)));
                }
                edges.offsets.push(edges.support.len());
            }
            let edges = Arc::new(edges);
            let slope = 0.1;
            let inputs = vec![std_normalish(rng, supports, d), std_normalish(rng, 3, d), std_normalish(rng, 1, d)];
            Instance::new(inputs, move |t, v| t.point_conv(v[0], v[1], v[2], edges.clone(), slope))
        }
        CheckTarget::Op(K::Leaf) => unreachable!("leaves have no backward rule"),
        CheckTarget::FusionBlock => fusion_instance(rng),
        CheckTarget::Renderer => renderer_instance(rng),
    }
}

/// Points in front of the camera whose projections land near the image.
fn scene_points(rng: &mut impl Rng, n: usize, intr: &CameraIntrinsics) -> Tensor {
    let mut data = Vec::with_capacity(3 * n);
    for _ in 0..n {
        let z = rng.gen_range(1.0..2.5);
        let u = rng.gen_range(-1.0..intr.width as f64);
        let v = rng.gen_range(-1.0..intr.height as f64);
        let p = intr.unproject(u, v, z);
        data.extend([p.x, p.y, p.z]);
    }
    Tensor::new(n, 3, data)
}

/// Cross-modal aggregation followed by the residual update: inputs are the
/// source features, the query features and all block weights.
fn fusion_instance(rng: &mut impl Rng) -> Instance {
    let d = rng.gen_range(2..=4);
    let (m, q, k) = (rng.gen_range(2..=5), rng.gen_range(1..=3), rng.gen_range(1..=3));
    let mut slots = Vec::with_capacity(q * k);
    for _ in 0..q {
        let filled = if k > 1 && rng.gen_bool(0.3) { k - 1 } else { k.min(m) };
        let mut picks: Vec<Option<usize>> = sample(rng, m, filled).into_iter().map(Some).collect();
        picks.resize(k, None);
        slots.extend(picks);
    }
    let gather = GatherResult { k, distances: vec![0.0; slots.len()], slots: Arc::new(slots) };
    let inputs = vec![
        std_normalish(rng, m, d),
        std_normalish(rng, q, d),
        std_normalish(rng, d, d),
        std_normalish(rng, 1, d),
        std_normalish(rng, d, d),
        std_normalish(rng, 1, d),
        std_normalish(rng, 2 * d, d),
    ];
    Instance::new(inputs, move |t, v| {
        let mlp = Mlp { w1: v[2], b1: v[3], w2: v[4], b2: v[5], slope: 0.1 };
        let agg = aggregate(t, v[0], &gather, &mlp);
        fuse_residual(t, v[1], agg, v[6], gather.query_mask()).expect("consistent shapes")
    })
}

/// Photometric plus geometric loss of a small splatted scene, with gradients
/// to both point positions and colors.
fn renderer_instance(rng: &mut impl Rng) -> Instance {
    let intr = CameraIntrinsics::default_for(16, 16);
    let n = rng.gen_range(4..=12);
    let pos = scene_points(rng, n, &intr);
    let colors = uniform(rng, n, 3, 0.0, 1.0);
    let px = intr.num_pixels();
    let color = ColorImage::new(16, 16, (0..px).map(|_| [0; 3].map(|_| rng.gen_range(0.05..1.0))).collect())
        .expect("valid image");
    let depth = DepthImage::new(
        16,
        16,
        (0..px).map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(1.0..3.0) }).collect(),
    )
    .expect("valid depth");
    let cfg = LossConfig { position_gradients: true, ..LossConfig::default() };
    Instance::new(vec![pos, colors], move |t, v| {
        let frame = soft_render(t, v[0], v[1], &intr, &cfg);
        let l_vis = photometric_loss(t, &frame, &color, cfg.eps);
        let l_geo = geometric_loss(t, &frame, &depth, cfg.eps);
        t.add(l_geo, l_vis)
    })
}

/// Result for one target over all seeds.
#[derive(Debug, Clone, Serialize)]
pub struct TargetReport {
    pub name: String,
    pub instances: usize,
    /// Draws discarded because a perturbation crossed a kink.
    pub redraws: usize,
    /// Largest per-entry relative error; must stay below [`TOLERANCE`].
    pub max_rel_error: f64,
    pub worst_seed: u64,
    /// Largest per-tensor relative error, for information.
    pub max_tensor_error: f64,
    pub passed: bool,
}

impl TargetReport {
    pub fn line(&self) -> String {
        format!(
            "{:<14} {}  max rel err {:.3e} (seed {}), per-tensor {:.3e}, {} instances, {} redraws",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.worst_seed,
            self.max_tensor_error,
            self.instances,
            self.redraws
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub targets: Vec<TargetReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.targets.iter().all(|t| t.passed)
    }
}

/// Checks `seeds` instances of one target with step `epsilon`.
pub fn check_target(target: CheckTarget, seeds: u64, epsilon: f64) -> Result<TargetReport> {
    let stream = CheckTarget::all().iter().position(|t| *t == target).unwrap() as u64;
    let mut report = TargetReport {
        name: target.name().to_string(),
        instances: 0,
        redraws: 0,
        max_rel_error: 0.0,
        worst_seed: 0,
        max_tensor_error: 0.0,
        passed: true,
    };
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut checked = None;
        for _ in 0..MAX_DRAWS {
            let inst = draw_instance(target, &mut rng);
            match check_instance(&inst, &mut rng, epsilon)? {
                InstanceCheck::Checked(e) => {
                    checked = Some(e);
                    break;
                }
                InstanceCheck::Rejected => report.redraws += 1,
            }
        }
        let err = checked.map_or(f64::INFINITY, |e| e.entrywise);
        report.max_tensor_error = report.max_tensor_error.max(checked.map_or(f64::INFINITY, |e| e.tensor));
        report.instances += usize::from(checked.is_some());
        if err > report.max_rel_error || checked.is_none() {
            report.max_rel_error = err;
            report.worst_seed = seed;
        }
    }
    report.passed = report.instances as u64 == seeds && report.max_rel_error < TOLERANCE;
    Ok(report)
}

/// Runs every target, or just the named one.
pub fn run_gradcheck(only: Option<&str>, seeds: u64, epsilon: f64) -> Result<GradcheckReport> {
    let targets = match only {
        None => CheckTarget::all(),
        Some(name) => vec![CheckTarget::from_name(name).ok_or_else(|| {
            let known: Vec<_> = CheckTarget::all().iter().map(|t| t.name()).collect();
            Error::InvalidInput(format!("unknown op `{name}`; known: {}", known.join(", ")))
        })?],
    };
    let targets = targets.into_iter().map(|t| check_target(t, seeds, epsilon)).collect::<Result<_>>()?;
    Ok(GradcheckReport { targets })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_has_a_target_and_name_round_trips() {
        let all = CheckTarget::all();
        assert_eq!(all.len(), OpKind::DIFFERENTIABLE.len() + 2);
        for t in all {
            assert_eq!(CheckTarget::from_name(t.name()), Some(t));
        }
    }

    #[test]
    fn abs_is_checked_away_from_the_kink_and_rejected_at_it() {
        let inst = Instance::new(vec![Tensor::new(1, 2, vec![0.3, -0.7])], |t, v| t.abs(v[0]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(
            matches!(check_instance(&inst, &mut rng, EPSILON).unwrap(), InstanceCheck::Checked(e) if e.tensor < 1e-8 && e.entrywise < 1e-8)
        );
        let kink = Instance::new(vec![Tensor::new(1, 1, vec![0.5 * EPSILON])], |t, v| t.abs(v[0]));
        assert_eq!(check_instance(&kink, &mut rng, EPSILON).unwrap(), InstanceCheck::Rejected);
    }

    #[test]
    fn unknown_name_is_an_error() {
        assert!(run_gradcheck(Some("nope"), 1, EPSILON).is_err());
    }

    #[test]
    fn linear_passes() {
        let r = run_gradcheck(Some("linear"), 3, EPSILON).unwrap();
        assert!(r.passed(), "{}", r.targets[0].line());
    }

    #[test]
    fn renderer_differences_converge_quadratically() {
        let coarse = check_target(CheckTarget::Renderer, 8, 1e-5).unwrap();
        let fine = check_target(CheckTarget::Renderer, 8, 1e-6).unwrap();
        assert!(coarse.max_rel_error < 1e-4, "{}", coarse.line());
        assert!(fine.max_rel_error < 1e-5, "{}", fine.line());
    }
}
