//! Soft point renderer and the unsupervised loss terms.

use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::rgbd::{CameraIntrinsics, ColorImage, DepthImage};
use crate::tape::{SplatConfig, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Footprint standard deviation, pixels.
    pub sigma: f64,
    /// Footprint radius in sigmas.
    pub truncation: f64,
    /// Soft-occlusion depth temperature, meters.
    pub tau: f64,
    /// Pixels with accumulated weight above this count as covered.
    pub eps: f64,
    pub lambda: f64,
    /// Record gradients with respect to rendered point positions.
    pub position_gradients: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { sigma: 1.0, truncation: 3.0, tau: 0.5, eps: 1e-6, lambda: 0.1, position_gradients: false }
    }
}

impl LossConfig {
    pub fn splat(&self, intr: &CameraIntrinsics) -> SplatConfig {
        SplatConfig { intr: *intr, sigma: self.sigma, truncation: self.truncation, tau: self.tau }
    }
}

/// Rendered buffers on the tape, one row per pixel.
#[derive(Debug, Clone, Copy)]
pub struct RenderedFrame {
    pub color: Var,
    pub depth: Var,
    pub acc: Var,
}

/// Splats every point with weight `gaussian(pixel distance) · exp(-z/τ)` and
/// normalizes: color and depth are weighted means, zero where nothing landed.
pub fn soft_render(
    tape: &mut Tape,
    positions: Var,
    colors: Var,
    intr: &CameraIntrinsics,
    cfg: &LossConfig,
) -> RenderedFrame {
    let z = tape.slice_cols(positions, 2, 3);
    let attr = tape.concat(colors, z);
    let acc_all = tape.splat(positions, attr, cfg.splat(intr));
    let mean = tape.normalize(acc_all);
    RenderedFrame {
        color: tape.slice_cols(mean, 0, 3),
        depth: tape.slice_cols(mean, 3, 4),
        acc: tape.slice_cols(acc_all, 4, 5),
    }
}

/// Points and colors as tape leaves; positions are variables only when
/// position gradients are requested.
pub fn render_inputs(tape: &mut Tape, points: &[Vector3<f64>], colors: &[[f64; 3]], cfg: &LossConfig) -> (Var, Var) {
    let pos = Tensor::new(points.len(), 3, points.iter().flat_map(|p| [p.x, p.y, p.z]).collect());
    let col = Tensor::new(colors.len(), 3, colors.iter().flat_map(|c| c.iter().copied()).collect());
    let pos = if cfg.position_gradients { tape.variable(pos) } else { tape.constant(pos) };
    (pos, tape.constant(col))
}

fn coverage(tape: &mut Tape, acc: Var, eps: f64, extra: impl Fn(usize) -> bool) -> (Arc<Vec<f64>>, f64) {
    let a = tape.value(acc);
    let mut margin = f64::INFINITY;
    let mask: Vec<f64> = a
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            margin = margin.min((v - eps).abs());
            if v > eps && extra(i) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    tape.note_threshold("render coverage", margin);
    let n = mask.iter().sum();
    (Arc::new(mask), n)
}

/// Mean absolute color difference per channel over covered pixels; 0 when
/// nothing is covered.
pub fn photometric_loss(tape: &mut Tape, rendered: &RenderedFrame, target: &ColorImage, eps: f64) -> Var {
    let (mask, n) = coverage(tape, rendered.acc, eps, |_| true);
    if n == 0.0 {
        return tape.constant(Tensor::scalar(0.0));
    }
    let t = tape.constant(Tensor::new(
        target.data().len(),
        3,
        target.data().iter().flat_map(|c| c.iter().copied()).collect(),
    ));
    let d = tape.sub(rendered.color, t);
    let d = tape.abs(d);
    let d = tape.row_scale(d, mask);
    let s = tape.sum(d);
    tape.affine(s, 1.0 / (3.0 * n), 0.0)
}

/// Mean squared depth difference over pixels covered by the render and valid
/// in the target; 0 on empty overlap.
pub fn geometric_loss(tape: &mut Tape, rendered: &RenderedFrame, target: &DepthImage, eps: f64) -> Var {
    let td = target.data();
    let (mask, n) = coverage(tape, rendered.acc, eps, |i| td[i] > 0.0);
    if n == 0.0 {
        return tape.constant(Tensor::scalar(0.0));
    }
    let t = tape.constant(Tensor::new(td.len(), 1, td.to_vec()));
    let d = tape.sub(rendered.depth, t);
    let d = tape.square(d);
    let d = tape.row_scale(d, mask);
    let s = tape.sum(d);
    tape.affine(s, 1.0 / n, 0.0)
}

/// `l_geo + l_vis + λ·E` on the tape.
pub fn total_loss(tape: &mut Tape, l_geo: Var, l_vis: Var, e: Var, lambda: f64) -> Var {
    let a = tape.add(l_geo, l_vis);
    let b = tape.affine(e, lambda, 0.0);
    tape.add(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_geo: f64,
    pub l_vis: f64,
    pub e: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_geo: f64, l_vis: f64, e: f64, lambda: f64) -> Self {
        Self { l_geo, l_vis, e, lambda, total: l_geo + l_vis + lambda * e }
    }
}

/// Plain-value rendered buffers, for inspection and image dumps.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImages {
    pub color: ColorImage,
    pub depth: DepthImage,
    pub acc: Vec<f64>,
}

impl RenderedImages {
    pub fn read(tape: &Tape, frame: &RenderedFrame, intr: &CameraIntrinsics) -> Self {
        let (w, h) = (intr.width, intr.height);
        let c = tape.value(frame.color);
        let color = (0..w * h)
            .map(|i| {
                let r = c.row(i);
                [r[0].clamp(0.0, 1.0), r[1].clamp(0.0, 1.0), r[2].clamp(0.0, 1.0)]
            })
            .collect();
        let depth = tape.value(frame.depth).data.iter().map(|&z| z.max(0.0)).collect();
        Self {
            color: ColorImage::new(w, h, color).expect("normalized colors are in range"),
            depth: DepthImage::new(w, h, depth).expect("normalized depths are finite"),
            acc: tape.value(frame.acc).data.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 8.0, 8.0, 17, 17).unwrap()
    }

    fn render(points: &[Vector3<f64>], colors: &[[f64; 3]]) -> (Tape, RenderedFrame) {
        let mut tape = Tape::new();
        let cfg = LossConfig::default();
        let (p, c) = render_inputs(&mut tape, points, colors, &cfg);
        let f = soft_render(&mut tape, p, c, &intr(), &cfg);
        (tape, f)
    }

    #[test]
    fn lone_point_keeps_its_color() {
        let (tape, f) = render(&[Vector3::new(0.0, 0.0, 1.0)], &[[1.0, 0.0, 0.0]]);
        let row = tape.value(f.color).row(8 * 17 + 8).to_vec();
        assert!((row[0] - 1.0).abs() < 1e-6 && row[1].abs() < 1e-6 && row[2].abs() < 1e-6);
        assert!((tape.value(f.depth).get(8 * 17 + 8, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_cloud_is_background() {
        let (tape, f) = render(&[], &[]);
        assert_eq!(tape.value(f.acc).max_abs(), 0.0);
        assert_eq!(tape.value(f.color).max_abs(), 0.0);
        assert_eq!(tape.value(f.depth).max_abs(), 0.0);
    }

    #[test]
    fn near_point_dominates() {
        let (tape, f) =
            render(&[Vector3::new(0.0, 0.0, 0.5), Vector3::new(0.0, 0.0, 5.0)], &[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        let row = tape.value(f.color).row(8 * 17 + 8).to_vec();
        let want = (-1.0f64).exp() / (-10.0f64).exp();
        assert!((row[0] / row[2] / want - 1.0).abs() < 1e-9);
    }

    #[test]
    fn colors_stay_in_unit_range() {
        let pts: Vec<_> = (0..30)
            .map(|i| Vector3::new(0.01 * (i % 7) as f64 - 0.03, 0.01 * (i % 5) as f64 - 0.02, 1.0 + 0.1 * i as f64))
            .collect();
        let cols: Vec<_> = (0..30).map(|i| [(i % 3) as f64 / 2.0, (i % 4) as f64 / 3.0, 1.0]).collect();
        let (tape, f) = render(&pts, &cols);
        assert!(tape.value(f.color).data.iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
    }

    #[test]
    fn loss_examples() {
        let i = intr();
        let (mut tape, f) = render(&[Vector3::new(0.0, 0.0, 1.0)], &[[0.5, 0.5, 0.5]]);
        let rendered = RenderedImages::read(&tape, &f, &i);
        let same = photometric_loss(&mut tape, &f, &rendered.color, 1e-6);
        assert!(tape.scalar(same).abs() < 1e-12);
        let shifted =
            ColorImage::new(17, 17, rendered.color.data().iter().map(|c| c.map(|v| (v + 0.1).min(1.0))).collect())
                .unwrap();
        let off = photometric_loss(&mut tape, &f, &shifted, 1e-6);
        assert!((tape.scalar(off) - 0.1).abs() < 1e-9);
        let far = DepthImage::new(
            17,
            17,
            rendered.depth.data().iter().map(|z| if *z > 0.0 { z + 0.1 } else { 1.0 }).collect(),
        )
        .unwrap();
        let g = geometric_loss(&mut tape, &f, &far, 1e-6);
        assert!((tape.scalar(g) - 0.01).abs() < 1e-9);
        let none = geometric_loss(&mut tape, &f, &DepthImage::zeros(17, 17), 1e-6);
        assert_eq!(tape.scalar(none), 0.0);
    }

    #[test]
    fn total_examples() {
        assert!((LossBreakdown::new(1.0, 2.0, 3.0, 0.1).total - 3.3).abs() < 1e-12);
        assert_eq!(LossBreakdown::new(0.0, 0.0, 2.0, 0.1).total, 0.2);
        assert_eq!(LossBreakdown::new(1.0, 2.0, 3.0, 0.0).total, 3.0);
        let mut tape = Tape::new();
        let v = |t: &mut Tape, x| t.constant(Tensor::scalar(x));
        let (a, b, c) = (v(&mut tape, 1.0), v(&mut tape, 2.0), v(&mut tape, 3.0));
        let l = total_loss(&mut tape, a, b, c, 0.1);
        assert!((tape.scalar(l) - 3.3).abs() < 1e-12);
    }
}
