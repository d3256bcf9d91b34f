//! Soft point splatting: each point spreads a truncated Gaussian footprint,
//! scaled by a depth-dependent weight, onto the pixel grid.

use serde::{Deserialize, Serialize};

use super::{Op, Tape, Tensor, Var};
use crate::rgbd::CameraIntrinsics;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplatConfig {
    pub intr: CameraIntrinsics,
    /// Footprint standard deviation in pixels.
    pub sigma: f64,
    /// Footprint support radius in units of `sigma`.
    pub truncation: f64,
    /// Depth temperature of the soft-occlusion weight `exp(-z / tau)`, meters.
    pub tau: f64,
}

impl SplatConfig {
    pub fn new(intr: CameraIntrinsics) -> Self {
        Self { intr, sigma: 1.0, truncation: 3.0, tau: 0.5 }
    }

    fn radius(&self) -> f64 {
        self.truncation * self.sigma
    }
}

/// Footprint weight and its derivative w.r.t. pixel distance `r`, divided by `r`.
///
/// The footprint is the plain Gaussian up to one sigma inside the truncation
/// radius, then tapered to zero at the radius with a quintic smoothstep so the
/// weight is twice continuously differentiable everywhere.
pub fn splat_kernel(r: f64, sigma: f64, truncation: f64) -> (f64, f64) {
    let radius = truncation * sigma;
    if r >= radius {
        return (0.0, 0.0);
    }
    let s2 = sigma * sigma;
    let g = (-r * r / (2.0 * s2)).exp();
    let taper_start = (radius - sigma).max(0.0);
    if r <= taper_start {
        return (g, -g / s2);
    }
    let width = radius - taper_start;
    let t = (r - taper_start) / width;
    let window = 1.0 - t * t * t * (10.0 - 15.0 * t + 6.0 * t * t);
    let dwindow = -30.0 * t * t * (1.0 - t) * (1.0 - t) / width;
    let k = g * window;
    let dk = -r / s2 * g * window + g * dwindow;
    (k, dk / r)
}

pub(crate) struct Footprint {
    pub pixel: usize,
    pub weight: f64,
    /// d weight / d (u, v) at this pixel.
    pub dw_du: f64,
    pub dw_dv: f64,
}

/// Pixels touched by a camera-frame point, with weights.
pub(crate) fn footprint(cfg: &SplatConfig, p: [f64; 3], out: &mut Vec<Footprint>) {
    out.clear();
    let [x, y, z] = p;
    if !(z > 0.0) {
        return;
    }
    let intr = &cfg.intr;
    let u = intr.fx * x / z + intr.cx;
    let v = intr.fy * y / z + intr.cy;
    let rad = cfg.radius();
    if !(u.is_finite() && v.is_finite()) {
        return;
    }
    let c0 = (u - rad).ceil().max(0.0);
    let c1 = (u + rad).floor().min(intr.width as f64 - 1.0);
    let r0 = (v - rad).ceil().max(0.0);
    let r1 = (v + rad).floor().min(intr.height as f64 - 1.0);
    if c0 > c1 || r0 > r1 {
        return;
    }
    let depth_w = (-z / cfg.tau).exp();
    for row in r0 as usize..=r1 as usize {
        for col in c0 as usize..=c1 as usize {
            let du = u - col as f64;
            let dv = v - row as f64;
            let r = (du * du + dv * dv).sqrt();
            let (k, dk_over_r) = splat_kernel(r, cfg.sigma, cfg.truncation);
            if k <= 0.0 {
                continue;
            }
            out.push(Footprint {
                pixel: row * intr.width + col,
                weight: k * depth_w,
                dw_du: dk_over_r * du * depth_w,
                dw_dv: dk_over_r * dv * depth_w,
            });
        }
    }
}

impl Tape {
    /// Splats `attr` (`n × c`) from camera-frame positions `pos` (`n × 3`).
    /// Returns `(h*w) × (c+1)`: per pixel the weighted attribute sums followed
    /// by the total weight. Points with `z <= 0` contribute nothing.
    pub fn splat(&mut self, pos: Var, attr: Var, cfg: SplatConfig) -> Var {
        let (pi, ai) = (self.idx(pos), self.idx(attr));
        let pv = &self.nodes[pi].value;
        let av = &self.nodes[ai].value;
        assert_eq!(pv.cols, 3, "splat: positions must be n×3");
        assert_eq!(pv.rows, av.rows, "splat: one attribute row per point");
        let c = av.cols;
        let mut out = Tensor::zeros(cfg.intr.num_pixels(), c + 1);
        let mut fp = Vec::new();
        for i in 0..pv.rows {
            footprint(&cfg, [pv.get(i, 0), pv.get(i, 1), pv.get(i, 2)], &mut fp);
            let a = av.row(i);
            for f in &fp {
                let orow = out.row_mut(f.pixel);
                for j in 0..c {
                    orow[j] += f.weight * a[j];
                }
                orow[c] += f.weight;
            }
        }
        let g = self.grad_of(&[pi, ai]);
        self.push(out, Op::Splat { pos: pi, attr: ai, cfg }, g)
    }
}

/// Backward of [`Tape::splat`]; returns `(d pos, d attr)`.
pub(crate) fn splat_backward(cfg: &SplatConfig, pos: &Tensor, attr: &Tensor, grad: &Tensor) -> (Tensor, Tensor) {
    let c = attr.cols;
    let mut gp = Tensor::zeros(pos.rows, 3);
    let mut ga = Tensor::zeros(attr.rows, c);
    let mut fp = Vec::new();
    let tau = cfg.tau;
    for i in 0..pos.rows {
        let p = [pos.get(i, 0), pos.get(i, 1), pos.get(i, 2)];
        footprint(cfg, p, &mut fp);
        if fp.is_empty() {
            continue;
        }
        let a = attr.row(i);
        let (mut gu, mut gv, mut gz_direct) = (0.0, 0.0, 0.0);
        for f in &fp {
            let grow = grad.row(f.pixel);
            let mut gw = grow[c];
            for j in 0..c {
                ga.data[i * c + j] += f.weight * grow[j];
                gw += grow[j] * a[j];
            }
            gu += gw * f.dw_du;
            gv += gw * f.dw_dv;
            gz_direct -= gw * f.weight / tau;
        }
        let [x, y, z] = p;
        let (fx, fy) = (cfg.intr.fx, cfg.intr.fy);
        gp.data[i * 3] += gu * fx / z;
        gp.data[i * 3 + 1] += gv * fy / z;
        gp.data[i * 3 + 2] += gz_direct - gu * fx * x / (z * z) - gv * fy * y / (z * z);
    }
    (gp, ga)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_gaussian_inside_taper() {
        let (k, _) = splat_kernel(1.5, 1.0, 3.0);
        assert!((k - (-1.125f64).exp()).abs() < 1e-15);
        assert_eq!(splat_kernel(3.0, 1.0, 3.0).0, 0.0);
        assert_eq!(splat_kernel(0.0, 1.0, 3.0), (1.0, -1.0));
    }

    #[test]
    fn kernel_derivative_matches_difference() {
        for &r in &[0.3, 1.0, 2.2, 2.5, 2.9] {
            let h = 1e-6;
            let num = (splat_kernel(r + h, 1.0, 3.0).0 - splat_kernel(r - h, 1.0, 3.0).0) / (2.0 * h);
            let (_, d_over_r) = splat_kernel(r, 1.0, 3.0);
            assert!((num - d_over_r * r).abs() < 1e-7, "r={r}: {num} vs {}", d_over_r * r);
        }
    }

    #[test]
    fn kernel_is_smooth_at_taper_ends() {
        let h = 1e-7;
        for &r in &[2.0, 3.0 - 1e-9] {
            let lo = splat_kernel(r - h, 1.0, 3.0);
            let hi = splat_kernel(r + h, 1.0, 3.0);
            assert!((lo.0 - hi.0).abs() < 1e-6);
        }
    }
}
