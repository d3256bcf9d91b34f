//! Procedural RGB-D pairs: textured axis-aligned boxes inside a 4 x 3 x 4 m
//! room, ray cast from two nearby camera poses.
//!
//! World axes follow the camera convention at zero yaw: x right, y down,
//! z forward. The floor is at `y = 1.5`.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::PairRecord;
use crate::rgbd::{CameraIntrinsics, ColorImage, DepthImage, RigidTransform};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    /// Translation bound per degree of difficulty, meters.
    pub translation_per_degree: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { width: 128, height: 128, translation_per_degree: 0.02 }
    }
}

/// Axis-aligned box with per-face base colors and a checker texture.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBox {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
    /// Indexed by `2 * axis + side`, side 0 the min face.
    pub colors: [[f64; 3]; 6],
    pub cell: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vector3<f64>,
    /// `2 * axis + side`.
    pub face: usize,
}

impl SceneBox {
    /// Entry hit of a ray starting outside the box.
    pub fn entry(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        let (mut t0, mut t1, mut face) = (f64::NEG_INFINITY, f64::INFINITY, 0);
        for a in 0..3 {
            if d[a] == 0.0 {
                if o[a] < self.min[a] || o[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let (n, f, side) = if d[a] > 0.0 {
                ((self.min[a] - o[a]) / d[a], (self.max[a] - o[a]) / d[a], 0)
            } else {
                ((self.max[a] - o[a]) / d[a], (self.min[a] - o[a]) / d[a], 1)
            };
            if n > t0 {
                t0 = n;
                face = 2 * a + side;
            }
            t1 = t1.min(f);
        }
        (t0 <= t1 && t0 > 0.0).then(|| Hit { t: t0, point: o + d * t0, face })
    }

    /// Exit hit of a ray starting inside the box.
    pub fn exit(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        let (mut t1, mut face) = (f64::INFINITY, 0);
        for a in 0..3 {
            if d[a] == 0.0 {
                continue;
            }
            let (f, side) =
                if d[a] > 0.0 { ((self.max[a] - o[a]) / d[a], 1) } else { ((self.min[a] - o[a]) / d[a], 0) };
            if f < t1 {
                t1 = f;
                face = 2 * a + side;
            }
        }
        t1.is_finite().then(|| Hit { t: t1, point: o + d * t1, face })
    }

    pub fn contains(&self, p: &Vector3<f64>, margin: f64) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] - margin && p[a] <= self.max[a] + margin)
    }

    /// Flat-shaded checker color at a point on face `face`.
    pub fn color_at(&self, face: usize, p: &Vector3<f64>) -> [f64; 3] {
        let axis = face / 2;
        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
        let check = ((p[a] / self.cell).floor() + (p[b] / self.cell).floor()).rem_euclid(2.0);
        let shade = [0.8, 1.0, 0.9][axis] * (0.55 + 0.45 * check);
        self.colors[face].map(|c| (c * shade).clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub room: SceneBox,
    pub boxes: Vec<SceneBox>,
}

fn random_colors(rng: &mut ChaCha8Rng) -> [[f64; 3]; 6] {
    let mut c = [[0.0; 3]; 6];
    for face in &mut c {
        for ch in face.iter_mut() {
            *ch = rng.gen_range(0.15..0.95);
        }
    }
    c
}

impl Scene {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let room = SceneBox {
            min: Vector3::new(-2.0, -1.5, -2.0),
            max: Vector3::new(2.0, 1.5, 2.0),
            colors: random_colors(rng),
            cell: rng.gen_range(0.15..0.35),
        };
        let n = rng.gen_range(5..9);
        let boxes = (0..n)
            .map(|i| {
                let size = Vector3::new(rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.2), rng.gen_range(0.3..1.0));
                let cx = rng.gen_range(-1.7..1.7);
                let cz = rng.gen_range(-1.7..1.7);
                // most boxes stand on the floor, some hang on the walls
                let top = if i % 3 == 2 { rng.gen_range(-1.2..0.5) } else { 1.5 - size.y };
                let min = Vector3::new(cx - size.x / 2.0, top, cz - size.z / 2.0);
                SceneBox {
                    min: min.zip_map(&room.min, f64::max),
                    max: (min + size).zip_map(&room.max, f64::min),
                    colors: random_colors(rng),
                    cell: rng.gen_range(0.06..0.2),
                }
            })
            .collect();
        Scene { room, boxes }
    }

    /// Nearest surface along the ray and its color.
    pub fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(Hit, [f64; 3])> {
        let mut best = self.room.exit(o, d).map(|h| (h, self.room.color_at(h.face, &h.point)));
        for b in &self.boxes {
            if let Some(h) = b.entry(o, d) {
                if best.is_none_or(|(bh, _)| h.t < bh.t) {
                    best = Some((h, b.color_at(h.face, &h.point)));
                }
            }
        }
        best
    }

    pub fn free(&self, p: &Vector3<f64>, margin: f64) -> bool {
        self.room.contains(p, -margin) && self.boxes.iter().all(|b| !b.contains(p, margin))
    }

    /// Renders z-depth and color seen by a camera with camera-to-world `pose`.
    pub fn render(&self, pose: &RigidTransform, intr: &CameraIntrinsics) -> (ColorImage, DepthImage) {
        let (w, h) = (intr.width, intr.height);
        let mut color = ColorImage::black(w, h);
        let mut depth = DepthImage::zeros(w, h);
        for v in 0..h {
            for u in 0..w {
                let dc = Vector3::new((u as f64 - intr.cx) / intr.fx, (v as f64 - intr.cy) / intr.fy, 1.0);
                let dw = pose.rotation * dc;
                if let Some((hit, c)) = self.cast(&pose.translation, &dw) {
                    // the camera-frame ray has unit z, so the ray parameter is the depth
                    depth.set(u, v, hit.t);
                    color.set(u, v, c);
                }
            }
        }
        (color, depth)
    }
}

fn camera_pose(rng: &mut ChaCha8Rng, scene: &Scene, intr: &CameraIntrinsics) -> RigidTransform {
    loop {
        let p = Vector3::new(rng.gen_range(-1.3..1.3), rng.gen_range(-0.6..0.4), rng.gen_range(-1.3..1.3));
        let yaw = rng.gen_range(0.0..std::f64::consts::TAU);
        let pitch = rng.gen_range(-0.3..0.3);
        if !scene.free(&p, 0.35) {
            continue;
        }
        let r: Matrix3<f64> = (Rotation3::from_axis_angle(&Vector3::y_axis(), yaw)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), pitch))
        .into_inner();
        let pose = RigidTransform::new(r, p).expect("product of rotations");
        // reject views filled by a nearby box face
        let mut near = 0;
        let probes = 25;
        for i in 0..probes {
            let (u, v) =
                ((i % 5) as f64 / 4.0 * (intr.width - 1) as f64, (i / 5) as f64 / 4.0 * (intr.height - 1) as f64);
            let d = pose.rotation * Vector3::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0);
            if scene.cast(&p, &d).is_none_or(|(h, _)| h.t < 0.8) {
                near += 1;
            }
        }
        if near <= probes / 4 {
            return pose;
        }
    }
}

/// Deterministic pair for `seed`. The target camera is the source camera
/// moved by a rotation of at most `difficulty` degrees and a translation of at
/// most `difficulty * translation_per_degree` meters; the stored ground truth
/// maps target-camera points into the source camera.
pub fn generate_synthetic_pair(seed: u64, difficulty: f64, config: &SynthConfig) -> PairRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intr = CameraIntrinsics::default_for(config.width, config.height);
    let scene = Scene::random(&mut rng);
    let src_pose = camera_pose(&mut rng, &scene, &intr);
    let rel = RigidTransform::random(&mut rng, difficulty.to_radians(), difficulty * config.translation_per_degree);
    let tgt_pose = src_pose.compose(&rel);
    let (src_color, src_depth) = scene.render(&src_pose, &intr);
    let (tgt_color, tgt_depth) = scene.render(&tgt_pose, &intr);
    PairRecord { src_color, src_depth, tgt_color, tgt_depth, intr, gt: Some(rel) }
}

/// Scene and poses behind [`generate_synthetic_pair`], for oracle checks.
pub fn synthetic_scene(seed: u64, difficulty: f64, config: &SynthConfig) -> (Scene, RigidTransform, RigidTransform) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intr = CameraIntrinsics::default_for(config.width, config.height);
    let scene = Scene::random(&mut rng);
    let src_pose = camera_pose(&mut rng, &scene, &intr);
    let rel = RigidTransform::random(&mut rng, difficulty.to_radians(), difficulty * config.translation_per_degree);
    let tgt_pose = src_pose.compose(&rel);
    (scene, src_pose, tgt_pose)
}
