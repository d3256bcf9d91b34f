//! Registration error metrics.

use kiddo::{KdTree, SquaredEuclidean};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rgbd::RigidTransform;

/// Geodesic angle between the two rotations, degrees.
pub fn rotation_error(est: &RigidTransform, gt: &RigidTransform) -> f64 {
    let c = ((est.rotation.transpose() * gt.rotation).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Distance between the translations, centimeters.
pub fn translation_error(est: &RigidTransform, gt: &RigidTransform) -> f64 {
    (est.translation - gt.translation).norm() * 100.0
}

fn mean_nn(from: &[Vector3<f64>], tree: &KdTree<f64, 3>) -> f64 {
    from.iter().map(|p| tree.nearest_one::<SquaredEuclidean>(&[p.x, p.y, p.z]).distance.sqrt()).sum::<f64>()
        / from.len() as f64
}

fn tree(points: &[Vector3<f64>]) -> KdTree<f64, 3> {
    let mut t = KdTree::with_capacity(points.len().max(1));
    for (i, p) in points.iter().enumerate() {
        t.add(&[p.x, p.y, p.z], i as u64);
    }
    t
}

/// Symmetric mean nearest-neighbor distance between the cloud placed by the
/// estimate and by the ground truth, millimeters.
pub fn chamfer_error(cloud: &[Vector3<f64>], est: &RigidTransform, gt: &RigidTransform) -> Result<f64> {
    if cloud.is_empty() {
        return Err(Error::InvalidInput("chamfer error of an empty cloud".into()));
    }
    let a: Vec<_> = cloud.iter().map(|p| est.apply(p)).collect();
    let b: Vec<_> = cloud.iter().map(|p| gt.apply(p)).collect();
    let ab = mean_nn(&a, &tree(&b));
    let ba = mean_nn(&b, &tree(&a));
    Ok((ab + ba) / 2.0 * 1000.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub rotation_deg: f64,
    pub translation_cm: f64,
    pub chamfer_mm: f64,
}

impl PairMetrics {
    pub fn compute(cloud: &[Vector3<f64>], est: &RigidTransform, gt: &RigidTransform) -> Result<Self> {
        Ok(Self {
            rotation_deg: rotation_error(est, gt),
            translation_cm: translation_error(est, gt),
            chamfer_mm: chamfer_error(cloud, est, gt)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rotation_examples() {
        let id = RigidTransform::identity();
        assert_eq!(rotation_error(&id, &id), 0.0);
        let rz = RigidTransform::from_axis_angle(&Vector3::z(), std::f64::consts::FRAC_PI_2, Vector3::zeros());
        assert!((rotation_error(&rz, &id) - 90.0).abs() < 1e-9);
    }

    #[test]
    fn translation_examples() {
        let a = RigidTransform::from_translation(Vector3::new(0.03, 0.0, 0.04));
        let id = RigidTransform::identity();
        assert!((translation_error(&a, &id) - 5.0).abs() < 1e-12);
        assert_eq!(translation_error(&a, &a), 0.0);
    }

    #[test]
    fn chamfer_examples() {
        let p = [Vector3::new(0.0, 0.0, 1.0)];
        let id = RigidTransform::identity();
        assert_eq!(chamfer_error(&p, &id, &id).unwrap(), 0.0);
        let mm = RigidTransform::from_translation(Vector3::new(0.001, 0.0, 0.0));
        assert!((chamfer_error(&p, &mm, &id).unwrap() - 1.0).abs() < 1e-9);
        assert!(chamfer_error(&[], &id, &id).is_err());
    }

    #[test]
    fn chamfer_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<_> = (0..200).map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let est = RigidTransform::random(&mut rng, 0.2, 0.1);
        let gt = RigidTransform::random(&mut rng, 0.2, 0.1);
        let a: Vec<_> = pts.iter().map(|p| est.apply(p)).collect();
        let b: Vec<_> = pts.iter().map(|p| gt.apply(p)).collect();
        let nn = |x: &[Vector3<f64>], y: &[Vector3<f64>]| {
            x.iter().map(|p| y.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min)).sum::<f64>()
                / x.len() as f64
        };
        let want = (nn(&a, &b) + nn(&b, &a)) / 2.0 * 1000.0;
        assert!((chamfer_error(&pts, &est, &gt).unwrap() - want).abs() < 1e-9);
    }
}
