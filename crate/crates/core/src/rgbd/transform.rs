use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3};
use rand::Rng;

use crate::error::{Error, Result};

/// `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

const ORTHO_TOL: f64 = 1e-9;

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Checked constructor; the rotation must be orthonormal with `det = +1`.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = Self { rotation, translation };
        t.check(ORTHO_TOL)?;
        Ok(t)
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation }
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle);
        Self { rotation: *rot.matrix(), translation }
    }

    /// Uniformly distributed axis, angle uniform in `[0, max_angle]`, translation
    /// direction uniform with length uniform in `[0, max_translation]`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, max_angle: f64, max_translation: f64) -> Self {
        let axis = random_unit(rng);
        let angle = rng.gen::<f64>() * max_angle;
        let dir = random_unit(rng);
        let len = rng.gen::<f64>() * max_translation;
        Self::from_axis_angle(&axis, angle, dir * len)
    }

    pub fn check(&self, tol: f64) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if !(ortho <= tol) || !((det - 1.0).abs() <= tol) || !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(format!("not a rigid transform (|RᵀR − I|max = {ortho:e}, det = {det})")));
        }
        Ok(())
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `compose(a, b)(p) = a(b(p))`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Accepts a homogeneous matrix whose rotation block is orthonormal to
    /// `1e-6` and snaps it onto SO(3).
    pub fn from_matrix4(m: &Matrix4<f64>) -> Result<Self> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidInput(format!("pose bottom row {bottom:?} is not [0 0 0 1]")));
        }
        let raw = Self {
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        };
        raw.check(1e-6)?;
        Ok(Self { rotation: project_to_rotation(&raw.rotation), translation: raw.translation })
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }
}

/// Nearest rotation in the Frobenius sense.
pub fn project_to_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

pub(crate) fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0);
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn identity_and_translation() {
        let p = Vector3::new(0.3, -0.2, 1.0);
        assert_eq!(RigidTransform::identity().apply(&p), p);
        let t = RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(t.apply(&Vector3::zeros()), Vector3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn quarter_turn_about_z() {
        let t = RigidTransform::from_axis_angle(&Vector3::z(), FRAC_PI_2, Vector3::zeros());
        let q = t.apply(&Vector3::new(1.0, 0.0, 0.0));
        assert!((q - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn compose_with_identity_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = RigidTransform::random(&mut rng, 3.0, 2.0);
        assert_eq!(t.compose(&RigidTransform::identity()), t);
        let id = t.compose(&t.inverse());
        assert!((id.rotation - Matrix3::identity()).abs().max() < 1e-9);
        assert!(id.translation.norm() < 1e-9);
    }

    #[test]
    fn compose_applies_right_operand_first() {
        let a = RigidTransform::from_axis_angle(&Vector3::z(), FRAC_PI_2, Vector3::zeros());
        let b = RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let p = a.compose(&b).apply(&Vector3::zeros());
        assert!((p - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn seeded_inverse_oracle_on_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let t = RigidTransform::random(&mut rng, std::f64::consts::PI, 5.0);
        let inv = t.inverse();
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let p = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()) * 10.0;
            worst = worst.max((t.compose(&inv).apply(&p) - p).norm());
            worst = worst.max((inv.apply(&t.apply(&p)) - p).norm());
        }
        assert!(worst < 1e-9, "{worst}");
    }

    #[test]
    fn rejects_reflection() {
        let mut m = Matrix3::identity();
        m[(2, 2)] = -1.0;
        assert!(RigidTransform::new(m, Vector3::zeros()).is_err());
    }

    #[test]
    fn matrix4_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = RigidTransform::random(&mut rng, 1.0, 1.0);
        let back = RigidTransform::from_matrix4(&t.to_matrix4()).unwrap();
        assert!((back.rotation - t.rotation).abs().max() < 1e-12);
        assert_eq!(back.translation, t.translation);
    }
}
