use std::ops::Range;

use nalgebra::{Matrix3, Vector3};

use super::rotation::{matrix_to_rot6d, rot6d_to_matrix};
use crate::{Error, Result};

/// Length of a flattened single-hand parameter vector.
pub const HAND_DIM: usize = 64;
/// Axis-angle rotations of the 15 articulated joints.
pub const THETA: Range<usize> = 0..45;
/// Shape coefficients.
pub const BETA: Range<usize> = 45..55;
/// Root rotation, first two matrix columns.
pub const OMEGA: Range<usize> = 55..61;
/// Root translation in meters.
pub const TAU: Range<usize> = 61..64;
/// The root block `[ω | τ]`.
pub const ROOT: Range<usize> = 55..64;

/// Single-hand parameter vector `[θ | β | ω | τ]`.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct HandParam(pub [f64; HAND_DIM]);

impl Default for HandParam {
    fn default() -> Self {
        Self::canonical()
    }
}

impl HandParam {
    /// Zero pose, zero shape, identity root at the origin.
    pub fn canonical() -> Self {
        let mut v = [0.0; HAND_DIM];
        v[OMEGA.start] = 1.0;
        v[OMEGA.start + 4] = 1.0;
        HandParam(v)
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; HAND_DIM] = values.try_into().map_err(|_| {
            Error::ShapeMismatch(format!("hand parameter needs {HAND_DIM} values, got {}", values.len()))
        })?;
        Ok(HandParam(arr))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn theta(&self) -> &[f64] {
        &self.0[THETA]
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.0[THETA]
    }

    pub fn beta(&self) -> &[f64] {
        &self.0[BETA]
    }

    pub fn beta_mut(&mut self) -> &mut [f64] {
        &mut self.0[BETA]
    }

    pub fn omega(&self) -> [f64; 6] {
        self.0[OMEGA].try_into().unwrap()
    }

    pub fn tau(&self) -> Vector3<f64> {
        Vector3::new(self.0[TAU.start], self.0[TAU.start + 1], self.0[TAU.start + 2])
    }

    /// Axis-angle vector of articulated joint `joint` (1..=15).
    pub fn joint_axis_angle(&self, joint: usize) -> Vector3<f64> {
        let o = 3 * (joint - 1);
        Vector3::new(self.0[o], self.0[o + 1], self.0[o + 2])
    }

    pub fn set_joint_axis_angle(&mut self, joint: usize, v: Vector3<f64>) {
        let o = 3 * (joint - 1);
        self.0[o..o + 3].copy_from_slice(v.as_slice());
    }

    pub fn root_rotation(&self) -> Result<Matrix3<f64>> {
        rot6d_to_matrix(&self.omega())
    }

    pub fn set_root(&mut self, rotation: &Matrix3<f64>, translation: &Vector3<f64>) {
        self.0[OMEGA].copy_from_slice(&matrix_to_rot6d(rotation));
        self.0[TAU].copy_from_slice(translation.as_slice());
    }

    /// Checks finiteness and that the root rotation is recoverable.
    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.0.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("hand parameter entry {i} is not finite")));
        }
        self.root_rotation().map(|_| ())
    }

    /// The mirroring transform Γ with `T = diag(-1, 1, 1)`.
    ///
    /// The root rotation becomes `T·R·T` and the translation `T·τ`; pose and
    /// shape are left untouched. Acting on the raw 6D columns `(a1, a2)` this
    /// is `(-T·a1, T·a2)`, which commutes with Gram-Schmidt, so the map is an
    /// exact involution on the stored values.
    pub fn mirror(&self) -> HandParam {
        let mut out = *self;
        let o = OMEGA.start;
        // -T a1 = (a1x, -a1y, -a1z)
        out.0[o + 1] = -self.0[o + 1];
        out.0[o + 2] = -self.0[o + 2];
        // T a2 = (-a2x, a2y, a2z)
        out.0[o + 3] = -self.0[o + 3];
        out.0[TAU.start] = -self.0[TAU.start];
        out
    }

    /// Applies the world-space rigid motion `p ↦ q·p + s` to the hand root.
    pub fn transformed(&self, q: &Matrix3<f64>, s: &Vector3<f64>) -> Result<HandParam> {
        let r = self.root_rotation()?;
        let mut out = *self;
        out.set_root(&(q * r), &(q * self.tau() + s));
        Ok(out)
    }

    /// Rounds every entry to the nearest `f32`, the on-disk precision.
    pub fn quantized(&self) -> HandParam {
        HandParam(self.0.map(|v| v as f32 as f64))
    }
}

/// Rigid transform that moves `anchor`'s root to identity rotation at the origin.
pub fn canonical_frame(anchor: &HandParam) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    let r = anchor.root_rotation()?;
    let q = r.transpose();
    let s = -(q * anchor.tau());
    Ok((q, s))
}

/// Expresses a (target, condition) pair in the condition hand's root frame.
///
/// Returns the transformed pair and the rigid motion that undoes it.
pub fn relative_to_condition(
    target: &HandParam,
    condition: &HandParam,
) -> Result<(HandParam, HandParam, (Matrix3<f64>, Vector3<f64>))> {
    let (q, s) = canonical_frame(condition)?;
    let t = target.transformed(&q, &s)?;
    let c = condition.transformed(&q, &s)?;
    let inv_q = q.transpose();
    let inv_s = -(inv_q * s);
    Ok((t, c, (inv_q, inv_s)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_param(rng: &mut impl Rng) -> HandParam {
        let mut v = [0.0; HAND_DIM];
        for x in v.iter_mut() {
            *x = rng.random_range(-1.0..1.0);
        }
        HandParam(v)
    }

    #[test]
    fn mirror_is_an_exact_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = random_param(&mut rng);
            assert_eq!(p.mirror().mirror(), p);
        }
    }

    #[test]
    fn mirror_of_identity_root_negates_x_translation() {
        let mut p = HandParam::canonical();
        p.0[TAU].copy_from_slice(&[0.1, 0.2, 0.3]);
        let m = p.mirror();
        assert_eq!(m.root_rotation().unwrap(), Matrix3::identity());
        assert_eq!(m.tau(), Vector3::new(-0.1, 0.2, 0.3));
    }

    #[test]
    fn mirror_of_quarter_turn_matches_matrix_product() {
        let rz = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let mut p = HandParam::canonical();
        p.set_root(&rz, &Vector3::zeros());
        let t = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
        let expected = t * rz * t;
        let got = p.mirror().root_rotation().unwrap();
        assert!((got - expected).abs().max() < 1e-8);
    }

    #[test]
    fn relative_frame_puts_condition_at_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_param(&mut rng);
        let b = random_param(&mut rng);
        let (t, c, (q, s)) = relative_to_condition(&a, &b).unwrap();
        assert!((c.root_rotation().unwrap() - Matrix3::identity()).abs().max() < 1e-12);
        assert!(c.tau().norm() < 1e-12);
        let back = t.transformed(&q, &s).unwrap();
        let ra = a.root_rotation().unwrap();
        assert!((back.root_rotation().unwrap() - ra).abs().max() < 1e-12);
        assert!((back.tau() - a.tau()).norm() < 1e-12);
    }

    #[test]
    fn from_slice_rejects_wrong_length() {
        assert!(matches!(HandParam::from_slice(&[0.0; 3]), Err(Error::ShapeMismatch(_))));
    }
}
