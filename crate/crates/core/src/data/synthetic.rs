//! Desk-scale synthetic two-hand data.
//!
//! Each mode fixes a finger-curl pattern for both hands and a distribution
//! over the right hand's root relative to the left. Samples jitter the curls
//! and the relative transform, then reject pairs that interpenetrate beyond a
//! threshold.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Dataset, ObjectCloud, TwoHandSample, OBJECT_POINTS};
use crate::hand::rotation::rodrigues;
use crate::hand::{CapsuleHand, HandParam};
use crate::rng::{self, gaussian, Domain};
use crate::sampler::{penetration_loss, PenaltyForm};
use crate::{Error, Result};

pub const MAX_CONSECUTIVE_REJECTIONS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSpec {
    /// Curl per finger (index, middle, pinky, ring, thumb) in radians per joint.
    pub anchor_curl: [f64; 5],
    pub partner_curl: [f64; 5],
    /// Axis-angle of the right root in the left root frame.
    pub rotation: [f64; 3],
    pub cone_deg: f64,
    pub translation: [f64; 3],
    pub translation_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub modes: Vec<ModeSpec>,
    /// Standard deviation of the per-finger curl offsets.
    pub curl_sigma: f64,
    /// Standard deviation of independent per-coordinate pose noise.
    pub theta_sigma: f64,
    /// Largest accepted penetration loss (m²); `None` accepts everything.
    pub max_penetration: Option<f64>,
    pub count: usize,
    pub seed: u64,
    pub objects: bool,
}

impl SyntheticSpec {
    /// `k` well-separated modes. The first two are hand-designed (palms
    /// facing with curled fingers; two fists side by side);
    /// further modes are drawn from the seed.
    pub fn toy(k: usize, count: usize, seed: u64) -> Self {
        let mut modes = vec![
            ModeSpec {
                anchor_curl: [0.12, 0.12, 0.1, 0.1, 0.05],
                partner_curl: [0.1, 0.1, 0.1, 0.1, 0.05],
                rotation: [0.0, std::f64::consts::PI, 0.0],
                cone_deg: 8.0,
                translation: [0.0, 0.005, -0.07],
                translation_sigma: 0.006,
            },
            ModeSpec {
                anchor_curl: [0.9, 0.9, 0.9, 0.9, 0.4],
                partner_curl: [1.1, 1.1, 1.1, 1.1, 0.5],
                rotation: [0.0, 0.0, -0.35],
                cone_deg: 8.0,
                translation: [0.17, -0.01, 0.0],
                translation_sigma: 0.008,
            },
        ];
        let mut r = rng::stream(seed, Domain::Synthetic, u64::MAX);
        while modes.len() < k {
            let curl = |r: &mut rand_chacha::ChaCha8Rng| std::array::from_fn(|_| r.random_range(0.0..1.2));
            let angle = r.random_range(-1.0..1.0);
            let dir = Vector3::from_fn(|_, _| r.random_range(-1.0..1.0)).normalize();
            modes.push(ModeSpec {
                anchor_curl: curl(&mut r),
                partner_curl: curl(&mut r),
                rotation: [0.0, angle, 0.0],
                cone_deg: 8.0,
                translation: (dir * 0.2).into(),
                translation_sigma: 0.008,
            });
        }
        modes.truncate(k);
        SyntheticSpec {
            modes,
            curl_sigma: 0.12,
            theta_sigma: 0.02,
            max_penetration: Some(1e-4),
            count,
            seed,
            objects: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::InvalidArgument("synthetic spec needs at least one mode".into()));
        }
        let sigmas = self
            .modes
            .iter()
            .flat_map(|m| [m.cone_deg, m.translation_sigma])
            .chain([self.curl_sigma, self.theta_sigma]);
        if sigmas.into_iter().any(|s| !(s >= 0.0)) {
            return Err(Error::InvalidArgument("synthetic spreads must be non-negative".into()));
        }
        Ok(())
    }
}

/// Bending axis of each articulated joint: curling a positive angle moves
/// the finger toward -z (the palm side) in the rest frame.
fn curl_axes(hand: &CapsuleHand) -> Vec<Vector3<f64>> {
    (1..16)
        .map(|j| {
            let bone = hand.bones.iter().find(|b| b.owner == j).expect("every joint owns a bone");
            let dir = (bone.end - bone.start).normalize();
            Vector3::z().cross(&dir).normalize()
        })
        .collect()
}

fn finger_of(joint: usize) -> usize {
    (joint - 1) / 3
}

fn pose(curl: &[f64; 5], axes: &[Vector3<f64>], curl_sigma: f64, theta_sigma: f64, r: &mut impl Rng) -> HandParam {
    let offsets: [f64; 5] = std::array::from_fn(|_| curl_sigma * gaussian(r));
    let mut p = HandParam::canonical();
    for j in 1..16 {
        let f = finger_of(j);
        let noise = Vector3::from_fn(|_, _| theta_sigma * gaussian(r));
        p.set_joint_axis_angle(j, axes[j - 1] * (curl[f] + offsets[f]) + noise);
    }
    p
}

/// Uniform direction, angle uniform in `[0, cone]`.
fn cone_rotation(cone_deg: f64, r: &mut impl Rng) -> Matrix3<f64> {
    let axis = loop {
        let v = Vector3::from_fn(|_, _| gaussian(r));
        if v.norm() > 1e-9 {
            break v.normalize();
        }
    };
    let angle = r.random_range(0.0..=1.0) * cone_deg.to_radians();
    rodrigues(&(axis * angle))
}

fn object_cloud(mode: usize, center: Vector3<f64>, r: &mut impl Rng) -> ObjectCloud {
    let sphere = mode % 2 == 0;
    let size = 0.03;
    let points = (0..OBJECT_POINTS)
        .map(|_| {
            let v = Vector3::from_fn(|_, _| gaussian(r)).normalize();
            let p = if sphere {
                v * size
            } else {
                // project onto the cube surface along the dominant axis
                let m = v.abs().max();
                v / m * size
            };
            (center + p).map(|c| c as f32 as f64)
        })
        .collect();
    ObjectCloud {
        points,
        category: if sphere { "sphere" } else { "box" }.into(),
    }
}

fn draw_sample(spec: &SyntheticSpec, hand: &CapsuleHand, axes: &[Vector3<f64>], index: usize) -> Result<(TwoHandSample, usize)> {
    let model = crate::hand::KinematicModel::Builtin(hand.clone());
    let mut r = rng::stream(spec.seed, Domain::Synthetic, index as u64);
    for _ in 0..MAX_CONSECUTIVE_REJECTIONS {
        let k = r.random_range(0..spec.modes.len());
        let m = &spec.modes[k];
        let left = pose(&m.anchor_curl, axes, spec.curl_sigma, spec.theta_sigma, &mut r);
        let mut right = pose(&m.partner_curl, axes, spec.curl_sigma, spec.theta_sigma, &mut r);
        let rot = cone_rotation(m.cone_deg, &mut r) * rodrigues(&Vector3::from(m.rotation));
        let t = Vector3::from(m.translation) + Vector3::from_fn(|_, _| m.translation_sigma * gaussian(&mut r));
        right.set_root(&rot, &t);
        let (left, right) = (left.quantized(), right.quantized());
        let accept = match spec.max_penetration {
            None => true,
            Some(eps) => penetration_loss(&model, &right, &left, PenaltyForm::Squared)?.loss <= eps,
        };
        if accept {
            let object = spec.objects.then(|| object_cloud(k, t * 0.5, &mut r));
            return Ok((TwoHandSample { left, right, object }, k));
        }
    }
    Err(Error::RejectionStall(MAX_CONSECUTIVE_REJECTIONS))
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let hand = CapsuleHand::new();
    let axes = curl_axes(&hand);
    let drawn: Vec<(TwoHandSample, usize)> = (0..spec.count)
        .into_par_iter()
        .map(|i| draw_sample(spec, &hand, &axes, i))
        .collect::<Result<_>>()?;
    let (samples, modes) = drawn.into_iter().unzip();
    Ok(Dataset {
        samples,
        modes: Some(modes),
    })
}
