//! Articulated hand representation: parameters, kinematics, meshes and
//! occupancy.

pub mod builtin;
pub mod chain;
pub mod mesh;
pub mod param;
pub mod rotation;
pub mod spatial;
pub mod template;

use std::path::Path;

use nalgebra::{Matrix3, Vector3};

pub use builtin::{Capsule, CapsuleHand};
pub use mesh::{vertex_normals, HandMesh};
pub use param::{canonical_frame, relative_to_condition, HandParam, HAND_DIM};
pub use rotation::{matrix_to_rot6d, rot6d_to_matrix};
pub use spatial::{Aabb, KdTree};
pub use template::TemplateHand;

use crate::Result;

/// Which hand a parameter vector is rendered as.
///
/// Parameters always live in right-hand space; a left hand is the mirror
/// image of the right-hand mesh of `mirror(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Right,
    Left,
}

impl Side {
    pub fn reflection(self) -> Matrix3<f64> {
        match self {
            Side::Right => Matrix3::identity(),
            Side::Left => Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0)),
        }
    }
}

#[derive(Debug, Clone)]
pub enum KinematicModel {
    Builtin(CapsuleHand),
    Template(TemplateHand),
}

impl Default for KinematicModel {
    fn default() -> Self {
        KinematicModel::Builtin(CapsuleHand::new())
    }
}

impl KinematicModel {
    pub fn builtin() -> Self {
        Self::default()
    }

    pub fn load_template(dir: &Path) -> Result<Self> {
        TemplateHand::load(dir).map(KinematicModel::Template)
    }

    pub fn name(&self) -> &'static str {
        match self {
            KinematicModel::Builtin(_) => "builtin",
            KinematicModel::Template(_) => "template",
        }
    }

    pub fn vertex_count(&self) -> usize {
        match self {
            KinematicModel::Builtin(h) => h.vertex_count(),
            KinematicModel::Template(h) => h.vertex_count(),
        }
    }

    pub fn forward_kinematics(&self, params: &HandParam, side: Side) -> Result<PosedHand> {
        match self {
            KinematicModel::Builtin(h) => {
                let (mesh, capsules) = h.forward(params, side)?;
                Ok(PosedHand {
                    mesh,
                    capsules: Some(capsules),
                })
            }
            KinematicModel::Template(h) => Ok(PosedHand {
                mesh: h.forward(params, side)?,
                capsules: None,
            }),
        }
    }

    pub fn kinematics_vjp(&self, params: &HandParam, side: Side, cotangent: &[Vector3<f64>]) -> Result<[f64; HAND_DIM]> {
        match self {
            KinematicModel::Builtin(h) => h.vjp(params, side, cotangent),
            KinematicModel::Template(h) => h.vjp(params, side, cotangent),
        }
    }

    pub fn occupancy(&self, params: &HandParam, side: Side, points: &[Vector3<f64>]) -> Result<Vec<bool>> {
        let posed = self.forward_kinematics(params, side)?;
        points.iter().map(|p| posed.contains(p)).collect()
    }
}

/// A posed hand: its surface plus, for the built-in model, the capsules.
#[derive(Debug, Clone)]
pub struct PosedHand {
    pub mesh: HandMesh,
    pub capsules: Option<Vec<Capsule>>,
}

impl PosedHand {
    pub fn contains(&self, p: &Vector3<f64>) -> Result<bool> {
        match &self.capsules {
            Some(caps) => Ok(caps.iter().any(|c| c.contains(p))),
            None => self.mesh.contains(p),
        }
    }

    pub fn aabb(&self) -> Aabb {
        match &self.capsules {
            Some(caps) => caps.iter().fold(Aabb::empty(), |b, c| b.union(&c.aabb())),
            None => Aabb::from_points(&self.mesh.vertices),
        }
    }

    /// Bounding boxes of the solid's parts (one per capsule, or the whole mesh).
    pub fn part_aabbs(&self) -> Vec<Aabb> {
        match &self.capsules {
            Some(caps) => caps.iter().map(Capsule::aabb).collect(),
            None => vec![self.aabb()],
        }
    }

    /// Membership restricted to the listed parts.
    pub fn contains_in_parts(&self, p: &Vector3<f64>, parts: &[usize]) -> Result<bool> {
        match &self.capsules {
            Some(caps) => Ok(parts.iter().any(|&i| caps[i].contains(p))),
            None => self.mesh.contains(p),
        }
    }
}
