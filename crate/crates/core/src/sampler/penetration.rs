use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::hand::{HandMesh, HandParam, KdTree, KinematicModel, Side};
use crate::Result;

/// Vertex `i` of hand A lies behind the surface of hand B near vertex `j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenetrationPair {
    pub i: usize,
    pub j: usize,
    /// `−n_j·(V_a^i − V_b^j)`, always positive.
    pub depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PenaltyForm {
    /// Sum of squared vertex distances.
    #[default]
    Squared,
    /// Sum of plain vertex distances.
    Unsquared,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenetrationReport {
    pub pairs: Vec<PenetrationPair>,
    pub loss: f64,
}

/// Pairs each vertex of `a` with its nearest vertex of `b` (lowest index on
/// ties) and keeps those strictly behind `b`'s vertex normal.
pub fn penetration_set(a: &HandMesh, b: &HandMesh) -> Vec<PenetrationPair> {
    let tree = KdTree::new(&b.vertices);
    penetration_set_with(&tree, a, b)
}

pub fn penetration_set_with(tree: &KdTree, a: &HandMesh, b: &HandMesh) -> Vec<PenetrationPair> {
    a.vertices
        .iter()
        .enumerate()
        .filter_map(|(i, v)| {
            let (j, _) = tree.nearest(v)?;
            let depth = -b.normals[j].dot(&(v - b.vertices[j]));
            (depth > 0.0).then_some(PenetrationPair { i, j, depth })
        })
        .collect()
}

pub fn pair_loss(a: &HandMesh, b: &HandMesh, pairs: &[PenetrationPair], form: PenaltyForm) -> f64 {
    pairs
        .iter()
        .map(|p| {
            let d2 = (a.vertices[p.i] - b.vertices[p.j]).norm_squared();
            match form {
                PenaltyForm::Squared => d2,
                PenaltyForm::Unsquared => d2.sqrt(),
            }
        })
        .sum()
}

/// `∂L/∂V_a` for a frozen pair set.
pub fn pair_loss_cotangent(a: &HandMesh, b: &HandMesh, pairs: &[PenetrationPair], form: PenaltyForm) -> Vec<Vector3<f64>> {
    let mut cot = vec![Vector3::zeros(); a.vertices.len()];
    for p in pairs {
        let d = a.vertices[p.i] - b.vertices[p.j];
        cot[p.i] += match form {
            PenaltyForm::Squared => d * 2.0,
            PenaltyForm::Unsquared => {
                let n = d.norm();
                if n > 0.0 {
                    d / n
                } else {
                    Vector3::zeros()
                }
            }
        };
    }
    cot
}

/// Penetration of the right hand `clean` into the left hand `anchor`.
pub fn penetration_loss(
    model: &KinematicModel,
    clean: &HandParam,
    anchor: &HandParam,
    form: PenaltyForm,
) -> Result<PenetrationReport> {
    let a = model.forward_kinematics(clean, Side::Right)?.mesh;
    let b = model.forward_kinematics(anchor, Side::Left)?.mesh;
    let pairs = penetration_set(&a, &b);
    let loss = pair_loss(&a, &b, &pairs, form);
    Ok(PenetrationReport { pairs, loss })
}
