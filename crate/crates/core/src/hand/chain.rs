//! Forward and reverse passes through the joint hierarchy.
//!
//! Joint 0 carries the root: `R_0 = M`, `t_0 = M·o_0 + τ`, where `M` is the
//! root rotation (composed with the side reflection for left hands). Every
//! other joint `j` with parent `p` has `R_j = R_p·rod(θ_j)` and
//! `t_j = R_p·o_j + t_p`. Parents always precede children.

use nalgebra::{Matrix3, Vector3};

use super::rotation::rodrigues_with_jacobian;

pub const JOINTS: usize = 16;

#[derive(Debug, Clone)]
pub struct ChainState {
    pub rot: Vec<Matrix3<f64>>,
    pub trans: Vec<Vector3<f64>>,
    rod: Vec<Matrix3<f64>>,
    rod_jac: Vec<[Matrix3<f64>; 3]>,
}

#[derive(Debug, Clone)]
pub struct ChainGrad {
    pub theta: [f64; 45],
    pub offsets: Vec<Vector3<f64>>,
    pub root: Matrix3<f64>,
    pub tau: Vector3<f64>,
}

pub fn forward(
    parents: &[usize],
    offsets: &[Vector3<f64>],
    theta: &[f64],
    root: &Matrix3<f64>,
    tau: &Vector3<f64>,
) -> ChainState {
    let n = parents.len();
    let mut rot = Vec::with_capacity(n);
    let mut trans = Vec::with_capacity(n);
    let mut rod = Vec::with_capacity(n);
    let mut rod_jac = Vec::with_capacity(n);
    rot.push(*root);
    trans.push(root * offsets[0] + tau);
    rod.push(Matrix3::identity());
    rod_jac.push([Matrix3::zeros(); 3]);
    for j in 1..n {
        let p = parents[j];
        let v = Vector3::new(theta[3 * (j - 1)], theta[3 * (j - 1) + 1], theta[3 * (j - 1) + 2]);
        let (r, jac) = rodrigues_with_jacobian(&v);
        rot.push(rot[p] * r);
        trans.push(rot[p] * offsets[j] + trans[p]);
        rod.push(r);
        rod_jac.push(jac);
    }
    ChainState {
        rot,
        trans,
        rod,
        rod_jac,
    }
}

/// Back-propagates cotangents on every joint transform to the inputs.
pub fn backward(
    parents: &[usize],
    offsets: &[Vector3<f64>],
    state: &ChainState,
    mut g_rot: Vec<Matrix3<f64>>,
    mut g_trans: Vec<Vector3<f64>>,
) -> ChainGrad {
    let n = parents.len();
    let mut theta = [0.0; 45];
    let mut g_off = vec![Vector3::zeros(); n];
    for j in (1..n).rev() {
        let p = parents[j];
        let rp = state.rot[p];
        let g_rod = rp.transpose() * g_rot[j];
        let add = g_rot[j] * state.rod[j].transpose() + g_trans[j] * offsets[j].transpose();
        g_rot[p] += add;
        let gt = g_trans[j];
        g_trans[p] += gt;
        g_off[j] = rp.transpose() * gt;
        for i in 0..3 {
            theta[3 * (j - 1) + i] = g_rod.component_mul(&state.rod_jac[j][i]).sum();
        }
    }
    let root = g_rot[0] + g_trans[0] * offsets[0].transpose();
    g_off[0] = state.rot[0].transpose() * g_trans[0];
    ChainGrad {
        theta,
        offsets: g_off,
        root,
        tau: g_trans[0],
    }
}

/// Checks that `parents` is a tree rooted at joint 0 with parents first.
pub fn validate_parents(parents: &[usize]) -> bool {
    !parents.is_empty() && parents.iter().enumerate().skip(1).all(|(j, &p)| p < j)
}
