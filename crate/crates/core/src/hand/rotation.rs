//! Rotation parameterizations and their Jacobians.

use nalgebra::{Matrix3, Vector3};

use crate::{Error, Result};

const GS_EPS: f64 = 1e-8;

/// Skew-symmetric cross-product matrix `[v]×`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn columns(omega: &[f64; 6]) -> (Vector3<f64>, Vector3<f64>) {
    (
        Vector3::new(omega[0], omega[1], omega[2]),
        Vector3::new(omega[3], omega[4], omega[5]),
    )
}

/// Gram-Schmidt on the two stored columns; the third is their cross product.
pub fn rot6d_to_matrix(omega: &[f64; 6]) -> Result<Matrix3<f64>> {
    let (a1, a2) = columns(omega);
    let n1 = a1.norm();
    if !(n1 > GS_EPS) {
        return Err(Error::DegenerateRotation(format!("first column norm {n1:e}")));
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let n2 = u2.norm();
    if !(n2 > GS_EPS) || !(b1.cross(&a2).norm() > GS_EPS) {
        return Err(Error::DegenerateRotation("columns are collinear".into()));
    }
    let b2 = u2 / n2;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

pub fn matrix_to_rot6d(r: &Matrix3<f64>) -> [f64; 6] {
    [r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]]
}

/// Vector-Jacobian product of [`rot6d_to_matrix`]: maps `∂L/∂R` to `∂L/∂ω`.
pub fn rot6d_vjp(omega: &[f64; 6], grad_r: &Matrix3<f64>) -> Result<[f64; 6]> {
    let (a1, a2) = columns(omega);
    let r = rot6d_to_matrix(omega)?;
    let (b1, b2) = (r.column(0).into_owned(), r.column(1).into_owned());
    let mut g1 = grad_r.column(0).into_owned();
    let mut g2 = grad_r.column(1).into_owned();
    let g3 = grad_r.column(2).into_owned();
    // b3 = b1 × b2
    g1 += b2.cross(&g3);
    g2 += g3.cross(&b1);
    // b2 = u2 / |u2|, u2 = a2 - (b1·a2) b1
    let n1 = a1.norm();
    let u2 = a2 - b1 * b1.dot(&a2);
    let n2 = u2.norm();
    let gu2 = (g2 - b2 * b2.dot(&g2)) / n2;
    let ga2 = gu2 - b1 * b1.dot(&gu2);
    g1 += -gu2 * b1.dot(&a2) - a2 * b1.dot(&gu2);
    // b1 = a1 / |a1|
    let ga1 = (g1 - b1 * b1.dot(&g1)) / n1;
    Ok([ga1.x, ga1.y, ga1.z, ga2.x, ga2.y, ga2.z])
}

// Coefficients of R = I + A·K + B·K² and of their radial derivatives
// (dA/dθ)/θ, (dB/dθ)/θ, with series expansions near zero.
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64, f64) {
    if theta < 1e-2 {
        let t2 = theta * theta;
        let t4 = t2 * t2;
        (
            1.0 - t2 / 6.0 + t4 / 120.0,
            0.5 - t2 / 24.0 + t4 / 720.0,
            -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        (
            s / theta,
            (1.0 - c) / t2,
            (theta * c - s) / (t2 * theta),
            (theta * s - 2.0 * (1.0 - c)) / (t2 * t2),
        )
    }
}

/// Axis-angle to rotation matrix.
pub fn rodrigues(v: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b, _, _) = rodrigues_coeffs(v.norm());
    let k = skew(v);
    Matrix3::identity() + k * a + k * k * b
}

/// Rotation matrix and its partial derivatives with respect to each
/// axis-angle component.
pub fn rodrigues_with_jacobian(v: &Vector3<f64>) -> (Matrix3<f64>, [Matrix3<f64>; 3]) {
    let (a, b, da, db) = rodrigues_coeffs(v.norm());
    let k = skew(v);
    let k2 = k * k;
    let r = Matrix3::identity() + k * a + k2 * b;
    let jac = [0, 1, 2].map(|i| {
        let e = skew(&Vector3::ith(i, 1.0));
        e * a + (e * k + k * e) * b + k * (da * v[i]) + k2 * (db * v[i])
    });
    (r, jac)
}
