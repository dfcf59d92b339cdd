//! Built-in articulated capsule hand.
//!
//! Sixteen joints (wrist plus five three-joint fingers), twenty bones (five
//! palm bones hanging off the wrist and three per finger). Every bone is a
//! capsule tessellated into eight-point rings; shape coefficients scale bone
//! lengths and radii through a fixed exponential basis.

use nalgebra::{Matrix3, Vector3};

use super::chain::{self, ChainState, JOINTS};
use super::mesh::HandMesh;
use super::param::{HandParam, BETA, HAND_DIM, OMEGA, TAU, THETA};
use super::rotation::rot6d_vjp;
use super::spatial::Aabb;
use super::Side;
use crate::Result;

const AROUND: usize = 8;
const BASE_LATITUDES: [f64; 3] = [-60.0, -30.0, 0.0];
const TIP_LATITUDES: [f64; 3] = [0.0, 30.0, 60.0];
const SHAPE_DIM: usize = 10;

#[derive(Debug, Clone)]
pub struct Bone {
    pub owner: usize,
    pub start: Vector3<f64>,
    pub end: Vector3<f64>,
    pub child: Option<usize>,
    pub radius: f64,
    axis: Vector3<f64>,
    e1: Vector3<f64>,
    e2: Vector3<f64>,
}

impl Bone {
    fn new(owner: usize, start: Vector3<f64>, end: Vector3<f64>, child: Option<usize>, radius: f64) -> Self {
        let axis = (end - start).normalize();
        let helper = if axis.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
        let e1 = axis.cross(&helper).normalize();
        let e2 = axis.cross(&e1);
        Bone {
            owner,
            start,
            end,
            child,
            radius,
            axis,
            e1,
            e2,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct CapsuleVertex {
    bone: usize,
    at_end: bool,
    axial: f64,
    radial: f64,
    cos: f64,
    sin: f64,
}

/// A posed capsule: the segment `a–b` swept by a sphere of `radius`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub radius: f64,
}

impl Capsule {
    pub fn distance_to_axis(&self, p: &Vector3<f64>) -> f64 {
        let ab = self.b - self.a;
        let t = ((p - self.a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
        (p - (self.a + ab * t)).norm()
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        self.distance_to_axis(p) < self.radius
    }

    pub fn aabb(&self) -> Aabb {
        Aabb::empty().grow(&self.a, self.radius).grow(&self.b, self.radius)
    }
}

#[derive(Debug, Clone)]
pub struct CapsuleHand {
    pub parents: Vec<usize>,
    pub bones: Vec<Bone>,
    length_basis: Vec<[f64; SHAPE_DIM]>,
    radius_basis: Vec<[f64; SHAPE_DIM]>,
    verts: Vec<CapsuleVertex>,
    faces: Vec<[usize; 3]>,
    /// Vertices of the latitude-zero ring at each bone start, per bone.
    base_rings: Vec<Vec<usize>>,
}

/// Intermediate state kept for the reverse pass.
struct Posed {
    chain: ChainState,
    offsets: Vec<Vector3<f64>>,
    scales: Vec<f64>,
    radii: Vec<f64>,
    local: Vec<Vector3<f64>>,
    reflect: Matrix3<f64>,
}

impl Default for CapsuleHand {
    fn default() -> Self {
        Self::new()
    }
}

impl CapsuleHand {
    pub fn new() -> Self {
        // (first joint, base position, direction, lengths, radii, palm start)
        let fingers: [(usize, [f64; 3], [f64; 3], [f64; 3], [f64; 3], [f64; 3]); 5] = [
            (1, [-0.024, 0.088, 0.0], [-0.08, 1.0, 0.0], [0.040, 0.024, 0.020], [0.0085, 0.0078, 0.0070], [-0.0144, 0.012, 0.0]),
            (4, [-0.004, 0.092, 0.0], [0.0, 1.0, 0.0], [0.044, 0.028, 0.022], [0.0088, 0.0080, 0.0072], [-0.0024, 0.012, 0.0]),
            (7, [0.032, 0.078, 0.0], [0.12, 1.0, 0.0], [0.032, 0.019, 0.018], [0.0075, 0.0068, 0.0062], [0.0192, 0.012, 0.0]),
            (10, [0.015, 0.087, 0.0], [0.05, 1.0, 0.0], [0.041, 0.026, 0.021], [0.0083, 0.0076, 0.0068], [0.009, 0.012, 0.0]),
            (13, [-0.022, 0.022, -0.006], [-0.75, 0.66, -0.1], [0.036, 0.031, 0.026], [0.0105, 0.0095, 0.0085], [-0.006, 0.008, -0.002]),
        ];
        let v = |a: [f64; 3]| Vector3::new(a[0], a[1], a[2]);
        let mut parents = vec![0; JOINTS];
        let mut bones = Vec::with_capacity(20);
        for &(j0, base, dir, lens, radii, palm) in &fingers {
            let dir = v(dir).normalize();
            parents[j0] = 0;
            parents[j0 + 1] = j0;
            parents[j0 + 2] = j0 + 1;
            bones.push(Bone::new(0, v(palm), v(base), Some(j0), if j0 == 13 { 0.011 } else { 0.012 }));
            bones.push(Bone::new(j0, Vector3::zeros(), dir * lens[0], Some(j0 + 1), radii[0]));
            bones.push(Bone::new(j0 + 1, Vector3::zeros(), dir * lens[1], Some(j0 + 2), radii[1]));
            bones.push(Bone::new(j0 + 2, Vector3::zeros(), dir * lens[2], None, radii[2]));
        }
        let length_basis = (0..bones.len())
            .map(|b| {
                std::array::from_fn(|k| {
                    if k == 0 {
                        0.05
                    } else {
                        0.02 * (1.3 * (b + 1) as f64 * k as f64 + 0.4 * k as f64).sin()
                    }
                })
            })
            .collect();
        let radius_basis = (0..bones.len())
            .map(|b| {
                std::array::from_fn(|k| {
                    if k == 0 {
                        0.05
                    } else {
                        0.02 * (0.7 * (b + 2) as f64 * k as f64 + 1.1).cos()
                    }
                })
            })
            .collect();

        let mut verts = Vec::new();
        let mut faces = Vec::new();
        let mut base_rings = Vec::new();
        for b in 0..bones.len() {
            let first = verts.len();
            let pole = |at_end: bool, axial: f64| CapsuleVertex {
                bone: b,
                at_end,
                axial,
                radial: 0.0,
                cos: 0.0,
                sin: 0.0,
            };
            verts.push(pole(false, -1.0));
            let latitudes = BASE_LATITUDES.iter().map(|&l| (false, l)).chain(TIP_LATITUDES.iter().map(|&l| (true, l)));
            for (at_end, lat) in latitudes {
                let lat = f64::to_radians(lat);
                for m in 0..AROUND {
                    let phi = 2.0 * std::f64::consts::PI * m as f64 / AROUND as f64;
                    verts.push(CapsuleVertex {
                        bone: b,
                        at_end,
                        axial: lat.sin(),
                        radial: lat.cos(),
                        cos: phi.cos(),
                        sin: phi.sin(),
                    });
                }
            }
            verts.push(pole(true, 1.0));
            let rings = BASE_LATITUDES.len() + TIP_LATITUDES.len();
            let ring = |k: usize, m: usize| first + 1 + k * AROUND + m % AROUND;
            let tip = first + 1 + rings * AROUND;
            for m in 0..AROUND {
                faces.push([first, ring(0, m + 1), ring(0, m)]);
                for k in 0..rings - 1 {
                    faces.push([ring(k, m), ring(k, m + 1), ring(k + 1, m + 1)]);
                    faces.push([ring(k, m), ring(k + 1, m + 1), ring(k + 1, m)]);
                }
                faces.push([ring(rings - 1, m), ring(rings - 1, m + 1), tip]);
            }
            base_rings.push((0..AROUND).map(|m| ring(BASE_LATITUDES.len() - 1, m)).collect());
        }
        CapsuleHand {
            parents,
            bones,
            length_basis,
            radius_basis,
            verts,
            faces,
            base_rings,
        }
    }

    pub fn vertex_count(&self) -> usize {
        self.verts.len()
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    /// Bone that each vertex belongs to.
    pub fn vertex_bones(&self) -> Vec<usize> {
        self.verts.iter().map(|v| v.bone).collect()
    }

    /// Vertices whose mean is the start of `bone` in any pose.
    pub fn base_ring(&self, bone: usize) -> &[usize] {
        &self.base_rings[bone]
    }

    fn shape_scales(&self, beta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let dot = |basis: &[f64; SHAPE_DIM]| basis.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>();
        let scales = self.length_basis.iter().map(|b| dot(b).exp()).collect();
        let radii = self
            .radius_basis
            .iter()
            .zip(&self.bones)
            .map(|(b, bone)| bone.radius * dot(b).exp())
            .collect();
        (scales, radii)
    }

    fn local_vertex(&self, v: &CapsuleVertex, scale: f64, radius: f64) -> Vector3<f64> {
        let bone = &self.bones[v.bone];
        let anchor = if v.at_end { bone.end } else { bone.start };
        anchor * scale + (bone.axis * v.axial + (bone.e1 * v.cos + bone.e2 * v.sin) * v.radial) * radius
    }

    fn pose(&self, params: &HandParam, side: Side) -> Result<Posed> {
        let root = params.root_rotation()?;
        let reflect = side.reflection();
        let (scales, radii) = self.shape_scales(params.beta());
        let mut offsets = vec![Vector3::zeros(); JOINTS];
        for (b, bone) in self.bones.iter().enumerate() {
            if let Some(c) = bone.child {
                offsets[c] = bone.end * scales[b];
            }
        }
        let chain = chain::forward(&self.parents, &offsets, params.theta(), &(root * reflect), &params.tau());
        let local = self
            .verts
            .iter()
            .map(|v| self.local_vertex(v, scales[v.bone], radii[v.bone]))
            .collect();
        Ok(Posed {
            chain,
            offsets,
            scales,
            radii,
            local,
            reflect,
        })
    }

    pub fn forward(&self, params: &HandParam, side: Side) -> Result<(HandMesh, Vec<Capsule>)> {
        let posed = self.pose(params, side)?;
        let vertices = self
            .verts
            .iter()
            .zip(&posed.local)
            .map(|(v, p)| {
                let j = self.bones[v.bone].owner;
                posed.chain.rot[j] * p + posed.chain.trans[j]
            })
            .collect();
        let faces = match side {
            Side::Right => self.faces.clone(),
            Side::Left => self.faces.iter().map(|f| [f[0], f[2], f[1]]).collect(),
        };
        let capsules = self
            .bones
            .iter()
            .enumerate()
            .map(|(b, bone)| {
                let (r, t) = (posed.chain.rot[bone.owner], posed.chain.trans[bone.owner]);
                Capsule {
                    a: r * (bone.start * posed.scales[b]) + t,
                    b: r * (bone.end * posed.scales[b]) + t,
                    radius: posed.radii[b],
                }
            })
            .collect();
        Ok((HandMesh::new(vertices, faces)?, capsules))
    }

    /// `∂(Σ_v cotangentᵥ · Vᵥ)/∂params`.
    pub fn vjp(&self, params: &HandParam, side: Side, cotangent: &[Vector3<f64>]) -> Result<[f64; HAND_DIM]> {
        let posed = self.pose(params, side)?;
        let mut g_rot = vec![Matrix3::zeros(); JOINTS];
        let mut g_trans = vec![Vector3::zeros(); JOINTS];
        let mut g_scale = vec![0.0; self.bones.len()];
        let mut g_radius = vec![0.0; self.bones.len()];
        for ((v, p), c) in self.verts.iter().zip(&posed.local).zip(cotangent) {
            let bone = &self.bones[v.bone];
            let j = bone.owner;
            g_rot[j] += c * p.transpose();
            g_trans[j] += c;
            let gp = posed.chain.rot[j].transpose() * c;
            let anchor = if v.at_end { bone.end } else { bone.start };
            g_scale[v.bone] += gp.dot(&anchor);
            g_radius[v.bone] += gp.dot(&(bone.axis * v.axial + (bone.e1 * v.cos + bone.e2 * v.sin) * v.radial));
        }
        let g = chain::backward(&self.parents, &posed.offsets, &posed.chain, g_rot, g_trans);
        for (b, bone) in self.bones.iter().enumerate() {
            if let Some(c) = bone.child {
                g_scale[b] += g.offsets[c].dot(&bone.end);
            }
        }
        let mut out = [0.0; HAND_DIM];
        out[THETA].copy_from_slice(&g.theta);
        for k in 0..SHAPE_DIM {
            out[BETA.start + k] = (0..self.bones.len())
                .map(|b| {
                    g_scale[b] * posed.scales[b] * self.length_basis[b][k]
                        + g_radius[b] * posed.radii[b] * self.radius_basis[b][k]
                })
                .sum();
        }
        // M = R(ω)·S, S symmetric
        let g_root = g.root * posed.reflect;
        out[OMEGA].copy_from_slice(&rot6d_vjp(&params.omega(), &g_root)?);
        out[TAU].copy_from_slice(g.tau.as_slice());
        Ok(out)
    }
}
