//! Linear-blend-skinning backend loaded from a user-supplied template.
//!
//! On disk a template is a directory holding `template.json` plus three
//! little-endian `f32` blobs: rest vertices (V×3), skinning weights (V×J) and
//! a joint regressor (J×V). Shape coefficients have no effect on this
//! backend.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::builtin::CapsuleHand;
use super::chain::{self, JOINTS};
use super::mesh::HandMesh;
use super::param::{HandParam, HAND_DIM, OMEGA, TAU, THETA};
use super::rotation::rot6d_vjp;
use super::Side;
use crate::io::{read_f32_blob, write_f32_blob};
use crate::{Error, Result};

pub const MANIFEST: &str = "template.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemplateManifest {
    pub format: String,
    pub units: String,
    pub joint_count: usize,
    pub vertex_count: usize,
    pub parents: Vec<usize>,
    pub faces: Vec<[usize; 3]>,
    pub rest_vertices: String,
    pub weights: String,
    pub regressor: String,
}

#[derive(Debug, Clone)]
pub struct TemplateHand {
    pub parents: Vec<usize>,
    pub rest: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
    /// Nonzero skinning weights per vertex.
    weights: Vec<Vec<(usize, f64)>>,
    regressor: Vec<f64>,
    joints: Vec<Vector3<f64>>,
    offsets: Vec<Vector3<f64>>,
}

impl TemplateHand {
    /// `weights` is V×J row-major, `regressor` is J×V row-major.
    pub fn new(
        parents: Vec<usize>,
        rest: Vec<Vector3<f64>>,
        faces: Vec<[usize; 3]>,
        weights: &[f64],
        regressor: &[f64],
    ) -> Result<Self> {
        let v = rest.len();
        if parents.len() != JOINTS || !chain::validate_parents(&parents) {
            return Err(Error::InvalidArgument(format!(
                "template needs a {JOINTS}-joint tree with parents listed first"
            )));
        }
        if weights.len() != v * JOINTS || regressor.len() != v * JOINTS {
            return Err(Error::ShapeMismatch("template weight/regressor sizes".into()));
        }
        if faces.iter().flatten().any(|&i| i >= v) {
            return Err(Error::ShapeMismatch("template face index out of range".into()));
        }
        let mut sparse = Vec::with_capacity(v);
        for (i, row) in weights.chunks(JOINTS).enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!("skinning weights of vertex {i} sum to {sum}")));
            }
            sparse.push(row.iter().copied().enumerate().filter(|&(_, w)| w != 0.0).collect());
        }
        let joints: Vec<Vector3<f64>> = regressor
            .chunks(v)
            .map(|row| row.iter().zip(&rest).map(|(w, p)| p * *w).sum())
            .collect();
        let offsets = (0..JOINTS)
            .map(|j| if j == 0 { joints[0] } else { joints[j] - joints[parents[j]] })
            .collect();
        Ok(TemplateHand {
            parents,
            rest,
            faces,
            weights: sparse,
            regressor: regressor.to_vec(),
            joints,
            offsets,
        })
    }

    /// Rigidly skinned copy of the built-in hand at zero shape.
    pub fn from_builtin(hand: &CapsuleHand) -> Result<Self> {
        let (mesh, _) = hand.forward(&HandParam::canonical(), Side::Right)?;
        let v = mesh.vertices.len();
        let mut weights = vec![0.0; v * JOINTS];
        for (i, b) in hand.vertex_bones().into_iter().enumerate() {
            weights[i * JOINTS + hand.bones[b].owner] = 1.0;
        }
        let mut regressor = vec![0.0; JOINTS * v];
        for (b, bone) in hand.bones.iter().enumerate() {
            if bone.owner != 0 {
                let ring = hand.base_ring(b);
                for &i in ring {
                    regressor[bone.owner * v + i] = 1.0 / ring.len() as f64;
                }
            }
        }
        TemplateHand::new(hand.parents.clone(), mesh.vertices, mesh.faces, &weights, &regressor)
    }

    pub fn vertex_count(&self) -> usize {
        self.rest.len()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: TemplateManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if m.units != "m" {
            return Err(Error::UnitMismatch(m.units));
        }
        if m.joint_count != JOINTS {
            return Err(Error::LayoutMismatch(format!("template has {} joints, need {JOINTS}", m.joint_count)));
        }
        let v = m.vertex_count;
        let rest = read_f32_blob(&dir.join(&m.rest_vertices), v * 3)?;
        let weights = read_f32_blob(&dir.join(&m.weights), v * JOINTS)?;
        let regressor = read_f32_blob(&dir.join(&m.regressor), JOINTS * v)?;
        let rest = rest.chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
        // f32 storage: renormalize rows that drift by rounding only
        let mut weights = weights;
        for row in weights.chunks_mut(JOINTS) {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() < 1e-5 {
                row.iter_mut().for_each(|w| *w /= s);
            }
        }
        TemplateHand::new(m.parents, rest, m.faces, &weights, &regressor)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let v = self.rest.len();
        let rest: Vec<f64> = self.rest.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        let mut weights = vec![0.0; v * JOINTS];
        for (i, row) in self.weights.iter().enumerate() {
            for &(j, w) in row {
                weights[i * JOINTS + j] = w;
            }
        }
        write_f32_blob(&dir.join("rest_vertices.f32"), &rest)?;
        write_f32_blob(&dir.join("weights.f32"), &weights)?;
        write_f32_blob(&dir.join("regressor.f32"), &self.regressor)?;
        let m = TemplateManifest {
            format: "twohand-template".into(),
            units: "m".into(),
            joint_count: JOINTS,
            vertex_count: v,
            parents: self.parents.clone(),
            faces: self.faces.clone(),
            rest_vertices: "rest_vertices.f32".into(),
            weights: "weights.f32".into(),
            regressor: "regressor.f32".into(),
        };
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&m).map_err(|e| Error::json(&path, e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn forward(&self, params: &HandParam, side: Side) -> Result<HandMesh> {
        let root = params.root_rotation()? * side.reflection();
        let state = chain::forward(&self.parents, &self.offsets, params.theta(), &root, &params.tau());
        let vertices = self
            .rest
            .iter()
            .zip(&self.weights)
            .map(|(p, ws)| {
                ws.iter()
                    .map(|&(j, w)| (state.rot[j] * (p - self.joints[j]) + state.trans[j]) * w)
                    .sum()
            })
            .collect();
        let faces = match side {
            Side::Right => self.faces.clone(),
            Side::Left => self.faces.iter().map(|f| [f[0], f[2], f[1]]).collect(),
        };
        HandMesh::new(vertices, faces)
    }

    pub fn vjp(&self, params: &HandParam, side: Side, cotangent: &[Vector3<f64>]) -> Result<[f64; HAND_DIM]> {
        let reflect = side.reflection();
        let root = params.root_rotation()? * reflect;
        let state = chain::forward(&self.parents, &self.offsets, params.theta(), &root, &params.tau());
        let mut g_rot = vec![Matrix3::zeros(); JOINTS];
        let mut g_trans = vec![Vector3::zeros(); JOINTS];
        for ((p, ws), c) in self.rest.iter().zip(&self.weights).zip(cotangent) {
            for &(j, w) in ws {
                g_rot[j] += (c * w) * (p - self.joints[j]).transpose();
                g_trans[j] += c * w;
            }
        }
        let g = chain::backward(&self.parents, &self.offsets, &state, g_rot, g_trans);
        let mut out = [0.0; HAND_DIM];
        out[THETA].copy_from_slice(&g.theta);
        out[OMEGA].copy_from_slice(&rot6d_vjp(&params.omega(), &(g.root * reflect))?);
        out[TAU].copy_from_slice(g.tau.as_slice());
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::super::rotation::rodrigues;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut impl Rng) -> HandParam {
        let mut p = HandParam::canonical();
        for x in p.theta_mut() {
            *x = rng.random_range(-0.5..0.5);
        }
        let r = rodrigues(&Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        p.set_root(&r, &Vector3::new(0.05, -0.02, 0.1));
        p
    }

    #[test]
    fn rigid_template_reproduces_builtin_hand() {
        let hand = CapsuleHand::new();
        let tpl = TemplateHand::from_builtin(&hand).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for side in [Side::Right, Side::Left] {
            let p = random_pose(&mut rng);
            let (a, _) = hand.forward(&p, side).unwrap();
            let b = tpl.forward(&p, side).unwrap();
            for (x, y) in a.vertices.iter().zip(&b.vertices) {
                assert!((x - y).norm() < 1e-12);
            }
            assert_eq!(a.faces, b.faces);
        }
    }

    #[test]
    fn template_vjp_matches_finite_differences() {
        let hand = CapsuleHand::new();
        let tpl = TemplateHand::from_builtin(&hand).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_pose(&mut rng);
        let cot: Vec<Vector3<f64>> = (0..tpl.vertex_count())
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let g = tpl.vjp(&p, Side::Left, &cot).unwrap();
        let f = |q: &HandParam| -> f64 {
            let m = tpl.forward(q, Side::Left).unwrap();
            m.vertices.iter().zip(&cot).map(|(v, c)| v.dot(c)).sum()
        };
        let h = 1e-5;
        for i in 0..HAND_DIM {
            let mut qp = p;
            qp.0[i] += h;
            let mut qm = p;
            qm.0[i] -= h;
            let fd = (f(&qp) - f(&qm)) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            assert!(rel < 1e-3, "coord {i}: fd {fd} analytic {}", g[i]);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let hand = CapsuleHand::new();
        let tpl = TemplateHand::from_builtin(&hand).unwrap();
        let dir = tempfile::tempdir().unwrap();
        tpl.save(dir.path()).unwrap();
        let back = TemplateHand::load(dir.path()).unwrap();
        let p = random_pose(&mut ChaCha8Rng::seed_from_u64(1));
        let a = tpl.forward(&p, Side::Right).unwrap();
        let b = back.forward(&p, Side::Right).unwrap();
        for (x, y) in a.vertices.iter().zip(&b.vertices) {
            // f32 storage
            assert!((x - y).norm() < 1e-5);
        }
    }

    #[test]
    fn rejects_non_metric_units() {
        let hand = CapsuleHand::new();
        let tpl = TemplateHand::from_builtin(&hand).unwrap();
        let dir = tempfile::tempdir().unwrap();
        tpl.save(dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let text = std::fs::read_to_string(&path).unwrap().replace("\"units\": \"m\"", "\"units\": \"mm\"");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(TemplateHand::load(dir.path()), Err(Error::UnitMismatch(_))));
    }

    #[test]
    fn weight_rows_must_sum_to_one() {
        let rest = vec![Vector3::zeros(); 2];
        let parents = CapsuleHand::new().parents;
        let weights = vec![0.5; 2 * JOINTS];
        let reg = vec![0.0; 2 * JOINTS];
        assert!(TemplateHand::new(parents, rest, vec![], &weights, &reg).is_err());
    }
}
