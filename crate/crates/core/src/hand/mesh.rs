use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct HandMesh {
    pub vertices: Vec<Vector3<f64>>,
    /// Counter-clockwise seen from outside.
    pub faces: Vec<[usize; 3]>,
    pub normals: Vec<Vector3<f64>>,
}

impl HandMesh {
    pub fn new(vertices: Vec<Vector3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self> {
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= vertices.len())) {
            return Err(Error::ShapeMismatch(format!(
                "face {f:?} references a vertex beyond {}",
                vertices.len()
            )));
        }
        let normals = vertex_normals(&vertices, &faces)?;
        Ok(HandMesh {
            vertices,
            faces,
            normals,
        })
    }

    /// Reflects through the plane x = 0 and flips face orientation.
    pub fn mirrored_x(&self) -> HandMesh {
        let flip = |v: &Vector3<f64>| Vector3::new(-v.x, v.y, v.z);
        HandMesh {
            vertices: self.vertices.iter().map(flip).collect(),
            faces: self.faces.iter().map(|f| [f[0], f[2], f[1]]).collect(),
            normals: self.normals.iter().map(flip).collect(),
        }
    }

    pub fn triangle(&self, f: usize) -> [Vector3<f64>; 3] {
        self.faces[f].map(|i| self.vertices[i])
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        for v in &self.vertices {
            writeln!(w, "v {:.6} {:.6} {:.6}", v.x, v.y, v.z).map_err(io)?;
        }
        for f in &self.faces {
            writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Every undirected edge is shared by exactly two faces with opposite
    /// orientation.
    pub fn is_closed(&self) -> bool {
        let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                *directed.entry((f[k], f[(k + 1) % 3])).or_default() += 1;
            }
        }
        directed
            .iter()
            .all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
    }

    /// Parity ray-casting along three fixed directions.
    pub fn contains(&self, p: &Vector3<f64>) -> Result<bool> {
        let dirs = [
            Vector3::new(0.5377, 0.8112, 0.2291),
            Vector3::new(-0.3179, 0.1432, 0.9373),
            Vector3::new(0.2719, -0.8743, 0.4019),
        ];
        let parity = |d: &Vector3<f64>| {
            let d = d.normalize();
            self.faces
                .iter()
                .filter(|f| ray_hits_triangle(p, &d, &f.map(|i| self.vertices[i])))
                .count()
                % 2
                == 1
        };
        let first = parity(&dirs[0]);
        if dirs[1..].iter().any(|d| parity(d) != first) {
            return Err(Error::NonWatertight {
                point: [p.x, p.y, p.z],
            });
        }
        Ok(first)
    }
}

fn ray_hits_triangle(o: &Vector3<f64>, d: &Vector3<f64>, tri: &[Vector3<f64>; 3]) -> bool {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let pv = d.cross(&e2);
    let det = e1.dot(&pv);
    if det.abs() < 1e-15 {
        return false;
    }
    let inv = 1.0 / det;
    let tv = o - tri[0];
    let u = tv.dot(&pv) * inv;
    if !(0.0..=1.0).contains(&u) {
        return false;
    }
    let qv = tv.cross(&e1);
    let v = d.dot(&qv) * inv;
    if v < 0.0 || u + v > 1.0 {
        return false;
    }
    e2.dot(&qv) * inv > 0.0
}

/// Area-weighted vertex normals.
pub fn vertex_normals(vertices: &[Vector3<f64>], faces: &[[usize; 3]]) -> Result<Vec<Vector3<f64>>> {
    let mut acc = vec![Vector3::zeros(); vertices.len()];
    for f in faces {
        // |cross| is twice the triangle area
        let n = (vertices[f[1]] - vertices[f[0]]).cross(&(vertices[f[2]] - vertices[f[0]]));
        for &i in f {
            acc[i] += n;
        }
    }
    acc.into_iter()
        .enumerate()
        .map(|(i, n)| {
            let len = n.norm();
            if len < 1e-12 {
                Err(Error::ZeroAreaStar { vertex: i })
            } else {
                Ok(n / len)
            }
        })
        .collect()
}

/// Unit icosphere, used by tests and synthetic objects.
pub fn icosphere(subdivisions: usize) -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vector3<f64>> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
    .collect();
    let mut faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vector3<f64>>| {
            let key = (a.min(b), a.max(b));
            *mid.entry(key).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) / 2.0).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    (verts, faces)
}
