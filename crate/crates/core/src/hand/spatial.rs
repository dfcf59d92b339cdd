//! Axis-aligned boxes and a 3-d tree for nearest-vertex queries.

use nalgebra::Vector3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn empty() -> Self {
        Aabb {
            min: Vector3::repeat(f64::INFINITY),
            max: Vector3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vector3<f64>>) -> Self {
        points.into_iter().fold(Self::empty(), |b, p| b.grow(p, 0.0))
    }

    pub fn grow(mut self, p: &Vector3<f64>, radius: f64) -> Self {
        self.min = self.min.inf(&p.add_scalar(-radius));
        self.max = self.max.sup(&p.add_scalar(radius));
        self
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&other.min),
            max: self.max.sup(&other.max),
        }
    }

    pub fn intersection(&self, other: &Aabb) -> Option<Aabb> {
        let min = self.min.sup(&other.min);
        let max = self.max.inf(&other.max);
        (min.x <= max.x && min.y <= max.y && min.z <= max.z).then_some(Aabb { min, max })
    }

    pub fn volume(&self) -> f64 {
        let d = self.max - self.min;
        d.x.max(0.0) * d.y.max(0.0) * d.z.max(0.0)
    }
}

/// Static 3-d tree over a point set.
///
/// Nearest queries return the lowest index among equidistant points, so the
/// result matches a linear scan that keeps the first strict minimum.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    nodes: Vec<KdNode>,
    order: Vec<usize>,
}

#[derive(Debug, Clone)]
struct KdNode {
    start: usize,
    end: usize,
    axis: usize,
    split: f64,
    children: Option<(usize, usize)>,
}

const LEAF_SIZE: usize = 8;

impl KdTree {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let mut tree = KdTree {
            points: points.to_vec(),
            nodes: Vec::new(),
            order: (0..points.len()).collect(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(KdNode {
            start,
            end,
            axis: 0,
            split: 0.0,
            children: None,
        });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let bb = Aabb::from_points(self.order[start..end].iter().map(|&i| &self.points[i]));
        let ext = bb.max - bb.min;
        let axis = ext.imax();
        let mid = (start + end) / 2;
        let pts = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b))
        });
        let split = self.points[self.order[mid]][axis];
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        let node = &mut self.nodes[id];
        node.axis = axis;
        node.split = split;
        node.children = Some((left, right));
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index and squared distance of the nearest point.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, q, &mut best);
        Some(best)
    }

    fn search(&self, id: usize, q: &Vector3<f64>, best: &mut (usize, f64)) {
        let node = &self.nodes[id];
        match node.children {
            None => {
                for &i in &self.order[node.start..node.end] {
                    let d = (self.points[i] - q).norm_squared();
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            Some((left, right)) => {
                let diff = q[node.axis] - node.split;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                // equality keeps ties reachable on the far side
                if diff * diff <= best.1 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

pub fn brute_force_nearest(points: &[Vector3<f64>], q: &Vector3<f64>) -> Option<(usize, f64)> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| (i, (p - q).norm_squared()))
        .fold(None, |acc, (i, d)| match acc {
            Some((_, bd)) if bd <= d => acc,
            _ => Some((i, d)),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn kd_tree_matches_linear_scan(
            pts in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 1..200),
            qs in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0), 1..20),
        ) {
            let pts: Vec<_> = pts.into_iter().map(|(x, y, z)| Vector3::new(x, y, z)).collect();
            let tree = KdTree::new(&pts);
            for (x, y, z) in qs {
                let q = Vector3::new(x, y, z);
                prop_assert_eq!(tree.nearest(&q), brute_force_nearest(&pts, &q));
            }
        }
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let pts = vec![
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(-1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
        ];
        let pts: Vec<_> = pts.iter().cycle().take(40).copied().collect();
        let tree = KdTree::new(&pts);
        assert_eq!(tree.nearest(&Vector3::zeros()).unwrap().0, 0);
        assert_eq!(tree.nearest(&Vector3::new(2.0, 0.0, 0.0)).unwrap().0, 0);
    }

    #[test]
    fn aabb_intersection() {
        let a = Aabb::from_points(&[Vector3::zeros(), Vector3::repeat(1.0)]);
        let b = Aabb::from_points(&[Vector3::repeat(0.5), Vector3::repeat(2.0)]);
        assert!((a.intersection(&b).unwrap().volume() - 0.125).abs() < 1e-15);
        let c = Aabb::from_points(&[Vector3::repeat(3.0)]);
        assert!(a.intersection(&c).is_none());
    }
}
