//! Surface sampling and contact measures between a posed hand pair.

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::hand::{Aabb, Capsule, HandMesh, KdTree, PosedHand};
use crate::rng::{self, Domain};
use crate::sampler::{penetration_set_with, PenetrationPair};
use crate::{Error, Result};

/// Voxel edge used for penetration volume, in meters.
pub const GRID: f64 = 1e-3;
/// Distance below which a pair counts as close, in meters.
pub const PROXIMITY: f64 = 0.02;

/// Area-weighted uniform points on the union of both surfaces.
pub fn sample_surface_points(a: &HandMesh, b: &HandMesh, n: usize, seed: u64) -> Result<Vec<Vector3<f64>>> {
    if n < 64 {
        return Err(Error::InvalidArgument(format!("surface sampling needs n >= 64, got {n}")));
    }
    let tris: Vec<[Vector3<f64>; 3]> = [a, b]
        .iter()
        .flat_map(|m| (0..m.faces.len()).map(|f| m.triangle(f)))
        .collect();
    let mut cumulative = Vec::with_capacity(tris.len());
    let mut total = 0.0;
    for t in &tris {
        total += (t[1] - t[0]).cross(&(t[2] - t[0])).norm() / 2.0;
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("surfaces have zero area".into()));
    }
    let mut r = rng::stream(seed, Domain::Surface, 0);
    Ok((0..n)
        .map(|_| {
            let u = r.random_range(0.0..total);
            let f = cumulative.partition_point(|&c| c <= u).min(tris.len() - 1);
            let s = r.random::<f64>().sqrt();
            let v: f64 = r.random();
            let [p0, p1, p2] = tris[f];
            p0 * (1.0 - s) + p1 * (s * (1.0 - v)) + p2 * (s * v)
        })
        .collect())
}

/// A solid made of parts with bounding boxes, queried by point membership.
pub trait Solid: Sync {
    fn part_boxes(&self) -> Vec<Aabb>;
    fn contains_in(&self, p: &Vector3<f64>, parts: &[usize]) -> Result<bool>;
}

impl Solid for PosedHand {
    fn part_boxes(&self) -> Vec<Aabb> {
        self.part_aabbs()
    }

    fn contains_in(&self, p: &Vector3<f64>, parts: &[usize]) -> Result<bool> {
        self.contains_in_parts(p, parts)
    }
}

impl Solid for [Capsule] {
    fn part_boxes(&self) -> Vec<Aabb> {
        self.iter().map(Capsule::aabb).collect()
    }

    fn contains_in(&self, p: &Vector3<f64>, parts: &[usize]) -> Result<bool> {
        Ok(parts.iter().any(|&i| self[i].contains(p)))
    }
}

fn inside(b: &Aabb, p: &Vector3<f64>) -> bool {
    (0..3).all(|k| p[k] >= b.min[k] && p[k] <= b.max[k])
}

fn member<S: Solid + ?Sized>(s: &S, boxes: &[(usize, Aabb)], p: &Vector3<f64>, scratch: &mut Vec<usize>) -> Result<bool> {
    scratch.clear();
    scratch.extend(boxes.iter().filter(|(_, b)| inside(b, p)).map(|(i, _)| *i));
    if scratch.is_empty() {
        return Ok(false);
    }
    s.contains_in(p, scratch)
}

/// Number of grid cells whose centers lie inside both solids.
///
/// Cell centers sit at `(i + ½)·cell` on a world-aligned lattice. Only parts
/// whose boxes overlap the other solid are tested.
pub fn overlap_cells<A: Solid + ?Sized, B: Solid + ?Sized>(a: &A, b: &B, cell: f64) -> Result<u64> {
    let boxes_a = a.part_boxes();
    let boxes_b = b.part_boxes();
    let total = |bs: &[Aabb]| bs.iter().fold(Aabb::empty(), |acc, x| acc.union(x));
    let (box_a, box_b) = (total(&boxes_a), total(&boxes_b));
    let Some(region) = box_a.intersection(&box_b) else {
        return Ok(0);
    };
    let near = |bs: &[Aabb], other: &Aabb| -> Vec<(usize, Aabb)> {
        bs.iter()
            .enumerate()
            .filter_map(|(i, x)| x.intersection(other).map(|_| (i, *x)))
            .collect()
    };
    let (parts_a, parts_b) = (near(&boxes_a, &box_b), near(&boxes_b, &box_a));
    let lo = region.min.map(|v| (v / cell).floor() as i64 - 1);
    let hi = region.max.map(|v| (v / cell).ceil() as i64 + 1);
    let counts: Vec<u64> = (lo.x..=hi.x)
        .into_par_iter()
        .map(|i| -> Result<u64> {
            let mut scratch = Vec::new();
            let mut count = 0;
            let x = (i as f64 + 0.5) * cell;
            let slab = |ps: &[(usize, Aabb)]| -> Vec<(usize, Aabb)> {
                ps.iter().filter(|(_, b)| x >= b.min.x && x <= b.max.x).copied().collect()
            };
            let (sa, sb) = (slab(&parts_a), slab(&parts_b));
            if sa.is_empty() || sb.is_empty() {
                return Ok(0);
            }
            for j in lo.y..=hi.y {
                for k in lo.z..=hi.z {
                    let p = Vector3::new(x, (j as f64 + 0.5) * cell, (k as f64 + 0.5) * cell);
                    if member(a, &sa, &p, &mut scratch)? && member(b, &sb, &p, &mut scratch)? {
                        count += 1;
                    }
                }
            }
            Ok(count)
        })
        .collect::<Result<_>>()?;
    Ok(counts.iter().sum())
}

/// Shared volume of two posed hands in mm³ at the given grid edge (meters).
pub fn penetration_volume(a: &PosedHand, b: &PosedHand, cell: f64) -> Result<f64> {
    let n = overlap_cells(a, b, cell)?;
    Ok(n as f64 * (cell * 1e3).powi(3))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DepthAggregate {
    #[default]
    Mean,
    Max,
}

/// Depth of `a`'s vertices inside `b` over the penetration set, in cm.
pub fn penetration_distance(a: &HandMesh, b: &HandMesh, agg: DepthAggregate) -> f64 {
    let tree = KdTree::new(&b.vertices);
    depth_of(&penetration_set_with(&tree, a, b), agg)
}

fn depth_of(pairs: &[PenetrationPair], agg: DepthAggregate) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let m = match agg {
        DepthAggregate::Mean => pairs.iter().map(|p| p.depth).sum::<f64>() / pairs.len() as f64,
        DepthAggregate::Max => pairs.iter().map(|p| p.depth).fold(0.0, f64::max),
    };
    m * 100.0
}

/// Contact summary of one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactStats {
    pub pen_vol_mm3: f64,
    pub pen_dist_cm: f64,
    pub min_distance: f64,
    pub penetrates: bool,
}

impl ContactStats {
    pub fn proximate(&self, tau: f64) -> bool {
        self.penetrates || self.min_distance < tau
    }
}

/// `a` is the partner (right) hand, `b` the anchor (left).
pub fn contact_stats(a: &PosedHand, b: &PosedHand, agg: DepthAggregate) -> Result<ContactStats> {
    let tree = KdTree::new(&b.mesh.vertices);
    let pairs = penetration_set_with(&tree, &a.mesh, &b.mesh);
    let min_distance = a
        .mesh
        .vertices
        .iter()
        .filter_map(|v| tree.nearest(v))
        .map(|(_, d2)| d2.sqrt())
        .fold(f64::INFINITY, f64::min);
    Ok(ContactStats {
        pen_vol_mm3: penetration_volume(a, b, GRID)?,
        pen_dist_cm: depth_of(&pairs, agg),
        min_distance,
        penetrates: !pairs.is_empty(),
    })
}

/// Fraction of pairs that penetrate or come closer than `tau`.
pub fn proximity_ratio(stats: &[ContactStats], tau: f64) -> f64 {
    if stats.is_empty() {
        return 0.0;
    }
    stats.iter().filter(|s| s.proximate(tau)).count() as f64 / stats.len() as f64
}
