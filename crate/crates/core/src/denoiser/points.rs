//! Two-level set-abstraction encoder for point clouds.
//!
//! Grouping is geometry only and is precomputed once per cloud. The cloud is
//! first sorted lexicographically, which makes sampling, grouping and thus
//! the embedding independent of input point order.

use std::cmp::Ordering;

use nalgebra::Vector3;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Graph, Linear, ParamStore, Var};
use crate::{Error, Result};

pub const MIN_POINTS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetAbstraction {
    pub centroids1: usize,
    pub centroids2: usize,
    pub neighbors: usize,
    pub radius1: f64,
    pub radius2: f64,
    pub width1: usize,
    pub width2: usize,
}

impl SetAbstraction {
    pub fn object() -> Self {
        SetAbstraction {
            centroids1: 128,
            centroids2: 32,
            neighbors: 16,
            radius1: 0.04,
            radius2: 0.1,
            width1: 64,
            width2: 128,
        }
    }
}

/// Precomputed grouping of one cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCloud {
    /// Neighbor offsets around each level-1 centroid, scaled by `radius1`.
    level1: Array2<f64>,
    /// Level-1 centroid index of every level-2 neighbor.
    level2_index: Vec<usize>,
    /// Offsets of level-2 neighbors, scaled by `radius2`.
    level2: Array2<f64>,
    /// Level-2 centroid positions scaled by `radius2`.
    centers: Array2<f64>,
}

fn lex(a: &Vector3<f64>, b: &Vector3<f64>) -> Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)).then(a.z.total_cmp(&b.z))
}

/// Farthest-point sampling, seeded by the point farthest from the centroid.
/// Ties go to the lowest index; exhausted clouds repeat points.
pub fn farthest_point_sample(points: &[Vector3<f64>], count: usize) -> Vec<usize> {
    let mean = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let argmax = |d: &[f64]| {
        let mut best = 0;
        for (i, &v) in d.iter().enumerate() {
            if v > d[best] {
                best = i;
            }
        }
        best
    };
    let from_mean: Vec<f64> = points.iter().map(|p| (p - mean).norm_squared()).collect();
    let mut chosen = vec![argmax(&from_mean)];
    let mut min_d: Vec<f64> = points.iter().map(|p| (p - points[chosen[0]]).norm_squared()).collect();
    while chosen.len() < count {
        let next = argmax(&min_d);
        chosen.push(next);
        for (d, p) in min_d.iter_mut().zip(points) {
            *d = d.min((p - points[next]).norm_squared());
        }
    }
    chosen
}

/// Up to `k` nearest points within `radius`, padded with the nearest.
fn ball_query(points: &[Vector3<f64>], center: &Vector3<f64>, radius: f64, k: usize) -> Vec<usize> {
    let r2 = radius * radius;
    let mut cand: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| ((p - center).norm_squared(), i))
        .filter(|(d, _)| *d <= r2)
        .collect();
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cand.truncate(k);
    let mut out: Vec<usize> = cand.iter().map(|c| c.1).collect();
    let first = out[0];
    out.resize(k, first);
    out
}

pub fn prepare_cloud(points: &[Vector3<f64>], cfg: &SetAbstraction) -> Result<PreparedCloud> {
    if points.len() < MIN_POINTS {
        return Err(Error::TooFewPoints {
            got: points.len(),
            need: MIN_POINTS,
        });
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(lex);
    let k = cfg.neighbors;
    let c1: Vec<Vector3<f64>> = farthest_point_sample(&sorted, cfg.centroids1)
        .into_iter()
        .map(|i| sorted[i])
        .collect();
    let mut level1 = Array2::zeros((cfg.centroids1 * k, 3));
    for (ci, c) in c1.iter().enumerate() {
        for (slot, n) in ball_query(&sorted, c, cfg.radius1, k).into_iter().enumerate() {
            let d = (sorted[n] - c) / cfg.radius1;
            level1.row_mut(ci * k + slot).assign(&ndarray::arr1(&[d.x, d.y, d.z]));
        }
    }
    let c2_idx = farthest_point_sample(&c1, cfg.centroids2);
    let mut level2_index = Vec::with_capacity(cfg.centroids2 * k);
    let mut level2 = Array2::zeros((cfg.centroids2 * k, 3));
    let mut centers = Array2::zeros((cfg.centroids2, 3));
    for (ci, &c) in c2_idx.iter().enumerate() {
        let center = c1[c];
        let cs = center / cfg.radius2;
        centers.row_mut(ci).assign(&ndarray::arr1(&[cs.x, cs.y, cs.z]));
        for (slot, n) in ball_query(&c1, &center, cfg.radius2, k).into_iter().enumerate() {
            let d = (c1[n] - center) / cfg.radius2;
            level2.row_mut(ci * k + slot).assign(&ndarray::arr1(&[d.x, d.y, d.z]));
            level2_index.push(n);
        }
    }
    Ok(PreparedCloud {
        level1,
        level2_index,
        level2,
        centers,
    })
}

#[derive(Debug, Clone)]
pub struct PointEncoder {
    pub cfg: SetAbstraction,
    mlp1: [Linear; 2],
    mlp2: [Linear; 2],
    head: Linear,
    pub out_dim: usize,
}

impl PointEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: SetAbstraction, out_dim: usize) -> Self {
        let (w1, w2) = (cfg.width1, cfg.width2);
        PointEncoder {
            mlp1: [
                Linear::new(store, rng, &format!("{name}.sa1.0"), 3, w1 / 2),
                Linear::new(store, rng, &format!("{name}.sa1.1"), w1 / 2, w1),
            ],
            mlp2: [
                Linear::new(store, rng, &format!("{name}.sa2.0"), w1 + 3, w2 / 2),
                Linear::new(store, rng, &format!("{name}.sa2.1"), w2 / 2, w2),
            ],
            head: Linear::new(store, rng, &format!("{name}.global"), w2 + 3, out_dim),
            cfg,
            out_dim,
        }
    }

    /// One row of `out_dim` features per cloud.
    pub fn forward(&self, g: &mut Graph, clouds: &[&PreparedCloud]) -> Var {
        let (c1, c2, k) = (self.cfg.centroids1, self.cfg.centroids2, self.cfg.neighbors);
        let stack = |f: &dyn Fn(&PreparedCloud) -> &Array2<f64>| {
            let views: Vec<_> = clouds.iter().map(|c| f(c).view()).collect();
            ndarray::concatenate(ndarray::Axis(0), &views).unwrap()
        };
        let x = g.input(stack(&|c| &c.level1));
        let h = self.mlp1[0].forward(g, x);
        let h = g.relu(h);
        let h = self.mlp1[1].forward(g, h);
        let h = g.relu(h);
        let f1 = g.max_pool(h, k);
        let index: Vec<usize> = clouds
            .iter()
            .enumerate()
            .flat_map(|(b, c)| c.level2_index.iter().map(move |&i| b * c1 + i))
            .collect();
        let grouped = g.gather(f1, &index);
        let rel = g.input(stack(&|c| &c.level2));
        let h = g.concat(&[grouped, rel]);
        let h = self.mlp2[0].forward(g, h);
        let h = g.relu(h);
        let h = self.mlp2[1].forward(g, h);
        let h = g.relu(h);
        let f2 = g.max_pool(h, k);
        let pos = g.input(stack(&|c| &c.centers));
        let h = g.concat(&[f2, pos]);
        let h = self.head.forward(g, h);
        let h = g.relu(h);
        g.max_pool(h, c2)
    }
}
