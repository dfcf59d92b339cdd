//! Point-cloud regression network whose penultimate activations serve as the
//! feature space for the distribution metrics.

use std::path::Path;

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::contact::sample_surface_points;
use crate::data::Dataset;
use crate::denoiser::{prepare_cloud, PointEncoder, PreparedCloud, SetAbstraction};
use crate::hand::param::{OMEGA, TAU, THETA};
use crate::hand::{relative_to_condition, HandParam, KinematicModel, Side};
use crate::io::{load_checkpoint, save_checkpoint};
use crate::nn::{Adam, Gradients, Graph, Linear, ParamStore, Var};
use crate::rng::{self, Domain};
use crate::{Error, Result};

pub const CHECKPOINT_KIND: &str = "backbone";
/// Two poses in axis-angle, relative root rotation (6D) and translation.
pub const TARGET_DIM: usize = 2 * 45 + 6 + 3;
const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub set_abstraction: SetAbstraction,
    /// Surface points per two-hand cloud.
    pub points: usize,
    pub encoder_width: usize,
    /// Width of the feature layer.
    pub feature_dim: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            set_abstraction: SetAbstraction {
                centroids1: 64,
                centroids2: 16,
                neighbors: 16,
                radius1: 0.03,
                radius2: 0.08,
                width1: 32,
                width2: 64,
            },
            points: 512,
            encoder_width: 128,
            feature_dim: 64,
            epochs: 40,
            batch: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// `[θ_l | θ_r | ω_rel | τ_rel]` with the right root expressed in the left root frame.
pub fn regression_target(left: &HandParam, right: &HandParam) -> Result<[f64; TARGET_DIM]> {
    let (rel, _, _) = relative_to_condition(right, left)?;
    let mut out = [0.0; TARGET_DIM];
    out[..45].copy_from_slice(&left.0[THETA]);
    out[45..90].copy_from_slice(&right.0[THETA]);
    out[90..96].copy_from_slice(&rel.0[OMEGA]);
    out[96..].copy_from_slice(&rel.0[TAU]);
    Ok(out)
}

fn cloud_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Surface cloud of the posed pair, grouped for the encoder.
pub fn pair_cloud(
    model: &KinematicModel,
    cfg: &BackboneConfig,
    left: &HandParam,
    right: &HandParam,
    index: usize,
) -> Result<PreparedCloud> {
    let l = model.forward_kinematics(left, Side::Left)?;
    let r = model.forward_kinematics(right, Side::Right)?;
    let pts = sample_surface_points(&l.mesh, &r.mesh, cfg.points, cloud_seed(cfg.seed, index))?;
    prepare_cloud(&pts, &cfg.set_abstraction)
}

pub fn pair_clouds(model: &KinematicModel, cfg: &BackboneConfig, pairs: &[(HandParam, HandParam)]) -> Result<Vec<PreparedCloud>> {
    pairs
        .par_iter()
        .enumerate()
        .map(|(i, (l, r))| pair_cloud(model, cfg, l, r, i))
        .collect()
}

#[derive(Debug, Clone)]
pub struct FeatureBackbone {
    pub cfg: BackboneConfig,
    pub store: ParamStore,
    encoder: PointEncoder,
    hidden: Linear,
    head: Linear,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BackboneReport {
    pub train_loss: Vec<f64>,
    pub val_loss_initial: f64,
    pub val_loss_final: f64,
}

impl FeatureBackbone {
    pub fn new(cfg: BackboneConfig) -> Self {
        let mut r = rng::stream(cfg.seed, Domain::Backbone, 0);
        let mut store = ParamStore::default();
        let encoder = PointEncoder::new(&mut store, &mut r, "encoder", cfg.set_abstraction.clone(), cfg.encoder_width);
        let hidden = Linear::new(&mut store, &mut r, "fc1", cfg.encoder_width, cfg.feature_dim);
        let head = Linear::new(&mut store, &mut r, "fc2", cfg.feature_dim, TARGET_DIM);
        FeatureBackbone {
            cfg,
            store,
            encoder,
            hidden,
            head,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.feature_dim
    }

    /// `(features, prediction)` nodes.
    fn forward(&self, g: &mut Graph, clouds: &[&PreparedCloud]) -> (Var, Var) {
        let h = self.encoder.forward(g, clouds);
        let h = self.hidden.forward(g, h);
        let feat = g.relu(h);
        let out = self.head.forward(g, feat);
        (feat, out)
    }

    fn evaluate(&self, clouds: &[PreparedCloud], tap: bool) -> Vec<Array2<f64>> {
        clouds
            .par_chunks(64)
            .map(|chunk| {
                let refs: Vec<&PreparedCloud> = chunk.iter().collect();
                let mut g = Graph::new(&self.store);
                let (feat, out) = self.forward(&mut g, &refs);
                g.value(if tap { feat } else { out }).clone()
            })
            .collect()
    }

    /// Penultimate activations, one row per cloud.
    pub fn features(&self, clouds: &[PreparedCloud]) -> DMatrix<f64> {
        let blocks = self.evaluate(clouds, true);
        let d = self.feature_dim();
        let mut m = DMatrix::zeros(clouds.len(), d);
        let mut row = 0;
        for b in blocks {
            for r in b.rows() {
                for (c, v) in r.iter().enumerate() {
                    m[(row, c)] = *v;
                }
                row += 1;
            }
        }
        m
    }

    /// Mean squared regression error.
    pub fn regression_loss(&self, clouds: &[PreparedCloud], targets: &[[f64; TARGET_DIM]]) -> f64 {
        let blocks = self.evaluate(clouds, false);
        let mut total = 0.0;
        let mut row = 0;
        for b in blocks {
            for r in b.rows() {
                total += r.iter().zip(&targets[row]).map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
                row += 1;
            }
        }
        total / (clouds.len() * TARGET_DIM) as f64
    }

    pub fn save(&self, dir: &Path, extra: serde_json::Value) -> Result<String> {
        let meta = serde_json::json!({
            "backbone": self.cfg,
            "feature_dim": self.feature_dim(),
            "target_dim": TARGET_DIM,
            "train": extra,
        });
        save_checkpoint(dir, CHECKPOINT_KIND, &self.store.to_tensors(), meta)
    }

    pub fn load(dir: &Path) -> Result<(FeatureBackbone, String)> {
        let (manifest, tensors) = load_checkpoint(dir, CHECKPOINT_KIND)?;
        let cfg: BackboneConfig = serde_json::from_value(manifest.meta["backbone"].clone())
            .map_err(|_| Error::LayoutMismatch("backbone manifest lacks a valid config".into()))?;
        let mut net = FeatureBackbone::new(cfg);
        net.store.load_tensors(&tensors)?;
        Ok((net, manifest.checksum))
    }
}

fn targets_of(data: &Dataset) -> Result<Vec<[f64; TARGET_DIM]>> {
    data.samples.iter().map(|s| regression_target(&s.left, &s.right)).collect()
}

fn pairs_of(data: &Dataset) -> Vec<(HandParam, HandParam)> {
    data.samples.iter().map(|s| (s.left, s.right)).collect()
}

/// Fits the regressor on `train` and reports the loss on `val` before and after.
pub fn train_backbone(
    model: &KinematicModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &BackboneConfig,
) -> Result<(FeatureBackbone, BackboneReport)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument("backbone batch and learning rate must be positive".into()));
    }
    let mut net = FeatureBackbone::new(cfg.clone());
    let clouds = pair_clouds(model, cfg, &pairs_of(train))?;
    let targets = targets_of(train)?;
    // validation clouds use indices past the training set so their seeds differ
    let val_pairs = pairs_of(val);
    let val_clouds: Vec<PreparedCloud> = val_pairs
        .par_iter()
        .enumerate()
        .map(|(i, (l, r))| pair_cloud(model, cfg, l, r, train.len() + i))
        .collect::<Result<_>>()?;
    let val_targets = targets_of(val)?;
    let mut report = BackboneReport {
        val_loss_initial: net.regression_loss(&val_clouds, &val_targets),
        ..Default::default()
    };
    let mut adam = Adam::new(&net.store, cfg.lr);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, Domain::Backbone, 1 + epoch as u64));
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch) {
            let parts: Vec<(f64, Gradients, f64)> = batch
                .par_chunks(CHUNK)
                .map(|idx| {
                    let refs: Vec<&PreparedCloud> = idx.iter().map(|&i| &clouds[i]).collect();
                    let target = Array2::from_shape_fn((idx.len(), TARGET_DIM), |(r, c)| targets[idx[r]][c]);
                    let mut g = Graph::new(&net.store);
                    let (_, out) = net.forward(&mut g, &refs);
                    let loss = g.masked_mse(out, target, Array2::ones((idx.len(), TARGET_DIM)));
                    (g.scalar(loss), g.backward(loss), idx.len() as f64 / batch.len() as f64)
                })
                .collect();
            let loss: f64 = parts.iter().map(|(l, _, w)| l * w).sum();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: step as usize,
                    record: batch[0],
                });
            }
            let grads: Vec<(Gradients, f64)> = parts.into_iter().map(|(_, g, w)| (g, w)).collect();
            adam.step(&mut net.store, &Gradients::combine(&grads));
            total += loss;
            batches += 1;
            step += 1;
        }
        report.train_loss.push(total / batches as f64);
        log::info!("backbone epoch {epoch}: loss {:.6}", total / batches as f64);
    }
    net.store.round_to_f32();
    report.val_loss_final = net.regression_loss(&val_clouds, &val_targets);
    Ok((net, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            set_abstraction: SetAbstraction {
                centroids1: 32,
                centroids2: 8,
                neighbors: 8,
                radius1: 0.03,
                radius2: 0.08,
                width1: 16,
                width2: 32,
            },
            points: 128,
            encoder_width: 32,
            feature_dim: 24,
            epochs: 2,
            batch: 16,
            lr: 1e-3,
            seed: 3,
        }
    }

    #[test]
    fn target_layout() {
        let data = generate_synthetic(&SyntheticSpec::toy(2, 3, 1)).unwrap();
        let s = &data.samples[0];
        let t = regression_target(&s.left, &s.right).unwrap();
        assert_eq!(t.len(), 99);
        assert_eq!(&t[..45], s.left.theta());
        assert_eq!(&t[45..90], s.right.theta());
        // left root is the identity, so the relative root is the right root
        for k in 0..6 {
            assert!((t[90 + k] - s.right.0[55 + k]).abs() < 1e-6);
        }
    }

    #[test]
    fn features_have_the_documented_width_and_training_is_seeded() {
        let data = generate_synthetic(&SyntheticSpec::toy(2, 40, 2)).unwrap();
        let model = KinematicModel::builtin();
        let train = data.subset(&(0..32).collect::<Vec<_>>());
        let val = data.subset(&(32..40).collect::<Vec<_>>());
        let (a, ra) = train_backbone(&model, &train, &val, &tiny()).unwrap();
        let (b, rb) = train_backbone(&model, &train, &val, &tiny()).unwrap();
        assert_eq!(ra, rb);
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        assert_eq!(
            a.save(dir_a.path(), serde_json::Value::Null).unwrap(),
            b.save(dir_b.path(), serde_json::Value::Null).unwrap()
        );
        let clouds = pair_clouds(&model, &a.cfg, &[(val.samples[0].left, val.samples[0].right)]).unwrap();
        let f = a.features(&clouds);
        assert_eq!((f.nrows(), f.ncols()), (1, 24));
        let (loaded, _) = FeatureBackbone::load(dir_a.path()).unwrap();
        assert_eq!(loaded.features(&clouds), f);
        assert!(matches!(
            train_backbone(&model, &Dataset::default(), &val, &tiny()),
            Err(Error::EmptyDataset)
        ));
    }
}
