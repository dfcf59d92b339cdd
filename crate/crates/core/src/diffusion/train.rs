//! Conditioning-dropout training of the single-hand denoiser.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DiffusionSchedule, Normalizer, ScheduleSpec};
use crate::data::Dataset;
use crate::denoiser::{Batch, DenoiserNet, PreparedCloud};
use crate::hand::param::ROOT;
use crate::hand::{relative_to_condition, HandParam, HAND_DIM};
use crate::nn::{Adam, Gradients, Graph};
use crate::rng::{self, gaussian_vec, Domain};
use crate::{Error, Result};

/// Rows per independent tape; fixed so results do not depend on the thread
/// count.
const CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub p_uncond: f64,
    /// Probability of training on the mirrored, role-swapped pair.
    pub flip_prob: f64,
    pub schedule: ScheduleSpec,
    pub seed: u64,
    /// Exclude the root block from the loss when the condition is dropped.
    pub mask_root: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            batch: 256,
            lr: 2e-4,
            lr_decay: 0.9,
            decay_every: 20,
            p_uncond: 0.5,
            flip_prob: 0.5,
            schedule: ScheduleSpec::default(),
            seed: 0,
            mask_root: true,
        }
    }
}

impl TrainConfig {
    /// Batch 64 for object-conditional models.
    pub fn for_objects() -> Self {
        TrainConfig {
            batch: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.p_uncond) || !prob(self.flip_prob) {
            return Err(Error::InvalidArgument("p_uncond and flip_prob must lie in [0, 1]".into()));
        }
        if self.batch == 0 || self.decay_every == 0 {
            return Err(Error::InvalidArgument("batch and decay_every must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
    pub rows: usize,
    pub dropped: usize,
}

/// Everything one optimizer step consumes, drawn from the `(seed, step)` stream.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub records: Vec<usize>,
    pub flipped: Vec<bool>,
    pub x_t: Array2<f64>,
    pub cond: Array2<f64>,
    pub dropped: Vec<bool>,
    pub t: Vec<usize>,
    pub target: Array2<f64>,
    pub mask: Array2<f64>,
}

impl StepBatch {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// The training objective for an arbitrary prediction.
    pub fn loss_of(&self, pred: &Array2<f64>) -> f64 {
        let mut total = 0.0;
        ndarray::Zip::from(pred)
            .and(&self.target)
            .and(&self.mask)
            .for_each(|&p, &t, &m| total += m * (p - t) * (p - t));
        total / pred.len() as f64
    }
}

/// Target/condition in the orientation chosen for this draw.
fn orient(left: &HandParam, right: &HandParam, flip: bool) -> (HandParam, HandParam) {
    if flip {
        (left.mirror(), right.mirror())
    } else {
        (*right, *left)
    }
}

/// Statistics of every training target the configuration can produce.
pub fn fit_normalizer(data: &Dataset, cfg: &TrainConfig, canonicalize: bool) -> Result<Normalizer> {
    let mut flips = Vec::new();
    if cfg.flip_prob < 1.0 {
        flips.push(false);
    }
    if cfg.flip_prob > 0.0 {
        flips.push(true);
    }
    let mut rows = Vec::with_capacity(data.len() * flips.len());
    for s in &data.samples {
        for &flip in &flips {
            let (mut target, cond) = orient(&s.left, &s.right, flip);
            if canonicalize {
                target = relative_to_condition(&target, &cond)?.0;
            }
            rows.push(target.0);
        }
    }
    Normalizer::fit(&rows)
}

/// Samples the step's rows: orientation, dropout, timestep and noise.
/// Targets and conditions come out standardized by `norm`.
pub fn draw_step(
    data: &Dataset,
    records: &[usize],
    cfg: &TrainConfig,
    sched: &DiffusionSchedule,
    norm: &Normalizer,
    step: usize,
    canonicalize: bool,
) -> Result<StepBatch> {
    let b = records.len();
    let mut r = rng::stream(cfg.seed, Domain::Train, step as u64);
    let mut out = StepBatch {
        records: records.to_vec(),
        flipped: Vec::with_capacity(b),
        x_t: Array2::zeros((b, HAND_DIM)),
        cond: Array2::zeros((b, HAND_DIM)),
        dropped: Vec::with_capacity(b),
        t: Vec::with_capacity(b),
        target: Array2::zeros((b, HAND_DIM)),
        mask: Array2::ones((b, HAND_DIM)),
    };
    for (row, &rec) in records.iter().enumerate() {
        let s = &data.samples[rec];
        if !s.left.0.iter().chain(&s.right.0).all(|v| v.is_finite()) {
            log::error!("record {rec} holds non-finite parameters");
            return Err(Error::NonFiniteLoss { step, record: rec });
        }
        let flip = r.random_bool(cfg.flip_prob);
        let drop = r.random_bool(cfg.p_uncond);
        let t = r.random_range(1..=sched.steps());
        let eps = gaussian_vec(&mut r, HAND_DIM);
        let (mut target, mut cond) = orient(&s.left, &s.right, flip);
        if canonicalize {
            (target, cond, _) = relative_to_condition(&target, &cond)?;
        }
        let z0 = norm.to_z(&target.0);
        let x_t = sched.forward_diffuse(&z0, t, &eps);
        out.x_t.row_mut(row).assign(&ndarray::ArrayView1::from(&x_t));
        out.target.row_mut(row).assign(&ndarray::ArrayView1::from(&z0));
        if drop {
            if cfg.mask_root {
                out.mask.row_mut(row).slice_mut(ndarray::s![ROOT]).fill(0.0);
            }
        } else {
            out.cond.row_mut(row).assign(&ndarray::ArrayView1::from(&norm.to_z(&cond.0)));
        }
        out.flipped.push(flip);
        out.dropped.push(drop);
        out.t.push(t);
    }
    Ok(out)
}

/// Object clouds per record in both orientations (the mirrored copy has x negated).
fn prepare_objects(net: &DenoiserNet, data: &Dataset) -> Result<Vec<[PreparedCloud; 2]>> {
    data.samples
        .par_iter()
        .map(|s| {
            let obj = s.object.as_ref().ok_or(Error::MissingObject)?;
            let mirrored: Vec<_> = obj.points.iter().map(|p| nalgebra::Vector3::new(-p.x, p.y, p.z)).collect();
            Ok([net.prepare_object(&obj.points)?, net.prepare_object(&mirrored)?])
        })
        .collect()
}

fn slice_rows(a: &Array2<f64>, lo: usize, hi: usize) -> Array2<f64> {
    a.slice(ndarray::s![lo..hi, ..]).to_owned()
}

/// One forward/backward over the step's rows, split into fixed chunks.
fn step_gradients(
    net: &DenoiserNet,
    batch: &StepBatch,
    clouds: Option<&[[PreparedCloud; 2]]>,
    seed: u64,
    step: usize,
) -> Result<(f64, Gradients)> {
    let b = batch.len();
    let chunks: Vec<(usize, usize)> = (0..b).step_by(CHUNK).map(|lo| (lo, (lo + CHUNK).min(b))).collect();
    let parts: Vec<(f64, Gradients, f64)> = chunks
        .par_iter()
        .enumerate()
        .map(|(c, &(lo, hi))| {
            let objects: Vec<&PreparedCloud> = match clouds {
                Some(cl) => (lo..hi).map(|i| &cl[batch.records[i]][batch.flipped[i] as usize]).collect(),
                None => Vec::new(),
            };
            let input = Batch {
                x_t: slice_rows(&batch.x_t, lo, hi),
                cond: slice_rows(&batch.cond, lo, hi),
                dropped: batch.dropped[lo..hi].to_vec(),
                t: batch.t[lo..hi].to_vec(),
                objects,
            };
            let dropout_rng = rng::stream(seed ^ (c as u64 + 1).rotate_left(40), Domain::Train, step as u64);
            let mut g = Graph::training(&net.store, dropout_rng);
            let pred = net.forward(&mut g, &input)?;
            let loss = g.masked_mse(pred, slice_rows(&batch.target, lo, hi), slice_rows(&batch.mask, lo, hi));
            let value = g.scalar(loss);
            if !value.is_finite() {
                let bad = g
                    .value(pred)
                    .rows()
                    .into_iter()
                    .position(|r| r.iter().any(|v| !v.is_finite()))
                    .unwrap_or(0);
                return Err(Error::NonFiniteLoss {
                    step,
                    record: batch.records[lo + bad],
                });
            }
            let weight = (hi - lo) as f64 / b as f64;
            Ok((value, g.backward(loss), weight))
        })
        .collect::<Result<_>>()?;
    let loss = parts.iter().map(|(l, _, w)| l * w).sum();
    let grads: Vec<(Gradients, f64)> = parts.into_iter().map(|(_, g, w)| (g, w)).collect();
    Ok((loss, Gradients::combine(&grads)))
}

/// Runs the training loop in place and returns the per-epoch loss curve.
///
/// Non-object models see each pair in the condition hand's root frame.
pub fn train(net: &mut DenoiserNet, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let sched = DiffusionSchedule::from_spec(&cfg.schedule)?;
    let object_mode = net.is_object_conditional();
    net.norm = fit_normalizer(data, cfg, !object_mode)?;
    let clouds = if object_mode && cfg.epochs > 0 {
        Some(prepare_objects(net, data)?)
    } else {
        None
    };
    let mut adam = Adam::new(&net.store, cfg.lr);
    let mut report = TrainReport::default();
    let n = data.len();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        adam.lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, Domain::Train, u64::MAX - epoch as u64));
        let mut total = 0.0;
        let mut batches = 0;
        for records in order.chunks(cfg.batch) {
            let batch = draw_step(data, records, cfg, &sched, &net.norm, step, !object_mode)?;
            let (loss, grads) = step_gradients(net, &batch, clouds.as_deref(), cfg.seed, step)?;
            adam.step(&mut net.store, &grads);
            if !net.store.all_finite() {
                return Err(Error::NonFiniteLoss { step, record: records[0] });
            }
            report.rows += batch.len();
            report.dropped += batch.dropped.iter().filter(|&&d| d).count();
            total += loss;
            batches += 1;
            step += 1;
        }
        let mean = total / batches as f64;
        log::info!("epoch {epoch}: loss {mean:.6} lr {:.3e}", adam.lr);
        report.epoch_loss.push(mean);
    }
    report.steps = step;
    net.store.round_to_f32();
    Ok(report)
}

pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "epoch,mean_loss").map_err(io)?;
    for (e, l) in losses.iter().enumerate() {
        writeln!(f, "{e},{l:.9e}").map_err(io)?;
    }
    f.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::denoiser::NetConfig;

    fn tiny_net() -> NetConfig {
        NetConfig {
            hidden: 32,
            embed: 16,
            time_encoding: 16,
            feed_forward: 32,
            global: 32,
            decoder_width: 32,
            ..NetConfig::small()
        }
    }

    fn toy(count: usize) -> Dataset {
        generate_synthetic(&SyntheticSpec::toy(2, count, 2)).unwrap()
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch: 40,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn true_target_has_zero_loss() {
        let data = toy(50);
        let cfg = quick(1);
        let sched = DiffusionSchedule::from_spec(&cfg.schedule).unwrap();
        let records: Vec<usize> = (0..50).collect();
        let batch = draw_step(&data, &records, &cfg, &sched, &Normalizer::identity(), 0, true).unwrap();
        assert_eq!(batch.loss_of(&batch.target), 0.0);
        assert!(batch.loss_of(&batch.x_t) > 0.0);
    }

    #[test]
    fn condition_becomes_the_identity_root() {
        let data = toy(30);
        let cfg = TrainConfig { p_uncond: 0.0, ..quick(1) };
        let sched = DiffusionSchedule::from_spec(&cfg.schedule).unwrap();
        let records: Vec<usize> = (0..30).collect();
        let batch = draw_step(&data, &records, &cfg, &sched, &Normalizer::identity(), 3, true).unwrap();
        assert!(batch.flipped.iter().any(|&f| f) && batch.flipped.iter().any(|&f| !f));
        let identity = HandParam::canonical();
        for row in batch.cond.rows() {
            for k in ROOT {
                assert!((row[k] - identity.0[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fitted_normalizer_standardizes_targets() {
        let data = toy(200);
        let cfg = TrainConfig { flip_prob: 0.0, ..quick(1) };
        let sched = DiffusionSchedule::from_spec(&cfg.schedule).unwrap();
        let norm = fit_normalizer(&data, &cfg, true).unwrap();
        let records: Vec<usize> = (0..200).collect();
        let batch = draw_step(&data, &records, &cfg, &sched, &norm, 0, true).unwrap();
        for (j, col) in batch.target.columns().into_iter().enumerate() {
            let mean = col.sum() / 200.0;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 200.0;
            assert!(mean.abs() < 1e-9, "column {j} mean {mean}");
            if norm.std[j] > crate::diffusion::MIN_STD {
                assert!((var - 1.0).abs() < 1e-9, "column {j} variance {var}");
            } else {
                assert!(var <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn dropout_fraction_matches_probability() {
        let data = toy(4);
        let cfg = quick(1);
        let sched = DiffusionSchedule::from_spec(&cfg.schedule).unwrap();
        let dropped = (0..10_000)
            .filter(|&s| draw_step(&data, &[s % 4], &cfg, &sched, &Normalizer::identity(), s, true).unwrap().dropped[0])
            .count();
        let frac = dropped as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&frac), "{frac}");
    }

    #[test]
    fn dropped_rows_mask_the_root_block() {
        let data = toy(20);
        let cfg = TrainConfig { p_uncond: 1.0, ..quick(1) };
        let sched = DiffusionSchedule::from_spec(&cfg.schedule).unwrap();
        let records: Vec<usize> = (0..20).collect();
        let batch = draw_step(&data, &records, &cfg, &sched, &Normalizer::identity(), 0, true).unwrap();
        for row in batch.mask.rows() {
            assert_eq!(row.iter().filter(|&&m| m == 0.0).count(), ROOT.len());
        }
        assert!(batch.cond.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn fully_unconditional_training_leaves_condition_path_untouched() {
        let data = toy(80);
        let mut net = DenoiserNet::new(tiny_net(), 1);
        let mut before = net.store.clone();
        before.round_to_f32();
        let token_before = net.store.get(net.null_token).clone();
        train(&mut net, &data, &TrainConfig { p_uncond: 1.0, ..quick(2) }).unwrap();
        for id in 0..net.store.len() {
            let name = net.store.name(id).to_string();
            if name.starts_with("cond.") {
                assert_eq!(net.store.get(id), before.get(id), "{name}");
            }
        }
        assert!(net.store.get(net.null_token) != &token_before);
    }

    #[test]
    fn training_is_reproducible() {
        let data = toy(120);
        let run = || {
            let mut net = DenoiserNet::new(tiny_net(), 4);
            let report = train(&mut net, &data, &quick(3)).unwrap();
            (report.epoch_loss, net.store.to_tensors())
        };
        let (a, wa) = run();
        let (b, wb) = run();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-6);
        }
        assert_eq!(wa.tensors, wb.tensors);
    }

    #[test]
    fn params_stay_finite_and_null_token_moves() {
        let data = toy(80);
        let mut net = DenoiserNet::new(tiny_net(), 2);
        let token = net.store.get(net.null_token).clone();
        let report = train(&mut net, &data, &quick(2)).unwrap();
        assert!(net.store.all_finite());
        assert_eq!(report.epoch_loss.len(), 2);
        assert!(report.dropped > 0);
        let moved: f64 = (net.store.get(net.null_token) - &token).iter().map(|d| d * d).sum();
        assert!(moved > 0.0);
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let data = toy(10);
        let mut net = DenoiserNet::new(tiny_net(), 2);
        let report = train(&mut net, &data, &quick(0)).unwrap();
        assert!(report.epoch_loss.is_empty());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        write_loss_csv(&path, &report.epoch_loss).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "epoch,mean_loss\n");
    }

    #[test]
    fn corrupt_record_aborts_with_its_index() {
        let mut data = toy(10);
        data.samples[7].right.0[3] = f64::NAN;
        let mut net = DenoiserNet::new(tiny_net(), 2);
        let cfg = TrainConfig { batch: 10, ..quick(1) };
        assert!(matches!(train(&mut net, &data, &cfg), Err(Error::NonFiniteLoss { step: 0, record: 7 })));
        assert!(matches!(train(&mut net, &Dataset::default(), &cfg), Err(Error::EmptyDataset)));
    }

    #[test]
    fn learning_rate_decays_every_twenty_epochs() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(19), 2e-4);
        assert!((cfg.lr_at(20) - 1.8e-4).abs() < 1e-18);
        assert!((cfg.lr_at(45) - 2e-4 * 0.81).abs() < 1e-18);
    }
}
