//! Cascaded two-hand sampling with classifier-free and anti-penetration
//! guidance.

mod penetration;

pub use penetration::{
    pair_loss, pair_loss_cotangent, penetration_loss, penetration_set, penetration_set_with, PenaltyForm,
    PenetrationPair, PenetrationReport,
};

use log::debug;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, PreparedCloud};
use crate::diffusion::{DiffusionSchedule, Normalizer};
use crate::hand::{HandMesh, HandParam, KdTree, KinematicModel, Side, HAND_DIM};
use crate::rng::{self, Domain};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub steps: usize,
    pub w_cfg: f64,
    pub apg: bool,
    pub w_pen_start: f64,
    pub w_pen_decay: f64,
    pub penalty: PenaltyForm,
    pub seed: u64,
    /// Samples advanced together per network call.
    pub batch: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            steps: 32,
            w_cfg: 0.1,
            apg: true,
            w_pen_start: 4.0,
            w_pen_decay: 0.9,
            penalty: PenaltyForm::Squared,
            seed: 0,
            batch: 64,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::InvalidArgument("steps and batch must be positive".into()));
        }
        if self.w_pen_start < 0.0 || !(self.w_pen_decay > 0.0 && self.w_pen_decay <= 1.0) {
            return Err(Error::InvalidArgument("w_pen needs start >= 0 and decay in (0, 1]".into()));
        }
        Ok(())
    }
}

/// `(1 + w)·e_c − w·e_u`, evaluated as `e_c + w·(e_c − e_u)`.
pub fn cfg_mix(eps_cond: &[f64], eps_uncond: &[f64], w: f64) -> Vec<f64> {
    eps_cond.iter().zip(eps_uncond).map(|(c, u)| c + w * (c - u)).collect()
}

/// Guidance weight `k` reverse steps away from the clean end.
pub fn w_pen_at(k: usize, start: f64, decay: f64) -> f64 {
    start * decay.powi(k as i32)
}

/// The anchor hand as seen by the guidance: its left mesh and a vertex index.
pub struct AnchorGeometry {
    pub mesh: HandMesh,
    tree: KdTree,
}

impl AnchorGeometry {
    pub fn new(model: &KinematicModel, anchor: &HandParam) -> Result<Self> {
        let mesh = model.forward_kinematics(anchor, Side::Left)?.mesh;
        let tree = KdTree::new(&mesh.vertices);
        Ok(AnchorGeometry { mesh, tree })
    }
}

/// Clean hand implied by the diffusion state `z` at `t` for a fixed noise estimate.
fn clean_estimate(z: &[f64], eps: &[f64], t: usize, sched: &DiffusionSchedule, norm: &Normalizer) -> Result<HandParam> {
    let ab = sched.alpha_bar[t];
    if ab <= 0.0 {
        return Err(Error::ScheduleSingularity {
            t,
            reason: "alpha_bar is zero",
        });
    }
    let z0 = sched.x0_from_eps(z, eps, t);
    Ok(HandParam(norm.from_z(&std::array::from_fn(|j| z0[j]))))
}

/// `∇_z L_pen(x̂0(z))` for the diffusion state `z`, with the pair set taken
/// from `pairs` when given, otherwise recomputed. Returns the gradient and
/// the pairs used.
#[allow(clippy::too_many_arguments)]
pub fn apg_gradient(
    model: &KinematicModel,
    x: &[f64; HAND_DIM],
    eps: &[f64],
    t: usize,
    anchor: &AnchorGeometry,
    sched: &DiffusionSchedule,
    norm: &Normalizer,
    form: PenaltyForm,
    pairs: Option<&[PenetrationPair]>,
) -> Result<([f64; HAND_DIM], Vec<PenetrationPair>)> {
    let x0 = clean_estimate(x, eps, t, sched, norm)?;
    let mesh = model.forward_kinematics(&x0, Side::Right)?.mesh;
    let pairs = match pairs {
        Some(p) => p.to_vec(),
        None => penetration_set_with(&anchor.tree, &mesh, &anchor.mesh),
    };
    if pairs.is_empty() {
        return Ok(([0.0; HAND_DIM], pairs));
    }
    let cot = pair_loss_cotangent(&mesh, &anchor.mesh, &pairs, form);
    let mut g = model.kinematics_vjp(&x0, Side::Right, &cot)?;
    let scale = 1.0 / sched.alpha_bar[t].sqrt();
    g.iter_mut().zip(&norm.std).for_each(|(v, s)| *v *= scale * s);
    Ok((g, pairs))
}

/// One anti-penetration update of the state at `t` (already stepped to `t`).
/// The descent step is taken in hand-parameter units and mapped back to the
/// standardized state, so `w_pen` does not depend on the normalizer.
#[allow(clippy::too_many_arguments)]
pub fn apg_step(
    model: &KinematicModel,
    x: &[f64; HAND_DIM],
    eps: &[f64],
    t: usize,
    anchor: &AnchorGeometry,
    w_pen: f64,
    sched: &DiffusionSchedule,
    norm: &Normalizer,
    form: PenaltyForm,
) -> Result<[f64; HAND_DIM]> {
    if w_pen == 0.0 {
        return Ok(*x);
    }
    let (g, pairs) = match apg_gradient(model, x, eps, t, anchor, sched, norm, form, None) {
        Ok(r) => r,
        Err(Error::DegenerateRotation(msg)) => {
            debug!("skipping guidance at t={t}: {msg}");
            return Ok(*x);
        }
        Err(e) => return Err(e),
    };
    if pairs.is_empty() {
        return Ok(*x);
    }
    Ok(std::array::from_fn(|i| x[i] - w_pen * g[i] / (norm.std[i] * norm.std[i])))
}

/// Canonical root: identity rotation at the origin.
pub fn pin_root(x: &mut [f64; HAND_DIM]) {
    x[crate::hand::param::ROOT].copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
}

fn noise(seed: u64, domain: Domain, index: u64) -> [f64; HAND_DIM] {
    let v = rng::gaussian_vec(&mut rng::stream(seed, domain, index), HAND_DIM);
    std::array::from_fn(|i| v[i])
}


/// Draws pairs `first..first + count`. Each sample's noise comes from its own
/// stream so results do not depend on how samples are batched.
pub fn sample_pairs<D: Denoiser + ?Sized>(
    den: &D,
    sched: &DiffusionSchedule,
    model: &KinematicModel,
    cfg: &SampleConfig,
    first: usize,
    count: usize,
    objects: &[&PreparedCloud],
) -> Result<Vec<(HandParam, HandParam)>> {
    cfg.validate()?;
    let object_mode = den.is_object_conditional();
    if object_mode && objects.len() != count {
        return Err(Error::MissingObject);
    }
    let mut out = Vec::with_capacity(count);
    let mut start = 0;
    while start < count {
        let end = (start + cfg.batch).min(count);
        let objs: Vec<&PreparedCloud> = if object_mode { objects[start..end].to_vec() } else { vec![] };
        let idx: Vec<u64> = (first + start..first + end).map(|i| i as u64).collect();
        out.extend(sample_batch(den, sched, model, cfg, &idx, &objs)?);
        start = end;
    }
    Ok(out)
}

fn sample_batch<D: Denoiser + ?Sized>(
    den: &D,
    sched: &DiffusionSchedule,
    model: &KinematicModel,
    cfg: &SampleConfig,
    indices: &[u64],
    objects: &[&PreparedCloud],
) -> Result<Vec<(HandParam, HandParam)>> {
    let ts = sched.timesteps(cfg.steps)?;
    let n = indices.len();
    let object_mode = !objects.is_empty();
    let norm = den.normalizer();
    norm.validate()?;

    // phase 1: unconditional anchor
    let mut x: Vec<[f64; HAND_DIM]> = indices.iter().map(|&i| noise(cfg.seed, Domain::AnchorNoise, i)).collect();
    let uncond = vec![None; n];
    for (s, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(s + 1).copied().unwrap_or(0);
        let x0 = den.predict_x0(&x, &uncond, &vec![t; n], objects)?;
        for (xi, x0i) in x.iter_mut().zip(&x0) {
            let eps = sched.eps_from_x0(xi, x0i, t)?;
            let next = sched.ddim_step(xi, &eps, t, t_prev);
            *xi = std::array::from_fn(|j| next[j]);
        }
    }
    let anchors: Vec<HandParam> = x
        .iter()
        .map(|zi| {
            let mut xi = norm.from_z(zi);
            if !object_mode {
                pin_root(&mut xi);
            }
            HandParam(xi).mirror()
        })
        .collect();
    let geometry = if cfg.apg {
        Some(anchors.iter().map(|a| AnchorGeometry::new(model, a)).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };

    // phase 2: partner conditioned on the anchor
    let mut x: Vec<[f64; HAND_DIM]> = indices.iter().map(|&i| noise(cfg.seed, Domain::PartnerNoise, i)).collect();
    let mut rows = x.clone();
    let mut conds: Vec<Option<[f64; HAND_DIM]>> = anchors.iter().map(|a| Some(norm.to_z(&a.0))).collect();
    conds.extend(std::iter::repeat_n(None, n));
    let both_objects: Vec<&PreparedCloud> = objects.iter().chain(objects.iter()).copied().collect();
    for (s, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(s + 1).copied().unwrap_or(0);
        rows.clear();
        rows.extend(x.iter().chain(x.iter()).copied());
        let x0 = den.predict_x0(&rows, &conds, &vec![t; 2 * n], &both_objects)?;
        let k = ts.len() - 1 - s;
        for (i, xi) in x.iter_mut().enumerate() {
            let e_c = sched.eps_from_x0(xi, &x0[i], t)?;
            let e_u = sched.eps_from_x0(xi, &x0[n + i], t)?;
            let eps = cfg_mix(&e_c, &e_u, cfg.w_cfg);
            let next = sched.ddim_step(xi, &eps, t, t_prev);
            let mut next: [f64; HAND_DIM] = std::array::from_fn(|j| next[j]);
            if let Some(geo) = &geometry {
                let w = w_pen_at(k, cfg.w_pen_start, cfg.w_pen_decay);
                next = apg_step(model, &next, &eps, t_prev, &geo[i], w, sched, &norm, cfg.penalty)?;
            }
            *xi = next;
        }
    }
    Ok(anchors.into_iter().zip(x.iter().map(|z| HandParam(norm.from_z(z)))).collect())
}
