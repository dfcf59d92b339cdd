//! A frozen diffusion model used as a critic over two-hand states.
//!
//! One call diffuses both hands a short way, denoises each conditioned on
//! the other and measures how far the pair moved. Gradients flow only into
//! the hand parameters.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::diffusion::DiffusionSchedule;
use crate::hand::{relative_to_condition, HandParam, HAND_DIM};
use crate::rng::{self, Domain};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoisePolicy {
    /// New forward noise on every call.
    Fresh,
    /// The same noise on every call.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    /// Diffusion time of the forward step; `None` means `T/8`, rounded.
    pub t_reg: Option<usize>,
    pub noise: NoisePolicy,
    pub seed: u64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            t_reg: None,
            noise: NoisePolicy::Fresh,
            seed: 0,
        }
    }
}

impl RegularizerConfig {
    pub fn resolve_t(&self, sched: &DiffusionSchedule) -> Result<usize> {
        let t = self
            .t_reg
            .unwrap_or_else(|| ((sched.steps() as f64) / 8.0).round().max(1.0) as usize);
        if t == 0 || t > sched.steps() {
            return Err(Error::InvalidArgument(format!("t_reg {t} outside 1..={}", sched.steps())));
        }
        Ok(t)
    }
}

/// Forward noise for one pair: `[for the right hand, for the mirrored left]`.
pub type PairNoise = [[f64; HAND_DIM]; 2];

pub fn pair_noise(seed: u64, call: u64, index: u64) -> PairNoise {
    let mut r = rng::stream(seed ^ call.rotate_left(32), Domain::Regularizer, index);
    let v = rng::gaussian_vec(&mut r, 2 * HAND_DIM);
    [std::array::from_fn(|i| v[i]), std::array::from_fn(|i| v[HAND_DIM + i])]
}

/// Denoised `(left, right)` for every pair after one forward-reverse step.
///
/// The right hand is denoised given the left; the mirrored left is denoised
/// given the mirrored right. Both directions share one batched call and each
/// runs in its condition hand's root frame.
pub fn forward_reverse_step<D: Denoiser + ?Sized>(
    den: &D,
    sched: &DiffusionSchedule,
    pairs: &[(HandParam, HandParam)],
    t: usize,
    noise: &[PairNoise],
) -> Result<Vec<(HandParam, HandParam)>> {
    if den.is_object_conditional() {
        return Err(Error::InvalidArgument("the regularizer needs a hand-only model".into()));
    }
    if noise.len() != pairs.len() {
        return Err(Error::ShapeMismatch(format!("{} pairs but {} noise draws", pairs.len(), noise.len())));
    }
    let n = pairs.len();
    let norm = den.normalizer();
    norm.validate()?;
    let mut x_t = Vec::with_capacity(2 * n);
    let mut conds = Vec::with_capacity(2 * n);
    let mut back = Vec::with_capacity(2 * n);
    for dir in 0..2 {
        for ((left, right), eps) in pairs.iter().zip(noise) {
            let (target, cond) = if dir == 0 {
                (*right, *left)
            } else {
                (left.mirror(), right.mirror())
            };
            let (target, cond, inv) = relative_to_condition(&target, &cond)?;
            let xt = sched.forward_diffuse(&norm.to_z(&target.0), t, &eps[dir]);
            x_t.push(std::array::from_fn(|j| xt[j]));
            conds.push(Some(norm.to_z(&cond.0)));
            back.push(inv);
        }
    }
    let x0 = den.predict_x0(&x_t, &conds, &vec![t; 2 * n], &[])?;
    let restore = |k: usize| HandParam(norm.from_z(&x0[k])).transformed(&back[k].0, &back[k].1);
    (0..n)
        .map(|i| Ok((restore(n + i)?.mirror(), restore(i)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegTerm {
    pub loss: f64,
    pub grad_left: [f64; HAND_DIM],
    pub grad_right: [f64; HAND_DIM],
}

/// `‖S(x) − x‖` with `S(x)` held constant, so the gradient is `(x − S)/‖x − S‖`.
pub fn reg_terms(pairs: &[(HandParam, HandParam)], denoised: &[(HandParam, HandParam)]) -> Vec<RegTerm> {
    pairs
        .iter()
        .zip(denoised)
        .map(|((l, r), (dl, dr))| {
            let dl: [f64; HAND_DIM] = std::array::from_fn(|j| l.0[j] - dl.0[j]);
            let dr: [f64; HAND_DIM] = std::array::from_fn(|j| r.0[j] - dr.0[j]);
            let loss = dl.iter().chain(&dr).map(|d| d * d).sum::<f64>().sqrt();
            let scale = if loss > 0.0 { 1.0 / loss } else { 0.0 };
            RegTerm {
                loss,
                grad_left: dl.map(|d| d * scale),
                grad_right: dr.map(|d| d * scale),
            }
        })
        .collect()
}

/// Stateful front end that hands out fresh noise per call when asked to.
pub struct Regularizer<'a, D: Denoiser + ?Sized> {
    den: &'a D,
    sched: &'a DiffusionSchedule,
    cfg: RegularizerConfig,
    t: usize,
    calls: AtomicU64,
}

impl<'a, D: Denoiser + ?Sized> Regularizer<'a, D> {
    pub fn new(den: &'a D, sched: &'a DiffusionSchedule, cfg: RegularizerConfig) -> Result<Self> {
        let t = cfg.resolve_t(sched)?;
        Ok(Regularizer {
            den,
            sched,
            cfg,
            t,
            calls: AtomicU64::new(0),
        })
    }

    pub fn t_reg(&self) -> usize {
        self.t
    }

    fn noise(&self, n: usize) -> Vec<PairNoise> {
        let call = match self.cfg.noise {
            NoisePolicy::Fixed => 0,
            NoisePolicy::Fresh => self.calls.fetch_add(1, Ordering::Relaxed),
        };
        (0..n).map(|i| pair_noise(self.cfg.seed, call, i as u64)).collect()
    }

    pub fn loss(&self, pairs: &[(HandParam, HandParam)]) -> Result<Vec<RegTerm>> {
        let noise = self.noise(pairs.len());
        let denoised = forward_reverse_step(self.den, self.sched, pairs, self.t, &noise)?;
        Ok(reg_terms(pairs, &denoised))
    }

    /// Plain gradient descent on the pairs; returns the moved pairs and the
    /// loss before every step plus after the last.
    pub fn descend(
        &self,
        pairs: &[(HandParam, HandParam)],
        steps: usize,
        lr: f64,
    ) -> Result<(Vec<(HandParam, HandParam)>, Vec<Vec<f64>>)> {
        let mut cur = pairs.to_vec();
        let mut history = vec![Vec::with_capacity(steps + 1); pairs.len()];
        for s in 0..=steps {
            let terms = self.loss(&cur)?;
            for (h, term) in history.iter_mut().zip(&terms) {
                h.push(term.loss);
            }
            if s == steps {
                break;
            }
            for ((l, r), term) in cur.iter_mut().zip(&terms) {
                for j in 0..HAND_DIM {
                    l.0[j] -= lr * term.grad_left[j];
                    r.0[j] -= lr * term.grad_right[j];
                }
            }
        }
        Ok((cur, history))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserNet, NetConfig, PreparedCloud};
    use crate::diffusion::make_schedule;
    use crate::hand::rotation::rodrigues;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Identity;

    impl Denoiser for Identity {
        fn predict_x0(
            &self,
            x_t: &[[f64; HAND_DIM]],
            _c: &[Option<[f64; HAND_DIM]>],
            _t: &[usize],
            _o: &[&PreparedCloud],
        ) -> Result<Vec<[f64; HAND_DIM]>> {
            Ok(x_t.to_vec())
        }
    }

    struct PointMass([f64; HAND_DIM]);

    impl Denoiser for PointMass {
        fn predict_x0(
            &self,
            x_t: &[[f64; HAND_DIM]],
            _c: &[Option<[f64; HAND_DIM]>],
            _t: &[usize],
            _o: &[&PreparedCloud],
        ) -> Result<Vec<[f64; HAND_DIM]>> {
            Ok(vec![self.0; x_t.len()])
        }
    }

    fn random_pair(rng: &mut impl Rng) -> (HandParam, HandParam) {
        let mut hand = || {
            let mut p = HandParam::canonical();
            for x in p.theta_mut() {
                *x = rng.random_range(-0.4..0.4);
            }
            let rot = rodrigues(&Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)));
            p.set_root(&rot, &Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1)));
            p
        };
        (hand(), hand())
    }

    fn noise(n: usize) -> Vec<PairNoise> {
        (0..n).map(|i| pair_noise(3, 0, i as u64)).collect()
    }

    #[test]
    fn near_identity_step_returns_the_input() {
        let sched = make_schedule(256, 1e-14, 1e-14).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pairs: Vec<_> = (0..5).map(|_| random_pair(&mut rng)).collect();
        let out = forward_reverse_step(&Identity, &sched, &pairs, 1, &noise(5)).unwrap();
        for ((l, r), (ol, or)) in pairs.iter().zip(&out) {
            for j in 0..HAND_DIM {
                assert!((l.0[j] - ol.0[j]).abs() < 1e-6);
                assert!((r.0[j] - or.0[j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn point_mass_critic_returns_the_mode_in_the_condition_frame() {
        let sched = make_schedule(256, 1e-4, 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, mode) = random_pair(&mut rng);
        for _ in 0..4 {
            let (mut left, right) = random_pair(&mut rng);
            left.set_root(&nalgebra::Matrix3::identity(), &Vector3::zeros());
            let out = forward_reverse_step(&PointMass(mode.0), &sched, &[(left, right)], 32, &noise(1)).unwrap();
            for j in 0..HAND_DIM {
                assert!((out[0].1 .0[j] - mode.0[j]).abs() < 1e-12);
            }
            // the left hand's estimate is the mode placed relative to the mirrored right
            let (_, _, (q, s)) = relative_to_condition(&left.mirror(), &right.mirror()).unwrap();
            let expected = mode.transformed(&q, &s).unwrap().mirror();
            for j in 0..HAND_DIM {
                assert!((out[0].0 .0[j] - expected.0[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fixed_point_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pairs = vec![random_pair(&mut rng)];
        let terms = reg_terms(&pairs, &pairs);
        assert_eq!(terms[0].loss, 0.0);
        assert!(terms[0].grad_left.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences_with_frozen_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pair = random_pair(&mut rng);
        let target = random_pair(&mut rng);
        let term = &reg_terms(&[pair], &[target])[0];
        let h = 1e-6;
        for j in [0, 17, 56, 63] {
            let mut p = pair;
            p.1 .0[j] += h;
            let mut m = pair;
            m.1 .0[j] -= h;
            let fd = (reg_terms(&[p], &[target])[0].loss - reg_terms(&[m], &[target])[0].loss) / (2.0 * h);
            assert!((fd - term.grad_right[j]).abs() < 1e-7);
        }
    }

    #[test]
    fn fixed_noise_is_deterministic_and_fresh_noise_is_not() {
        let sched = make_schedule(256, 1e-4, 0.01).unwrap();
        let net = DenoiserNet::new(NetConfig { hidden: 32, embed: 16, time_encoding: 16, feed_forward: 32, global: 32, decoder_width: 32, ..NetConfig::small() }, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pairs: Vec<_> = (0..3).map(|_| random_pair(&mut rng)).collect();
        let fixed = Regularizer::new(&net, &sched, RegularizerConfig { noise: NoisePolicy::Fixed, ..Default::default() }).unwrap();
        assert_eq!(fixed.t_reg(), 32);
        assert_eq!(fixed.loss(&pairs).unwrap(), fixed.loss(&pairs).unwrap());
        let fresh = Regularizer::new(&net, &sched, RegularizerConfig::default()).unwrap();
        assert_ne!(fresh.loss(&pairs).unwrap(), fresh.loss(&pairs).unwrap());
    }

    #[test]
    fn swapping_roles_through_the_mirror_preserves_the_loss() {
        let sched = make_schedule(256, 1e-4, 0.01).unwrap();
        let net = DenoiserNet::new(NetConfig { hidden: 32, embed: 16, time_encoding: 16, feed_forward: 32, global: 32, decoder_width: 32, ..NetConfig::small() }, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pairs: Vec<_> = (0..6).map(|_| random_pair(&mut rng)).collect();
        let swapped: Vec<_> = pairs.iter().map(|(l, r)| (r.mirror(), l.mirror())).collect();
        let n = noise(6);
        let n_swapped: Vec<PairNoise> = n.iter().map(|[a, b]| [*b, *a]).collect();
        let a = reg_terms(&pairs, &forward_reverse_step(&net, &sched, &pairs, 32, &n).unwrap());
        let b = reg_terms(&swapped, &forward_reverse_step(&net, &sched, &swapped, 32, &n_swapped).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x.loss - y.loss).abs() < 1e-6, "{} vs {}", x.loss, y.loss);
        }
    }

    #[test]
    fn critic_weights_stay_frozen() {
        let sched = make_schedule(256, 1e-4, 0.01).unwrap();
        let net = DenoiserNet::new(NetConfig { hidden: 32, embed: 16, time_encoding: 16, feed_forward: 32, global: 32, decoder_width: 32, ..NetConfig::small() }, 3);
        let before = net.store.to_tensors();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pairs: Vec<_> = (0..2).map(|_| random_pair(&mut rng)).collect();
        let reg = Regularizer::new(&net, &sched, RegularizerConfig::default()).unwrap();
        reg.descend(&pairs, 3, 0.05).unwrap();
        assert_eq!(net.store.to_tensors().tensors, before.tensors);
    }

    #[test]
    fn t_reg_bounds_are_checked() {
        let sched = make_schedule(16, 1e-4, 0.01).unwrap();
        assert_eq!(RegularizerConfig::default().resolve_t(&sched).unwrap(), 2);
        let bad = RegularizerConfig { t_reg: Some(17), ..Default::default() };
        assert!(bad.resolve_t(&sched).is_err());
    }
}
