use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            steps: 256,
            beta_start: 1e-4,
            beta_end: 0.01,
        }
    }
}

/// Linear noise schedule. Index `t` runs over `1..=T`; `alpha_bar[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub spec: ScheduleSpec,
    /// `beta[t - 1]` is the variance added at step `t`.
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::InvalidSchedule("T must be at least 1".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta1 <= betaT < 1, got {beta_start} and {beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    for b in &beta {
        let last = *alpha_bar.last().unwrap();
        alpha_bar.push(last * (1.0 - b));
    }
    Ok(DiffusionSchedule {
        spec: ScheduleSpec {
            steps,
            beta_start,
            beta_end,
        },
        beta,
        alpha_bar,
    })
}

impl DiffusionSchedule {
    pub fn from_spec(spec: &ScheduleSpec) -> Result<Self> {
        make_schedule(spec.steps, spec.beta_start, spec.beta_end)
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// Uniform stride over `T..=1`, descending. The caller steps each entry
    /// to the next one and the last entry to 0.
    pub fn timesteps(&self, count: usize) -> Result<Vec<usize>> {
        let t = self.steps();
        if count == 0 || count > t {
            return Err(Error::InvalidArgument(format!("step count {count} outside 1..={t}")));
        }
        if count == 1 {
            return Ok(vec![t]);
        }
        Ok((0..count)
            .map(|k| {
                let u = 1.0 + (t - 1) as f64 * (count - 1 - k) as f64 / (count - 1) as f64;
                u.round() as usize
            })
            .collect())
    }

    /// `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
    pub fn forward_diffuse(&self, x0: &[f64], t: usize, eps: &[f64]) -> Vec<f64> {
        let (a, s) = (self.alpha_bar[t].sqrt(), (1.0 - self.alpha_bar[t]).sqrt());
        x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect()
    }

    /// The noise that explains `x_t` given a clean estimate.
    pub fn eps_from_x0(&self, x_t: &[f64], x0_hat: &[f64], t: usize) -> Result<Vec<f64>> {
        let ab = self.alpha_bar[t];
        if ab >= 1.0 - 1e-12 {
            return Err(Error::ScheduleSingularity {
                t,
                reason: "alpha_bar too close to 1 to recover noise",
            });
        }
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x_t.iter().zip(x0_hat).map(|(x, x0)| (x - a * x0) / s).collect())
    }

    /// Clean estimate implied by `x_t` and a noise estimate.
    pub fn x0_from_eps(&self, x_t: &[f64], eps: &[f64], t: usize) -> Vec<f64> {
        let (a, s) = (self.alpha_bar[t].sqrt(), (1.0 - self.alpha_bar[t]).sqrt());
        x_t.iter().zip(eps).map(|(x, e)| (x - s * e) / a).collect()
    }

    /// Deterministic DDIM update from `t` to `t_prev`.
    pub fn ddim_step(&self, x_t: &[f64], eps: &[f64], t: usize, t_prev: usize) -> Vec<f64> {
        debug_assert!(t_prev < t && t <= self.steps());
        let x0 = self.x0_from_eps(x_t, eps, t);
        if t_prev == 0 {
            return x0;
        }
        self.forward_diffuse(&x0, t_prev, eps)
    }
}
