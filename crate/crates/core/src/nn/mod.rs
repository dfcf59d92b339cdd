//! Minimal reverse-mode autodiff for the denoiser and the feature backbone.

mod optim;
mod params;
mod tape;

pub use optim::Adam;
pub use params::{kaiming_uniform, normal, ParamId, ParamStore};
pub use tape::{Gradients, Graph, Var};

use rand::Rng;

/// Dense layer `x·W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.weight"), kaiming_uniform(rng, fan_in, fan_in, fan_out));
        let b = store.add(format!("{name}.bias"), kaiming_uniform(rng, fan_in, 1, fan_out));
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        g.linear(x, self.w, self.b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), ndarray::Array2::ones((1, dim)));
        let beta = store.add(format!("{name}.beta"), ndarray::Array2::zeros((1, dim)));
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        g.layer_norm(x, self.gamma, self.beta)
    }
}

#[cfg(test)]
mod tests;
