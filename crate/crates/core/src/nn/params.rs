use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::io::TensorSet;
use crate::{Error, Result};

pub type ParamId = usize;

/// Owns every trainable tensor of a network, addressed by `ParamId`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Rounds to the checkpoint precision so saved and live weights agree.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x as f32 as f64);
        }
    }

    pub fn to_tensors(&self) -> TensorSet {
        let mut set = TensorSet::default();
        for (n, v) in self.names.iter().zip(&self.values) {
            set.push(n.clone(), vec![v.nrows(), v.ncols()], v.iter().copied().collect());
        }
        set
    }

    /// Overwrites every tensor from `set`, matching by name and shape.
    pub fn load_tensors(&mut self, set: &TensorSet) -> Result<()> {
        let map = set.by_name();
        if map.len() != self.values.len() {
            return Err(Error::LayoutMismatch(format!(
                "checkpoint has {} tensors, network has {}",
                map.len(),
                self.values.len()
            )));
        }
        for (name, value) in self.names.iter().zip(&mut self.values) {
            let (shape, data) = map
                .get(name.as_str())
                .ok_or_else(|| Error::LayoutMismatch(format!("missing tensor {name}")))?;
            if shape != &[value.nrows(), value.ncols()] {
                return Err(Error::LayoutMismatch(format!("tensor {name} has shape {shape:?}")));
            }
            value.iter_mut().zip(data.iter()).for_each(|(d, s)| *d = *s);
        }
        Ok(())
    }
}

/// Uniform in `±1/√fan_in`, the usual default for dense layers.
pub fn kaiming_uniform(rng: &mut impl Rng, fan_in: usize, rows: usize, cols: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

pub fn normal(rng: &mut impl Rng, std: f64, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}
