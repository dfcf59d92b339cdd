use serde::{Deserialize, Serialize};

use crate::hand::HAND_DIM;
use crate::{Error, Result};

/// Smallest per-coordinate scale; keeps constant coordinates finite.
pub const MIN_STD: f64 = 1e-2;

/// Per-coordinate standardization between hand parameters and the space the
/// diffusion runs in: `z = (x − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Default for Normalizer {
    fn default() -> Self {
        Self::identity()
    }
}

impl Normalizer {
    pub fn identity() -> Self {
        Normalizer {
            mean: vec![0.0; HAND_DIM],
            std: vec![1.0; HAND_DIM],
        }
    }

    /// Mean and floored standard deviation of `rows`.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64; HAND_DIM]>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = [0.0; HAND_DIM];
        let mut sq = [0.0; HAND_DIM];
        for r in rows {
            n += 1;
            for j in 0..HAND_DIM {
                sum[j] += r[j];
                sq[j] += r[j] * r[j];
            }
        }
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = (0..HAND_DIM)
            .map(|j| (sq[j] / n as f64 - mean[j] * mean[j]).max(0.0).sqrt().max(MIN_STD))
            .collect();
        Ok(Normalizer { mean, std })
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != HAND_DIM || self.std.len() != HAND_DIM {
            return Err(Error::LayoutMismatch(format!("normalizer must hold {HAND_DIM} means and scales")));
        }
        if self.std.iter().any(|s| !(*s > 0.0 && s.is_finite())) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("normalizer scales must be positive and finite".into()));
        }
        Ok(())
    }

    pub fn to_z(&self, x: &[f64; HAND_DIM]) -> [f64; HAND_DIM] {
        std::array::from_fn(|j| (x[j] - self.mean[j]) / self.std[j])
    }

    pub fn from_z(&self, z: &[f64; HAND_DIM]) -> [f64; HAND_DIM] {
        std::array::from_fn(|j| self.mean[j] + self.std[j] * z[j])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_statistics() {
        let rows: Vec<[f64; HAND_DIM]> = (0..4).map(|i| std::array::from_fn(|j| (i * j) as f64 * 0.1)).collect();
        let n = Normalizer::fit(&rows).unwrap();
        assert_eq!(n.mean[0], 0.0);
        assert_eq!(n.std[0], MIN_STD);
        // column 1 holds 0, .1, .2, .3
        assert!((n.mean[1] - 0.15).abs() < 1e-12);
        assert!((n.std[1] - (0.0125f64).sqrt()).abs() < 1e-12);
        for r in &rows {
            let back = n.from_z(&n.to_z(r));
            assert!(r.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        let z: Vec<[f64; HAND_DIM]> = rows.iter().map(|r| n.to_z(r)).collect();
        let m: f64 = z.iter().map(|r| r[1]).sum::<f64>() / 4.0;
        let v: f64 = z.iter().map(|r| r[1] * r[1]).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_fit_fails() {
        let rows: Vec<[f64; HAND_DIM]> = vec![];
        assert!(matches!(Normalizer::fit(&rows), Err(Error::EmptyDataset)));
    }
}
