//! Fixed input embeddings of the time coordinate.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::Tensor;

/// `γ(t) = [sin(2⁰πt), cos(2⁰πt), …, sin(2^{L−1}πt), cos(2^{L−1}πt)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncoding {
    pub length: usize,
}

impl PositionalEncoding {
    pub fn new(length: usize) -> Self {
        PositionalEncoding { length }
    }

    pub fn dim(&self) -> usize {
        2 * self.length
    }

    pub fn encode(&self, times: &[f64]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(times.len() * self.dim());
        for &t in times {
            for l in 0..self.length {
                let a = (1u64 << l) as f64 * PI * t;
                data.push(a.sin());
                data.push(a.cos());
            }
        }
        Tensor::new(vec![times.len(), self.dim()], data)
    }
}

/// `γ(t) = [cos(2πBt), sin(2πBt)]` with a frozen projection `B ~ N(0, σ²)` of `m` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct RffEmbedding {
    projection: Vec<f64>,
    sigma: f64,
}

impl RffEmbedding {
    pub fn sample(features: usize, sigma: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, sigma).expect("sigma is validated positive");
        RffEmbedding {
            projection: (0..features).map(|_| normal.sample(rng)).collect(),
            sigma,
        }
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn dim(&self) -> usize {
        2 * self.projection.len()
    }

    pub fn encode(&self, times: &[f64]) -> Result<Tensor> {
        let m = self.projection.len();
        let mut data = vec![0.0; times.len() * 2 * m];
        for (row, &t) in data.chunks_mut(2 * m).zip(times) {
            for (j, &b) in self.projection.iter().enumerate() {
                let a = 2.0 * PI * b * t;
                row[j] = a.cos();
                row[m + j] = a.sin();
            }
        }
        Tensor::new(vec![times.len(), 2 * m], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn positional_encoding_at_zero() {
        let pe = PositionalEncoding::new(5);
        let e = pe.encode(&[0.0]).unwrap();
        assert_eq!(e.shape(), &[1, 10]);
        let want: Vec<f64> = (0..10).map(|i| if i % 2 == 0 { 0.0 } else { 1.0 }).collect();
        assert_eq!(e.data(), &want[..]);
    }

    #[test]
    fn positional_encoding_octaves() {
        let pe = PositionalEncoding::new(3);
        let t = 0.3;
        let e = pe.encode(&[t]).unwrap();
        for l in 0..3 {
            let a = 2f64.powi(l as i32) * PI * t;
            assert!((e.data()[2 * l] - a.sin()).abs() < 1e-15);
            assert!((e.data()[2 * l + 1] - a.cos()).abs() < 1e-15);
        }
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn rff_is_frozen_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rff = RffEmbedding::sample(16, 10.0, &mut rng);
        let times = [-1.0, -0.2, 0.5, 1.0];
        let a = rff.encode(&times).unwrap();
        let b = rff.encode(&times).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[4, 32]);
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
    }
}
