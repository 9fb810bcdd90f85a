//! Reproducible Gaussian noise for simulation and Monte Carlo drivers.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

/// xoshiro256++ seeded through splitmix64, with Box–Muller normals.
#[derive(Debug, Clone)]
pub struct NoiseRng {
    inner: Xoshiro256PlusPlus,
    spare: Option<f64>,
}

impl NoiseRng {
    pub fn new(seed: u64) -> Self {
        NoiseRng { inner: Xoshiro256PlusPlus::seed_from_u64(seed), spare: None }
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let r = (-2.0 * self.uniform().ln()).sqrt();
        let phi = 2.0 * std::f64::consts::PI * self.uniform();
        self.spare = Some(r * phi.sin());
        r * phi.cos()
    }

    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.standard_normal()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproducible() {
        let a: Vec<f64> = {
            let mut r = NoiseRng::new(7);
            (0..10).map(|_| r.standard_normal()).collect()
        };
        let mut r = NoiseRng::new(7);
        let b: Vec<f64> = (0..10).map(|_| r.standard_normal()).collect();
        assert_eq!(a, b);
        assert_ne!(a, {
            let mut r = NoiseRng::new(8);
            (0..10).map(|_| r.standard_normal()).collect::<Vec<_>>()
        });
    }

    #[test]
    fn moments() {
        let mut r = NoiseRng::new(1);
        let n = 200_000;
        let z: Vec<f64> = (0..n).map(|_| r.normal(1.0, 2.0)).collect();
        let mean = z.iter().sum::<f64>() / n as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 1.0).abs() < 0.02);
        assert!((var - 4.0).abs() < 0.05);
        let mut u = NoiseRng::new(2);
        assert!((0..1000).map(|_| u.uniform()).all(|v| v > 0.0 && v < 1.0));
    }
}
