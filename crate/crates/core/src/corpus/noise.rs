use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::vocab::MASK;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Test-time corruption: each token is masked with probability `alpha`, and
/// Gaussian noise of standard deviation `sigma` is added to the embedded
/// sentence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub alpha: f64,
    pub sigma: f64,
}

impl NoiseSpec {
    pub fn new(alpha: f64, sigma: f64) -> Result<Self> {
        let n = NoiseSpec { alpha, sigma };
        n.validate()?;
        Ok(n)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma {} must be >= 0", self.sigma)));
        }
        Ok(())
    }

    pub fn is_clean(&self) -> bool {
        self.alpha == 0.0 && self.sigma == 0.0
    }
}

/// Replaces each position by the MASK id with probability `alpha`. Length is
/// preserved.
pub fn word_dropout_noise<R: Rng + ?Sized>(ids: &[usize], alpha: f64, rng: &mut R) -> Vec<usize> {
    ids.iter()
        .map(|&id| if rng.gen::<f64>() < alpha { MASK } else { id })
        .collect()
}

/// Adds i.i.d. `N(0, sigma^2)` to every entry.
pub fn gaussian_embedding_noise<T: Real, R: Rng + ?Sized>(
    embedded: &Tensor<T>,
    sigma: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if sigma == 0.0 {
        return Ok(embedded.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let data = embedded
        .data()
        .iter()
        .map(|&v| v + T::from_f64_lossy(normal.sample(rng)))
        .collect();
    Tensor::new(embedded.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn alpha_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ids: Vec<usize> = (3..40).collect();
        assert_eq!(word_dropout_noise(&ids, 0.0, &mut rng), ids);
        assert!(word_dropout_noise(&ids, 1.0, &mut rng).iter().all(|&i| i == MASK));
    }

    #[test]
    fn mask_rate_matches_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ids = vec![7usize; 100_000];
        let noisy = word_dropout_noise(&ids, 0.3, &mut rng);
        assert_eq!(noisy.len(), ids.len());
        let rate = noisy.iter().filter(|&&i| i == MASK).count() as f64 / ids.len() as f64;
        let sd = (0.3f64 * 0.7 / ids.len() as f64).sqrt();
        assert!((rate - 0.3).abs() < 3.0 * sd, "{rate}");
    }

    #[test]
    fn gaussian_noise_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sigma = 0.1;
        let n = 1_000_000;
        let zeros = Tensor::<f64>::zeros(&[1000, 1000]);
        let noisy = gaussian_embedding_noise(&zeros, sigma, &mut rng).unwrap();
        assert_eq!(noisy.shape(), zeros.shape());
        let mean = noisy.sum() / n as f64;
        let var = noisy.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 3.0 * sigma / 1000.0, "{mean}");
        assert!((var - sigma * sigma).abs() < 0.01 * sigma * sigma, "{var}");
    }

    #[test]
    fn zero_sigma_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = Tensor::<f64>::from_f64(vec![2, 2], &[1., 2., 3., 4.]).unwrap();
        assert_eq!(gaussian_embedding_noise(&e, 0.0, &mut rng).unwrap(), e);
    }

    #[test]
    fn spec_validation() {
        assert!(NoiseSpec::new(1.2, 0.0).is_err());
        assert!(NoiseSpec::new(0.1, -1.0).is_err());
        assert!(NoiseSpec::new(0.0, 0.0).unwrap().is_clean());
    }
}
