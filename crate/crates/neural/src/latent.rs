use rand::Rng;
use rand_distr::StandardNormal;

/// Diagonal Gaussian over the latent space, with `sigma` stored as `ln σ`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDistribution {
    pub mu: Vec<f32>,
    pub log_sigma: Vec<f32>,
}

impl LatentDistribution {
    pub fn new(mu: Vec<f32>, log_sigma: Vec<f32>) -> Self {
        assert_eq!(mu.len(), log_sigma.len(), "latent mean/scale length mismatch");
        Self { mu, log_sigma }
    }

    pub fn standard(dim: usize) -> Self {
        Self::new(vec![0.0; dim], vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> Vec<f32> {
        self.log_sigma.iter().map(|l| l.exp()).collect()
    }

    /// `z = μ + σ ⊙ ε`.
    pub fn reparameterize(&self, eps: &[f32]) -> Vec<f32> {
        assert_eq!(eps.len(), self.dim());
        self.mu
            .iter()
            .zip(&self.log_sigma)
            .zip(eps)
            .map(|((&m, &ls), &e)| {
                let s = ls.exp();
                if s == 0.0 {
                    m
                } else {
                    m + s * e
                }
            })
            .collect()
    }

    /// Draws `z` using standard-normal noise from `rng`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f32> {
        let eps: Vec<f32> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.reparameterize(&eps)
    }

    /// `KL(N(μ, σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² − 1 − ln σ²)`.
    pub fn kl_to_standard(&self) -> f64 {
        self.mu
            .iter()
            .zip(&self.log_sigma)
            .map(|(&m, &ls)| {
                let (m, ls) = (f64::from(m), f64::from(ls));
                0.5 * (m * m + (2.0 * ls).exp() - 1.0 - 2.0 * ls)
            })
            .sum()
    }
}

pub fn kl_diag_gaussian(ld: &LatentDistribution) -> f64 {
    ld.kl_to_standard()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_diag_gaussian(&LatentDistribution::standard(4)), 0.0);
        let one = LatentDistribution::new(vec![1.0], vec![0.0]);
        assert!((kl_diag_gaussian(&one) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_returns_mean() {
        let ld = LatentDistribution::new(vec![0.3, -1.2], vec![0.5, -0.7]);
        assert_eq!(ld.reparameterize(&[0.0, 0.0]), ld.mu);
    }

    #[test]
    fn vanishing_sigma_is_deterministic() {
        let ld = LatentDistribution::new(vec![0.3, -1.2], vec![f32::NEG_INFINITY, -200.0]);
        assert_eq!(ld.reparameterize(&[5.0, -3.0]), ld.mu);
    }
}
