//! Synthetic regression problems with planted coefficient clusters.
//!
//! Every feature is a noisy mix of latent sample factors. Features of the
//! positive cluster share one cluster factor, features of the negative cluster
//! share another, and every feature also loads on a few shared nuisance
//! factors. The nuisance loadings dominate plain Euclidean distances between
//! feature columns, so cluster membership is only visible once a metric
//! emphasizes the cluster factors.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::FeatureMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_features: usize,
    /// Size of each planted cluster.
    pub cluster_size: usize,
    pub n_nuisance_factors: usize,
    pub cluster_loading: f64,
    pub nuisance_loading: f64,
    pub feature_noise: f64,
    /// Coefficient of the positive cluster; the negative cluster gets its negation.
    pub coef_magnitude: f64,
    /// Spread of cluster coefficients around `±coef_magnitude`.
    pub coef_jitter: f64,
    /// Spread of the remaining coefficients around zero.
    pub background_sd: f64,
    /// Population R² of the noiseless signal.
    pub r_squared: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_features: 200,
            cluster_size: 30,
            n_nuisance_factors: 6,
            cluster_loading: 1.0,
            nuisance_loading: 1.0,
            feature_noise: 2.0,
            coef_magnitude: 1.0,
            coef_jitter: 0.1,
            background_sd: 0.05,
            r_squared: 0.7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cluster_size == 0 || 2 * self.cluster_size > self.n_features {
            return Err(Error::InvalidArgument(format!(
                "two clusters of {} do not fit in {} features",
                self.cluster_size, self.n_features
            )));
        }
        if !(self.r_squared > 0.0 && self.r_squared < 1.0) {
            return Err(Error::InvalidArgument("r_squared must lie in (0, 1)".into()));
        }
        let scales = [
            self.cluster_loading,
            self.nuisance_loading,
            self.feature_noise,
            self.coef_magnitude,
            self.coef_jitter,
            self.background_sd,
        ];
        if scales.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument("scales must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Fixed loadings and coefficients from which any number of samples can be drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    config: SyntheticConfig,
    /// `D × (2 + nuisance)` factor loadings.
    loadings: DMatrix<f64>,
    beta: DVector<f64>,
    positive: Vec<usize>,
    negative: Vec<usize>,
    noise_sd: f64,
}

impl SyntheticWorld {
    pub fn new(config: SyntheticConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.n_features;
        let k = config.cluster_size;
        let factors = 2 + config.n_nuisance_factors;

        let mut order: Vec<usize> = (0..d).collect();
        order.shuffle(&mut rng);
        let mut positive = order[..k].to_vec();
        let mut negative = order[k..2 * k].to_vec();
        positive.sort_unstable();
        negative.sort_unstable();

        let mut loadings = DMatrix::zeros(d, factors);
        let mut beta = DVector::zeros(d);
        for i in 0..d {
            for f in 2..factors {
                loadings[(i, f)] = config.nuisance_loading * rng.sample::<f64, _>(StandardNormal);
            }
            beta[i] = config.background_sd * rng.sample::<f64, _>(StandardNormal);
        }
        for (cluster, factor, sign) in [(&positive, 0, 1.0), (&negative, 1, -1.0)] {
            for &i in cluster.iter() {
                loadings[(i, factor)] = config.cluster_loading;
                beta[i] = sign * config.coef_magnitude + config.coef_jitter * rng.sample::<f64, _>(StandardNormal);
            }
        }

        // Var(xᵀβ) = βᵀ(LLᵀ + s²I)β
        let projected = loadings.transpose() * &beta;
        let signal_var = projected.norm_squared() + config.feature_noise * config.feature_noise * beta.norm_squared();
        let noise_sd = (signal_var * (1.0 - config.r_squared) / config.r_squared).sqrt();

        Ok(Self {
            config,
            loadings,
            beta,
            positive,
            negative,
            noise_sd,
        })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    pub fn positive_cluster(&self) -> &[usize] {
        &self.positive
    }

    pub fn negative_cluster(&self) -> &[usize] {
        &self.negative
    }

    pub fn noise_sd(&self) -> f64 {
        self.noise_sd
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<FeatureMatrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.config.n_features;
        let factors = self.loadings.ncols();
        let z = DMatrix::from_fn(n, factors, |_, _| rng.sample::<f64, _>(StandardNormal));
        let noise = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = z * self.loadings.transpose() + noise * self.config.feature_noise;
        let eps = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = &x * &self.beta + eps * self.noise_sd;
        let names = (0..d).map(|i| format!("x{i:03}")).collect();
        FeatureMatrix::new(x, y, names)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_structure() {
        let world = SyntheticWorld::new(SyntheticConfig::default(), 3).unwrap();
        assert_eq!(world.positive_cluster().len(), 30);
        assert_eq!(world.negative_cluster().len(), 30);
        for &i in world.positive_cluster() {
            assert!(world.beta()[i] > 0.5);
            assert!(!world.negative_cluster().contains(&i));
        }
        assert_eq!(world, SyntheticWorld::new(SyntheticConfig::default(), 3).unwrap());
    }

    #[test]
    fn empirical_r_squared_near_target() {
        let world = SyntheticWorld::new(SyntheticConfig::default(), 4).unwrap();
        let data = world.sample(20_000, 1).unwrap();
        let signal = data.x() * world.beta();
        let resid = data.y() - &signal;
        let var = |v: &DVector<f64>| {
            let m = v.mean();
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
        };
        let r2 = var(&signal) / (var(&signal) + var(&resid));
        assert!((r2 - 0.7).abs() < 0.02, "{r2}");
    }

    #[test]
    fn rejects_oversized_clusters() {
        let config = SyntheticConfig {
            n_features: 10,
            cluster_size: 6,
            ..SyntheticConfig::default()
        };
        assert!(SyntheticWorld::new(config, 0).is_err());
    }
}
