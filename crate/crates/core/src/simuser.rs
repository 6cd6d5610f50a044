//! Simulated users: an oracle that labels features by the sign of their
//! coefficients in a large-data fit.

use std::collections::HashSet;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::FeatureMatrix;
use crate::error::{Error, Result};
use crate::linreg::{fit_vb, FitOptions, HyperPriors, PriorCovariance};
use crate::metric::{FeedbackLabel, FeedbackPair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedUser {
    pub reference_beta: Vec<f64>,
    /// Features with the `k` largest coefficients, in descending order.
    pub high_cluster: Vec<usize>,
    /// Features with the `k` smallest coefficients, in ascending order.
    pub low_cluster: Vec<usize>,
    pub k: usize,
}

impl SimulatedUser {
    /// Clusters from a known coefficient vector.
    pub fn from_coefficients(reference_beta: Vec<f64>, k: usize) -> Result<Self> {
        let d = reference_beta.len();
        if k == 0 || 2 * k > d {
            return Err(Error::InvalidArgument(format!("cluster size {k} needs 1 ≤ 2k ≤ {d}")));
        }
        if reference_beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("reference coefficients".into()));
        }
        let mut order: Vec<usize> = (0..d).collect();
        // stable sort keeps the lower index first among equal coefficients
        order.sort_by(|&a, &b| reference_beta[b].total_cmp(&reference_beta[a]));
        let high_cluster = order[..k].to_vec();
        order.sort_by(|&a, &b| reference_beta[a].total_cmp(&reference_beta[b]));
        let low_cluster = order[..k].to_vec();

        let min_high = high_cluster
            .iter()
            .map(|&i| reference_beta[i])
            .fold(f64::INFINITY, f64::min);
        let max_low = low_cluster
            .iter()
            .map(|&i| reference_beta[i])
            .fold(f64::NEG_INFINITY, f64::max);
        if !(min_high > max_low) {
            return Err(Error::DegenerateFeatures(
                "reference coefficients do not separate into a high and a low cluster".into(),
            ));
        }
        Ok(Self {
            reference_beta,
            high_cluster,
            low_cluster,
            k,
        })
    }

    /// Every within-cluster pair, canonical and sorted.
    pub fn similar_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::with_capacity(self.k * self.k.saturating_sub(1));
        for cluster in [&self.high_cluster, &self.low_cluster] {
            for (a, &i) in cluster.iter().enumerate() {
                for &j in &cluster[a + 1..] {
                    pairs.push((i.min(j), i.max(j)));
                }
            }
        }
        pairs.sort_unstable();
        pairs
    }

    /// Every cross-cluster pair, canonical and sorted.
    pub fn dissimilar_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs: Vec<(usize, usize)> = self
            .high_cluster
            .iter()
            .flat_map(|&i| self.low_cluster.iter().map(move |&j| (i.min(j), i.max(j))))
            .collect();
        pairs.sort_unstable();
        pairs
    }

    /// The label this user gives a pair, if both features belong to clusters.
    pub fn label(&self, i: usize, j: usize) -> Option<FeedbackLabel> {
        let side = |f: usize| {
            if self.high_cluster.contains(&f) {
                Some(true)
            } else if self.low_cluster.contains(&f) {
                Some(false)
            } else {
                None
            }
        };
        match (side(i)?, side(j)?) {
            (a, b) if a == b => Some(FeedbackLabel::Similar),
            _ => Some(FeedbackLabel::Dissimilar),
        }
    }
}

/// Fits a ridge-type model with independent coefficients on `held_out` and
/// clusters its posterior mean.
pub fn construct_simulated_user(held_out: &FeatureMatrix, k: usize) -> Result<SimulatedUser> {
    let (n, d) = (held_out.n_samples(), held_out.n_features());
    if k == 0 || 2 * k > d {
        return Err(Error::InvalidArgument(format!("cluster size {k} needs 1 ≤ 2k ≤ {d}")));
    }
    if n < 2 * d {
        warn!("simulated user fitted on {n} samples for {d} features; coefficients may be unstable");
    }
    let posterior = fit_vb(
        held_out.x(),
        held_out.y(),
        &PriorCovariance::identity(d),
        &HyperPriors::default(),
        &FitOptions {
            covariance: false,
            ..FitOptions::default()
        },
    )?;
    SimulatedUser::from_coefficients(posterior.beta_mean.iter().copied().collect(), k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackBatch {
    pub pairs: Vec<FeedbackPair>,
    /// Fewer unused pairs remained than were requested for some label.
    pub exhausted: bool,
}

/// Draws pairs uniformly without replacement, excluding every pair already in
/// `history`. Similar pairs come first in the batch.
pub fn generate_feedback(
    user: &SimulatedUser,
    n_similar: usize,
    n_dissimilar: usize,
    history: &[FeedbackPair],
    seed: u64,
    round: u32,
) -> FeedbackBatch {
    let used: HashSet<(usize, usize)> = history.iter().map(FeedbackPair::key).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exhausted = false;
    let mut pairs = Vec::with_capacity(n_similar + n_dissimilar);
    for (candidates, wanted, label) in [
        (user.similar_pairs(), n_similar, FeedbackLabel::Similar),
        (user.dissimilar_pairs(), n_dissimilar, FeedbackLabel::Dissimilar),
    ] {
        let mut fresh: Vec<(usize, usize)> = candidates.into_iter().filter(|p| !used.contains(p)).collect();
        if fresh.len() < wanted {
            exhausted = true;
        }
        let (chosen, _) = fresh.partial_shuffle(&mut rng, wanted);
        pairs.extend(chosen.iter().map(|&(i, j)| FeedbackPair { i, j, label, round }));
    }
    FeedbackBatch { pairs, exhausted }
}
