//! Bayesian learning of a feature-similarity metric from pairwise feedback.
//!
//! The metric lives in sample space and is parameterized on an orthonormal
//! basis `v_1..v_K` of the top principal directions of the feature vectors:
//!
//! ```text
//! A = Σ_k γ_k v_k v_kᵀ + (I − Σ_k v_k v_kᵀ),     γ_k ≥ 0
//! ```
//!
//! so `γ = 1` recovers the Euclidean metric. Each pair of features labeled
//! similar (dissimilar) contributes the likelihood `σ(μ − d_A)` (`σ(d_A − μ)`).
//! The posterior over `γ` is approximated by independent normals truncated at
//! zero. `ln σ` is replaced by a probit-integral stand-in whose expectation
//! under a normal score is closed form. Each pair integrates its dominant
//! factor exactly by quadrature and treats the rest of its score as normal
//! with its exact mean and variance. Factors are updated one at a time by
//! damped natural-gradient steps on that objective, and each sweep is followed
//! by an extrapolation along the sweep's displacement. The factors after one
//! batch become the prior for the next.

use std::collections::HashMap;
use std::sync::Arc;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::FeatureVector;
use crate::error::{Error, Result};
use crate::truncnorm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackLabel {
    Similar,
    Dissimilar,
}

impl FeedbackLabel {
    fn sign(self) -> f64 {
        match self {
            FeedbackLabel::Similar => 1.0,
            FeedbackLabel::Dissimilar => -1.0,
        }
    }
}

/// A user judgment on one pair of features. Always stored with `i < j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawFeedbackPair")]
pub struct FeedbackPair {
    pub i: usize,
    pub j: usize,
    pub label: FeedbackLabel,
    pub round: u32,
}

#[derive(Deserialize)]
struct RawFeedbackPair {
    i: usize,
    j: usize,
    label: FeedbackLabel,
    round: u32,
}

impl TryFrom<RawFeedbackPair> for FeedbackPair {
    type Error = Error;

    fn try_from(raw: RawFeedbackPair) -> Result<Self> {
        FeedbackPair::new(raw.i, raw.j, raw.label, raw.round)
    }
}

impl FeedbackPair {
    pub fn new(i: usize, j: usize, label: FeedbackLabel, round: u32) -> Result<Self> {
        if i == j {
            return Err(Error::InvalidArgument(format!(
                "feedback pair must join two distinct features, got ({i}, {j})"
            )));
        }
        Ok(Self {
            i: i.min(j),
            j: i.max(j),
            label,
            round,
        })
    }

    pub fn key(&self) -> (usize, usize) {
        (self.i, self.j)
    }
}

pub fn write_feedback_jsonl(pairs: &[FeedbackPair]) -> String {
    pairs
        .iter()
        .map(|p| serde_json::to_string(p).expect("feedback serializes") + "\n")
        .collect()
}

pub fn read_feedback_jsonl(text: &str) -> Result<Vec<FeedbackPair>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Rows of the returned `D × n` matrix are the feature vectors.
pub(crate) fn stack_features(features: &[FeatureVector]) -> Result<DMatrix<f64>> {
    let d = features.len();
    let n = features.first().map(|f| f.values.len()).unwrap_or(0);
    if let Some(bad) = features.iter().find(|f| f.values.len() != n) {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: bad.values.len(),
        });
    }
    Ok(DMatrix::from_fn(d, n, |r, c| features[r].values[c]))
}

/// Squared Euclidean distance, summed termwise.
pub fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// A single positive semidefinite metric `Vᵀ diag(w) V + r (I − VᵀV)`: weight
/// `w_k` along each basis direction and `r` on the orthogonal complement.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankMetric {
    basis: Arc<DMatrix<f64>>,
    weights: DVector<f64>,
    residual: f64,
}

impl LowRankMetric {
    pub fn new(basis: Arc<DMatrix<f64>>, weights: DVector<f64>) -> Result<Self> {
        if basis.nrows() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: basis.nrows(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidArgument("metric weights must be nonnegative".into()));
        }
        Ok(Self {
            basis,
            weights,
            residual: 1.0,
        })
    }

    pub fn with_residual(mut self, residual: f64) -> Result<Self> {
        if !(residual >= 0.0) {
            return Err(Error::InvalidArgument("residual weight must be nonnegative".into()));
        }
        self.residual = residual;
        Ok(self)
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// `(a − b)ᵀ A (a − b)`.
    pub fn distance(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let delta = a - b;
        let euclid = delta.norm_squared();
        let proj = &*self.basis * &delta;
        let in_span = proj.norm_squared();
        let correction: f64 = proj
            .iter()
            .zip(self.weights.iter())
            .map(|(p, w)| (w - 1.0) * p * p)
            .sum();
        (euclid + (self.residual - 1.0) * (euclid - in_span).max(0.0) + correction).max(0.0)
    }

    /// Materializes the `n × n` matrix `r I + Vᵀ diag(w − r) V`.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.basis.ncols();
        let scaled = DMatrix::from_fn(self.basis.nrows(), n, |k, c| {
            (self.weights[k] - self.residual) * self.basis[(k, c)]
        });
        DMatrix::from_diagonal_element(n, n, self.residual) + self.basis.transpose() * scaled
    }
}

/// Precomputed pairwise quantities for a fixed feature set and basis, so that
/// all `D × D` metric distances can be formed in `O(D² K)` for any weights.
#[derive(Debug, Clone)]
pub struct FeatureGeometry {
    euclid: DMatrix<f64>,
    projections: DMatrix<f64>,
}

impl FeatureGeometry {
    pub fn new(features: &[FeatureVector], basis: &DMatrix<f64>) -> Result<Self> {
        let rows = stack_features(features)?;
        if rows.ncols() != basis.ncols() {
            return Err(Error::DimensionMismatch {
                expected: basis.ncols(),
                got: rows.ncols(),
            });
        }
        let d = rows.nrows();
        let row_vecs: Vec<Vec<f64>> = (0..d).map(|r| rows.row(r).iter().copied().collect()).collect();
        let mut euclid = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in (i + 1)..d {
                let e = squared_euclidean(&row_vecs[i], &row_vecs[j]);
                euclid[(i, j)] = e;
                euclid[(j, i)] = e;
            }
        }
        let projections = &rows * basis.transpose();
        Ok(Self { euclid, projections })
    }

    pub fn n_features(&self) -> usize {
        self.euclid.nrows()
    }

    pub fn euclidean(&self) -> &DMatrix<f64> {
        &self.euclid
    }

    /// Squared distance between features `i` and `j` under `metric`, which
    /// must share this geometry's basis. Bitwise Euclidean at unit weights.
    pub fn distance(&self, i: usize, j: usize, metric: &LowRankMetric) -> f64 {
        let euclid = self.euclid[(i, j)];
        let mut d = euclid;
        let mut in_span = 0.0;
        for (k, w) in metric.weights.iter().enumerate() {
            let diff = self.projections[(i, k)] - self.projections[(j, k)];
            in_span += diff * diff;
            d += (w - 1.0) * diff * diff;
        }
        d += (metric.residual - 1.0) * (euclid - in_span).max(0.0);
        d.max(0.0)
    }

    /// Squared projected differences `z_k = (v_kᵀ(f_i − f_j))²`.
    fn pair_terms(&self, i: usize, j: usize) -> (DVector<f64>, f64) {
        let k = self.projections.ncols();
        let z = DVector::from_fn(k, |c, _| {
            let diff = self.projections[(i, c)] - self.projections[(j, c)];
            diff * diff
        });
        let residual = (self.euclid[(i, j)] - z.sum()).max(0.0);
        (z, residual)
    }

    pub fn distance_matrix(&self, metric: &LowRankMetric) -> DMatrix<f64> {
        let d = self.n_features();
        let mut out = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in (i + 1)..d {
                let v = self.distance(i, j, metric);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }
}

/// Tuning of the variational metric update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    /// Scale of the untruncated parent of each initial weight factor. The
    /// prior mean is one regardless; large scales approach an exponential
    /// prior.
    pub prior_scale: f64,
    /// Margin `μ`; `None` uses the median squared Euclidean feature distance.
    pub margin: Option<f64>,
    /// Distance unit inside the logistic likelihood, `σ((μ − d) / scale)`.
    /// One gives the plain logistic; larger values soften each judgment.
    pub distance_scale: f64,
    /// Learn a weight for the complement of the basis span; otherwise it
    /// stays at one.
    pub learn_residual: bool,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            prior_scale: 1000.0,
            margin: None,
            distance_scale: 1.0,
            learn_residual: false,
            max_iters: 500,
            tol: 1e-10,
        }
    }
}

/// Truncated-normal factor parameters (parent location and scale).
#[derive(Debug, Clone, PartialEq)]
struct Factors {
    location: DVector<f64>,
    scale: DVector<f64>,
}

impl Factors {
    fn moments(&self) -> (DVector<f64>, DVector<f64>) {
        let k = self.location.len();
        let mut mean = DVector::zeros(k);
        let mut var = DVector::zeros(k);
        for c in 0..k {
            let (m, v) = truncnorm::moments(self.location[c], self.scale[c]);
            mean[c] = m;
            var[c] = v;
        }
        (mean, var)
    }

    /// `from + stretch · (self − from)` in natural parameters, if the result
    /// is a valid factor set.
    fn extrapolate(&self, from: &Factors, stretch: f64) -> Option<Factors> {
        let mut out = self.clone();
        for c in 0..self.location.len() {
            let natural = |f: &Factors| {
                let prec = f.scale[c].powi(-2);
                (f.location[c] * prec, prec)
            };
            let (a, b) = (natural(from), natural(self));
            let lin = a.0 + stretch * (b.0 - a.0);
            let prec = a.1 + stretch * (b.1 - a.1);
            if !(prec > 0.0 && lin.is_finite()) {
                return None;
            }
            out.location[c] = lin / prec;
            out.scale[c] = prec.sqrt().recip();
        }
        Some(out)
    }
}

#[derive(Debug, Clone)]
pub struct MetricPosterior {
    basis: Arc<DMatrix<f64>>,
    /// One factor per basis direction, then one for the residual.
    factors: Factors,
    initial: Factors,
    initial_mean: DVector<f64>,
    weight_mean: DVector<f64>,
    weight_variance: DVector<f64>,
    residual_mean: f64,
    residual_variance: f64,
    feedback_log: Vec<FeedbackPair>,
    margin: f64,
    config: MetricConfig,
    objective: Option<f64>,
}

impl MetricPosterior {
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn shared_basis(&self) -> Arc<DMatrix<f64>> {
        Arc::clone(&self.basis)
    }

    pub fn rank(&self) -> usize {
        self.basis.nrows()
    }

    pub fn weight_mean(&self) -> &DVector<f64> {
        &self.weight_mean
    }

    pub fn weight_variance(&self) -> &DVector<f64> {
        &self.weight_variance
    }

    /// Posterior mean of the weight on the complement of the basis span.
    pub fn residual_mean(&self) -> f64 {
        self.residual_mean
    }

    pub fn residual_variance(&self) -> f64 {
        self.residual_variance
    }

    pub fn feedback_log(&self) -> &[FeedbackPair] {
        &self.feedback_log
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn config(&self) -> &MetricConfig {
        &self.config
    }

    /// Distance unit of the pair likelihood.
    pub fn distance_scale(&self) -> f64 {
        self.config.distance_scale
    }

    /// Variational objective reached by the latest update.
    pub fn objective(&self) -> Option<f64> {
        self.objective
    }

    /// Point estimate `A = Σ mean(γ_k) v_k v_kᵀ + mean(r) (I − VᵀV)`.
    pub fn mean_metric(&self) -> LowRankMetric {
        LowRankMetric {
            basis: Arc::clone(&self.basis),
            weights: self.weight_mean.clone(),
            residual: self.residual_mean,
        }
    }

    /// Number of factors updated by feedback.
    fn active_factors(&self) -> usize {
        self.rank() + usize::from(self.config.learn_residual)
    }

    /// Builds a posterior with explicit factor parameters and no feedback. The
    /// residual weight stays fixed at one.
    pub fn from_factors(basis: DMatrix<f64>, location: DVector<f64>, scale: DVector<f64>, margin: f64) -> Result<Self> {
        let k = basis.nrows();
        if location.len() != k || scale.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: location.len().min(scale.len()),
            });
        }
        if scale.iter().any(|&s| !(s > 0.0)) || !(margin > 0.0) {
            return Err(Error::InvalidArgument("scales and margin must be positive".into()));
        }
        let factors = Factors {
            location: location.push(truncnorm::location_for_mean(1.0, 1.0)),
            scale: scale.push(1.0),
        };
        let mut posterior = Self {
            basis: Arc::new(basis),
            initial: factors.clone(),
            initial_mean: DVector::zeros(k + 1),
            factors: factors.clone(),
            weight_mean: DVector::zeros(k),
            weight_variance: DVector::zeros(k),
            residual_mean: 1.0,
            residual_variance: 0.0,
            feedback_log: Vec::new(),
            margin,
            config: MetricConfig {
                margin: Some(margin),
                learn_residual: false,
                ..MetricConfig::default()
            },
            objective: None,
        };
        posterior.set_factors(factors);
        posterior.initial_mean = posterior.full_mean();
        Ok(posterior)
    }

    fn full_mean(&self) -> DVector<f64> {
        self.weight_mean.clone().push(self.residual_mean)
    }

    fn set_moments(&mut self, mean: &DVector<f64>, var: &DVector<f64>) {
        let k = self.rank();
        self.weight_mean = mean.rows(0, k).into_owned();
        self.weight_variance = var.rows(0, k).into_owned();
        if self.config.learn_residual {
            self.residual_mean = mean[k];
            self.residual_variance = var[k];
        } else {
            self.residual_mean = 1.0;
            self.residual_variance = 0.0;
        }
    }

    fn set_factors(&mut self, factors: Factors) {
        let (mean, var) = factors.moments();
        self.factors = factors;
        self.set_moments(&mean, &var);
    }
}

/// Starts from the Euclidean metric on the top-`rank` principal directions of
/// the (centered) feature vectors. A rank above the data rank is clipped.
pub fn init_metric(features: &[FeatureVector], rank: usize, config: MetricConfig) -> Result<MetricPosterior> {
    if rank == 0 {
        return Err(Error::InvalidArgument("metric rank must be at least 1".into()));
    }
    if features.len() < 2 {
        return Err(Error::DegenerateFeatures("need at least two features".into()));
    }
    if !(config.prior_scale > 0.0) {
        return Err(Error::InvalidArgument("prior_scale must be positive".into()));
    }
    if !(config.distance_scale > 0.0) || !config.distance_scale.is_finite() {
        return Err(Error::InvalidArgument("distance_scale must be positive".into()));
    }
    let rows = stack_features(features)?;
    let basis = principal_directions(&rows, rank)?;
    let k = basis.nrows();

    let margin = match config.margin {
        Some(m) if m > 0.0 => m,
        Some(m) => return Err(Error::InvalidArgument(format!("margin must be positive, got {m}"))),
        None => median_pair_distance(&rows)?,
    };

    let location = truncnorm::location_for_mean(1.0, config.prior_scale);
    let factors = Factors {
        location: DVector::from_element(k + 1, location),
        scale: DVector::from_element(k + 1, config.prior_scale),
    };
    let (_, var) = factors.moments();
    Ok(MetricPosterior {
        basis: Arc::new(basis),
        initial: factors.clone(),
        initial_mean: DVector::from_element(k + 1, 1.0),
        factors,
        // exactly one, so the initial metric is the identity bit for bit
        weight_mean: DVector::from_element(k, 1.0),
        weight_variance: var.rows(0, k).into_owned(),
        residual_mean: 1.0,
        residual_variance: if config.learn_residual { var[k] } else { 0.0 },
        feedback_log: Vec::new(),
        margin,
        config: MetricConfig {
            margin: Some(margin),
            ..config
        },
        objective: None,
    })
}

fn median_pair_distance(rows: &DMatrix<f64>) -> Result<f64> {
    let d = rows.nrows();
    let row_vecs: Vec<Vec<f64>> = (0..d).map(|r| rows.row(r).iter().copied().collect()).collect();
    let mut dists = Vec::with_capacity(d * (d - 1) / 2);
    for i in 0..d {
        for j in (i + 1)..d {
            dists.push(squared_euclidean(&row_vecs[i], &row_vecs[j]));
        }
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    if median > 0.0 {
        Ok(median)
    } else {
        // more than half the pairs coincide; fall back to the mean distance
        let mean = dists.iter().sum::<f64>() / m as f64;
        if mean > 0.0 {
            Ok(mean)
        } else {
            Err(Error::DegenerateFeatures("all feature vectors are identical".into()))
        }
    }
}

/// Orthonormal `K × n` basis of the leading principal directions of the rows.
fn principal_directions(rows: &DMatrix<f64>, rank: usize) -> Result<DMatrix<f64>> {
    let (d, n) = rows.shape();
    let mean = rows.row_mean();
    let centered = DMatrix::from_fn(d, n, |r, c| rows[(r, c)] - mean[c]);

    // Eigendecompose whichever Gram matrix is smaller.
    let (eigvals, directions): (Vec<f64>, Vec<DVector<f64>>) = if d <= n {
        let gram = &centered * centered.transpose();
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        order
            .iter()
            .map(|&idx| {
                let lambda = eig.eigenvalues[idx].max(0.0);
                let u = eig.eigenvectors.column(idx);
                let v = centered.transpose() * u;
                let norm = v.norm();
                (lambda, if norm > 0.0 { v / norm } else { v })
            })
            .unzip()
    } else {
        let gram = centered.transpose() * &centered;
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        order
            .iter()
            .map(|&idx| (eig.eigenvalues[idx].max(0.0), eig.eigenvectors.column(idx).into_owned()))
            .unzip()
    };

    let top = eigvals.first().copied().unwrap_or(0.0);
    if !(top > 0.0) {
        return Err(Error::DegenerateFeatures("all feature vectors are identical".into()));
    }
    let data_rank = eigvals.iter().filter(|&&l| l > top * 1e-12 * d.max(n) as f64).count();
    let k = if rank > data_rank {
        warn!("metric rank {rank} exceeds data rank {data_rank}; clipping");
        data_rank
    } else {
        rank
    };

    // Modified Gram-Schmidt removes the round-off left by the Gram route.
    let mut basis = DMatrix::zeros(k, n);
    for (row, dir) in directions.into_iter().take(k).enumerate() {
        let mut v = dir;
        for prev in 0..row {
            let p = basis.row(prev).transpose();
            let overlap = p.dot(&v);
            v -= p * overlap;
        }
        let norm = v.norm();
        v /= norm;
        // sign convention: largest-magnitude entry positive
        let pivot = v
            .iter()
            .copied()
            .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            v = -v;
        }
        basis.set_row(row, &v.transpose());
    }
    Ok(basis)
}

/// `(f_i − f_j)ᵀ A (f_i − f_j)` under the posterior-mean metric.
pub fn mahalanobis(posterior: &MetricPosterior, f_i: &FeatureVector, f_j: &FeatureVector) -> f64 {
    posterior.mean_metric().distance(&f_i.values, &f_j.values)
}

/// Prepared likelihood terms of one labeled pair.
struct PairTerm {
    z: DVector<f64>,
    /// `y (μ − residual)`; the pair score is `s = offset − y zᵀγ`.
    offset: f64,
    sign: f64,
}

/// Folds `batch` into the posterior. Pairs contradicting earlier feedback
/// replace it: the posterior is rebuilt from the initial prior by replaying the
/// surviving log round by round.
pub fn update_metric(
    posterior: &MetricPosterior,
    batch: &[FeedbackPair],
    features: &[FeatureVector],
) -> Result<MetricPosterior> {
    if batch.is_empty() {
        return Err(Error::EmptyFeedback);
    }
    let d = features.len();
    let mut canonical = Vec::with_capacity(batch.len());
    for p in batch {
        if p.i >= d || p.j >= d {
            return Err(Error::InvalidArgument(format!(
                "feedback pair ({}, {}) outside [0, {d})",
                p.i, p.j
            )));
        }
        canonical.push(FeedbackPair::new(p.i, p.j, p.label, p.round)?);
    }

    // Most recent label wins within the batch.
    let mut last_label: HashMap<(usize, usize), FeedbackLabel> = HashMap::new();
    for p in &canonical {
        if let Some(prev) = last_label.insert(p.key(), p.label) {
            if prev != p.label {
                warn!(
                    "pair ({}, {}) labeled both ways in one batch; keeping the later label",
                    p.i, p.j
                );
            }
        }
    }
    let batch: Vec<FeedbackPair> = canonical
        .into_iter()
        .filter(|p| last_label[&p.key()] == p.label)
        .collect();

    let geometry = FeatureGeometry::new(features, &posterior.basis)?;

    let contradicted: Vec<(usize, usize)> = posterior
        .feedback_log
        .iter()
        .filter(|old| last_label.get(&old.key()).is_some_and(|&l| l != old.label))
        .map(|old| old.key())
        .collect();

    let mut next = posterior.clone();
    if !contradicted.is_empty() {
        warn!(
            "{} earlier feedback item(s) contradicted by the new batch; replaying history without them",
            contradicted.len()
        );
        let surviving: Vec<FeedbackPair> = posterior
            .feedback_log
            .iter()
            .filter(|old| !contradicted.contains(&old.key()))
            .copied()
            .collect();
        next = replay_from_prior(posterior, &surviving, &geometry)?;
    }

    let objective = absorb_batch(&mut next, &batch, &geometry)?;
    next.objective = Some(objective);
    next.feedback_log.extend(batch);
    Ok(next)
}

/// Re-derives the posterior from the initial prior, one round at a time.
pub fn replay_feedback(
    posterior: &MetricPosterior,
    log: &[FeedbackPair],
    features: &[FeatureVector],
) -> Result<MetricPosterior> {
    let geometry = FeatureGeometry::new(features, &posterior.basis)?;
    replay_from_prior(posterior, log, &geometry)
}

fn replay_from_prior(
    posterior: &MetricPosterior,
    log: &[FeedbackPair],
    geometry: &FeatureGeometry,
) -> Result<MetricPosterior> {
    let mut fresh = posterior.clone();
    fresh.set_factors(posterior.initial.clone());
    let initial_var = fresh.weight_variance.clone().push(fresh.residual_variance);
    fresh.set_moments(&posterior.initial_mean, &initial_var);
    fresh.feedback_log.clear();
    fresh.objective = None;

    let mut rounds: Vec<u32> = log.iter().map(|p| p.round).collect();
    rounds.sort_unstable();
    rounds.dedup();
    for round in rounds {
        let group: Vec<FeedbackPair> = log.iter().filter(|p| p.round == round).copied().collect();
        let objective = absorb_batch(&mut fresh, &group, geometry)?;
        fresh.objective = Some(objective);
        fresh.feedback_log.extend(group);
    }
    Ok(fresh)
}

/// Coordinate ascent on the variational objective, with the current factors as
/// prior. Returns the converged objective.
fn absorb_batch(posterior: &mut MetricPosterior, batch: &[FeedbackPair], geometry: &FeatureGeometry) -> Result<f64> {
    let k = posterior.active_factors();
    let learn_residual = posterior.config.learn_residual;
    let prior = Factors {
        location: posterior.factors.location.rows(0, k).into_owned(),
        scale: posterior.factors.scale.rows(0, k).into_owned(),
    };
    let margin = posterior.margin;
    let unit = posterior.distance_scale();

    let terms: Vec<PairTerm> = batch
        .iter()
        .map(|p| {
            let (z, residual) = geometry.pair_terms(p.i, p.j);
            let sign = p.label.sign();
            let (z, fixed) = if learn_residual {
                (z.push(residual), 0.0)
            } else {
                (z, residual)
            };
            PairTerm {
                z: z / unit,
                offset: sign * (margin - fixed) / unit,
                sign,
            }
        })
        .collect();

    let mut factors = prior.clone();
    let (mut mean, mut var) = factors.moments();
    // Each pair integrates its dominant factor exactly and treats the rest of
    // its score as normal. The choice is fixed for the batch, so every
    // coordinate step climbs the same objective.
    let dominant: Vec<usize> = terms
        .iter()
        .map(|t| {
            let spread = |c: usize| t.z[c] * t.z[c] * var[c];
            (0..k)
                .max_by(|&a, &b| spread(a).total_cmp(&spread(b)).then(b.cmp(&a)))
                .unwrap_or(0)
        })
        .collect();
    let mut kl = vec![0.0; k];
    let mut value = batch_objective(&terms, &dominant, &factors, &mean, &var, &kl);

    for _ in 0..posterior.config.max_iters {
        let previous = value;
        let start = factors.clone();
        for c in 0..k {
            let scores = PairScores::new(&terms, &mean, &var);
            // Score moments without factor c.
            let base: Vec<(f64, f64)> = terms
                .iter()
                .zip(scores.mean.iter().zip(&scores.var))
                .map(|(t, (&m, &v))| (m + t.sign * t.z[c] * mean[c], (v - t.z[c] * t.z[c] * var[c]).max(0.0)))
                .collect();
            let involved: Vec<usize> = (0..terms.len()).filter(|&p| terms[p].z[c] != 0.0).collect();
            // Part of the objective that depends on factor c, and with
            // `direction` the natural-gradient step in (E γ_c, E γ_c²).
            let local = |location: f64, scale: f64, direction: bool| -> (f64, f64, f64) {
                let (m_c, v_c) = truncnorm::moments(location, scale);
                let (mut value, mut d1, mut d2) = (0.0, 0.0, 0.0);
                for &p in &involved {
                    let (t, (bm, bv), d) = (&terms[p], base[p], dominant[p]);
                    let zc = t.z[c];
                    if d == c {
                        let e = Slice {
                            rest: bm,
                            slope: t.sign * zc,
                            rest_var: bv,
                        }
                        .expectation(location, scale, direction);
                        value += e.value;
                        d1 += e.d1;
                        d2 += e.d2;
                    } else {
                        let zd = t.z[d];
                        let e = Slice {
                            rest: bm - t.sign * zc * m_c + t.sign * zd * mean[d],
                            slope: t.sign * zd,
                            rest_var: (bv + zc * zc * v_c - zd * zd * var[d]).max(0.0),
                        }
                        .expectation(factors.location[d], factors.scale[d], false);
                        value += e.value;
                        d1 += -t.sign * zc * e.gm - 2.0 * zc * zc * m_c * e.gv;
                        d2 += zc * zc * e.gv;
                    }
                }
                (value, d1, d2)
            };
            let (expected, d1, d2) = local(factors.location[c], factors.scale[c], true);
            let baseline = expected - kl[c];
            let prior_prec = prior.scale[c].powi(-2);
            let target = (prior.location[c] * prior_prec + d1, prior_prec - 2.0 * d2);
            let current_prec = factors.scale[c].powi(-2);
            let current = (factors.location[c] * current_prec, current_prec);

            // Full step first, halved until the objective does not drop.
            let mut accepted = None;
            let mut step = 1.0;
            while step >= 1.0 / 1024.0 {
                let lin = current.0 + step * (target.0 - current.0);
                let prec = current.1 + step * (target.1 - current.1);
                step *= 0.5;
                if !(prec > 0.0 && lin.is_finite()) {
                    continue;
                }
                let (location, scale) = (lin / prec, prec.sqrt().recip());
                let trial_kl = truncnorm::kl_divergence((location, scale), (prior.location[c], prior.scale[c]));
                if local(location, scale, false).0 - trial_kl >= baseline {
                    accepted = Some((location, scale, trial_kl));
                    break;
                }
            }
            if let Some((location, scale, trial_kl)) = accepted {
                (mean[c], var[c]) = truncnorm::moments(location, scale);
                factors.location[c] = location;
                factors.scale[c] = scale;
                kl[c] = trial_kl;
            }
        }
        value = batch_objective(&terms, &dominant, &factors, &mean, &var, &kl);
        // Coupled factors make coordinate ascent crawl along a ridge. Stretch
        // the sweep's displacement in natural parameters while that helps.
        let mut stretch = 2.0;
        while stretch <= 64.0 && value.is_finite() {
            let Some(candidate) = factors.extrapolate(&start, stretch) else {
                break;
            };
            let (m, v) = candidate.moments();
            let trial_kl: Vec<f64> = (0..k)
                .map(|c| {
                    truncnorm::kl_divergence(
                        (candidate.location[c], candidate.scale[c]),
                        (prior.location[c], prior.scale[c]),
                    )
                })
                .collect();
            let trial = batch_objective(&terms, &dominant, &candidate, &m, &v, &trial_kl);
            if !(trial > value) {
                break;
            }
            (factors, mean, var, kl, value) = (candidate, m, v, trial_kl, trial);
            stretch *= 2.0;
        }
        if !value.is_finite() {
            return Err(Error::NonFinite("metric variational objective".into()));
        }
        if (value - previous).abs() <= posterior.config.tol * (1.0 + value.abs()) {
            break;
        }
    }

    posterior.factors.location.rows_mut(0, k).copy_from(&factors.location);
    posterior.factors.scale.rows_mut(0, k).copy_from(&factors.scale);
    let (mean, var) = if learn_residual {
        (mean, var)
    } else {
        (mean.push(1.0), var.push(0.0))
    };
    posterior.set_moments(&mean, &var);
    Ok(value)
}

/// Variational objective: each pair's expected stand-in log-likelihood with
/// its dominant factor integrated exactly, minus the divergences from the
/// batch prior.
fn batch_objective(
    terms: &[PairTerm],
    dominant: &[usize],
    factors: &Factors,
    mean: &DVector<f64>,
    var: &DVector<f64>,
    kl: &[f64],
) -> f64 {
    let scores = PairScores::new(terms, mean, var);
    let expected: f64 = terms
        .iter()
        .zip(dominant)
        .zip(scores.mean.iter().zip(&scores.var))
        .map(|((t, &d), (&m, &v))| {
            let zd = t.z[d];
            Slice {
                rest: m + t.sign * zd * mean[d],
                slope: t.sign * zd,
                rest_var: (v - zd * zd * var[d]).max(0.0),
            }
            .expectation(factors.location[d], factors.scale[d], false)
            .value
        })
        .sum();
    expected - kl.iter().sum::<f64>()
}

/// A pair score seen from one factor: `s = rest − slope · γ + ε` with
/// `ε ~ N(0, rest_var)` standing in for the other factors.
struct Slice {
    rest: f64,
    slope: f64,
    rest_var: f64,
}

struct SliceExpectation {
    value: f64,
    /// Expected derivatives of the smoothed stand-in in the mean and variance
    /// of the normal part.
    gm: f64,
    gv: f64,
    /// Natural-gradient step in `(E γ, E γ²)`: the least-squares coefficients
    /// of the integrand on `γ` and `γ²` under the factor.
    d1: f64,
    d2: f64,
}

impl Slice {
    /// Expectations with `γ ~ TN(location, scale)` integrated by quadrature.
    fn expectation(&self, location: f64, scale: f64, direction: bool) -> SliceExpectation {
        if self.slope == 0.0 {
            let (value, gm, gv) = truncnorm::gaussian_ln_logistic(self.rest, self.rest_var);
            return SliceExpectation {
                value,
                gm,
                gv,
                d1: 0.0,
                d2: 0.0,
            };
        }
        let tau = (truncnorm::PROBIT_SLOPE.powi(-2) + self.rest_var).sqrt();
        let window = (self.rest / self.slope, 8.0 * tau / self.slope.abs());
        let rule = truncnorm::quadrature(location, scale, Some(window));
        let g: Vec<(f64, f64, f64)> = rule
            .iter()
            .map(|&(x, _)| truncnorm::gaussian_ln_logistic(self.rest - self.slope * x, self.rest_var))
            .collect();
        let mut e = SliceExpectation {
            value: 0.0,
            gm: 0.0,
            gv: 0.0,
            d1: 0.0,
            d2: 0.0,
        };
        for (&(_, w), &(g, gm, gv)) in rule.iter().zip(&g) {
            e.value += w * g;
            e.gm += w * gm;
            e.gv += w * gv;
        }
        if !direction {
            return e;
        }
        let center: f64 = rule.iter().map(|(x, w)| w * x).sum();
        let (mut s2, mut s3, mut s4, mut c1, mut c2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&(x, w), &(g, _, _)) in rule.iter().zip(&g) {
            let u = x - center;
            let (u2, dg) = (u * u, g - e.value);
            s2 += w * u2;
            s3 += w * u2 * u;
            s4 += w * u2 * u2;
            c1 += w * dg * u;
            c2 += w * dg * u2;
        }
        let s4 = s4 - s2 * s2;
        let det = s2 * s4 - s3 * s3;
        if det > 0.0 {
            let b1 = (s4 * c1 - s3 * c2) / det;
            let b2 = (s2 * c2 - s3 * c1) / det;
            e.d1 = b1 - 2.0 * b2 * center;
            e.d2 = b2;
        }
        e
    }
}

/// Mean and variance of every pair score under the current factors.
#[derive(Clone)]
struct PairScores {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl PairScores {
    fn new(terms: &[PairTerm], mean: &DVector<f64>, var: &DVector<f64>) -> Self {
        Self {
            mean: terms.iter().map(|t| t.offset - t.sign * t.z.dot(mean)).collect(),
            var: terms
                .iter()
                .map(|t| t.z.iter().zip(var.iter()).map(|(z, v)| z * z * v).sum())
                .collect(),
        }
    }
}

/// `count` independent metric draws from the variational posterior.
pub fn sample_metrics(posterior: &MetricPosterior, count: usize, seed: u64) -> Vec<LowRankMetric> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = posterior.rank();
    (0..count)
        .map(|_| {
            let weights = DVector::from_fn(k, |c, _| {
                truncnorm::sample(posterior.factors.location[c], posterior.factors.scale[c], &mut rng)
            });
            let residual = if posterior.config.learn_residual {
                truncnorm::sample(posterior.factors.location[k], posterior.factors.scale[k], &mut rng)
            } else {
                1.0
            };
            LowRankMetric {
                basis: posterior.shared_basis(),
                weights,
                residual,
            }
        })
        .collect()
}
