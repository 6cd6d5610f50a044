//! Interactive elicitation sessions: feedback rounds over a feature layout, and
//! the final regression fit whose prior covariance comes from the learned
//! metric.

use std::fs;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{feature_columns, FeatureMatrix, FeatureVector};
use crate::embedding::{optimize_layout, pca_layout, EmbeddingConfig, Layout};
use crate::error::{Error, Result};
use crate::linreg::{
    fit_vb_factored, mse, predict, FitOptions, HyperPriors, PriorCovariance, PriorFactor, RegressionPosterior,
};
use crate::metric::{
    init_metric, update_metric, write_feedback_jsonl, FeatureGeometry, FeedbackPair, MetricConfig, MetricPosterior,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub embedding: EmbeddingConfig,
    pub metric: MetricConfig,
    /// Number of principal directions carrying learned weights.
    pub rank: usize,
    /// Kernel bandwidth candidates as multiples of the median metric distance.
    pub kernel_grid: Vec<f64>,
    pub cv_folds: usize,
    pub cv_seed: u64,
    pub hypers: HyperPriors,
    pub fit: FitOptions,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            embedding: EmbeddingConfig::default(),
            metric: MetricConfig::default(),
            rank: 20,
            kernel_grid: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            cv_folds: 5,
            cv_seed: 0,
            hypers: HyperPriors::default(),
            fit: FitOptions::default(),
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        self.embedding.validate()?;
        if self.rank == 0 {
            return Err(Error::InvalidArgument("rank must be at least 1".into()));
        }
        if self.kernel_grid.is_empty() || self.kernel_grid.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
            return Err(Error::InvalidArgument(
                "kernel grid must be nonempty and positive".into(),
            ));
        }
        if self.cv_folds < 2 {
            return Err(Error::InvalidArgument("need at least two folds".into()));
        }
        Ok(())
    }
}

/// State recorded after each feedback round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundSnapshot {
    pub round: u32,
    pub weight_mean: DVector<f64>,
    pub weight_variance: DVector<f64>,
    pub feedback_count: usize,
    /// Layout on display when the round closed.
    pub layout: Layout,
    /// `None` while the layout is an unoptimized projection.
    pub layout_cost: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SessionState {
    dataset: FeatureMatrix,
    features: Vec<FeatureVector>,
    metric: MetricPosterior,
    layout: Layout,
    layout_cost: Option<f64>,
    round: u32,
    config: SessionConfig,
    history: Vec<RoundSnapshot>,
}

/// Outcome of fitting the final model.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalModel {
    pub posterior: RegressionPosterior,
    pub prior: PriorCovariance,
    pub predictions: DVector<f64>,
    pub test_mse: f64,
}

impl FinalModel {
    pub fn kernel_bandwidth(&self) -> f64 {
        self.prior.kernel_bandwidth
    }
}

impl SessionState {
    pub fn start(train: FeatureMatrix, config: SessionConfig) -> Result<Self> {
        Self::start_inner(train, config, true)
    }

    /// Starts with the plain PCA projection as layout, skipping optimization.
    /// Suited to batch runs that never display the layout.
    pub fn start_headless(train: FeatureMatrix, config: SessionConfig) -> Result<Self> {
        Self::start_inner(train, config, false)
    }

    fn start_inner(train: FeatureMatrix, config: SessionConfig, optimize: bool) -> Result<Self> {
        config.validate()?;
        if train.n_samples() == 0 || train.n_features() == 0 {
            return Err(Error::InvalidArgument("training matrix is empty".into()));
        }
        let features = feature_columns(&train);
        let metric = init_metric(&features, config.rank, config.metric)?;
        let (layout, layout_cost) = if optimize {
            // Without feedback the display reflects the identity metric only.
            let embedding = EmbeddingConfig {
                mc_samples: 0,
                ..config.embedding
            };
            let optimized = optimize_layout(&features, &metric, &embedding, None)?;
            (optimized.layout, Some(optimized.cost))
        } else {
            (pca_layout(&features)?, None)
        };
        Ok(Self {
            dataset: train,
            features,
            metric,
            layout,
            layout_cost,
            round: 0,
            config,
            history: Vec::new(),
        })
    }

    pub fn dataset(&self) -> &FeatureMatrix {
        &self.dataset
    }

    pub fn features(&self) -> &[FeatureVector] {
        &self.features
    }

    pub fn metric(&self) -> &MetricPosterior {
        &self.metric
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Cost of the displayed layout; `None` if it was never optimized.
    pub fn layout_cost(&self) -> Option<f64> {
        self.layout_cost
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn history(&self) -> &[RoundSnapshot] {
        &self.history
    }

    /// Whether the layout reflects the latest metric.
    pub fn layout_is_current(&self) -> bool {
        self.layout.iteration == self.round
    }

    /// Updates the metric and closes the round. The layout is left as is until
    /// [`refresh_visualization`](Self::refresh_visualization).
    pub fn submit_feedback(&mut self, batch: &[FeedbackPair]) -> Result<u32> {
        if batch.is_empty() {
            return Err(Error::EmptyFeedback);
        }
        let stamped: Vec<FeedbackPair> = batch
            .iter()
            .map(|p| FeedbackPair {
                round: self.round,
                ..*p
            })
            .collect();
        self.metric = update_metric(&self.metric, &stamped, &self.features)?;
        self.round += 1;
        self.history.push(RoundSnapshot {
            round: self.round,
            weight_mean: self.metric.weight_mean().clone(),
            weight_variance: self.metric.weight_variance().clone(),
            feedback_count: self.metric.feedback_log().len(),
            layout: self.layout.clone(),
            layout_cost: self.layout_cost,
        });
        Ok(self.round)
    }

    /// Re-optimizes the layout under the current metric, warm-started from the
    /// displayed one. Does nothing if the layout is already current.
    pub fn refresh_visualization(&mut self) -> Result<&Layout> {
        if self.layout_is_current() {
            return Ok(&self.layout);
        }
        let embedding = if self.metric.feedback_log().is_empty() {
            EmbeddingConfig {
                mc_samples: 0,
                ..self.config.embedding
            }
        } else {
            self.config.embedding
        };
        let optimized = optimize_layout(&self.features, &self.metric, &embedding, Some(&self.layout))?;
        self.layout = Layout::new(optimized.layout.coords, self.round)?;
        self.layout_cost = Some(optimized.cost);
        Ok(&self.layout)
    }

    /// Bandwidth grid from the current metric.
    pub fn kernel_grid(&self) -> Result<Vec<f64>> {
        let geometry = FeatureGeometry::new(&self.features, self.metric.basis())?;
        let distances = geometry.distance_matrix(&self.metric.mean_metric());
        scaled_grid(&distances, &self.config.kernel_grid)
    }

    /// Selects the kernel bandwidth, builds the prior from the posterior-mean
    /// metric and fits on the whole training set.
    pub fn finalize_and_fit(&self, test: &FeatureMatrix) -> Result<FinalModel> {
        let geometry = FeatureGeometry::new(&self.features, self.metric.basis())?;
        let distances = geometry.distance_matrix(&self.metric.mean_metric());
        fit_with_distances(&self.dataset, test, &distances, &self.config)
    }

    /// Writes layout, feedback log, config and (optionally) a fitted posterior
    /// into `dir`.
    pub fn export_snapshot(&self, dir: impl AsRef<Path>, posterior: Option<&RegressionPosterior>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, bytes: &[u8]| -> Result<()> {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
        };
        write(
            "layout.jsonl",
            self.layout.to_jsonl(self.dataset.feature_names()).as_bytes(),
        )?;
        write(
            "feedback.jsonl",
            write_feedback_jsonl(self.metric.feedback_log()).as_bytes(),
        )?;
        let manifest = serde_json::json!({
            "round": self.round,
            "layout_iteration": self.layout.iteration,
            "config": self.config,
        });
        write("config.json", serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        if let Some(p) = posterior {
            write("posterior.plrp", &p.to_bytes())?;
        }
        Ok(())
    }
}

pub fn start_session(train: FeatureMatrix, config: SessionConfig) -> Result<SessionState> {
    SessionState::start(train, config)
}

/// `c_ij = exp(−d_ij / 2σ²)` from squared distances, with an exact unit diagonal.
pub fn kernel_from_distances(squared_distances: &DMatrix<f64>, bandwidth: f64) -> Result<PriorCovariance> {
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "kernel bandwidth must be positive, got {bandwidth}"
        )));
    }
    let d = squared_distances.nrows();
    let denom = 2.0 * bandwidth * bandwidth;
    let matrix = DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            1.0
        } else {
            (-squared_distances[(i, j)] / denom).exp()
        }
    });
    PriorCovariance::new(matrix, bandwidth)
}

/// Prior covariance from the posterior-mean metric.
pub fn build_prior_covariance(
    metric: &MetricPosterior,
    features: &[FeatureVector],
    bandwidth: f64,
) -> Result<PriorCovariance> {
    let geometry = FeatureGeometry::new(features, metric.basis())?;
    kernel_from_distances(&geometry.distance_matrix(&metric.mean_metric()), bandwidth)
}

/// `multipliers × median off-diagonal distance` (distance, not squared).
pub fn scaled_grid(squared_distances: &DMatrix<f64>, multipliers: &[f64]) -> Result<Vec<f64>> {
    let d = squared_distances.nrows();
    let mut off: Vec<f64> = Vec::with_capacity(d * d.saturating_sub(1) / 2);
    for i in 0..d {
        for j in i + 1..d {
            off.push(squared_distances[(i, j)].max(0.0).sqrt());
        }
    }
    if off.is_empty() {
        return Err(Error::DegenerateFeatures("need at least two features".into()));
    }
    off.sort_by(f64::total_cmp);
    let mid = off.len() / 2;
    let median = if off.len().is_multiple_of(2) {
        0.5 * (off[mid - 1] + off[mid])
    } else {
        off[mid]
    };
    if !(median > 0.0) {
        return Err(Error::DegenerateFeatures("median feature distance is zero".into()));
    }
    Ok(multipliers.iter().map(|m| m * median).collect())
}

/// Fold index per row: a seeded shuffle dealt round-robin.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &row) in order.iter().enumerate() {
        fold[row] = pos % folds;
    }
    fold
}

/// Mean validation MSE per bandwidth; `None` where the prior was singular.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthScores {
    pub grid: Vec<f64>,
    pub scores: Vec<Option<f64>>,
    pub selected: f64,
}

/// Cross-validated bandwidth choice. Duplicate grid values are merged; ties go
/// to the smaller bandwidth.
pub fn select_kernel_bandwidth(
    train: &FeatureMatrix,
    squared_distances: &DMatrix<f64>,
    grid: &[f64],
    folds: usize,
    seed: u64,
    hypers: &HyperPriors,
    options: &FitOptions,
) -> Result<BandwidthScores> {
    let n = train.n_samples();
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty bandwidth grid".into()));
    }
    if folds < 2 || folds > n {
        return Err(Error::InvalidArgument(format!(
            "folds must lie in [2, {n}], got {folds}"
        )));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    if grid.len() == 1 {
        return Ok(BandwidthScores {
            scores: vec![None],
            selected: grid[0],
            grid,
        });
    }

    let assignment = fold_assignment(n, folds, seed);
    let splits: Vec<(FeatureMatrix, FeatureMatrix)> = (0..folds)
        .map(|f| {
            let fit_rows: Vec<usize> = (0..n).filter(|&r| assignment[r] != f).collect();
            let val_rows: Vec<usize> = (0..n).filter(|&r| assignment[r] == f).collect();
            (train.select_rows(&fit_rows), train.select_rows(&val_rows))
        })
        .collect();
    let options = FitOptions {
        covariance: false,
        ..*options
    };

    let scores: Vec<Option<f64>> = grid
        .par_iter()
        .map(|&sigma| -> Result<Option<f64>> {
            let prior = kernel_from_distances(squared_distances, sigma)?;
            let factor = match PriorFactor::new(&prior) {
                Ok(f) => f,
                Err(Error::SingularCovariance { jitter }) => {
                    warn!("bandwidth {sigma} gives a singular prior at jitter {jitter:e}; skipped");
                    return Ok(None);
                }
                Err(e) => return Err(e),
            };
            let mut total = 0.0;
            for (fit, val) in &splits {
                let post = fit_vb_factored(fit.x(), fit.y(), &factor, hypers, &options)?;
                total += mse(&predict(&post, val.x())?, val.y())?;
            }
            Ok(Some(total / folds as f64))
        })
        .collect::<Result<_>>()?;

    let mut best: Option<(f64, f64)> = None;
    for (&sigma, score) in grid.iter().zip(&scores) {
        if let Some(s) = *score {
            if best.is_none_or(|(_, b)| s < b) {
                best = Some((sigma, s));
            }
        }
    }
    let (selected, _) =
        best.ok_or_else(|| Error::InvalidArgument("every bandwidth in the grid gave a singular prior".into()))?;
    Ok(BandwidthScores { grid, scores, selected })
}

/// Bandwidth selection, prior construction and the full-data fit for a given
/// matrix of squared feature distances.
pub fn fit_with_distances(
    train: &FeatureMatrix,
    test: &FeatureMatrix,
    squared_distances: &DMatrix<f64>,
    config: &SessionConfig,
) -> Result<FinalModel> {
    if test.n_features() != train.n_features() {
        return Err(Error::DimensionMismatch {
            expected: train.n_features(),
            got: test.n_features(),
        });
    }
    let grid = scaled_grid(squared_distances, &config.kernel_grid)?;
    let folds = config.cv_folds.min(train.n_samples());
    let selection = select_kernel_bandwidth(
        train,
        squared_distances,
        &grid,
        folds,
        config.cv_seed,
        &config.hypers,
        &config.fit,
    )?;
    let prior = kernel_from_distances(squared_distances, selection.selected)?;
    fit_with_prior(train, test, prior, config)
}

fn fit_with_prior(
    train: &FeatureMatrix,
    test: &FeatureMatrix,
    prior: PriorCovariance,
    config: &SessionConfig,
) -> Result<FinalModel> {
    let factor = PriorFactor::new(&prior)?;
    let posterior = fit_vb_factored(train.x(), train.y(), &factor, &config.hypers, &config.fit)?;
    let predictions = predict(&posterior, test.x())?;
    let test_mse = mse(&predictions, test.y())?;
    Ok(FinalModel {
        posterior,
        prior,
        predictions,
        test_mse,
    })
}

/// Kernel prior on plain Euclidean feature distances, with no feedback.
pub fn without_feedback_baseline(
    train: &FeatureMatrix,
    test: &FeatureMatrix,
    config: &SessionConfig,
) -> Result<FinalModel> {
    let features = feature_columns(train);
    let geometry = FeatureGeometry::new(&features, &DMatrix::zeros(0, train.n_samples()))?;
    fit_with_distances(train, test, geometry.euclidean(), config)
}

/// Independent coefficients: `C = I`.
pub fn unit_prior_baseline(train: &FeatureMatrix, test: &FeatureMatrix, config: &SessionConfig) -> Result<FinalModel> {
    fit_with_prior(train, test, PriorCovariance::identity(train.n_features()), config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::FeedbackLabel;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn matrix(n: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let beta = DVector::from_fn(d, |i, _| if i < 3 { 1.0 } else { 0.0 });
        let y = &x * beta + DVector::from_fn(n, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
        let names = (0..d).map(|i| format!("f{i}")).collect();
        FeatureMatrix::new(x, y, names).unwrap()
    }

    fn small_config() -> SessionConfig {
        SessionConfig {
            rank: 4,
            embedding: EmbeddingConfig {
                perplexity: 4.0,
                max_iters: 100,
                mc_samples: 2,
                ..EmbeddingConfig::default()
            },
            cv_folds: 3,
            ..SessionConfig::default()
        }
    }

    #[test]
    fn kernel_hand_values() {
        let d = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 2.0, 0.0]);
        let c = kernel_from_distances(&d, 1.0).unwrap();
        assert_eq!(c.matrix[(0, 0)], 1.0);
        assert!((c.matrix[(0, 1)] - (-1.0f64).exp()).abs() < 1e-15);
        let zero = kernel_from_distances(&DMatrix::zeros(2, 2), 0.5).unwrap();
        assert_eq!(zero.matrix[(0, 1)], 1.0);
        assert!(kernel_from_distances(&d, 0.0).is_err());
    }

    #[test]
    fn fresh_session_is_round_zero_and_deterministic() {
        let a = start_session(matrix(12, 10, 1), small_config()).unwrap();
        let b = start_session(matrix(12, 10, 1), small_config()).unwrap();
        assert_eq!(a.round(), 0);
        assert!(a.layout_is_current());
        assert_eq!(a.layout(), b.layout());
    }

    #[test]
    fn feedback_rounds_and_refresh() {
        let mut s = start_session(matrix(12, 10, 2), small_config()).unwrap();
        assert!(matches!(s.submit_feedback(&[]), Err(Error::EmptyFeedback)));
        let before = s.layout().clone();
        let pair = FeedbackPair::new(0, 5, FeedbackLabel::Similar, 99).unwrap();
        assert_eq!(s.submit_feedback(&[pair]).unwrap(), 1);
        assert_eq!(s.metric().feedback_log()[0].round, 0);
        assert_eq!(s.history().len(), 1);
        assert_eq!(s.layout(), &before);
        assert!(!s.layout_is_current());

        let refreshed = s.refresh_visualization().unwrap().clone();
        assert_eq!(refreshed.iteration, 1);
        let again = s.refresh_visualization().unwrap().clone();
        assert_eq!(refreshed.mean_displacement(&again), 0.0);
    }

    #[test]
    fn round_zero_matches_without_feedback() {
        let data = matrix(30, 8, 3);
        let test = matrix(10, 8, 4);
        let config = small_config();
        let s = start_session(data.clone(), config.clone()).unwrap();
        let a = s.finalize_and_fit(&test).unwrap();
        let b = without_feedback_baseline(&data, &test, &config).unwrap();
        assert_eq!(a.predictions, b.predictions);
        assert_eq!(a, s.finalize_and_fit(&test).unwrap());
    }

    #[test]
    fn grid_helpers() {
        let data = matrix(20, 5, 5);
        let d = DMatrix::from_fn(5, 5, |i, j| ((i as f64) - (j as f64)).powi(2));
        let opts = FitOptions::default();
        let one = select_kernel_bandwidth(&data, &d, &[0.7], 3, 0, &HyperPriors::default(), &opts).unwrap();
        assert_eq!(one.selected, 0.7);
        let dup =
            select_kernel_bandwidth(&data, &d, &[1.0, 0.5, 1.0, 2.0], 3, 0, &HyperPriors::default(), &opts).unwrap();
        let dedup = select_kernel_bandwidth(&data, &d, &[0.5, 1.0, 2.0], 3, 0, &HyperPriors::default(), &opts).unwrap();
        assert_eq!(dup, dedup);
        assert!(select_kernel_bandwidth(&data, &d, &[1.0, 2.0], 1, 0, &HyperPriors::default(), &opts).is_err());

        let folds = fold_assignment(10, 3, 7);
        assert_eq!(folds, fold_assignment(10, 3, 7));
        assert_eq!(folds.iter().filter(|&&f| f == 0).count(), 4);
    }

    #[test]
    fn snapshot_files() {
        let s = start_session(matrix(12, 10, 6), small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let post = s.finalize_and_fit(&matrix(5, 10, 7)).unwrap().posterior;
        s.export_snapshot(dir.path(), Some(&post)).unwrap();
        for f in ["layout.jsonl", "feedback.jsonl", "config.json", "posterior.plrp"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let bytes = fs::read(dir.path().join("posterior.plrp")).unwrap();
        assert_eq!(RegressionPosterior::from_bytes(&bytes).unwrap(), post);
    }
}
