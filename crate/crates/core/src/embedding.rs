//! Neighbor-retrieval layout of the features on a 2-D display.
//!
//! Row `i` of the high-dimensional affinity matrix is the neighborhood
//! distribution of feature `i` under the learned metric,
//! `p_{j|i} ∝ exp(−‖f_i − f_j‖²_A / σ_i²)`, and the low-dimensional one is
//! `q_{j|i} ∝ exp(−‖g_i − g_j‖² / σ_i²)`. The layout minimizes
//!
//! ```text
//! E_A [ λ · mean_i KL(P_i ‖ Q_i) + (1 − λ) · mean_i KL(Q_i ‖ P_i) ]
//! ```
//!
//! where the outer expectation runs over metric draws from the posterior.
//! λ trades recall (forward KL) against precision (reverse KL).

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::FeatureVector;
use crate::error::{Error, Result};
use crate::metric::{self, FeatureGeometry, LowRankMetric, MetricPosterior};

/// Floor applied to affinities inside the logarithms of the KL terms.
pub const AFFINITY_FLOOR: f64 = 1e-12;

const ENTROPY_TOL: f64 = 1e-5;
const MAX_BISECTIONS: usize = 200;

/// Row-stochastic neighbor probabilities with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub probs: DMatrix<f64>,
    pub bandwidths: Vec<f64>,
}

impl AffinityMatrix {
    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.nrows() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    /// `D × 2`, one row per feature.
    pub coords: DMatrix<f64>,
    /// Feedback round the layout was computed for.
    pub iteration: u32,
}

#[derive(Serialize, Deserialize)]
struct LayoutRecord {
    index: usize,
    name: String,
    x: f64,
    y: f64,
}

impl Layout {
    pub fn new(coords: DMatrix<f64>, iteration: u32) -> Result<Self> {
        if coords.ncols() != 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                got: coords.ncols(),
            });
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layout coordinate".into()));
        }
        Ok(Self { coords, iteration })
    }

    pub fn len(&self) -> usize {
        self.coords.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.nrows() == 0
    }

    pub fn point(&self, i: usize) -> [f64; 2] {
        [self.coords[(i, 0)], self.coords[(i, 1)]]
    }

    pub fn screen_distance(&self, i: usize, j: usize) -> f64 {
        let [ax, ay] = self.point(i);
        let [bx, by] = self.point(j);
        ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
    }

    /// Mean Euclidean displacement of the points between two layouts.
    pub fn mean_displacement(&self, other: &Layout) -> f64 {
        let d = self.len();
        (0..d)
            .map(|i| {
                let [ax, ay] = self.point(i);
                let [bx, by] = other.point(i);
                ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
            })
            .sum::<f64>()
            / d as f64
    }

    pub fn to_jsonl(&self, names: &[String]) -> String {
        (0..self.len())
            .map(|i| {
                let record = LayoutRecord {
                    index: i,
                    name: names.get(i).cloned().unwrap_or_default(),
                    x: self.coords[(i, 0)],
                    y: self.coords[(i, 1)],
                };
                serde_json::to_string(&record).expect("layout serializes") + "\n"
            })
            .collect()
    }

    /// Parses records in any order; indices must cover `0..D` exactly once.
    pub fn from_jsonl(text: &str, iteration: u32) -> Result<(Self, Vec<String>)> {
        let records: Vec<LayoutRecord> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        let d = records.len();
        let mut coords = DMatrix::zeros(d, 2);
        let mut names = vec![None; d];
        for r in records {
            if r.index >= d || names[r.index].is_some() {
                return Err(Error::Format(format!("bad layout index {}", r.index)));
            }
            coords[(r.index, 0)] = r.x;
            coords[(r.index, 1)] = r.y;
            names[r.index] = Some(r.name);
        }
        let names = names.into_iter().map(Option::unwrap).collect();
        Ok((Layout::new(coords, iteration)?, names))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub lambda: f64,
    pub perplexity: f64,
    pub max_iters: usize,
    pub learning_rate: f64,
    /// Number of metric draws for the expected cost; 0 uses the posterior mean.
    pub mc_samples: usize,
    pub seed: u64,
    /// Use `σ = 1` in the display space instead of reusing `σ_i²`.
    pub unit_lowdim_bandwidth: bool,
    /// Stop once an accepted step changes the cost by less than this fraction.
    pub tol: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            perplexity: 15.0,
            max_iters: 500,
            learning_rate: 1.0,
            mc_samples: 5,
            seed: 0,
            unit_lowdim_bandwidth: false,
            tol: 1e-6,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.perplexity > 1.0) {
            return Err(Error::InvalidArgument("perplexity must exceed 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Entropy in bits of the normalized row `exp(−β (d_j − d_min))`.
fn row_entropy_bits(shifted: &[f64], beta: f64) -> (f64, f64) {
    let weights: Vec<f64> = shifted.iter().map(|&d| (-beta * d).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut h = 0.0;
    for (&w, &d) in weights.iter().zip(shifted) {
        let p = w / total;
        if p > 0.0 {
            // ln p = −β d − ln total
            h -= p * (-beta * d - total.ln());
        }
    }
    (h / std::f64::consts::LN_2, total)
}

/// Per-row `σ_i²` such that each neighborhood has the requested perplexity.
pub fn bandwidths_from_distances(distances: &DMatrix<f64>, perplexity: f64) -> Result<Vec<f64>> {
    let d = distances.nrows();
    if d < 3 {
        return Err(Error::InvalidArgument("need at least three features".into()));
    }
    if !(perplexity > 1.0 && perplexity <= (d - 1) as f64) {
        return Err(Error::InvalidArgument(format!(
            "perplexity must lie in (1, {}], got {perplexity}",
            d - 1
        )));
    }
    let target = perplexity.log2();
    let sigmas: Vec<f64> = (0..d)
        .into_par_iter()
        .map(|i| {
            let row: Vec<f64> = (0..d).filter(|&j| j != i).map(|j| distances[(i, j)]).collect();
            row_bandwidth(i, &row, target)
        })
        .collect();
    Ok(sigmas)
}

fn row_bandwidth(i: usize, row: &[f64], target: f64) -> f64 {
    let min = row.iter().copied().fold(f64::INFINITY, f64::min);
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= 0.0 {
        warn!("feature {i} coincides with every other feature; using unit bandwidth");
        return 1.0;
    }
    let shifted: Vec<f64> = row.iter().map(|&v| v - min).collect();
    if max - min <= f64::EPSILON * max {
        // equidistant row: uniform for every bandwidth
        return max;
    }

    let mean_spread = shifted.iter().sum::<f64>() / shifted.len() as f64;
    let mut beta = 1.0 / mean_spread;
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    for _ in 0..MAX_BISECTIONS {
        let (h, _) = row_entropy_bits(&shifted, beta);
        if (h - target).abs() < ENTROPY_TOL {
            return 1.0 / beta;
        }
        if h > target {
            lo = beta;
            beta = if hi.is_finite() { 0.5 * (lo + hi) } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = 0.5 * (lo + hi);
        }
    }
    warn!("bandwidth search for feature {i} did not reach the target entropy");
    1.0 / beta
}

pub fn compute_bandwidths(features: &[FeatureVector], metric: &MetricPosterior, perplexity: f64) -> Result<Vec<f64>> {
    let geometry = FeatureGeometry::new(features, metric.basis())?;
    bandwidths_from_distances(&geometry.distance_matrix(&metric.mean_metric()), perplexity)
}

/// Row-normalized `exp(−d_ij / σ_i²)` over `j ≠ i`.
pub fn affinities_from_distances(distances: &DMatrix<f64>, bandwidths: &[f64]) -> Result<AffinityMatrix> {
    let d = distances.nrows();
    if bandwidths.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: bandwidths.len(),
        });
    }
    if bandwidths.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument("bandwidths must be positive".into()));
    }
    let rows: Vec<Vec<f64>> = (0..d)
        .into_par_iter()
        .map(|i| {
            let min = (0..d)
                .filter(|&j| j != i)
                .map(|j| distances[(i, j)])
                .fold(f64::INFINITY, f64::min);
            let mut row: Vec<f64> = (0..d)
                .map(|j| {
                    if j == i {
                        0.0
                    } else {
                        (-(distances[(i, j)] - min) / bandwidths[i]).exp()
                    }
                })
                .collect();
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= total);
            row
        })
        .collect();
    let probs = DMatrix::from_fn(d, d, |i, j| rows[i][j]);
    Ok(AffinityMatrix {
        probs,
        bandwidths: bandwidths.to_vec(),
    })
}

/// Pairwise metric distances of arbitrary feature vectors under one metric.
pub fn metric_distances(features: &[FeatureVector], metric: &LowRankMetric) -> DMatrix<f64> {
    let d = features.len();
    let mut out = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in (i + 1)..d {
            let v = metric.distance(&features[i].values, &features[j].values);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

pub fn high_dim_affinities(
    features: &[FeatureVector],
    metric: &LowRankMetric,
    bandwidths: &[f64],
) -> Result<AffinityMatrix> {
    affinities_from_distances(&metric_distances(features, metric), bandwidths)
}

fn layout_distances(coords: &DMatrix<f64>) -> DMatrix<f64> {
    let d = coords.nrows();
    let mut out = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in (i + 1)..d {
            let dx = coords[(i, 0)] - coords[(j, 0)];
            let dy = coords[(i, 1)] - coords[(j, 1)];
            let v = dx * dx + dy * dy;
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

pub fn low_dim_affinities(layout: &Layout, bandwidths: &[f64]) -> Result<AffinityMatrix> {
    affinities_from_distances(&layout_distances(&layout.coords), bandwidths)
}

/// Cost value plus the number of `q` entries that hit the floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBreakdown {
    pub value: f64,
    pub clamped: usize,
}

fn check_shapes(p_samples: &[AffinityMatrix], q: &AffinityMatrix) -> Result<()> {
    if p_samples.is_empty() {
        return Err(Error::InvalidArgument("need at least one P matrix".into()));
    }
    for p in p_samples {
        if p.probs.shape() != q.probs.shape() {
            return Err(Error::DimensionMismatch {
                expected: q.len(),
                got: p.len(),
            });
        }
    }
    Ok(())
}

pub fn cost_breakdown(p_samples: &[AffinityMatrix], q: &AffinityMatrix, lambda: f64) -> Result<CostBreakdown> {
    check_shapes(p_samples, q)?;
    let d = q.len();
    let mut clamped = 0;
    let mut total = 0.0;
    for p in p_samples {
        let mut forward = 0.0;
        let mut reverse = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i == j {
                    continue;
                }
                let pij = p.probs[(i, j)];
                let qij = q.probs[(i, j)];
                if pij > 0.0 {
                    if qij < AFFINITY_FLOOR {
                        clamped += 1;
                    }
                    forward += pij * (pij.ln() - qij.max(AFFINITY_FLOOR).ln());
                }
                if qij > 0.0 {
                    reverse += qij * (qij.ln() - pij.max(AFFINITY_FLOOR).ln());
                }
            }
        }
        total += (lambda * forward + (1.0 - lambda) * reverse) / d as f64;
    }
    Ok(CostBreakdown {
        value: (total / p_samples.len() as f64).max(0.0),
        clamped,
    })
}

/// Expected λ-weighted forward/reverse KL, averaged over rows and samples.
pub fn cost(p_samples: &[AffinityMatrix], q: &AffinityMatrix, lambda: f64) -> Result<f64> {
    Ok(cost_breakdown(p_samples, q, lambda)?.value)
}

/// Sample-averaged `p` and `ln max(p, floor)`: all the gradient needs.
struct PSummary {
    mean_p: DMatrix<f64>,
    mean_log_p: DMatrix<f64>,
}

impl PSummary {
    fn new(p_samples: &[AffinityMatrix]) -> Self {
        let d = p_samples[0].len();
        let s = p_samples.len() as f64;
        let mut mean_p = DMatrix::zeros(d, d);
        let mut mean_log_p = DMatrix::zeros(d, d);
        for p in p_samples {
            for i in 0..d {
                for j in 0..d {
                    if i != j {
                        mean_p[(i, j)] += p.probs[(i, j)] / s;
                        mean_log_p[(i, j)] += p.probs[(i, j)].max(AFFINITY_FLOOR).ln() / s;
                    }
                }
            }
        }
        Self { mean_p, mean_log_p }
    }
}

fn gradient_from_summary(
    summary: &PSummary,
    coords: &DMatrix<f64>,
    q: &AffinityMatrix,
    lowdim_bandwidths: &[f64],
    lambda: f64,
) -> DMatrix<f64> {
    let d = coords.nrows();
    let mut grad = DMatrix::zeros(d, 2);
    let mut w = vec![0.0; d];
    for i in 0..d {
        // w_ij = ∂C_i/∂q_ij
        let mut weighted = 0.0;
        for (j, wj) in w.iter_mut().enumerate() {
            if j == i {
                *wj = 0.0;
                continue;
            }
            let qij = q.probs[(i, j)];
            let forward = if qij >= AFFINITY_FLOOR {
                -lambda * summary.mean_p[(i, j)] / qij
            } else {
                0.0
            };
            let reverse = (1.0 - lambda) * (qij.max(f64::MIN_POSITIVE).ln() + 1.0 - summary.mean_log_p[(i, j)]);
            *wj = forward + reverse;
            weighted += *wj * qij;
        }
        let scale = 2.0 / lowdim_bandwidths[i];
        for k in 0..d {
            if k == i {
                continue;
            }
            // ∂C_i/∂e_ik through the softmax, e_ik = ‖g_i − g_k‖² / σ_i²
            let g_ik = -q.probs[(i, k)] * (w[k] - weighted);
            for c in 0..2 {
                let diff = coords[(i, c)] - coords[(k, c)];
                let contrib = g_ik * scale * diff;
                grad[(i, c)] += contrib;
                grad[(k, c)] -= contrib;
            }
        }
    }
    grad / d as f64
}

/// Exact gradient of [`cost`] with respect to the layout coordinates.
pub fn cost_gradient(
    p_samples: &[AffinityMatrix],
    layout: &Layout,
    lowdim_bandwidths: &[f64],
    lambda: f64,
) -> Result<DMatrix<f64>> {
    let q = low_dim_affinities(layout, lowdim_bandwidths)?;
    check_shapes(p_samples, &q)?;
    let summary = PSummary::new(p_samples);
    Ok(gradient_from_summary(
        &summary,
        &layout.coords,
        &q,
        lowdim_bandwidths,
        lambda,
    ))
}

/// Projection of the centered features onto their top two principal directions.
pub fn pca_layout(features: &[FeatureVector]) -> Result<Layout> {
    let rows = metric::stack_features(features)?;
    let (d, n) = rows.shape();
    let mean = rows.row_mean();
    let centered = DMatrix::from_fn(d, n, |r, c| rows[(r, c)] - mean[c]);
    let svd = centered.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut coords = DMatrix::zeros(d, 2);
    for (c, &idx) in order.iter().take(2).enumerate() {
        let s = svd.singular_values[idx];
        let mut col: DVector<f64> = u.column(idx) * s;
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            col = -col;
        }
        coords.set_column(c, &col);
    }
    Layout::new(coords, 0)
}

/// Result of one layout optimization.
#[derive(Debug, Clone)]
pub struct OptimizedLayout {
    pub layout: Layout,
    pub cost: f64,
    /// Cost at the start and after every accepted step.
    pub cost_trace: Vec<f64>,
    pub accepted_steps: usize,
}

/// High-dimensional affinities for the posterior: one per metric draw, or the
/// posterior mean when `mc_samples == 0`. Bandwidths come from the mean metric.
pub fn posterior_affinities(
    geometry: &FeatureGeometry,
    posterior: &MetricPosterior,
    config: &EmbeddingConfig,
) -> Result<(Vec<AffinityMatrix>, Vec<f64>)> {
    let mean_distances = geometry.distance_matrix(&posterior.mean_metric());
    let bandwidths = bandwidths_from_distances(&mean_distances, config.perplexity)?;
    let p_samples = if config.mc_samples == 0 {
        vec![affinities_from_distances(&mean_distances, &bandwidths)?]
    } else {
        metric::sample_metrics(posterior, config.mc_samples, config.seed)
            .iter()
            .map(|m| affinities_from_distances(&geometry.distance_matrix(m), &bandwidths))
            .collect::<Result<Vec<_>>>()?
    };
    Ok((p_samples, bandwidths))
}

/// Adaptive-step gradient descent: a rejected step halves the step size, an
/// accepted one grows it by 10%.
pub fn optimize_layout(
    features: &[FeatureVector],
    posterior: &MetricPosterior,
    config: &EmbeddingConfig,
    init: Option<&Layout>,
) -> Result<OptimizedLayout> {
    config.validate()?;
    let geometry = FeatureGeometry::new(features, posterior.basis())?;
    let (p_samples, bandwidths) = posterior_affinities(&geometry, posterior, config)?;
    let start = match init {
        Some(layout) => {
            if layout.len() != features.len() {
                return Err(Error::DimensionMismatch {
                    expected: features.len(),
                    got: layout.len(),
                });
            }
            layout.clone()
        }
        None => pca_layout(features)?,
    };
    descend(&p_samples, &bandwidths, start, config)
}

pub(crate) fn descend(
    p_samples: &[AffinityMatrix],
    bandwidths: &[f64],
    start: Layout,
    config: &EmbeddingConfig,
) -> Result<OptimizedLayout> {
    let lowdim: Vec<f64> = if config.unit_lowdim_bandwidth {
        vec![1.0; bandwidths.len()]
    } else {
        bandwidths.to_vec()
    };
    let summary = PSummary::new(p_samples);
    let evaluate = |coords: &DMatrix<f64>| -> Result<(AffinityMatrix, CostBreakdown)> {
        let q = affinities_from_distances(&layout_distances(coords), &lowdim)?;
        let c = cost_breakdown(p_samples, &q, config.lambda)?;
        Ok((q, c))
    };

    let iteration = start.iteration;
    let mut coords = start.coords;
    let (mut q, current) = evaluate(&coords)?;
    if !current.value.is_finite() {
        return Err(Error::NonFinite("layout cost at initialization".into()));
    }
    let mut current_cost = current.value;
    let mut clamped = current.clamped;
    let mut trace = vec![current_cost];
    let mut step = config.learning_rate;
    let mut accepted = 0;

    for _ in 0..config.max_iters {
        let grad = gradient_from_summary(&summary, &coords, &q, &lowdim, config.lambda);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("layout gradient".into()));
        }
        if grad.amax() == 0.0 {
            break;
        }
        let candidate = &coords - &grad * step;
        let (cq, cc) = evaluate(&candidate)?;
        if !cc.value.is_finite() {
            return Err(Error::NonFinite(format!("layout cost at step size {step:e}")));
        }
        if cc.value <= current_cost {
            let relative = (current_cost - cc.value) / current_cost.max(f64::MIN_POSITIVE);
            coords = candidate;
            q = cq;
            current_cost = cc.value;
            clamped = cc.clamped;
            trace.push(current_cost);
            accepted += 1;
            step *= 1.1;
            if relative < config.tol {
                break;
            }
        } else {
            step *= 0.5;
            if step < 1e-300 {
                break;
            }
        }
    }
    if clamped > 0 {
        warn!("{clamped} display affinities fell below the floor {AFFINITY_FLOOR:e}");
    }
    Ok(OptimizedLayout {
        layout: Layout::new(coords, iteration)?,
        cost: current_cost,
        cost_trace: trace,
        accepted_steps: accepted,
    })
}
