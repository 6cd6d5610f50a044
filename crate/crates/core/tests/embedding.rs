use nalgebra::{DMatrix, DVector};
use prior_loom::corpus::FeatureVector;
use prior_loom::embedding::{
    affinities_from_distances, bandwidths_from_distances, compute_bandwidths, cost, cost_gradient, high_dim_affinities,
    low_dim_affinities, optimize_layout, AffinityMatrix, EmbeddingConfig, Layout,
};
use prior_loom::metric::{init_metric, update_metric, FeedbackLabel, FeedbackPair, LowRankMetric, MetricConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::sync::Arc;

fn features_from_rows(rows: &[Vec<f64>]) -> Vec<FeatureVector> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| FeatureVector {
            values: DVector::from_vec(r.clone()),
            name: format!("f{i}"),
            index: i,
        })
        .collect()
}

fn random_features(d: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<FeatureVector> {
    let rows: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    features_from_rows(&rows)
}

/// Two tight groups of features on opposite sides of the origin.
fn two_clusters(per_cluster: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<FeatureVector> {
    let center: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let rows: Vec<Vec<f64>> = (0..2 * per_cluster)
        .map(|i| {
            let side = if i < per_cluster { 5.0 } else { -5.0 };
            center
                .iter()
                .map(|c| side * c + 0.2 * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    features_from_rows(&rows)
}

fn random_layout(d: usize, rng: &mut ChaCha8Rng) -> Layout {
    Layout::new(DMatrix::from_fn(d, 2, |_, _| rng.random_range(-2.0..2.0)), 0).unwrap()
}

fn entropy_bits(row: impl Iterator<Item = f64>) -> f64 {
    -row.filter(|&p| p > 0.0).map(|p| p * p.log2()).sum::<f64>()
}

fn assert_row_stochastic(a: &AffinityMatrix) {
    for i in 0..a.len() {
        assert_eq!(a.probs[(i, i)], 0.0);
        assert!(a.probs.row(i).iter().all(|p| (0.0..=1.0).contains(p)));
        assert!((a.probs.row(i).sum() - 1.0).abs() < 1e-10);
    }
}

fn silhouette(layout: &Layout, labels: &[usize]) -> f64 {
    let d = layout.len();
    let mut total = 0.0;
    for i in 0..d {
        let mean_to = |cluster: usize| {
            let others: Vec<f64> = (0..d)
                .filter(|&j| j != i && labels[j] == cluster)
                .map(|j| layout.screen_distance(i, j))
                .collect();
            others.iter().sum::<f64>() / others.len() as f64
        };
        let a = mean_to(labels[i]);
        let b = mean_to(1 - labels[i]);
        total += (b - a) / a.max(b);
    }
    total / d as f64
}

fn quick_config() -> EmbeddingConfig {
    EmbeddingConfig {
        perplexity: 4.0,
        mc_samples: 0,
        max_iters: 300,
        ..EmbeddingConfig::default()
    }
}

#[test]
fn separated_clusters_land_apart() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let features = two_clusters(8, 6, &mut rng);
    let metric = init_metric(&features, 3, MetricConfig::default()).unwrap();
    let layout = optimize_layout(&features, &metric, &quick_config(), None)
        .unwrap()
        .layout;
    let labels: Vec<usize> = (0..16).map(|i| usize::from(i >= 8)).collect();
    let s = silhouette(&layout, &labels);
    assert!(s > 0.5, "silhouette {s}");
}

#[test]
fn warm_start_moves_less_than_a_fresh_start() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = random_features(12, 6, &mut rng);
        let prior = init_metric(&features, 3, MetricConfig::default()).unwrap();
        let config = quick_config();
        let previous = optimize_layout(&features, &prior, &config, None).unwrap().layout;
        let batch = [
            FeedbackPair::new(0, 1, FeedbackLabel::Similar, 0).unwrap(),
            FeedbackPair::new(2, 3, FeedbackLabel::Dissimilar, 0).unwrap(),
        ];
        let posterior = update_metric(&prior, &batch, &features).unwrap();
        let warm = optimize_layout(&features, &posterior, &config, Some(&previous))
            .unwrap()
            .layout;
        let fresh = random_layout(features.len(), &mut rng);
        let cold = optimize_layout(&features, &posterior, &config, Some(&fresh))
            .unwrap()
            .layout;
        let (w, c) = (warm.mean_displacement(&previous), cold.mean_displacement(&previous));
        assert!(w < c, "seed {seed}: warm {w} vs cold {c}");
    }
}

#[test]
fn converged_layout_is_a_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let features = random_features(7, 4, &mut rng);
    let metric = init_metric(&features, 2, MetricConfig::default()).unwrap();
    let config = EmbeddingConfig {
        perplexity: 3.0,
        mc_samples: 0,
        max_iters: 20_000,
        tol: 0.0,
        ..EmbeddingConfig::default()
    };
    let optimum = optimize_layout(&features, &metric, &config, None).unwrap();
    let bandwidths = compute_bandwidths(&features, &metric, config.perplexity).unwrap();
    let p = high_dim_affinities(&features, &metric.mean_metric(), &bandwidths).unwrap();
    let grad = cost_gradient(&[p], &optimum.layout, &bandwidths, config.lambda).unwrap();
    assert!(grad.amax() < 1e-5, "gradient {}", grad.amax());

    let again = optimize_layout(
        &features,
        &metric,
        &EmbeddingConfig { tol: 1e-6, ..config },
        Some(&optimum.layout),
    )
    .unwrap();
    assert!(again.accepted_steps <= 1);
    assert!((again.cost - optimum.cost).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rigid_motions_leave_cost_unchanged(
        seed in any::<u64>(),
        d in 4usize..12,
        angle in 0.0f64..std::f64::consts::TAU,
        shift in prop::array::uniform2(-50.0f64..50.0),
        lambda in 0.0f64..=1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = random_features(d, 5, &mut rng);
        let metric = init_metric(&features, 2, MetricConfig::default()).unwrap();
        let bandwidths = compute_bandwidths(&features, &metric, 2.5).unwrap();
        let p = high_dim_affinities(&features, &metric.mean_metric(), &bandwidths).unwrap();
        let layout = random_layout(d, &mut rng);
        let (s, c) = angle.sin_cos();
        let moved = DMatrix::from_fn(d, 2, |i, k| {
            let [x, y] = layout.point(i);
            if k == 0 { c * x - s * y + shift[0] } else { s * x + c * y + shift[1] }
        });
        let moved = Layout::new(moved, 0).unwrap();
        let before = cost(std::slice::from_ref(&p), &low_dim_affinities(&layout, &bandwidths).unwrap(), lambda).unwrap();
        let after = cost(&[p], &low_dim_affinities(&moved, &bandwidths).unwrap(), lambda).unwrap();
        prop_assert!((before - after).abs() < 1e-10 * before.max(1.0), "{} vs {}", before, after);
    }

    #[test]
    fn affinities_are_stochastic_and_cost_is_a_divergence(
        seed in any::<u64>(),
        d in 4usize..12,
        samples in 1usize..4,
        lambda in 0.0f64..=1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = random_features(d, 4, &mut rng);
        let metric = init_metric(&features, 2, MetricConfig::default()).unwrap();
        let bandwidths = compute_bandwidths(&features, &metric, 2.0).unwrap();
        let ps: Vec<AffinityMatrix> = (0..samples)
            .map(|_| {
                let weights = DVector::from_fn(metric.rank(), |_, _| rng.random_range(0.1..3.0));
                let m = LowRankMetric::new(metric.shared_basis(), weights).unwrap();
                high_dim_affinities(&features, &m, &bandwidths).unwrap()
            })
            .collect();
        let q = low_dim_affinities(&random_layout(d, &mut rng), &bandwidths).unwrap();
        for a in ps.iter().chain([&q]) {
            assert_row_stochastic(a);
        }
        prop_assert!(cost(&ps, &q, lambda).unwrap() >= 0.0);
        prop_assert!(cost(&ps[..1], &ps[0], lambda).unwrap().abs() < 1e-15);
    }

    #[test]
    fn bandwidths_reach_the_target_entropy(seed in any::<u64>(), d in 5usize..20, perplexity in 1.5f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = DMatrix::<f64>::from_fn(d, 3, |_, _| rng.sample(StandardNormal));
        let distances = DMatrix::from_fn(d, d, |i, j| (points.row(i) - points.row(j)).norm_squared());
        let bandwidths = bandwidths_from_distances(&distances, perplexity).unwrap();
        let p = affinities_from_distances(&distances, &bandwidths).unwrap();
        for i in 0..d {
            let h = entropy_bits(p.probs.row(i).iter().copied());
            prop_assert!((h - perplexity.log2()).abs() < 1e-5, "row {}: {} bits", i, h);
        }
    }

    #[test]
    fn joint_rescaling_of_metric_and_bandwidths_keeps_affinities(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = random_features(8, 4, &mut rng);
        let metric = init_metric(&features, 2, MetricConfig::default()).unwrap();
        let bandwidths = compute_bandwidths(&features, &metric, 3.0).unwrap();
        let base = metric.mean_metric();
        let scaled = LowRankMetric::new(metric.shared_basis(), base.weights() * scale)
            .unwrap()
            .with_residual(scale)
            .unwrap();
        let scaled_bandwidths: Vec<f64> = bandwidths.iter().map(|b| b * scale).collect();
        let p = high_dim_affinities(&features, &base, &bandwidths).unwrap();
        let p_scaled = high_dim_affinities(&features, &scaled, &scaled_bandwidths).unwrap();
        prop_assert!((&p.probs - &p_scaled.probs).amax() < 1e-12);
    }

    #[test]
    fn accepted_steps_never_raise_the_cost(seed in any::<u64>(), d in 5usize..12, mc in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = random_features(d, 5, &mut rng);
        let metric = init_metric(&features, 2, MetricConfig::default()).unwrap();
        let config = EmbeddingConfig { perplexity: 3.0, mc_samples: mc, max_iters: 80, seed, ..EmbeddingConfig::default() };
        let result = optimize_layout(&features, &metric, &config, Some(&random_layout(d, &mut rng))).unwrap();
        prop_assert_eq!(result.cost_trace.len(), result.accepted_steps + 1);
        prop_assert!(result.cost_trace.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(*result.cost_trace.last().unwrap(), result.cost);
    }
}

#[test]
fn identity_metric_on_planar_features_gives_matching_affinities() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let coords = DMatrix::<f64>::from_fn(9, 2, |_, _| rng.sample(StandardNormal));
    let rows: Vec<Vec<f64>> = (0..9).map(|i| vec![coords[(i, 0)], coords[(i, 1)]]).collect();
    let features = features_from_rows(&rows);
    let identity = LowRankMetric::new(Arc::new(DMatrix::zeros(0, 2)), DVector::zeros(0)).unwrap();
    let bandwidths: Vec<f64> = (0..9).map(|_| rng.random_range(0.5..2.0)).collect();
    let p = high_dim_affinities(&features, &identity, &bandwidths).unwrap();
    let q = low_dim_affinities(&Layout::new(coords, 0).unwrap(), &bandwidths).unwrap();
    assert!((&p.probs - &q.probs).amax() < 1e-12);
}
