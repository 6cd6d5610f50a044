use nalgebra::{DMatrix, DVector};
use prior_loom::linreg::{fit_vb, mse, predict, FitOptions, HyperPriors, PriorCovariance, ELBO_SLACK};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn noise(n: usize, sd: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| sd * rng.sample::<f64, _>(StandardNormal))
}

fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = gaussian(d, d, rng);
    &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * 0.5
}

#[test]
fn duplicated_columns_share_their_coefficient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, d) = (15, 6);
    let mut x = gaussian(n, d, &mut rng);
    let copy = x.column(0).into_owned();
    x.set_column(1, &copy);
    let beta = DVector::from_vec(vec![1.0, 1.0, -0.5, 0.3, 0.0, 2.0]);
    let y = &x * &beta + noise(n, 0.3, &mut rng);
    let mut c = DMatrix::identity(d, d);
    c[(0, 1)] = 1.0 - 1e-6;
    c[(1, 0)] = 1.0 - 1e-6;
    let prior = PriorCovariance::new(c, 1.0).unwrap();
    let post = fit_vb(&x, &y, &prior, &HyperPriors::default(), &FitOptions::default()).unwrap();
    let gap = (post.beta_mean[0] - post.beta_mean[1]).abs();
    assert!(gap < 1e-4, "{gap}");
}

#[test]
fn more_data_does_not_raise_test_error() {
    let (d, n_test, seeds) = (10, 200, 20);
    let mut totals = [0.0; 2];
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beta = gaussian(d, 1, &mut rng).column(0).into_owned();
        let x_test = gaussian(n_test, d, &mut rng);
        let y_test = &x_test * &beta + noise(n_test, 1.0, &mut rng);
        let x_all = gaussian(40, d, &mut rng);
        let y_all = &x_all * &beta + noise(40, 1.0, &mut rng);
        for (slot, n) in [20, 40].into_iter().enumerate() {
            let x = x_all.rows(0, n).into_owned();
            let y = y_all.rows(0, n).into_owned();
            let post = fit_vb(
                &x,
                &y,
                &PriorCovariance::identity(d),
                &HyperPriors::default(),
                &FitOptions::default(),
            )
            .unwrap();
            totals[slot] += mse(&predict(&post, &x_test).unwrap(), &y_test).unwrap();
        }
    }
    assert!(
        totals[1] <= totals[0],
        "n=20: {} n=40: {}",
        totals[0] / 20.0,
        totals[1] / 20.0
    );
}

#[test]
fn well_posed_fit_reproduces_a_training_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, d, sd) = (400, 5, 0.1);
    let x = gaussian(n, d, &mut rng);
    let beta = DVector::from_vec(vec![3.0, -2.0, 1.5, 4.0, -1.0]);
    let y = &x * &beta + noise(n, sd, &mut rng);
    let post = fit_vb(
        &x,
        &y,
        &PriorCovariance::identity(d),
        &HyperPriors::default(),
        &FitOptions::default(),
    )
    .unwrap();
    let row = x.rows(0, 1).into_owned();
    let prediction = predict(&post, &row).unwrap()[0];
    assert!((prediction - y[0]).abs() < 3.0 * sd, "{prediction} vs {}", y[0]);
    assert!((1.0 / post.noise2_inv.mean() - sd * sd).abs() < 0.3 * sd * sd);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn elbo_never_decreases(
        seed in any::<u64>(),
        n in 2usize..30,
        d in 1usize..15,
        center in any::<bool>(),
        covariance in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian(n, d, &mut rng);
        let y = gaussian(n, 1, &mut rng).column(0) * rng.random_range(0.1..10.0);
        let prior = PriorCovariance::new(random_spd(d, &mut rng), 1.0).unwrap();
        let options = FitOptions { center, covariance, ..FitOptions::default() };
        let post = fit_vb(&x, &y, &prior, &HyperPriors::default(), &options).unwrap();
        prop_assert!(!post.elbo_trace.is_empty());
        for w in post.elbo_trace.windows(2) {
            prop_assert!(w[1] >= w[0] - ELBO_SLACK * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn shifting_targets_moves_only_the_intercept(seed in any::<u64>(), shift in -100.0f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d) = (12, 5);
        let x = gaussian(n, d, &mut rng);
        let y = gaussian(n, 1, &mut rng).column(0).into_owned();
        let prior = PriorCovariance::new(random_spd(d, &mut rng), 1.0).unwrap();
        let fit = |y: &DVector<f64>| fit_vb(&x, y, &prior, &HyperPriors::default(), &FitOptions::default()).unwrap();
        let base = fit(&y);
        let moved = fit(&y.add_scalar(shift));
        prop_assert!((&moved.beta_mean - &base.beta_mean).amax() < 1e-8 * base.beta_mean.amax().max(1.0));
        prop_assert!((moved.intercept - base.intercept - shift).abs() < 1e-8 * shift.abs().max(1.0));
    }

    #[test]
    fn permuting_features_permutes_coefficients(seed in any::<u64>(), d in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 10;
        let x = gaussian(n, d, &mut rng);
        let y = gaussian(n, 1, &mut rng).column(0).into_owned();
        let c = random_spd(d, &mut rng);
        let mut order: Vec<usize> = (0..d).collect();
        order.shuffle(&mut rng);
        let x_perm = DMatrix::from_fn(n, d, |r, k| x[(r, order[k])]);
        let c_perm = DMatrix::from_fn(d, d, |a, b| c[(order[a], order[b])]);
        let options = FitOptions::default();
        let base = fit_vb(&x, &y, &PriorCovariance::new(c, 1.0).unwrap(), &HyperPriors::default(), &options).unwrap();
        let perm = fit_vb(&x_perm, &y, &PriorCovariance::new(c_perm, 1.0).unwrap(), &HyperPriors::default(), &options)
            .unwrap();
        for (k, &source) in order.iter().enumerate() {
            prop_assert!((perm.beta_mean[k] - base.beta_mean[source]).abs() < 1e-7 * base.beta_mean.amax().max(1.0));
        }
    }
}
