use std::collections::{BTreeSet, HashSet};

use prior_loom::metric::FeedbackPair;
use prior_loom::simuser::{construct_simulated_user, generate_feedback, SimulatedUser};
use prior_loom::synthetic::{SyntheticConfig, SyntheticWorld};
use proptest::prelude::*;

fn beta_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::btree_set(-1000i32..1000, 4..30)
        .prop_map(|values| values.into_iter().map(|v| f64::from(v) / 10.0).collect::<Vec<_>>())
        .prop_shuffle()
}

#[test]
fn large_held_out_fit_recovers_the_planted_clusters() {
    let config = SyntheticConfig {
        n_features: 30,
        cluster_size: 5,
        n_nuisance_factors: 2,
        ..SyntheticConfig::default()
    };
    let world = SyntheticWorld::new(config, 11).unwrap();
    let held_out = world.sample(3000, 12).unwrap();
    let user = construct_simulated_user(&held_out, 5).unwrap();
    let as_set = |v: &[usize]| v.iter().copied().collect::<BTreeSet<_>>();
    assert_eq!(as_set(&user.high_cluster), as_set(world.positive_cluster()));
    assert_eq!(as_set(&user.low_cluster), as_set(world.negative_cluster()));
}

proptest! {
    #[test]
    fn pairs_never_repeat_and_follow_the_user(
        beta in beta_strategy(),
        k_frac in 0.0f64..1.0,
        n_similar in 0usize..6,
        n_dissimilar in 0usize..6,
        seed in any::<u64>(),
    ) {
        let k = 1 + (k_frac * (beta.len() / 2 - 1) as f64) as usize;
        let user = SimulatedUser::from_coefficients(beta, k).unwrap();
        let mut history: Vec<FeedbackPair> = Vec::new();
        let total = user.similar_pairs().len() + user.dissimilar_pairs().len();
        for round in 0..40u32 {
            let batch = generate_feedback(&user, n_similar, n_dissimilar, &history, seed ^ u64::from(round), round);
            prop_assert!(batch.pairs.len() <= n_similar + n_dissimilar);
            if !batch.exhausted {
                prop_assert_eq!(batch.pairs.len(), n_similar + n_dissimilar);
            }
            for pair in &batch.pairs {
                prop_assert!(pair.i < pair.j);
                prop_assert_eq!(pair.round, round);
                prop_assert_eq!(user.label(pair.i, pair.j), Some(pair.label));
            }
            history.extend(batch.pairs);
        }
        let keys: HashSet<_> = history.iter().map(FeedbackPair::key).collect();
        prop_assert_eq!(keys.len(), history.len());
        prop_assert!(history.len() <= total);
    }

    #[test]
    fn clusters_are_the_extremes(beta in beta_strategy(), k_frac in 0.0f64..1.0) {
        let k = 1 + (k_frac * (beta.len() / 2 - 1) as f64) as usize;
        let user = SimulatedUser::from_coefficients(beta.clone(), k).unwrap();
        let min_high = user.high_cluster.iter().map(|&i| beta[i]).fold(f64::INFINITY, f64::min);
        let max_low = user.low_cluster.iter().map(|&i| beta[i]).fold(f64::NEG_INFINITY, f64::max);
        for (f, &b) in beta.iter().enumerate() {
            if !user.high_cluster.contains(&f) {
                prop_assert!(b < min_high);
            }
            if !user.low_cluster.contains(&f) {
                prop_assert!(b > max_low);
            }
        }
        prop_assert_eq!(user.similar_pairs().len(), k * (k - 1));
        prop_assert_eq!(user.dissimilar_pairs().len(), k * k);
    }
}
