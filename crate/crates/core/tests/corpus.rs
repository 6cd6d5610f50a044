use nalgebra::{DMatrix, DVector};
use prior_loom::corpus::{build_vocabulary, feature_columns, split, vectorize, Corpus, FeatureMatrix, WeightScheme};
use prior_loom::error::Error;
use proptest::prelude::*;

const WORDS: [&str; 8] = ["good", "bad", "plot", "acting", "slow", "great", "music", "dull"];

fn corpus_strategy() -> impl Strategy<Value = Corpus> {
    prop::collection::vec(prop::collection::vec(0..WORDS.len(), 1..12), 3..15).prop_map(|docs| {
        let n = docs.len();
        let texts = docs
            .into_iter()
            .map(|words| words.into_iter().map(|w| WORDS[w]).collect::<Vec<_>>().join(" "))
            .collect();
        Corpus::new(texts, (0..n).map(|i| i as f64).collect()).unwrap()
    })
}

#[test]
fn split_includes_each_row_at_the_expected_rate() {
    let (n, n_train, trials) = (10, 3, 1000);
    let x = DMatrix::from_fn(n, 2, |r, c| (r * 2 + c) as f64);
    let y = DVector::from_fn(n, |r, _| r as f64);
    let matrix = FeatureMatrix::new(x, y, vec!["a".into(), "b".into()]).unwrap();
    let mut counts = vec![0usize; n];
    for seed in 0..trials {
        let (train, test) = split(&matrix, n_train, seed).unwrap();
        assert_eq!(train.n_samples(), n_train);
        assert_eq!(test.n_samples(), n - n_train);
        for &row in train.y().iter() {
            counts[row as usize] += 1;
        }
    }
    let expected = n_train as f64 / n as f64;
    for (row, &c) in counts.iter().enumerate() {
        let rate = c as f64 / trials as f64;
        assert!((rate - expected).abs() <= 0.05, "row {row}: {rate}");
    }
}

proptest! {
    #[test]
    fn feature_columns_stack_back_into_the_design(corpus in corpus_strategy(), tfidf in any::<bool>()) {
        let vocab = match build_vocabulary(&corpus, 2, 1, 1000) {
            Err(Error::VocabularyTooSmall { achievable, .. }) => build_vocabulary(&corpus, 2, 1, achievable).unwrap(),
            other => other.unwrap(),
        };
        let scheme = if tfidf { WeightScheme::TfIdf } else { WeightScheme::Counts };
        let matrix = vectorize(&corpus, &vocab, scheme).unwrap();
        let columns = feature_columns(&matrix);
        let stacked = DMatrix::from_columns(&columns.iter().map(|c| c.values.clone()).collect::<Vec<_>>());
        prop_assert_eq!(stacked.shape(), matrix.x().shape());
        for (a, b) in stacked.iter().zip(matrix.x().iter()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        for (k, c) in columns.iter().enumerate() {
            prop_assert_eq!(c.index, k);
            prop_assert_eq!(&c.name, &matrix.feature_names()[k]);
        }
    }

    #[test]
    fn vocabulary_is_a_pure_function_of_the_corpus(corpus in corpus_strategy(), budget in 1usize..20) {
        let before = corpus.clone();
        let first = build_vocabulary(&corpus, 2, 1, budget);
        let second = build_vocabulary(&corpus, 2, 1, budget);
        prop_assert_eq!(&corpus, &before);
        match (first, second) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (Err(a), Err(b)) => prop_assert_eq!(a.to_string(), b.to_string()),
            _ => prop_assert!(false, "build_vocabulary disagreed with itself"),
        }
    }

    #[test]
    fn split_is_a_disjoint_cover(n in 2usize..40, frac in 0.01f64..0.99, seed in any::<u64>()) {
        let n_train = ((n as f64 * frac) as usize).clamp(1, n - 1);
        let x = DMatrix::from_fn(n, 1, |r, _| r as f64);
        let y = DVector::from_fn(n, |r, _| r as f64);
        let matrix = FeatureMatrix::new(x, y, vec!["f".into()]).unwrap();
        let (train, test) = split(&matrix, n_train, seed).unwrap();
        let mut rows: Vec<f64> = train.y().iter().chain(test.y().iter()).copied().collect();
        prop_assert!(train.y().as_slice().windows(2).all(|w| w[0] < w[1]));
        rows.sort_by(f64::total_cmp);
        prop_assert_eq!(rows, (0..n).map(|r| r as f64).collect::<Vec<_>>());
    }
}
