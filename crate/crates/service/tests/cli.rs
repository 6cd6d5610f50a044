use std::fs;
use std::path::Path;
use std::process::Command;

use prior_loom::corpus::FeatureMatrix;
use prior_loom::experiments::read_results;

fn prior_loom(args: &[&str]) -> (bool, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_prior-loom"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    (
        out.status.success(),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn ingest_writes_matrix_and_split() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("reviews.tsv");
    let lines: String = (0..12)
        .map(|k| {
            let mood = if k % 3 == 0 {
                "love it great"
            } else {
                "bad service slow"
            };
            format!("the food was {mood} really\t{}\n", k % 5 + 1)
        })
        .collect();
    fs::write(&corpus, lines).unwrap();
    let out = dir.path().join("reviews.plfm");
    let (ok, stdout, stderr) = prior_loom(&[
        "ingest",
        "--input",
        path(&corpus),
        "--out",
        path(&out),
        "--min-doc-count",
        "2",
        "--features",
        "6",
        "--train-size",
        "8",
        "--seed",
        "3",
    ]);
    assert!(ok, "{stderr}");
    assert_eq!(stdout.lines().count(), 3);
    let all = FeatureMatrix::load(&out).unwrap();
    assert_eq!((all.n_samples(), all.n_features()), (12, 6));
    let train = FeatureMatrix::load(dir.path().join("reviews.train.plfm")).unwrap();
    let test = FeatureMatrix::load(dir.path().join("reviews.test.plfm")).unwrap();
    assert_eq!((train.n_samples(), test.n_samples()), (8, 4));

    let (ok, _, stderr) = prior_loom(&[
        "ingest",
        "--input",
        path(&corpus),
        "--out",
        path(&out),
        "--features",
        "500",
    ]);
    assert!(!ok);
    assert!(stderr.contains("terms survive"), "{stderr}");
}

#[test]
fn simulate_then_stats() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(
        &config,
        r#"
training_sizes = [15]
test_size = 60
held_out_size = 300
cluster_size = 3
rounds = 2
feedback_per_round = [3, 3]
user_constructions = 1
data_selections = 3
seed = 5

[dataset]
kind = "synthetic"
n_features = 16
cluster_size = 3
n_nuisance_factors = 2

[session]
rank = 4

[session.embedding]
perplexity = 4.0
"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    let (ok, stdout, stderr) = prior_loom(&[
        "simulate",
        "--config",
        path(&config),
        "--mode",
        "sequential",
        "--out",
        path(&out),
    ]);
    assert!(ok, "{stderr}");
    assert!(stdout.contains("with_feedback 0:"), "{stdout}");
    let (_, curves) = read_results(&out).unwrap();
    assert_eq!(curves.len(), 3);
    assert!(curves.iter().all(|c| c.x == [0, 1, 2] && c.repeats() == 3));

    let (ok, stdout, stderr) = prior_loom(&[
        "stats",
        path(&out.join("with_feedback.csv")),
        path(&out.join("unit_prior.csv")),
        "--permutations",
        "500",
    ]);
    assert!(ok, "{stderr}");
    let report: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(report["x"], 2);
    let p = report["p_value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));

    let (ok, _, stderr) = prior_loom(&[
        "stats",
        path(&out.join("with_feedback.csv")),
        path(&out.join("unit_prior.csv")),
        "--at",
        "9",
    ]);
    assert!(!ok);
    assert!(stderr.contains("no point at 9"), "{stderr}");
}
