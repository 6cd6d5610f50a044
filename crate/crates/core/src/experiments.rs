//! Simulated-user experiments: batch and sequential feedback curves against
//! baselines, and a permutation test for comparing final errors.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::FeatureMatrix;
use crate::elicitation::{unit_prior_baseline, without_feedback_baseline, SessionConfig, SessionState};
use crate::error::{Error, Result};
use crate::simuser::{construct_simulated_user, generate_feedback, SimulatedUser};
use crate::synthetic::{SyntheticConfig, SyntheticWorld};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Each user construction draws a fresh synthetic world.
    Synthetic(SyntheticConfig),
    /// A stored feature matrix, resplit per repeat.
    File { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    UnitPrior,
    WithoutFeedback,
    WithFeedback,
}

impl Baseline {
    pub fn label(self) -> &'static str {
        match self {
            Baseline::UnitPrior => "unit_prior",
            Baseline::WithoutFeedback => "without_feedback",
            Baseline::WithFeedback => "with_feedback",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// Training sizes of the batch experiment. The sequential experiment uses
    /// the first entry.
    pub training_sizes: Vec<usize>,
    pub test_size: usize,
    /// Samples used to fit the simulated user's reference model.
    pub held_out_size: usize,
    pub cluster_size: usize,
    pub rounds: u32,
    /// Similar and dissimilar pairs per round.
    pub feedback_per_round: (usize, usize),
    pub user_constructions: usize,
    pub data_selections: usize,
    pub seed: u64,
    pub baselines: Vec<Baseline>,
    pub session: SessionConfig,
    /// Re-optimize the layout after every round, as an interactive user would see it.
    pub optimize_layouts: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::Synthetic(SyntheticConfig::default()),
            training_sizes: vec![50, 100, 200],
            test_size: 1000,
            held_out_size: 2000,
            cluster_size: 30,
            rounds: 20,
            feedback_per_round: (10, 10),
            user_constructions: 3,
            data_selections: 10,
            seed: 0,
            baselines: vec![Baseline::UnitPrior, Baseline::WithoutFeedback, Baseline::WithFeedback],
            session: SessionConfig::default(),
            optimize_layouts: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("test_size", self.test_size),
            ("held_out_size", self.held_out_size),
            ("cluster_size", self.cluster_size),
            ("rounds", self.rounds as usize),
            ("user_constructions", self.user_constructions),
            ("data_selections", self.data_selections),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.training_sizes.is_empty() || self.training_sizes.contains(&0) {
            return Err(Error::Config("training_sizes must be nonempty and positive".into()));
        }
        if self.feedback_per_round.0 + self.feedback_per_round.1 == 0 {
            return Err(Error::Config(
                "feedback_per_round must request at least one pair".into(),
            ));
        }
        if self.baselines.is_empty() {
            return Err(Error::Config("no baselines selected".into()));
        }
        if let DatasetSpec::Synthetic(s) = &self.dataset {
            s.validate()?;
        }
        self.session.validate()
    }

    pub fn repeats(&self) -> usize {
        self.user_constructions * self.data_selections
    }

    fn baseline_set(&self) -> BTreeSet<Baseline> {
        self.baselines.iter().copied().collect()
    }
}

/// Seeds of one repeat, fixed before any work is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepeatSeeds {
    pub user: usize,
    pub selection: usize,
    pub world: u64,
    pub held_out: u64,
    pub split: u64,
    pub test: u64,
    pub feedback: u64,
}

/// All repeat seeds, ordered by user construction then data selection.
pub fn repeat_seeds(config: &ExperimentConfig) -> Vec<RepeatSeeds> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(config.repeats());
    for user in 0..config.user_constructions {
        let world: u64 = rng.random();
        let held_out: u64 = rng.random();
        for selection in 0..config.data_selections {
            out.push(RepeatSeeds {
                user,
                selection,
                world,
                held_out,
                split: rng.random(),
                test: rng.random(),
                feedback: rng.random(),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultCurve {
    pub label: String,
    /// Training sizes or round indices.
    pub x: Vec<u64>,
    pub mean_mse: Vec<f64>,
    /// `per_repeat_mse[point][repeat]`.
    pub per_repeat_mse: Vec<Vec<f64>>,
}

impl ResultCurve {
    pub fn new(label: impl Into<String>, x: Vec<u64>, per_repeat_mse: Vec<Vec<f64>>) -> Result<Self> {
        if x.len() != per_repeat_mse.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: per_repeat_mse.len(),
            });
        }
        let repeats = per_repeat_mse.first().map_or(0, Vec::len);
        if repeats == 0 || per_repeat_mse.iter().any(|r| r.len() != repeats) {
            return Err(Error::InvalidArgument(
                "every point needs the same nonzero number of repeats".into(),
            ));
        }
        let mean_mse = per_repeat_mse
            .iter()
            .map(|r| r.iter().sum::<f64>() / r.len() as f64)
            .collect();
        Ok(Self {
            label: label.into(),
            x,
            mean_mse,
            per_repeat_mse,
        })
    }

    pub fn repeats(&self) -> usize {
        self.per_repeat_mse.first().map_or(0, Vec::len)
    }

    /// Per-repeat values at the last point.
    pub fn final_values(&self) -> &[f64] {
        self.per_repeat_mse.last().map_or(&[], Vec::as_slice)
    }
}

enum Source {
    Synthetic(SyntheticConfig),
    File(FeatureMatrix),
}

impl Source {
    fn open(spec: &DatasetSpec) -> Result<Self> {
        Ok(match spec {
            DatasetSpec::Synthetic(c) => Source::Synthetic(*c),
            DatasetSpec::File { path } => Source::File(FeatureMatrix::load(path)?),
        })
    }

    fn simulated_user(&self, config: &ExperimentConfig, seeds: &RepeatSeeds) -> Result<SimulatedUser> {
        let held_out = match self {
            Source::Synthetic(c) => {
                SyntheticWorld::new(*c, seeds.world)?.sample(config.held_out_size, seeds.held_out)?
            }
            Source::File(m) => {
                let (held, _) = self.file_partition(m, config, seeds)?;
                m.select_rows(&held)
            }
        };
        construct_simulated_user(&held_out, config.cluster_size)
    }

    /// Held-out rows and the remaining pool, shuffled by the user seed.
    fn file_partition(
        &self,
        m: &FeatureMatrix,
        config: &ExperimentConfig,
        seeds: &RepeatSeeds,
    ) -> Result<(Vec<usize>, Vec<usize>)> {
        let n = m.n_samples();
        if config.held_out_size >= n {
            return Err(Error::Config(format!(
                "held_out_size {} leaves no samples out of {n}",
                config.held_out_size
            )));
        }
        let mut rows: Vec<usize> = (0..n).collect();
        rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seeds.held_out));
        let pool = rows.split_off(config.held_out_size);
        Ok((rows, pool))
    }

    fn train_test(
        &self,
        config: &ExperimentConfig,
        seeds: &RepeatSeeds,
        n_train: usize,
    ) -> Result<(FeatureMatrix, FeatureMatrix)> {
        match self {
            Source::Synthetic(c) => {
                let world = SyntheticWorld::new(*c, seeds.world)?;
                Ok((
                    world.sample(n_train, seeds.split)?,
                    world.sample(config.test_size, seeds.test)?,
                ))
            }
            Source::File(m) => {
                let (_, mut pool) = self.file_partition(m, config, seeds)?;
                if pool.len() <= n_train {
                    return Err(Error::Config(format!(
                        "training size {n_train} leaves no test samples out of {}",
                        pool.len()
                    )));
                }
                pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seeds.split));
                let test_end = (n_train + config.test_size).min(pool.len());
                let mut train_rows = pool[..n_train].to_vec();
                let mut test_rows = pool[n_train..test_end].to_vec();
                train_rows.sort_unstable();
                test_rows.sort_unstable();
                Ok((m.select_rows(&train_rows), m.select_rows(&test_rows)))
            }
        }
    }
}

fn start(config: &ExperimentConfig, train: FeatureMatrix) -> Result<SessionState> {
    if config.optimize_layouts {
        SessionState::start(train, config.session.clone())
    } else {
        SessionState::start_headless(train, config.session.clone())
    }
}

fn with_context<T>(result: Result<T>, seeds: &RepeatSeeds, what: &str) -> Result<T> {
    result.map_err(|e| Error::Repeat {
        context: format!(
            "{what}, user construction {}, data selection {}",
            seeds.user, seeds.selection
        ),
        source: Box::new(e),
    })
}

/// Builds the users once per construction index.
fn build_users(config: &ExperimentConfig, source: &Source, seeds: &[RepeatSeeds]) -> Result<Vec<SimulatedUser>> {
    (0..config.user_constructions)
        .into_par_iter()
        .map(|u| {
            let s = seeds
                .iter()
                .find(|s| s.user == u)
                .expect("every construction has a repeat");
            with_context(source.simulated_user(config, s), s, "simulated user")
        })
        .collect()
}

/// Test MSE per baseline at each round `0..=rounds`, for one repeat.
fn sequential_repeat(
    config: &ExperimentConfig,
    source: &Source,
    user: &SimulatedUser,
    seeds: &RepeatSeeds,
) -> Result<Vec<(Baseline, Vec<f64>)>> {
    let (train, test) = source.train_test(config, seeds, config.training_sizes[0])?;
    let points = config.rounds as usize + 1;
    let mut out = Vec::new();
    for baseline in config.baseline_set() {
        let curve = match baseline {
            Baseline::UnitPrior => vec![unit_prior_baseline(&train, &test, &config.session)?.test_mse; points],
            Baseline::WithoutFeedback => {
                vec![without_feedback_baseline(&train, &test, &config.session)?.test_mse; points]
            }
            Baseline::WithFeedback => {
                let mut session = start(config, train.clone())?;
                let mut curve = Vec::with_capacity(points);
                curve.push(session.finalize_and_fit(&test)?.test_mse);
                let (n_sim, n_dis) = config.feedback_per_round;
                for r in 0..config.rounds {
                    let batch = generate_feedback(
                        user,
                        n_sim,
                        n_dis,
                        session.metric().feedback_log(),
                        seeds.feedback.wrapping_add(u64::from(r)),
                        r,
                    );
                    if batch.exhausted {
                        warn!("simulated user ran out of fresh pairs in round {r}");
                    }
                    if !batch.pairs.is_empty() {
                        session.submit_feedback(&batch.pairs)?;
                        if config.optimize_layouts {
                            session.refresh_visualization()?;
                        }
                    }
                    curve.push(session.finalize_and_fit(&test)?.test_mse);
                }
                curve
            }
        };
        out.push((baseline, curve));
    }
    Ok(out)
}

/// Test MSE per baseline for one repeat and training size, with the whole
/// feedback budget given in a single batch.
fn batch_repeat(
    config: &ExperimentConfig,
    source: &Source,
    user: &SimulatedUser,
    seeds: &RepeatSeeds,
    n_train: usize,
) -> Result<Vec<(Baseline, f64)>> {
    let (train, test) = source.train_test(config, seeds, n_train)?;
    let mut out = Vec::new();
    for baseline in config.baseline_set() {
        let value = match baseline {
            Baseline::UnitPrior => unit_prior_baseline(&train, &test, &config.session)?.test_mse,
            Baseline::WithoutFeedback => without_feedback_baseline(&train, &test, &config.session)?.test_mse,
            Baseline::WithFeedback => {
                let mut session = start(config, train.clone())?;
                let rounds = config.rounds as usize;
                let (n_sim, n_dis) = config.feedback_per_round;
                let batch = generate_feedback(user, rounds * n_sim, rounds * n_dis, &[], seeds.feedback, 0);
                if batch.exhausted {
                    warn!("simulated user cannot supply the full feedback budget");
                }
                if !batch.pairs.is_empty() {
                    session.submit_feedback(&batch.pairs)?;
                }
                session.finalize_and_fit(&test)?.test_mse
            }
        };
        out.push((baseline, value));
    }
    Ok(out)
}

fn assemble(
    config: &ExperimentConfig,
    x: Vec<u64>,
    by_repeat: Vec<Vec<(Baseline, Vec<f64>)>>,
) -> Result<Vec<ResultCurve>> {
    config
        .baseline_set()
        .into_iter()
        .map(|baseline| {
            let per_point = (0..x.len())
                .map(|p| {
                    by_repeat
                        .iter()
                        .map(|rep| {
                            rep.iter()
                                .find(|(b, _)| *b == baseline)
                                .map(|(_, v)| v[p])
                                .expect("every repeat reports every baseline")
                        })
                        .collect()
                })
                .collect();
            ResultCurve::new(baseline.label(), x.clone(), per_point)
        })
        .collect()
}

/// One curve per baseline over rounds `0..=rounds`; round 0 has no feedback.
pub fn run_sequential_experiment(config: &ExperimentConfig) -> Result<Vec<ResultCurve>> {
    config.validate()?;
    let source = Source::open(&config.dataset)?;
    let seeds = repeat_seeds(config);
    let users = build_users(config, &source, &seeds)?;
    let by_repeat: Vec<Vec<(Baseline, Vec<f64>)>> = seeds
        .par_iter()
        .map(|s| {
            with_context(
                sequential_repeat(config, &source, &users[s.user], s),
                s,
                "sequential run",
            )
        })
        .collect::<Result<_>>()?;
    let x = (0..=u64::from(config.rounds)).collect();
    assemble(config, x, by_repeat)
}

/// One curve per baseline over the configured training sizes.
pub fn run_batch_experiment(config: &ExperimentConfig) -> Result<Vec<ResultCurve>> {
    config.validate()?;
    let source = Source::open(&config.dataset)?;
    let seeds = repeat_seeds(config);
    let users = build_users(config, &source, &seeds)?;
    let by_repeat: Vec<Vec<(Baseline, Vec<f64>)>> = seeds
        .par_iter()
        .map(|s| {
            let per_size: Vec<Vec<(Baseline, f64)>> = config
                .training_sizes
                .iter()
                .map(|&n| {
                    with_context(
                        batch_repeat(config, &source, &users[s.user], s, n),
                        s,
                        &format!("batch run with {n} training samples"),
                    )
                })
                .collect::<Result<_>>()?;
            Ok(config
                .baseline_set()
                .into_iter()
                .map(|b| {
                    let values = per_size
                        .iter()
                        .map(|size| {
                            size.iter()
                                .find(|(x, _)| *x == b)
                                .map(|(_, v)| *v)
                                .expect("baseline present")
                        })
                        .collect();
                    (b, values)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let x = config.training_sizes.iter().map(|&n| n as u64).collect();
    assemble(config, x, by_repeat)
}

/// Two-sided permutation test on `|mean(a) − mean(b)|`. Returns the fraction
/// of label permutations whose statistic reaches the observed one.
pub fn permutation_test(group_a: &[f64], group_b: &[f64], n_permutations: usize, seed: u64) -> Result<f64> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(Error::InvalidArgument("both groups must be nonempty".into()));
    }
    if n_permutations == 0 {
        return Err(Error::InvalidArgument("need at least one permutation".into()));
    }
    if n_permutations < 100 {
        warn!("{n_permutations} permutations give an unstable p-value");
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let observed = (mean(group_a) - mean(group_b)).abs();
    // Ties are judged with a little slack for summation-order round-off.
    let threshold = observed - 1e-12 * observed.abs().max(1.0);
    let mut pooled: Vec<f64> = group_a.iter().chain(group_b).copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_a = group_a.len();
    let mut hits = 0usize;
    for _ in 0..n_permutations {
        pooled.shuffle(&mut rng);
        let (a, b) = pooled.split_at(n_a);
        if (mean(a) - mean(b)).abs() >= threshold {
            hits += 1;
        }
    }
    Ok(hits as f64 / n_permutations as f64)
}

/// Spearman rank correlation, with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("need at least two points".into()));
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        let rank = (start + end - 1) as f64 / 2.0 + 1.0;
        for &i in &order[start..end] {
            out[i] = rank;
        }
        start = end;
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ManifestRecord {
    Experiment {
        config: Box<ExperimentConfig>,
        seeds: Vec<RepeatSeeds>,
    },
    Curve {
        label: String,
        file: String,
        points: usize,
        repeats: usize,
    },
}

fn curve_csv(curve: &ResultCurve) -> String {
    let mut out = String::from("x,mean");
    for r in 0..curve.repeats() {
        out.push_str(&format!(",r{r}"));
    }
    out.push('\n');
    for (p, x) in curve.x.iter().enumerate() {
        out.push_str(&format!("{x},{}", curve.mean_mse[p]));
        for v in &curve.per_repeat_mse[p] {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Writes `<label>.csv` per curve and a `manifest.jsonl` holding the config
/// and every repeat seed. Returns the written paths.
pub fn emit_results(curves: &[ResultCurve], config: &ExperimentConfig, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut manifest = serde_json::to_string(&ManifestRecord::Experiment {
        config: Box::new(config.clone()),
        seeds: repeat_seeds(config),
    })?;
    manifest.push('\n');
    for curve in curves {
        if curve.label.is_empty() || curve.label.contains(['/', '\\']) {
            return Err(Error::InvalidArgument(format!(
                "unusable curve label {:?}",
                curve.label
            )));
        }
        let file = format!("{}.csv", curve.label);
        let path = dir.join(&file);
        fs::write(&path, curve_csv(curve)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        manifest.push_str(&serde_json::to_string(&ManifestRecord::Curve {
            label: curve.label.clone(),
            file,
            points: curve.x.len(),
            repeats: curve.repeats(),
        })?);
        manifest.push('\n');
    }
    let path = dir.join("manifest.jsonl");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

/// Parses a curve csv written by [`emit_results`].
pub fn read_result_csv(path: impl AsRef<Path>, label: impl Into<String>) -> Result<ResultCurve> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::MalformedRecord {
        line: 1,
        reason: "missing header".into(),
    })?;
    let columns = header.split(',').count();
    if columns < 3 || !header.starts_with("x,mean") {
        return Err(Error::MalformedRecord {
            line: 1,
            reason: "expected header x,mean,r0,...".into(),
        });
    }
    let mut x = Vec::new();
    let mut per_repeat = Vec::new();
    for (idx, line) in lines {
        let bad = |reason: String| Error::MalformedRecord { line: idx + 1, reason };
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != columns {
            return Err(bad(format!("expected {columns} columns, found {}", cells.len())));
        }
        x.push(cells[0].trim().parse::<u64>().map_err(|e| bad(e.to_string()))?);
        per_repeat.push(
            cells[2..]
                .iter()
                .map(|c| c.trim().parse::<f64>().map_err(|e| bad(e.to_string())))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    ResultCurve::new(label, x, per_repeat)
}

/// Reads every curve listed in `dir/manifest.jsonl`.
pub fn read_results(dir: impl AsRef<Path>) -> Result<(ExperimentConfig, Vec<ResultCurve>)> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut config = None;
    let mut curves = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match serde_json::from_str::<ManifestRecord>(line)? {
            ManifestRecord::Experiment { config: c, .. } => config = Some(*c),
            ManifestRecord::Curve { label, file, .. } => curves.push(read_result_csv(dir.join(file), label)?),
        }
    }
    let config = config.ok_or_else(|| Error::Config("manifest has no experiment record".into()))?;
    Ok((config, curves))
}
