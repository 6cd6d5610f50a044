//! Command-line entry points.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use prior_loom::corpus::{build_vocabulary, load_corpus, split, vectorize, CorpusFormat, WeightScheme};
use prior_loom::experiments::{
    emit_results, permutation_test, read_result_csv, run_batch_experiment, run_sequential_experiment, ExperimentConfig,
    ResultCurve,
};
use serde::Serialize;

use crate::api::{router, AppState, ServiceConfig};

pub const DATA_DIR_ENV: &str = "PRIOR_LOOM_DATA_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "prior-loom",
    version,
    about = "Elicit feature-similarity priors for small-sample regression"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn a rated text corpus into a feature matrix file.
    Ingest(IngestArgs),
    /// Run a simulated-user experiment and write its result curves.
    Simulate(SimulateArgs),
    /// Permutation test between two emitted result curves.
    Stats(StatsArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Tsv,
    Jsonl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Counts,
    Tfidf,
}

#[derive(Debug, clap::Args)]
pub struct IngestArgs {
    /// Corpus file, one document and rating per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Defaults to the input file extension.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    /// Output matrix file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub ngram_max: usize,
    #[arg(long, default_value_t = 5)]
    pub min_doc_count: usize,
    #[arg(long, default_value_t = 300)]
    pub features: usize,
    #[arg(long, value_enum, default_value_t = SchemeArg::Counts)]
    pub scheme: SchemeArg,
    /// Also write `<stem>.train.plfm` and `<stem>.test.plfm` with this many
    /// training rows.
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Mean squared error over feedback rounds at one training size.
    Sequential,
    /// Mean squared error over training sizes with the full feedback budget.
    Batch,
}

#[derive(Debug, clap::Args)]
pub struct SimulateArgs {
    /// TOML experiment config; built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Mode,
    /// Directory for the curve csv files and manifest.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct StatsArgs {
    /// First curve csv.
    pub a: PathBuf,
    /// Second curve csv.
    pub b: PathBuf,
    /// Point of the curves to compare; defaults to the last one.
    #[arg(long)]
    pub at: Option<u64>,
    #[arg(long, default_value_t = 10_000)]
    pub permutations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, clap::Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    /// Overridden by the PRIOR_LOOM_DATA_DIR environment variable.
    #[arg(long, default_value = "data")]
    pub data_dir: PathBuf,
    #[arg(long, default_value_t = 120)]
    pub timeout_secs: u64,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Ingest(args) => {
            for path in ingest(&args)? {
                println!("{}", path.display());
            }
            Ok(())
        }
        Command::Simulate(args) => simulate(&args),
        Command::Stats(args) => {
            println!("{}", serde_json::to_string(&stats(&args)?)?);
            Ok(())
        }
        Command::Serve(args) => serve(&args),
    }
}

/// Returns the written matrix files.
pub fn ingest(args: &IngestArgs) -> anyhow::Result<Vec<PathBuf>> {
    let format = match args.format {
        Some(FormatArg::Tsv) => CorpusFormat::Tsv,
        Some(FormatArg::Jsonl) => CorpusFormat::Jsonl,
        None => match args.input.extension().and_then(|e| e.to_str()) {
            Some("tsv") => CorpusFormat::Tsv,
            Some("jsonl") => CorpusFormat::Jsonl,
            _ => bail!(
                "cannot infer the corpus format of {}; pass --format",
                args.input.display()
            ),
        },
    };
    let scheme = match args.scheme {
        SchemeArg::Counts => WeightScheme::Counts,
        SchemeArg::Tfidf => WeightScheme::TfIdf,
    };
    let corpus = load_corpus(&args.input, format)?;
    let vocab = build_vocabulary(&corpus, args.ngram_max, args.min_doc_count, args.features)?;
    let matrix = vectorize(&corpus, &vocab, scheme)?;
    info!("{} documents, {} features", matrix.n_samples(), matrix.n_features());
    matrix.save(&args.out)?;
    let mut written = vec![args.out.clone()];
    if let Some(n_train) = args.train_size {
        let (train, test) = split(&matrix, n_train, args.seed)?;
        for (part, m) in [("train", &train), ("test", &test)] {
            let path = sibling(&args.out, part);
            m.save(&path)?;
            written.push(path);
        }
    }
    Ok(written)
}

fn sibling(path: &Path, part: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("matrix");
    path.with_file_name(format!("{stem}.{part}.{}", crate::registry::MATRIX_EXTENSION))
}

pub fn simulate(args: &SimulateArgs) -> anyhow::Result<()> {
    let config = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let curves = match args.mode {
        Mode::Sequential => run_sequential_experiment(&config)?,
        Mode::Batch => run_batch_experiment(&config)?,
    };
    for curve in &curves {
        let points: Vec<String> = curve
            .x
            .iter()
            .zip(&curve.mean_mse)
            .map(|(x, m)| format!("{x}:{m:.4}"))
            .collect();
        println!("{} {}", curve.label, points.join(" "));
    }
    for path in emit_results(&curves, &config, &args.out)? {
        info!("wrote {}", path.display());
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsReport {
    pub a: String,
    pub b: String,
    pub x: u64,
    pub mean_a: f64,
    pub mean_b: f64,
    pub p_value: f64,
    pub permutations: usize,
}

pub fn stats(args: &StatsArgs) -> anyhow::Result<StatsReport> {
    let load = |path: &Path| -> anyhow::Result<ResultCurve> {
        let label = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_owned();
        Ok(read_result_csv(path, label)?)
    };
    let (a, b) = (load(&args.a)?, load(&args.b)?);
    let x = match args.at {
        Some(x) => x,
        None => *a.x.last().context("curve has no points")?,
    };
    let values = |curve: &ResultCurve| -> anyhow::Result<Vec<f64>> {
        let k = curve
            .x
            .iter()
            .position(|&v| v == x)
            .with_context(|| format!("{} has no point at {x}", curve.label))?;
        Ok(curve.per_repeat_mse[k].clone())
    };
    let (va, vb) = (values(&a)?, values(&b)?);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(StatsReport {
        p_value: permutation_test(&va, &vb, args.permutations, args.seed)?,
        mean_a: mean(&va),
        mean_b: mean(&vb),
        a: a.label,
        b: b.label,
        x,
        permutations: args.permutations,
    })
}

/// The environment variable wins over the flag.
pub fn resolve_data_dir(flag: &Path, env: Option<std::ffi::OsString>) -> PathBuf {
    env.filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| flag.to_owned())
}

pub fn serve(args: &ServeArgs) -> anyhow::Result<()> {
    let data_dir = resolve_data_dir(&args.data_dir, std::env::var_os(DATA_DIR_ENV));
    std::fs::create_dir_all(&data_dir).with_context(|| format!("creating {}", data_dir.display()))?;
    let config = ServiceConfig {
        data_dir,
        request_timeout: std::time::Duration::from_secs(args.timeout_secs),
    };
    let state = Arc::new(AppState::open(config)?);
    let addr = SocketAddr::new(args.host, args.port);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        info!(
            "serving {} datasets from {} on http://{}",
            state.datasets_len(),
            state.config.data_dir.display(),
            listener.local_addr()?
        );
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
