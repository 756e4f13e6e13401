//! `kmq`: cluster a corpus, diagnose `k`, select subsets and run iterative
//! selection from the command line.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kmq_core::{DistanceMetric, ErrorKind};
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "kmq", version, about = "Diverse, high-quality subset selection from embeddings")]
pub struct Cli {
    /// Seed for every random decision.
    #[arg(long, global = true, default_value_t = kmq_core::rng::DEFAULT_SEED)]
    pub seed: u64,
    /// euclidean | euclidean_on_normalized (alias: normalized, cosine).
    #[arg(long, global = true, default_value = "euclidean_on_normalized")]
    pub metric: DistanceMetric,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output style on stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Clone, Args)]
pub struct CorpusArgs {
    /// Corpus file (JSONL, or binary for .bin/.kmq). Repeat to concatenate.
    #[arg(long = "corpus", required = true)]
    pub corpus: Vec<PathBuf>,
    /// JSONL file of {"id", "quality"} records to attach.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Overrides format detection from the extension: jsonl | binary.
    #[arg(long)]
    pub corpus_format: Option<kmq_core::corpus::CorpusFormat>,
}

#[derive(Debug, Clone, Args)]
pub struct BudgetArgs {
    /// Number of instances to select.
    #[arg(long, conflicts_with = "budget_ratio")]
    pub budget: Option<usize>,
    /// Budget as a fraction of the corpus, used when --budget is absent.
    #[arg(long, default_value_t = 0.05)]
    pub budget_ratio: f64,
}

#[derive(Debug, Clone, Args)]
pub struct ClusterSource {
    /// Number of k-means clusters, when no clustering file is given.
    #[arg(long)]
    pub k: Option<usize>,
    /// Clustering written by `kmq cluster`.
    #[arg(long, conflicts_with = "k")]
    pub clustering: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub restarts: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ScorerArgs {
    /// Pre-computed responses: JSONL of {"id", "gen_score", "gold_score"}.
    #[arg(long, group = "scorer")]
    pub scorer_file: Option<PathBuf>,
    /// Program run as `<program> <args..> <requests.jsonl> <responses.jsonl>`.
    #[arg(long, group = "scorer")]
    pub scorer_command: Option<PathBuf>,
    /// Extra argument for --scorer-command (repeatable).
    #[arg(long = "scorer-arg", allow_hyphen_values = true)]
    pub scorer_args: Vec<String>,
    #[arg(long)]
    pub scorer_timeout: Option<f64>,
    /// Comma-separated per-cluster deltas for the built-in mock scorer.
    #[arg(long, group = "scorer", value_delimiter = ',')]
    pub mock_deltas: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.0)]
    pub mock_noise: f64,
    /// Treat scorer values as perplexities.
    #[arg(long)]
    pub perplexity: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Algorithm {
    Kmeans,
    Kcenter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Divisor {
    Scored,
    ClusterSize,
}

#[derive(Debug, Clone, Args)]
pub struct IterationArgs {
    #[arg(long, default_value_t = 3)]
    pub iterations: usize,
    /// Score only the instances added in the latest iteration.
    #[arg(long)]
    pub score_new_only: bool,
    #[arg(long, value_enum, default_value_t = Divisor::Scored)]
    pub divisor: Divisor,
    /// Largest factor one update may change a weight by.
    #[arg(long, default_value_t = 4.0, conflicts_with = "no_weight_cap")]
    pub weight_cap: f64,
    #[arg(long)]
    pub no_weight_cap: bool,
    #[arg(long)]
    pub replacement: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cluster a corpus and save the clustering.
    Cluster {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        k: usize,
        #[arg(long, value_enum, default_value_t = Algorithm::Kmeans)]
        algorithm: Algorithm,
        #[arg(long, default_value_t = 1)]
        restarts: usize,
        #[arg(long, default_value_t = 100)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep k and report silhouette, elbow and low-quality cluster share.
    Diagnose {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Comma-separated, strictly increasing k values.
        #[arg(long, required = true, value_delimiter = ',')]
        ks: Vec<usize>,
        /// Points scored by the silhouette (default: all up to 20000, else 10000).
        #[arg(long)]
        silhouette_sample: Option<usize>,
        #[arg(long, default_value_t = 0.3)]
        threshold: f64,
        #[arg(long, default_value_t = 1)]
        restarts: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Select a subset with a static sampler.
    Sample {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// random | kcenter | km-closest | km-random | kmq
        #[arg(long, default_value = "kmq")]
        method: kmq_core::SelectionMethod,
        #[command(flatten)]
        clusters: ClusterSource,
        #[command(flatten)]
        budget: BudgetArgs,
        #[arg(long)]
        replacement: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Iterative selection with scorer feedback.
    Iterate {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        clusters: ClusterSource,
        #[command(flatten)]
        budget: BudgetArgs,
        #[command(flatten)]
        iteration: IterationArgs,
        #[command(flatten)]
        scorer: ScorerArgs,
        /// Where progress is kept for `kmq resume`.
        #[arg(long, env = "KMQ_STATE_DIR")]
        state_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Offline run on a synthetic corpus with a mock scorer.
    Simulate {
        #[arg(long, default_value_t = 4)]
        clusters: usize,
        #[arg(long, default_value_t = 500)]
        per_cluster: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        /// Per-cluster deltas of the mock scorer.
        #[arg(long, value_delimiter = ',', default_value = "0.1,1.0,0.1,0.1")]
        deltas: Vec<f64>,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[command(flatten)]
        budget: BudgetArgs,
        #[command(flatten)]
        iteration: IterationArgs,
        #[arg(long, env = "KMQ_STATE_DIR")]
        state_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Continue an interrupted `kmq iterate`.
    Resume {
        #[arg(long, env = "KMQ_STATE_DIR", required = true)]
        state_dir: PathBuf,
        /// Replaces the corpus paths recorded in the state directory.
        #[arg(long = "corpus")]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Scorer => 4,
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("KMQ_LOG").unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        let built = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        if let Err(e) = built {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
