//! Pipeline driver: prepare data, train the recommender and graph module,
//! learn the explanation policy, run the erasure evaluation, merge reports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cfairer::config::RunConfig;
use cfairer::pipeline;
use cfairer::Result;

#[derive(Parser)]
#[command(name = "cfair", about = "Counterfactual fairness explanations for recommenders")]
struct Cli {
    /// key=value config file with section prefixes (e.g. cfe.gamma=0.9)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed (overrides the config file)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for all artifacts
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Minimum positive interactions per user/item
    #[arg(long, global = true)]
    k_core: Option<usize>,

    /// Recommendation list length K
    #[arg(long, global = true)]
    top_k: Option<usize>,

    /// Erasure length E of the evaluation protocol
    #[arg(long, global = true)]
    erasure_length: Option<usize>,

    /// Attention-pruned candidate set size n
    #[arg(long, global = true)]
    candidate_size: Option<usize>,

    /// Policy training episodes
    #[arg(long, global = true)]
    episodes: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load (or synthesize), binarize, k-core filter and split the data
    Prepare,
    /// Train the matrix-factorization recommender
    TrainRec,
    /// Train the heterogeneous graph embeddings
    TrainGraph,
    /// Train the explanation policy and export per-user explanations
    Explain,
    /// Run the erasure protocol for the policy and all baselines
    Evaluate,
    /// Merge per-method curves into report.csv / report.json
    Report,
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.reseed();
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(k) = cli.k_core {
        cfg.k_core = k;
    }
    if let Some(k) = cli.top_k {
        cfg.cfe.top_k = k;
    }
    if let Some(e) = cli.erasure_length {
        cfg.erasure_length = e;
    }
    if let Some(n) = cli.candidate_size {
        cfg.cfe.candidate_size = n;
    }
    if let Some(ep) = cli.episodes {
        cfg.cfe.episodes = ep;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = build_config(cli)?;
    match cli.command {
        Command::Prepare => {
            pipeline::cmd_prepare(&cfg)?;
        }
        Command::TrainRec => {
            pipeline::cmd_train_rec(&cfg)?;
        }
        Command::TrainGraph => {
            pipeline::cmd_train_graph(&cfg)?;
        }
        Command::Explain => {
            pipeline::cmd_explain(&cfg)?;
        }
        Command::Evaluate => {
            pipeline::cmd_evaluate(&cfg)?;
        }
        Command::Report => {
            pipeline::cmd_report(&cfg)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CFAIR_LOG", "info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
