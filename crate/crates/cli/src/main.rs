//! `picnet` — generate synthetic place-recognition benchmarks, train and
//! evaluate descriptor pipelines, certify gradients and run the ablation
//! matrix.
//!
//! Exit codes: 0 success, 1 validation / usage error, 2 numerical failure
//! (training divergence or a failed gradient check).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use picnet_core::experiment::{
    cmd_ablate, cmd_eval, cmd_generate, cmd_gradcheck, cmd_train, ExperimentConfig, QuerySource,
};
use picnet_core::Error;

/// Environment variable overriding the configured output root.
const OUT_ENV: &str = "PICNET_OUT";

#[derive(Parser)]
#[command(
    name = "picnet",
    about = "Multimodal place recognition: synthetic benchmark, training, retrieval evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum QueriesFrom {
    /// The held-out query traversal (normal protocol).
    Queries,
    /// The database traversal itself (self-retrieval sanity check).
    Database,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its content manifest.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the configured pipeline variant on the dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate a trained checkpoint; writes report.json and rank_recall.csv.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding checkpoint.bin (defaults to <out>/run).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "queries")]
        queries_from: QueriesFrom,
    },
    /// Certify every differentiable operation against finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and evaluate the full variant matrix over the configured seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the default configuration as TOML.
    PrintConfig,
}

fn load_config(path: &Option<PathBuf>) -> anyhow::Result<ExperimentConfig> {
    let mut config = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", p.display()))?;
            toml::from_str(&text)
                .map_err(|e| anyhow::anyhow!("cannot parse config {}: {e}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Ok(root) = std::env::var(OUT_ENV) {
        if !root.is_empty() {
            config.output.dir = PathBuf::from(root);
        }
    }
    Ok(config)
}

fn run() -> anyhow::Result<i32> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate { config } => {
            let config = load_config(&config)?;
            let manifest = cmd_generate(&config)?;
            println!(
                "generated {} database + {} query scenes ({} night) under {}",
                manifest.traversals[0].n_scenes,
                manifest.traversals[1].n_scenes,
                manifest.n_corrupted_queries,
                config.dataset_dir().display()
            );
        }
        Command::Train { config } => {
            let config = load_config(&config)?;
            let out = cmd_train(&config)?;
            println!(
                "trained {} (final loss {:.6}); checkpoint {}, history {}",
                config.pipeline.variant.label(),
                out.final_loss,
                out.checkpoint.display(),
                out.loss_csv.display()
            );
        }
        Command::Eval {
            config,
            checkpoint,
            queries_from,
        } => {
            let config = load_config(&config)?;
            let source = match queries_from {
                QueriesFrom::Queries => QuerySource::Queries,
                QueriesFrom::Database => QuerySource::Database,
            };
            let out = cmd_eval(&config, checkpoint.as_deref(), source)?;
            println!(
                "variant {} recall@1 {:.4} recall@1% {:.4} (k={}) over {} queries -> {}",
                out.report.variant,
                out.report.overall.recall_at(1),
                out.report.overall.recall_at_1pct,
                out.report.overall.k_1pct,
                out.report.overall.n_queries,
                out.report_json.display()
            );
        }
        Command::Gradcheck { config } => {
            let config = load_config(&config)?;
            let report = cmd_gradcheck(&config)?;
            print!("{}", report.table());
            if !report.all_passed() {
                return Err(Error::GradCheckFailed(
                    "one or more operations exceeded the tolerance".into(),
                )
                .into());
            }
            println!(
                "all {} operations within {:.0e} at h = {:.0e}",
                report.ops.len(),
                report.tolerance,
                report.step
            );
        }
        Command::Ablate { config } => {
            let config = load_config(&config)?;
            let out = cmd_ablate(&config)?;
            let failures = out.rows.iter().filter(|r| r.error.is_some()).count();
            println!(
                "{} runs ({} failed); rows {}, summary {}",
                out.rows.len(),
                failures,
                out.runs_csv.display(),
                out.summary_csv.display()
            );
        }
        Command::PrintConfig => {
            let config = ExperimentConfig::default();
            print!("{}", toml::to_string_pretty(&config)?);
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run() {
        Ok(_) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let numerical = err
                .downcast_ref::<Error>()
                .map(Error::is_numerical)
                .unwrap_or(false);
            ExitCode::from(if numerical { 2 } else { 1 })
        }
    }
}
