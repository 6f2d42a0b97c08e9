//! `msm`: corpus generation, pretraining, fine-tuning, retrieval and
//! evaluation from the command line.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msm_core::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "msm", version, about = "Masked sentence model pretraining and dense retrieval")]
#[command(after_help = after_help())]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// Flat key=value config file (`#` comments)
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after --config
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic parallel corpus with train/held-out splits and pairs
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain on a document file (resumes from <out>/checkpoint)
    Pretrain {
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Run directory [default: $MSM_RUNS_DIR/pretrain/<sharing>/<seed>]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune the sentence encoder of a checkpoint on retrieval pairs
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Run directory [default: $MSM_RUNS_DIR/finetune/default/<seed>]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Encode the queries or passages of a pair file into a vector file
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, value_parser = ["query", "passage"], default_value = "passage")]
        side: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact top-k search of query vectors against passage vectors
    Search {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        passages: PathBuf,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "msm")]
        tag: String,
    },
    /// Score a TREC run against qrels; prints one TSV line
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        /// Comma-separated, e.g. mrr@100,recall@100,map@20,r@2kt
        #[arg(long, default_value = "mrr@100,recall@100,map@20,r@2kt")]
        metric: String,
        /// Pair file giving passage texts; required for r@Nkt
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Run an ablation grid over seeds on the synthetic transfer task
    Ablate {
        /// One of mu, negatives, projector, layers, sharing, objective
        #[arg(long)]
        name: String,
        /// Comma-separated seeds
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        /// Experiment directory name [default: the ablation name]
        #[arg(long)]
        exp: Option<String>,
    },
    /// Finite-difference check of the end-to-end masked-sentence gradient
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        dim: usize,
        /// Let gradient flow through alpha (the check should then fail)
        #[arg(long)]
        attach_alpha: bool,
    },
    /// Summarise finished runs of an experiment (medians over seeds)
    Report {
        #[arg(long)]
        exp: String,
        #[arg(long, value_parser = ["tsv", "markdown"], default_value = "tsv")]
        format: String,
    },
}

fn after_help() -> String {
    format!(
        "Config keys (set with --config FILE or --set KEY=VALUE):\n{}\n\
         Runs are written under $MSM_RUNS_DIR (default ./runs).\n\
         Exit status: 0 success, 1 usage or config error, 2 runtime error.",
        RunConfig::help_table()
    )
}

/// Errors the user can fix by changing the invocation.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command, &cli.global) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
