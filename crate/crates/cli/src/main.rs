//! `seqrec`: prepare data, train, evaluate and compare sequential recommenders.

mod commands;
mod config;
mod prepare;

use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use seqrec_core::dataio::Phase;
use seqrec_core::evaluator::DEFAULT_CUTOFFS;
use seqrec_core::synth::SyntheticConfig;

use commands::{Baseline, EvalFlags, CONFIG_FILE};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "seqrec", version, about = "Sequential recommendation with transition-aware distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Sequence file; same as `--set data=PATH`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Override one config key, e.g. `--set dim=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, default_value = "test", value_parser = parse_phase)]
    phase: Phase,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_CUTOFFS)]
    cutoffs: Vec<usize>,
    /// Add transition-frequency buckets (test phase only).
    #[arg(long)]
    grouped: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Turn a `user<TAB>item<TAB>timestamp` log into a sequence file.
    Prepare {
        raw: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic sequence corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = SyntheticConfig::default().item_count)]
        items: usize,
        #[arg(long, default_value_t = SyntheticConfig::default().user_count)]
        users: usize,
        #[arg(long, default_value_t = SyntheticConfig::default().clusters)]
        clusters: usize,
        #[arg(long, default_value_t = SyntheticConfig::default().min_len)]
        min_len: usize,
        #[arg(long, default_value_t = SyntheticConfig::default().max_len)]
        max_len: usize,
        #[arg(long, default_value_t = SyntheticConfig::default().transition_prob)]
        transition_prob: f64,
        #[arg(long, default_value_t = SyntheticConfig::default().noise_prob)]
        noise_prob: f64,
    },
    /// Train a model and write `checkpoint.bin` and `history.csv`.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint. Without `--config`, the `config.txt` beside the checkpoint is used.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Evaluate a non-learned baseline.
    Baseline {
        #[arg(value_enum)]
        name: Baseline,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Merge report CSVs into `method,metric,cutoff,group,value` rows.
    Analyze {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Method label per report, in order; defaults to each report's directory name.
        #[arg(long = "label")]
        labels: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_phase(s: &str) -> Result<Phase, String> {
    s.parse()
}

impl Common {
    fn resolve(&self, fallback: Option<&Path>) -> Result<RunConfig> {
        let mut overrides = Vec::new();
        if let Some(d) = &self.data {
            overrides.push(format!("data={}", d.display()));
        }
        overrides.extend(self.overrides.iter().cloned());
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        RunConfig::resolve(self.config.as_deref().or(fallback), &overrides)
    }
}

impl EvalArgs {
    fn flags(&self) -> EvalFlags {
        EvalFlags { phase: self.phase, cutoffs: self.cutoffs.clone(), grouped: self.grouped }
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Prepare { raw, out } => commands::cmd_prepare(&raw, &out),
        Command::Synth { out, seed, items, users, clusters, min_len, max_len, transition_prob, noise_prob } => {
            let syn = SyntheticConfig {
                item_count: items,
                user_count: users,
                clusters,
                min_len,
                max_len,
                transition_prob,
                noise_prob,
                seed,
                ..SyntheticConfig::default()
            };
            commands::cmd_synth(&syn, &out)
        }
        Command::Train { common } => commands::cmd_train(&common.resolve(None)?, &common.out),
        Command::Evaluate { checkpoint, common, eval } => {
            let sibling = checkpoint.parent().map(|p| p.join(CONFIG_FILE)).filter(|p| p.is_file());
            let cfg = common.resolve(sibling.as_deref())?;
            commands::cmd_evaluate(&cfg, &checkpoint, &eval.flags(), &common.out)
        }
        Command::Baseline { name, common, eval } => {
            commands::cmd_baseline(&common.resolve(None)?, name, &eval.flags(), &common.out)
        }
        Command::Analyze { reports, labels, out } => commands::cmd_analyze(&reports, &labels, &out),
    }
}
