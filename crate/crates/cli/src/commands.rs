use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use seqrec_core::dataio::{dataset_stats, leave_one_out_split, load_sequences, write_sequences, Phase, SplitDataset};
use seqrec_core::evaluator::{evaluate_scorer, parse_report_csv, EvalReport, ModelScorer, PopScorer, Scorer, TransitionScorer};
use seqrec_core::model::{load_checkpoint, save_checkpoint};
use seqrec_core::synth::{generate, SyntheticConfig};
use seqrec_core::trainer::train;
use seqrec_core::transition::{build_transition_graph, TransitionGraph};

use crate::config::RunConfig;
use crate::prepare::prepare;

pub const CONFIG_FILE: &str = "config.txt";
pub const SEQUENCE_FILE: &str = "sequences.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Baseline {
    Pop,
    Transition,
}

pub struct EvalFlags {
    pub phase: Phase,
    pub cutoffs: Vec<usize>,
    pub grouped: bool,
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))
}

fn write(path: PathBuf, contents: &str) -> Result<()> {
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_split(cfg: &RunConfig) -> Result<(SplitDataset, TransitionGraph)> {
    let path = cfg.data_path()?;
    let ds = load_sequences(path).with_context(|| format!("loading {}", path.display()))?;
    let split = leave_one_out_split(&ds);
    let graph = build_transition_graph(split.train_sequences(), split.item_count, cfg.span)?;
    Ok((split, graph))
}

pub fn report_name(phase: Phase) -> &'static str {
    match phase {
        Phase::Valid => "report_valid.csv",
        Phase::Test => "report_test.csv",
    }
}

fn run_eval(scorer: &dyn Scorer, split: &SplitDataset, graph: &TransitionGraph, flags: &EvalFlags) -> Result<EvalReport> {
    if flags.cutoffs.is_empty() || flags.cutoffs.contains(&0) {
        bail!("cutoffs must be positive integers");
    }
    if flags.grouped && flags.phase != Phase::Test {
        bail!("--grouped buckets test targets and needs --phase test");
    }
    let grouping = flags.grouped.then_some(graph);
    Ok(evaluate_scorer(scorer, split, flags.phase, &flags.cutoffs, grouping)?)
}

pub fn cmd_prepare(raw: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(raw).with_context(|| format!("reading {}", raw.display()))?;
    let prepared = prepare(&text).with_context(|| format!("parsing {}", raw.display()))?;
    create_out(out)?;
    let mut seq = Vec::new();
    write_sequences(&prepared.dataset, &mut seq)?;
    fs::write(out.join(SEQUENCE_FILE), seq)?;
    write(out.join("remap.tsv"), &prepared.remap_tsv())?;
    let cfg = RunConfig { data: Some(out.join(SEQUENCE_FILE)), ..RunConfig::default() };
    write(out.join(CONFIG_FILE), &format!("# prepared from {}\n{}", raw.display(), cfg.to_text()))?;
    let s = dataset_stats(&prepared.dataset);
    println!("users {} items {} actions {} avg_len {:.2} density {:.4}%", s.users, s.items, s.actions, s.avg_len, 100.0 * s.density);
    Ok(())
}

pub fn cmd_synth(syn: &SyntheticConfig, out: &Path) -> Result<()> {
    if syn.clusters < 1 || syn.item_count < syn.clusters || syn.bundle_size < 2 || syn.min_len < 1 || syn.min_len > syn.max_len {
        bail!("invalid synthetic corpus settings: {syn:?}");
    }
    let ds = generate(syn);
    create_out(out)?;
    let mut seq = Vec::new();
    write_sequences(&ds, &mut seq)?;
    fs::write(out.join(SEQUENCE_FILE), seq)?;
    let cfg = RunConfig { data: Some(out.join(SEQUENCE_FILE)), ..RunConfig::default() };
    write(out.join(CONFIG_FILE), &format!("# generated with {syn:?}\n{}", cfg.to_text()))?;
    println!("wrote {} users over {} items", ds.user_count(), ds.item_count);
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (split, graph) = load_split(cfg)?;
    create_out(out)?;
    write(out.join(CONFIG_FILE), &cfg.to_text())?;
    let (params, history) = train(&cfg.model, &cfg.train, &split, &graph)?;
    save_checkpoint(out.join("checkpoint.bin"), &cfg.model, &params)?;
    write(out.join("history.csv"), &history.to_csv())?;
    let best = &history.records[history.best_epoch - 1];
    println!("best epoch {} of {}: valid NDCG@10 {:.4}", history.best_epoch, history.records.len(), best.ndcg10());
    Ok(())
}

pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, flags: &EvalFlags, out: &Path) -> Result<()> {
    let (split, graph) = load_split(cfg)?;
    let (model_cfg, params) = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    if params.item_count != split.item_count {
        bail!(
            "checkpoint error: {} was trained on {} items but the dataset has {}",
            checkpoint.display(),
            params.item_count,
            split.item_count
        );
    }
    let report = run_eval(&ModelScorer::new(&params, &model_cfg), &split, &graph, flags)?;
    finish_report(cfg, &report, flags, out)
}

pub fn cmd_baseline(cfg: &RunConfig, which: Baseline, flags: &EvalFlags, out: &Path) -> Result<()> {
    let (split, graph) = load_split(cfg)?;
    let report = match which {
        Baseline::Pop => run_eval(&PopScorer::from_split(&split), &split, &graph, flags)?,
        Baseline::Transition => run_eval(&TransitionScorer { graph: &graph }, &split, &graph, flags)?,
    };
    finish_report(cfg, &report, flags, out)
}

fn finish_report(cfg: &RunConfig, report: &EvalReport, flags: &EvalFlags, out: &Path) -> Result<()> {
    create_out(out)?;
    write(out.join(CONFIG_FILE), &cfg.to_text())?;
    let path = out.join(report_name(flags.phase));
    write(path.clone(), &report.to_csv())?;
    for m in &report.metrics {
        println!("HR@{0} {1:.4}  NDCG@{0} {2:.4}", m.cutoff, m.hr, m.ndcg);
    }
    println!("wrote {}", path.display());
    Ok(())
}

/// Label for a report: its parent directory name, else its file stem.
fn default_label(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Long-format merge of report CSVs.
pub fn merge_reports(inputs: &[(String, String)]) -> Result<String> {
    let mut out = String::from("method,metric,cutoff,group,value\n");
    let mut reference: Option<(String, BTreeSet<usize>)> = None;
    for (label, text) in inputs {
        let rows = parse_report_csv(text).with_context(|| format!("report for `{label}`"))?;
        let cutoffs: BTreeSet<usize> = rows.iter().map(|r| r.cutoff).collect();
        match &reference {
            None => reference = Some((label.clone(), cutoffs)),
            Some((first, expected)) if *expected != cutoffs => {
                bail!("merge error: `{label}` has cutoffs {cutoffs:?} but `{first}` has {expected:?}")
            }
            Some(_) => {}
        }
        for r in rows {
            writeln!(out, "{label},{},{},{},{}", r.metric, r.cutoff, r.group, r.value).unwrap();
        }
    }
    Ok(out)
}

pub fn cmd_analyze(reports: &[PathBuf], labels: &[String], out: &Path) -> Result<()> {
    if reports.is_empty() {
        bail!("analyze needs at least one report");
    }
    if !labels.is_empty() && labels.len() != reports.len() {
        bail!("got {} labels for {} reports", labels.len(), reports.len());
    }
    let mut inputs = Vec::new();
    for (k, path) in reports.iter().enumerate() {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let label = labels.get(k).cloned().unwrap_or_else(|| default_label(path));
        inputs.push((label, text));
    }
    let merged = merge_reports(&inputs)?;
    create_out(out)?;
    let mut cfg = String::from("# analyze inputs\n");
    for ((label, _), path) in inputs.iter().zip(reports) {
        writeln!(cfg, "# {label} = {}", path.display()).unwrap();
    }
    write(out.join(CONFIG_FILE), &cfg)?;
    let path = out.join("analysis.csv");
    write(path.clone(), &merged)?;
    println!("wrote {} rows to {}", merged.lines().count() - 1, path.display());
    Ok(())
}
