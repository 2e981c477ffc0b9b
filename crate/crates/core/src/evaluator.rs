//! Full-ranking leave-one-out evaluation: HR@N and NDCG@N, overall and
//! bucketed by the observed validation→test transition frequency.

use std::fmt::Write as _;

use crate::dataio::{Phase, SplitDataset};
use crate::kernel::{KernelError, Tape};
use crate::model::{bind, item_logits, mqsa_forward, DropoutRngs, ModelConfig, ModelParams, SeqBatch};
use crate::transition::{transition_frequency, TransitionGraph};

pub const DEFAULT_CUTOFFS: [usize; 3] = [5, 10, 20];

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("contract error: {0}")]
    Contract(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("report parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// 1-based position of `target` among non-excluded items, with score ties
/// resolved in favor of the smaller id. `scores[j - 1]` belongs to item `j`.
pub fn rank_of_target(scores: &[f64], target: usize, exclusions: &[usize]) -> Result<usize, EvalError> {
    if target == 0 || target > scores.len() {
        return Err(EvalError::Contract(format!("target {target} outside 1..={}", scores.len())));
    }
    if exclusions.contains(&target) {
        return Err(EvalError::Contract(format!("target {target} is excluded")));
    }
    let mut excluded = vec![false; scores.len() + 1];
    for &e in exclusions {
        if let Some(slot) = excluded.get_mut(e) {
            *slot = true;
        }
    }
    let ts = scores[target - 1];
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(idx, &s)| {
            let j = idx + 1;
            !excluded[j] && j != target && (s > ts || (s == ts && j < target))
        })
        .count();
    Ok(ahead + 1)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CutoffMetrics {
    pub cutoff: usize,
    pub hr: f64,
    pub ndcg: f64,
}

pub fn metrics_at(rank: usize, cutoffs: &[usize]) -> Vec<CutoffMetrics> {
    assert!(rank >= 1, "ranks are 1-based");
    cutoffs
        .iter()
        .map(|&cutoff| {
            if rank <= cutoff {
                CutoffMetrics { cutoff, hr: 1.0, ndcg: 1.0 / ((rank + 1) as f64).log2() }
            } else {
                CutoffMetrics { cutoff, hr: 0.0, ndcg: 0.0 }
            }
        })
        .collect()
}

/// Order-independent mean: values are summed in sorted order.
fn mean(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

fn mean_metrics(ranks: &[usize], cutoffs: &[usize]) -> Vec<CutoffMetrics> {
    let per_user: Vec<Vec<CutoffMetrics>> = ranks.iter().map(|&r| metrics_at(r, cutoffs)).collect();
    cutoffs
        .iter()
        .enumerate()
        .map(|(c, &cutoff)| CutoffMetrics {
            cutoff,
            hr: mean(per_user.iter().map(|m| m[c].hr).collect()),
            ndcg: mean(per_user.iter().map(|m| m[c].ndcg).collect()),
        })
        .collect()
}

/// Transition-frequency bucket of a test case.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Bucket {
    Zero,
    One,
    Two,
    Three,
    FourPlus,
}

impl Bucket {
    pub const ALL: [Bucket; 5] = [Bucket::Zero, Bucket::One, Bucket::Two, Bucket::Three, Bucket::FourPlus];

    pub fn of(frequency: u32) -> Self {
        match frequency {
            0 => Bucket::Zero,
            1 => Bucket::One,
            2 => Bucket::Two,
            3 => Bucket::Three,
            _ => Bucket::FourPlus,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Bucket::Zero => "0",
            Bucket::One => "1",
            Bucket::Two => "2",
            Bucket::Three => "3",
            Bucket::FourPlus => ">=4",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupMetrics {
    pub bucket: Bucket,
    pub count: usize,
    pub metrics: Vec<CutoffMetrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub metrics: Vec<CutoffMetrics>,
    pub user_count: usize,
    pub groups: Option<Vec<GroupMetrics>>,
}

impl EvalReport {
    pub fn at(&self, cutoff: usize) -> Option<&CutoffMetrics> {
        self.metrics.iter().find(|m| m.cutoff == cutoff)
    }

    pub fn group(&self, bucket: Bucket) -> Option<&GroupMetrics> {
        self.groups.as_ref()?.iter().find(|g| g.bucket == bucket)
    }

    /// CSV rows `metric,cutoff,group,value,count`; group `all` for the overall means.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,cutoff,group,value,count\n");
        let mut emit = |group: &str, count: usize, metrics: &[CutoffMetrics]| {
            for m in metrics {
                writeln!(out, "hr,{},{group},{},{count}", m.cutoff, m.hr).unwrap();
                writeln!(out, "ndcg,{},{group},{},{count}", m.cutoff, m.ndcg).unwrap();
            }
        };
        emit("all", self.user_count, &self.metrics);
        for g in self.groups.iter().flatten() {
            emit(g.bucket.label(), g.count, &g.metrics);
        }
        out
    }
}

/// One parsed line of a report CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub metric: String,
    pub cutoff: usize,
    pub group: String,
    pub value: f64,
    pub count: usize,
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>, EvalError> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if idx == 0 {
            if line.trim() != "metric,cutoff,group,value,count" {
                return Err(EvalError::Parse { line: 1, message: format!("unexpected header {line:?}") });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(EvalError::Parse { line: line_no, message: format!("expected 5 fields, got {}", f.len()) });
        }
        let bad = |what: &str| EvalError::Parse { line: line_no, message: format!("invalid {what}") };
        rows.push(ReportRow {
            metric: f[0].to_string(),
            cutoff: f[1].parse().map_err(|_| bad("cutoff"))?,
            group: f[2].to_string(),
            value: f[3].parse().map_err(|_| bad("value"))?,
            count: f[4].parse().map_err(|_| bad("count"))?,
        });
    }
    Ok(rows)
}

/// Anything that scores every item given a user's history.
pub trait Scorer {
    fn item_count(&self) -> usize;
    /// One score vector per history; entry `j - 1` scores item `j`.
    fn score(&self, histories: &[Vec<usize>]) -> Result<Vec<Vec<f64>>, EvalError>;
}

/// Scores from the final position of the sequence model, inference mode.
pub struct ModelScorer<'a> {
    pub params: &'a ModelParams,
    pub config: &'a ModelConfig,
    pub chunk: usize,
}

impl<'a> ModelScorer<'a> {
    pub fn new(params: &'a ModelParams, config: &'a ModelConfig) -> Self {
        Self { params, config, chunk: 256 }
    }
}

impl Scorer for ModelScorer<'_> {
    fn item_count(&self) -> usize {
        self.params.item_count
    }

    fn score(&self, histories: &[Vec<usize>]) -> Result<Vec<Vec<f64>>, EvalError> {
        let n = self.config.max_len;
        let mut out = Vec::with_capacity(histories.len());
        // Inference draws no dropout masks; the streams are placeholders.
        let mut rngs = DropoutRngs::from_seed(0);
        for chunk in histories.chunks(self.chunk.max(1)) {
            let seq = SeqBatch::from_histories(chunk, n)?;
            let mut tape = Tape::new();
            let bound = bind(&mut tape, self.params, self.config, false);
            let fwd = mqsa_forward(&mut tape, &bound, self.config, &seq, &mut rngs, false)?;
            let last: Vec<usize> = (0..seq.batch).map(|b| b * n + n - 1).collect();
            let reps = tape.gather_rows(fwd.seq_reps, &last, None)?;
            let logits = item_logits(&mut tape, reps, bound.item_embeddings)?;
            let value = tape.value(logits);
            out.extend((0..seq.batch).map(|b| value.row(b).to_vec()));
        }
        Ok(out)
    }
}

/// Global training popularity of each item.
pub struct PopScorer {
    counts: Vec<f64>,
}

impl PopScorer {
    pub fn from_split(split: &SplitDataset) -> Self {
        let mut counts = vec![0.0; split.item_count];
        for seq in split.train_sequences() {
            for &i in seq {
                counts[i - 1] += 1.0;
            }
        }
        Self { counts }
    }
}

impl Scorer for PopScorer {
    fn item_count(&self) -> usize {
        self.counts.len()
    }

    fn score(&self, histories: &[Vec<usize>]) -> Result<Vec<Vec<f64>>, EvalError> {
        Ok(histories.iter().map(|_| self.counts.clone()).collect())
    }
}

/// Transition frequency from the last history item to each candidate.
pub struct TransitionScorer<'a> {
    pub graph: &'a TransitionGraph,
}

impl Scorer for TransitionScorer<'_> {
    fn item_count(&self) -> usize {
        self.graph.item_count()
    }

    fn score(&self, histories: &[Vec<usize>]) -> Result<Vec<Vec<f64>>, EvalError> {
        Ok(histories
            .iter()
            .map(|h| {
                let mut scores = vec![0.0; self.graph.item_count()];
                if let Some(row) = h.last().and_then(|&last| self.graph.row(last)) {
                    for (&j, &c) in row {
                        scores[j - 1] = c as f64;
                    }
                }
                scores
            })
            .collect())
    }
}

/// Rank of one evaluated user; `user` indexes `SplitDataset::users`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UserRank {
    pub user: usize,
    pub rank: usize,
}

/// Ranks every eligible user's target for `phase`, excluding the items of
/// the user's input history other than the target itself.
pub fn rank_users(scorer: &dyn Scorer, split: &SplitDataset, phase: Phase) -> Result<Vec<UserRank>, EvalError> {
    if scorer.item_count() != split.item_count {
        return Err(EvalError::Contract(format!(
            "scorer covers {} items, dataset has {}",
            scorer.item_count(),
            split.item_count
        )));
    }
    let users: Vec<usize> = (0..split.users.len()).filter(|&u| split.users[u].target(phase).is_some()).collect();
    let histories: Vec<Vec<usize>> = users.iter().map(|&u| split.users[u].history(phase)).collect();
    let scores = scorer.score(&histories)?;
    users
        .iter()
        .zip(histories.iter().zip(&scores))
        .map(|(&u, (history, s))| {
            let target = split.users[u].target(phase).expect("filtered");
            let exclusions: Vec<usize> = history.iter().copied().filter(|&i| i != target).collect();
            Ok(UserRank { user: u, rank: rank_of_target(s, target, &exclusions)? })
        })
        .collect()
}

pub fn report_from_ranks(ranks: &[UserRank], cutoffs: &[usize]) -> EvalReport {
    let r: Vec<usize> = ranks.iter().map(|u| u.rank).collect();
    EvalReport { metrics: mean_metrics(&r, cutoffs), user_count: r.len(), groups: None }
}

/// Buckets test-phase ranks by `frequency(valid → test)` in the training graph.
pub fn grouped_evaluate(
    ranks: &[UserRank],
    split: &SplitDataset,
    graph: &TransitionGraph,
    cutoffs: &[usize],
) -> Vec<GroupMetrics> {
    Bucket::ALL
        .iter()
        .map(|&bucket| {
            let in_bucket: Vec<usize> = ranks
                .iter()
                .filter(|r| {
                    let u = &split.users[r.user];
                    match (u.valid, u.test) {
                        (Some(v), Some(t)) => Bucket::of(transition_frequency(graph, v, t)) == bucket,
                        _ => false,
                    }
                })
                .map(|r| r.rank)
                .collect();
            GroupMetrics { bucket, count: in_bucket.len(), metrics: mean_metrics(&in_bucket, cutoffs) }
        })
        .collect()
}

pub fn evaluate_scorer(
    scorer: &dyn Scorer,
    split: &SplitDataset,
    phase: Phase,
    cutoffs: &[usize],
    grouping: Option<&TransitionGraph>,
) -> Result<EvalReport, EvalError> {
    let ranks = rank_users(scorer, split, phase)?;
    let mut report = report_from_ranks(&ranks, cutoffs);
    if let Some(graph) = grouping {
        report.groups = Some(grouped_evaluate(&ranks, split, graph, cutoffs));
    }
    Ok(report)
}

/// Evaluates the sequence model on `phase` targets.
pub fn evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    split: &SplitDataset,
    phase: Phase,
    cutoffs: &[usize],
) -> Result<EvalReport, EvalError> {
    evaluate_scorer(&ModelScorer::new(params, config), split, phase, cutoffs, None)
}
