//! Mini-batch Adam training with validation-based early stopping.

use std::fmt::Write as _;
use std::time::Instant;

use crate::dataio::{batch_iter, Batch, Phase, SplitDataset};
use crate::evaluator::{evaluate, CutoffMetrics, EvalError, DEFAULT_CUTOFFS};
use crate::kernel::{adam_step, seeded_rng, AdamState, KernelError, Tape, Tensor, Var};
use crate::model::{
    bind, grareg_loss, init_params, item_logits, kd_loss, l2_penalty, l2_penalty_var, mqsa_forward, rec_loss,
    total_loss, BoundParams, DropoutRngs, ModelConfig, ModelParams, SeqBatch,
};
use crate::transition::TransitionGraph;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged: non-finite loss in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Which graph-derived term the `kd_weight` coefficient scales.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphTerm {
    /// Transition-aware embedding distillation.
    Distillation,
    /// Frequency-weighted squared distance to the top-`neighbors` successors.
    NeighborDistance { neighbors: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l2_weight: f64,
    pub kd_weight: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub graph_term: GraphTerm,
    /// Record wall-clock seconds per epoch; off gives byte-stable histories.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            l2_weight: 0.0,
            kd_weight: 0.1,
            batch_size: 256,
            max_epochs: 200,
            patience: 20,
            seed: 42,
            graph_term: GraphTerm::Distillation,
            record_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(TrainError::Config(format!("learning_rate must be non-negative, got {}", self.learning_rate)));
        }
        if self.l2_weight < 0.0 || self.kd_weight < 0.0 {
            return Err(TrainError::Config("loss weights must be non-negative".into()));
        }
        if self.batch_size < 1 || self.patience < 1 || self.max_epochs < 1 {
            return Err(TrainError::Config("batch_size, patience and max_epochs must be at least 1".into()));
        }
        if let GraphTerm::NeighborDistance { neighbors: 0 } = self.graph_term {
            return Err(TrainError::Config("neighbor count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Summary of one completed epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean cross-entropy per target position.
    pub rec_loss: f64,
    /// Mean graph term per batch.
    pub kd_loss: f64,
    /// `‖Θ‖²` at the end of the epoch.
    pub l2: f64,
    /// Validation metrics at 5, 10 and 20.
    pub valid: Vec<CutoffMetrics>,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn ndcg10(&self) -> f64 {
        self.valid.iter().find(|m| m.cutoff == 10).map_or(0.0, |m| m.ndcg)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,rec_loss,kd_loss,l2,hr5,ndcg5,hr10,ndcg10,hr20,ndcg20,seconds";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            write!(out, "{},{},{},{}", r.epoch, r.rec_loss, r.kd_loss, r.l2).unwrap();
            for m in &r.valid {
                write!(out, ",{},{}", m.hr, m.ndcg).unwrap();
            }
            writeln!(out, ",{}", r.seconds).unwrap();
        }
        out
    }
}

/// Handles to the loss terms of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub rec: Var,
    pub kd: Var,
    pub l2: Var,
    pub total: Var,
    /// Number of target positions in the batch.
    pub positions: usize,
}

/// Records `rec + kd_weight · graph_term + l2_weight · ‖Θ‖²` for one batch.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    tape: &mut Tape,
    bound: &BoundParams,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    batch: &Batch,
    graph: &TransitionGraph,
    rngs: &mut DropoutRngs,
    training: bool,
) -> Result<LossTerms, TrainError> {
    let seq = SeqBatch::from_batch(batch);
    let fwd = mqsa_forward(tape, bound, model_cfg, &seq, rngs, training)?;

    let rows: Vec<usize> = (0..batch.mask.len()).filter(|&i| batch.mask[i]).collect();
    if rows.is_empty() {
        return Err(TrainError::Dataset("batch has no target positions".into()));
    }
    let targets: Vec<usize> = rows.iter().map(|&i| batch.target_matrix[i]).collect();
    let reps = tape.gather_rows(fwd.seq_reps, &rows, None)?;
    let logits = item_logits(tape, reps, bound.item_embeddings)?;
    let rec = rec_loss(tape, logits, &targets, &vec![true; rows.len()])?;

    let kd = if train_cfg.kd_weight > 0.0 {
        match train_cfg.graph_term {
            GraphTerm::Distillation => kd_loss(
                tape,
                bound.item_embeddings,
                graph,
                model_cfg.tau,
                &batch.distinct_items(),
                model_cfg.dropout,
                &mut rngs.distill,
                training,
            )?,
            GraphTerm::NeighborDistance { neighbors } => grareg_loss(tape, bound.item_embeddings, graph, neighbors)?,
        }
    } else {
        tape.constant(Tensor::scalar(0.0))
    };
    let l2 = if train_cfg.l2_weight > 0.0 { l2_penalty_var(tape, bound)? } else { tape.constant(Tensor::scalar(0.0)) };
    let total = total_loss(tape, rec, kd, l2, train_cfg.kd_weight, train_cfg.l2_weight)?;
    Ok(LossTerms { rec, kd, l2, total, positions: rows.len() })
}

/// Trains from a fresh initialization drawn from `train_cfg.seed`.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    split: &SplitDataset,
    graph: &TransitionGraph,
) -> Result<(ModelParams, TrainHistory), TrainError> {
    model_cfg.validate()?;
    let params = init_params(model_cfg, split.item_count, &mut seeded_rng(train_cfg.seed))?;
    train_from(params, model_cfg, train_cfg, split, graph, &mut |_| {})
}

/// Trains starting from `params`, calling `on_epoch` after every epoch.
/// Returns the parameters of the epoch with the best validation NDCG@10.
pub fn train_from(
    mut params: ModelParams,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    split: &SplitDataset,
    graph: &TransitionGraph,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(ModelParams, TrainHistory), TrainError> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if split.item_count != params.item_count || graph.item_count() != params.item_count {
        return Err(TrainError::Dataset(format!(
            "vocabulary mismatch: params {}, dataset {}, graph {}",
            params.item_count,
            split.item_count,
            graph.item_count()
        )));
    }
    if !split.users.iter().any(|u| u.train.len() >= 2) {
        return Err(TrainError::Dataset("no training sequence has an input-target pair".into()));
    }
    let mut adam = AdamState::new(params.active_tensors(model_cfg), train_cfg.learning_rate);
    let mut shuffle_rng = seeded_rng(train_cfg.seed.wrapping_add(1));
    let mut dropout_rngs = DropoutRngs::from_seed(train_cfg.seed);

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ModelParams)> = None;
    let mut stale = 0;
    for epoch in 1..=train_cfg.max_epochs {
        let started = Instant::now();
        let batches = batch_iter(split, model_cfg.max_len, train_cfg.batch_size, &mut shuffle_rng);
        let (mut rec_sum, mut positions, mut kd_sum) = (0.0, 0usize, 0.0);
        for batch in &batches {
            let mut tape = Tape::new();
            let bound = bind(&mut tape, &params, model_cfg, true);
            let terms = batch_loss(&mut tape, &bound, model_cfg, train_cfg, batch, graph, &mut dropout_rngs, true)?;
            let total = terms.total;
            if !tape.value(total).data()[0].is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            rec_sum += tape.value(terms.rec).data()[0];
            kd_sum += tape.value(terms.kd).data()[0];
            positions += terms.positions;

            tape.backward(total)?;
            let grads: Vec<Tensor> = bound.vars().into_iter().map(|v| tape.grad_tensor(v)).collect();
            adam_step(&mut params.active_tensors_mut(model_cfg), &grads, &mut adam)?;
        }

        let valid = evaluate(&params, model_cfg, split, Phase::Valid, &DEFAULT_CUTOFFS)?;
        let record = EpochRecord {
            epoch,
            rec_loss: rec_sum / positions.max(1) as f64,
            kd_loss: kd_sum / batches.len().max(1) as f64,
            l2: l2_penalty(&params, model_cfg),
            valid: valid.metrics,
            seconds: if train_cfg.record_time { started.elapsed().as_secs_f64() } else { 0.0 },
        };
        on_epoch(&record);
        let score = record.ndcg10();
        history.records.push(record);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, params.clone()));
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= train_cfg.patience {
                break;
            }
        }
    }
    let (_, best_params) = best.expect("at least one epoch ran");
    Ok((best_params, history))
}
