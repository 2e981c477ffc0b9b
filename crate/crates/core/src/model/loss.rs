use super::forward::BoundParams;
use super::{ModelConfig, ModelParams};
use crate::kernel::{KernelError, Rng, Tape, Tensor, Var};
use crate::transition::{pseudo_label_row, TransitionGraph};

/// Summed next-item cross-entropy over rows of `logits` (`m × |I|`) where
/// `mask` is set. `targets` holds 1-based item ids.
pub fn rec_loss(tape: &mut Tape, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var, KernelError> {
    if targets.len() != mask.len() {
        return Err(KernelError::Dimension(format!("{} targets for {} mask entries", targets.len(), mask.len())));
    }
    let cols: Vec<Option<usize>> = targets
        .iter()
        .zip(mask)
        .enumerate()
        .map(|(r, (&t, &m))| match (m, t) {
            (false, _) => Ok(None),
            (true, 0) => Err(KernelError::Contract(format!("row {r} is masked in but its target is padding"))),
            (true, t) => Ok(Some(t - 1)),
        })
        .collect::<Result<_, _>>()?;
    tape.cross_entropy(logits, &cols)
}

/// Distills transition pseudo-labels into the item embeddings: for every
/// item of `subset` with outgoing transitions, cross-entropy between the
/// teacher row and `softmax(dropout(e_i) · Eᵀ / tau)`. Items without
/// transitions are skipped; an empty selection yields a zero constant.
#[allow(clippy::too_many_arguments)]
pub fn kd_loss(
    tape: &mut Tape,
    item_embeddings: Var,
    graph: &TransitionGraph,
    tau: f64,
    subset: &[usize],
    dropout: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<Var, KernelError> {
    let item_count = tape.value(item_embeddings).rows() - 1;
    if graph.item_count() != item_count {
        return Err(KernelError::Dimension(format!(
            "graph over {} items for an embedding table of {item_count} items",
            graph.item_count()
        )));
    }
    let mut sources = Vec::new();
    let mut teacher = Vec::new();
    for &i in subset {
        match pseudo_label_row(graph, i, tau) {
            Ok(row) => {
                sources.push(i);
                teacher.extend(row.probabilities);
            }
            Err(crate::transition::TransitionError::NoTransitionRow(_)) => {}
            Err(e) => return Err(KernelError::Parameter(e.to_string())),
        }
    }
    if sources.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let teacher = Tensor::new(vec![sources.len(), item_count], teacher)?;
    let src = tape.gather_rows(item_embeddings, &sources, Some(0))?;
    let src = tape.dropout(src, dropout, rng, training)?;
    let logits = super::forward::item_logits(tape, src, item_embeddings)?;
    tape.soft_cross_entropy(logits, &teacher, tau)
}

/// `‖Θ‖²` over the bound parameters, excluding the padding embedding row.
pub fn l2_penalty_var(tape: &mut Tape, bound: &BoundParams) -> Result<Var, KernelError> {
    let mut total = tape.sum_squares(bound.item_embeddings, 1);
    for v in bound.vars().into_iter().skip(1) {
        let s = tape.sum_squares(v, 0);
        total = tape.add(total, s)?;
    }
    Ok(total)
}

/// Sum of squared entries of the active parameters, padding row excluded.
pub fn l2_penalty(params: &ModelParams, config: &ModelConfig) -> f64 {
    let tensors = params.active_tensors(config);
    let emb = &tensors[0];
    let mut total: f64 = emb.data()[emb.cols()..].iter().map(|v| v * v).sum();
    for t in &tensors[1..] {
        total += t.sum_squares();
    }
    total
}

/// `rec + kd_weight · kd + l2_weight · l2`.
pub fn total_loss(
    tape: &mut Tape,
    rec: Var,
    kd: Var,
    l2: Var,
    kd_weight: f64,
    l2_weight: f64,
) -> Result<Var, KernelError> {
    if kd_weight < 0.0 || l2_weight < 0.0 {
        return Err(KernelError::Parameter("loss weights must be non-negative".into()));
    }
    let kd = tape.scale(kd, kd_weight);
    let l2 = tape.scale(l2, l2_weight);
    let partial = tape.add(rec, kd)?;
    tape.add(partial, l2)
}
