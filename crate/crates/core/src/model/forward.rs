use std::rc::Rc;

use super::{BlockParams, BranchParams, ModelConfig, ModelParams, LAYER_NORM_EPS, MASKED_LOGIT};
use crate::dataio::{pad_left, Batch};
use crate::kernel::{seeded_rng, KernelError, Rng, Tape, Tensor, Var};

/// Item ids of a batch laid out as `batch × max_len`, 0 marking padding.
#[derive(Clone, Debug)]
pub struct SeqBatch {
    pub batch: usize,
    pub max_len: usize,
    pub items: Vec<usize>,
}

impl SeqBatch {
    pub fn new(batch: usize, max_len: usize, items: Vec<usize>) -> Result<Self, KernelError> {
        if batch == 0 || max_len == 0 || items.len() != batch * max_len {
            return Err(KernelError::Dimension(format!(
                "{} item ids for a {batch}×{max_len} batch",
                items.len()
            )));
        }
        Ok(Self { batch, max_len, items })
    }

    pub fn from_batch(b: &Batch) -> Self {
        Self { batch: b.batch_size, max_len: b.max_len, items: b.item_matrix.clone() }
    }

    /// Left-pads each history to `max_len`, keeping its most recent items.
    pub fn from_histories<S: AsRef<[usize]>>(histories: &[S], max_len: usize) -> Result<Self, KernelError> {
        let items = histories.iter().flat_map(|h| pad_left(h.as_ref(), max_len)).collect();
        Self::new(histories.len(), max_len, items)
    }

    pub fn is_real(&self, row: usize, pos: usize) -> bool {
        self.items[row * self.max_len + pos] != 0
    }

    /// Attention visibility for every (query, key) pair: key at or before
    /// the query and not padding. Laid out `(batch·n) × n`.
    pub fn attention_keep(&self) -> Rc<[bool]> {
        let n = self.max_len;
        let mut keep = Vec::with_capacity(self.batch * n * n);
        for b in 0..self.batch {
            for t in 0..n {
                for s in 0..n {
                    keep.push(s <= t && self.is_real(b, s));
                }
            }
        }
        keep.into()
    }
}

/// Row-stacked per-sequence `n × n` matrices whose row `t` averages the real
/// positions among the last `window` positions up to `t`. A padding position
/// with no real item in range keeps its own row.
pub fn pooling_matrix(seq: &SeqBatch, window: usize) -> Tensor {
    let n = seq.max_len;
    let mut m = Tensor::zeros(vec![seq.batch * n, n]);
    for b in 0..seq.batch {
        for t in 0..n {
            let lo = (t + 1).saturating_sub(window);
            let real: Vec<usize> = (lo..=t).filter(|&s| seq.is_real(b, s)).collect();
            if real.is_empty() {
                m.row_mut(b * n + t)[t] = 1.0;
                continue;
            }
            let w = 1.0 / real.len() as f64;
            let row = m.row_mut(b * n + t);
            for s in real {
                row[s] = w;
            }
        }
    }
    m
}

/// Tape handles of one block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BoundBlock {
    pub w_query: Var,
    pub w_key: Var,
    pub w_value: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub attn_norm_gain: Var,
    pub attn_norm_bias: Var,
    pub ffn_norm_gain: Var,
    pub ffn_norm_bias: Var,
}

impl BoundBlock {
    fn bind(tape: &mut Tape, p: &BlockParams, trainable: bool) -> Self {
        let mut put = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        Self {
            w_query: put(&p.w_query),
            w_key: put(&p.w_key),
            w_value: put(&p.w_value),
            ffn_w1: put(&p.ffn_w1),
            ffn_b1: put(&p.ffn_b1),
            ffn_w2: put(&p.ffn_w2),
            ffn_b2: put(&p.ffn_b2),
            attn_norm_gain: put(&p.attn_norm_gain),
            attn_norm_bias: put(&p.attn_norm_bias),
            ffn_norm_gain: put(&p.ffn_norm_gain),
            ffn_norm_bias: put(&p.ffn_norm_bias),
        }
    }

    fn vars(&self) -> [Var; 11] {
        [
            self.w_query,
            self.w_key,
            self.w_value,
            self.ffn_w1,
            self.ffn_b1,
            self.ffn_w2,
            self.ffn_b2,
            self.attn_norm_gain,
            self.attn_norm_bias,
            self.ffn_norm_gain,
            self.ffn_norm_bias,
        ]
    }
}

/// Tape handles of the parameters active under a config.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub item_embeddings: Var,
    pub positional_embeddings: Var,
    pub short: Option<Vec<BoundBlock>>,
    pub long: Option<Vec<BoundBlock>>,
}

impl BoundParams {
    /// Handles in the order of [`ModelParams::active_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.item_embeddings, self.positional_embeddings];
        for branch in [&self.short, &self.long].into_iter().flatten() {
            out.extend(branch.iter().flat_map(BoundBlock::vars));
        }
        out
    }
}

/// Records the active parameters on `tape`, as trainable leaves or constants.
pub fn bind(tape: &mut Tape, params: &ModelParams, config: &ModelConfig, trainable: bool) -> BoundParams {
    let item_embeddings =
        if trainable { tape.param(params.item_embeddings.clone()) } else { tape.constant(params.item_embeddings.clone()) };
    let positional_embeddings = if trainable {
        tape.param(params.positional_embeddings.clone())
    } else {
        tape.constant(params.positional_embeddings.clone())
    };
    let mut bind_branch =
        |b: &BranchParams| b.blocks.iter().map(|blk| BoundBlock::bind(tape, blk, trainable)).collect::<Vec<_>>();
    let short = config.short_active().then(|| bind_branch(&params.short_branch));
    let long = if config.long_active() { params.long_branch.as_ref().map(&mut bind_branch) } else { None };
    BoundParams { item_embeddings, positional_embeddings, short, long }
}

/// `ê_t = e_t + p_t` for every position, as a `(batch·n) × d` matrix.
pub fn embed_sequence(tape: &mut Tape, bound: &BoundParams, seq: &SeqBatch) -> Result<Var, KernelError> {
    let rows = tape.value(bound.positional_embeddings).rows();
    if rows < seq.max_len {
        return Err(KernelError::Dimension(format!(
            "positional table has {rows} rows for sequences of length {}",
            seq.max_len
        )));
    }
    let items = tape.gather_rows(bound.item_embeddings, &seq.items, Some(0))?;
    let positions: Vec<usize> = (0..seq.batch).flat_map(|_| 0..seq.max_len).collect();
    let pos = tape.gather_rows(bound.positional_embeddings, &positions, None)?;
    tape.add(items, pos)
}

/// Mean of the embeddings of the last `window` real items at every position.
pub fn long_query_pool(tape: &mut Tape, embedded: Var, seq: &SeqBatch, window: usize) -> Result<Var, KernelError> {
    if window < 1 {
        return Err(KernelError::Parameter("pooling window must be at least 1".into()));
    }
    let pool = tape.constant(pooling_matrix(seq, window));
    tape.batched_matmul(pool, embedded, seq.batch, false)
}

/// Scaled dot-product attention with causal and padding masks. Queries come
/// from `query_input`, keys and values from `x`.
pub fn causal_attention(
    tape: &mut Tape,
    query_input: Var,
    x: Var,
    w_query: Var,
    w_key: Var,
    w_value: Var,
    seq: &SeqBatch,
) -> Result<Var, KernelError> {
    let d = tape.value(x).cols();
    let q = tape.matmul(query_input, w_query)?;
    let k = tape.matmul(x, w_key)?;
    let v = tape.matmul(x, w_value)?;
    let logits = tape.batched_matmul(q, k, seq.batch, true)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let logits = tape.mask_fill(logits, seq.attention_keep(), MASKED_LOGIT)?;
    let weights = tape.softmax_rows(logits, 1.0)?;
    tape.batched_matmul(weights, v, seq.batch, false)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuerySource {
    /// Each position queries with its own representation.
    Own,
    /// Each position queries with the mean of its last `L` representations.
    Pooled(usize),
}

/// A stack of post-norm transformer blocks over `(batch·n) × d` inputs.
#[allow(clippy::too_many_arguments)]
pub fn branch_forward(
    tape: &mut Tape,
    embedded: Var,
    seq: &SeqBatch,
    blocks: &[BoundBlock],
    query: QuerySource,
    dropout: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<Var, KernelError> {
    let mut x = embedded;
    for blk in blocks {
        let query_input = match query {
            QuerySource::Own => x,
            QuerySource::Pooled(window) => long_query_pool(tape, x, seq, window)?,
        };
        let attn = causal_attention(tape, query_input, x, blk.w_query, blk.w_key, blk.w_value, seq)?;
        let attn = tape.dropout(attn, dropout, rng, training)?;
        let h = tape.add(x, attn)?;
        let h = tape.layer_norm(h, blk.attn_norm_gain, blk.attn_norm_bias, LAYER_NORM_EPS)?;
        let f = tape.matmul(h, blk.ffn_w1)?;
        let f = tape.add_row_vector(f, blk.ffn_b1)?;
        let f = tape.relu(f);
        let f = tape.matmul(f, blk.ffn_w2)?;
        let f = tape.add_row_vector(f, blk.ffn_b2)?;
        let f = tape.dropout(f, dropout, rng, training)?;
        let out = tape.add(h, f)?;
        x = tape.layer_norm(out, blk.ffn_norm_gain, blk.ffn_norm_bias, LAYER_NORM_EPS)?;
    }
    Ok(x)
}

/// One dropout stream per branch plus one for distillation. Skipping a branch
/// leaves the other streams untouched.
#[derive(Clone, Debug)]
pub struct DropoutRngs {
    pub short: Rng,
    pub long: Rng,
    pub distill: Rng,
}

impl DropoutRngs {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            short: seeded_rng(seed.wrapping_add(101)),
            long: seeded_rng(seed.wrapping_add(202)),
            distill: seeded_rng(seed.wrapping_add(303)),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// Final representations, `(batch·n) × d`.
    pub seq_reps: Var,
    pub short: Option<Var>,
    pub long: Option<Var>,
}

/// Runs the active branches on shared embeddings and mixes them with
/// `alpha · short + (1 − alpha) · long`.
pub fn mqsa_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &ModelConfig,
    seq: &SeqBatch,
    rngs: &mut DropoutRngs,
    training: bool,
) -> Result<ForwardOutput, KernelError> {
    let embedded = embed_sequence(tape, bound, seq)?;
    let short = match &bound.short {
        Some(blocks) => Some(branch_forward(
            tape,
            embedded,
            seq,
            blocks,
            QuerySource::Own,
            config.dropout,
            &mut rngs.short,
            training,
        )?),
        None => None,
    };
    let long = match &bound.long {
        Some(blocks) => Some(branch_forward(
            tape,
            embedded,
            seq,
            blocks,
            QuerySource::Pooled(config.long_query_len),
            config.dropout,
            &mut rngs.long,
            training,
        )?),
        None => None,
    };
    let seq_reps = match (short, long) {
        (Some(s), Some(l)) => {
            let s = tape.scale(s, config.alpha);
            let l = tape.scale(l, 1.0 - config.alpha);
            tape.add(s, l)?
        }
        (Some(s), None) => s,
        (None, Some(l)) => l,
        (None, None) => return Err(KernelError::Contract("no active branch".into())),
    };
    Ok(ForwardOutput { seq_reps, short, long })
}

/// Scores of `reps` (rows) against items `1..=item_count`; column `j - 1` is item `j`.
pub fn item_logits(tape: &mut Tape, reps: Var, item_embeddings: Var) -> Result<Var, KernelError> {
    let items: Vec<usize> = (1..tape.value(item_embeddings).rows()).collect();
    let table = tape.gather_rows(item_embeddings, &items, None)?;
    tape.matmul_ext(reps, table, true)
}

/// Dot product of one representation with every real item embedding.
pub fn score_items(seq_rep: &[f64], params: &ModelParams) -> Vec<f64> {
    (1..=params.item_count)
        .map(|j| params.item_embeddings.row(j).iter().zip(seq_rep).map(|(a, b)| a * b).sum())
        .collect()
}
