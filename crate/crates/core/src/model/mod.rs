//! The sequence model: shared item/positional embeddings feeding a
//! short-query and a long-query causal self-attention branch, whose outputs
//! are mixed by `alpha` and scored against the item embedding table.

mod checkpoint;
mod forward;
mod graph_reg;
mod loss;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError};
pub use forward::{
    bind, branch_forward, causal_attention, embed_sequence, item_logits, long_query_pool, mqsa_forward,
    pooling_matrix, score_items, BoundBlock, BoundParams, DropoutRngs, ForwardOutput, QuerySource, SeqBatch,
};
pub use graph_reg::{ges_matrix, ges_smooth, ges_smooth_var, grareg_edges, grareg_loss};
pub use loss::{kd_loss, l2_penalty, l2_penalty_var, rec_loss, total_loss};

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::kernel::{KernelError, Rng, Tensor};

/// Epsilon inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-8;
/// Logit assigned to attention entries a query may not see.
pub const MASKED_LOGIT: f64 = -1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Embedding size.
    pub dim: usize,
    /// Maximum sequence length fed to the model.
    pub max_len: usize,
    /// Transformer blocks per branch.
    pub num_blocks: usize,
    /// Window of recent items mean-pooled into the long-branch query.
    pub long_query_len: usize,
    /// Weight of the short branch; the long branch gets `1 - alpha`.
    pub alpha: f64,
    pub dropout: f64,
    /// Distillation temperature.
    pub tau: f64,
    /// Build the model without a long branch at all.
    pub short_only: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            max_len: 50,
            num_blocks: 2,
            long_query_len: 3,
            alpha: 0.5,
            dropout: 0.5,
            tau: 0.1,
            short_only: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), KernelError> {
        let positive = [
            ("dim", self.dim),
            ("max_len", self.max_len),
            ("num_blocks", self.num_blocks),
            ("long_query_len", self.long_query_len),
        ];
        for (name, v) in positive {
            if v < 1 {
                return Err(KernelError::Parameter(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(KernelError::Parameter(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(KernelError::Parameter(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.tau > 0.0) {
            return Err(KernelError::Parameter(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    /// Whether the short branch contributes to the output.
    pub fn short_active(&self) -> bool {
        self.short_only || self.alpha > 0.0
    }

    /// Whether the long branch contributes to the output.
    pub fn long_active(&self) -> bool {
        !self.short_only && self.alpha < 1.0
    }
}

/// Parameters of one transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub w_query: Tensor,
    pub w_key: Tensor,
    pub w_value: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub attn_norm_gain: Tensor,
    pub attn_norm_bias: Tensor,
    pub ffn_norm_gain: Tensor,
    pub ffn_norm_bias: Tensor,
}

pub(crate) const BLOCK_TENSOR_NAMES: [&str; 11] = [
    "w_query",
    "w_key",
    "w_value",
    "ffn_w1",
    "ffn_b1",
    "ffn_w2",
    "ffn_b2",
    "attn_norm_gain",
    "attn_norm_bias",
    "ffn_norm_gain",
    "ffn_norm_bias",
];

impl BlockParams {
    fn init(dim: usize, rng: &mut Rng) -> Self {
        let mut mat = || truncated_normal(vec![dim, dim], rng);
        let (w_query, w_key, w_value, ffn_w1, ffn_w2) = (mat(), mat(), mat(), mat(), mat());
        Self {
            w_query,
            w_key,
            w_value,
            ffn_w1,
            ffn_b1: Tensor::zeros(vec![dim]),
            ffn_w2,
            ffn_b2: Tensor::zeros(vec![dim]),
            attn_norm_gain: Tensor::filled(vec![dim], 1.0),
            attn_norm_bias: Tensor::zeros(vec![dim]),
            ffn_norm_gain: Tensor::filled(vec![dim], 1.0),
            ffn_norm_bias: Tensor::zeros(vec![dim]),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 11] {
        [
            &self.w_query,
            &self.w_key,
            &self.w_value,
            &self.ffn_w1,
            &self.ffn_b1,
            &self.ffn_w2,
            &self.ffn_b2,
            &self.attn_norm_gain,
            &self.attn_norm_bias,
            &self.ffn_norm_gain,
            &self.ffn_norm_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 11] {
        [
            &mut self.w_query,
            &mut self.w_key,
            &mut self.w_value,
            &mut self.ffn_w1,
            &mut self.ffn_b1,
            &mut self.ffn_w2,
            &mut self.ffn_b2,
            &mut self.attn_norm_gain,
            &mut self.attn_norm_bias,
            &mut self.ffn_norm_gain,
            &mut self.ffn_norm_bias,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams {
    pub blocks: Vec<BlockParams>,
}

impl BranchParams {
    fn init(config: &ModelConfig, rng: &mut Rng) -> Self {
        Self { blocks: (0..config.num_blocks).map(|_| BlockParams::init(config.dim, rng)).collect() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub item_count: usize,
    /// `(item_count + 1) × dim`; row 0 is the padding item and stays zero.
    pub item_embeddings: Tensor,
    /// `max_len × dim`.
    pub positional_embeddings: Tensor,
    pub short_branch: BranchParams,
    pub long_branch: Option<BranchParams>,
}

impl ModelParams {
    /// Every tensor with a stable dotted name, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("item_embeddings".to_string(), &self.item_embeddings),
            ("positional_embeddings".to_string(), &self.positional_embeddings),
        ];
        let branches = [("short", Some(&self.short_branch)), ("long", self.long_branch.as_ref())];
        for (prefix, branch) in branches {
            let Some(branch) = branch else { continue };
            for (b, block) in branch.blocks.iter().enumerate() {
                for (name, t) in BLOCK_TENSOR_NAMES.iter().zip(block.tensors()) {
                    out.push((format!("{prefix}.{b}.{name}"), t));
                }
            }
        }
        out
    }

    /// Tensors that influence the output under `config`, in a fixed order:
    /// embeddings, then the short branch, then the long branch.
    pub fn active_tensors(&self, config: &ModelConfig) -> Vec<&Tensor> {
        let mut out = vec![&self.item_embeddings, &self.positional_embeddings];
        if config.short_active() {
            out.extend(self.short_branch.blocks.iter().flat_map(BlockParams::tensors));
        }
        if config.long_active() {
            if let Some(long) = &self.long_branch {
                out.extend(long.blocks.iter().flat_map(BlockParams::tensors));
            }
        }
        out
    }

    pub fn active_tensors_mut(&mut self, config: &ModelConfig) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.item_embeddings, &mut self.positional_embeddings];
        if config.short_active() {
            out.extend(self.short_branch.blocks.iter_mut().flat_map(BlockParams::tensors_mut));
        }
        if config.long_active() {
            if let Some(long) = &mut self.long_branch {
                out.extend(long.blocks.iter_mut().flat_map(BlockParams::tensors_mut));
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.item_embeddings.cols()
    }
}

fn truncated_normal(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = 0.02 * sample_truncated(rng);
    }
    t
}

fn sample_truncated(rng: &mut Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

/// Draws all weights from a normal with std 0.02 truncated at two standard
/// deviations. Biases start at zero and norm gains at one. The long branch
/// is drawn last, so a short-only model consumes a prefix of the same stream.
pub fn init_params(config: &ModelConfig, item_count: usize, rng: &mut Rng) -> Result<ModelParams, KernelError> {
    config.validate()?;
    if item_count < 1 {
        return Err(KernelError::Parameter("item_count must be at least 1".into()));
    }
    let mut item_embeddings = truncated_normal(vec![item_count + 1, config.dim], rng);
    item_embeddings.row_mut(0).fill(0.0);
    let positional_embeddings = truncated_normal(vec![config.max_len, config.dim], rng);
    let short_branch = BranchParams::init(config, rng);
    let long_branch = (!config.short_only).then(|| BranchParams::init(config, rng));
    Ok(ModelParams { item_count, item_embeddings, positional_embeddings, short_branch, long_branch })
}
