//! Graph-based comparators to distillation: a weighted neighbor-distance
//! regularizer and normalized-adjacency embedding smoothing.

use std::rc::Rc;

use crate::kernel::{KernelError, SparseMatrix, Tape, Tensor, Var};
use crate::transition::TransitionGraph;

/// The `neighbor_k` most frequent successors of every item as
/// `(source, target, weight)`, ties broken by ascending target id.
pub fn grareg_edges(graph: &TransitionGraph, neighbor_k: usize) -> Vec<(usize, usize, f64)> {
    let mut edges = Vec::new();
    for i in 1..=graph.item_count() {
        let Some(row) = graph.row(i) else { continue };
        let mut targets: Vec<(usize, u32)> = row.iter().map(|(&j, &c)| (j, c)).collect();
        targets.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        edges.extend(targets.into_iter().take(neighbor_k).map(|(j, c)| (i, j, c as f64)));
    }
    edges
}

/// `Σ w_ij ‖e_i − e_j‖²` over the top-`neighbor_k` transition edges.
pub fn grareg_loss(
    tape: &mut Tape,
    item_embeddings: Var,
    graph: &TransitionGraph,
    neighbor_k: usize,
) -> Result<Var, KernelError> {
    if neighbor_k < 1 {
        return Err(KernelError::Parameter("neighbor_k must be at least 1".into()));
    }
    let edges = grareg_edges(graph, neighbor_k);
    if edges.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let src: Vec<usize> = edges.iter().map(|e| e.0).collect();
    let dst: Vec<usize> = edges.iter().map(|e| e.1).collect();
    let weights: Vec<f64> = edges.iter().map(|e| e.2).collect();
    let a = tape.gather_rows(item_embeddings, &src, Some(0))?;
    let b = tape.gather_rows(item_embeddings, &dst, Some(0))?;
    let diff = tape.sub(a, b)?;
    tape.weighted_row_squares(diff, &weights)
}

/// `D̃^{-1/2} (S + I) D̃^{-1/2}` over ids `0..=item_count`, where `S = A + Aᵀ`
/// symmetrizes the transition counts and `D̃` is the degree of `S + I`.
/// Row 0 (padding) only carries its self-loop.
pub fn ges_matrix(graph: &TransitionGraph) -> SparseMatrix {
    let n = graph.item_count() + 1;
    let mut sym: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); n];
    for i in 0..n {
        *sym[i].entry(i).or_insert(0.0) += 1.0;
    }
    for (s, t, c) in graph.edges() {
        *sym[s].entry(t).or_insert(0.0) += c as f64;
        *sym[t].entry(s).or_insert(0.0) += c as f64;
    }
    let inv_sqrt_deg: Vec<f64> = sym.iter().map(|r| 1.0 / r.values().sum::<f64>().sqrt()).collect();
    let rows = sym
        .iter()
        .enumerate()
        .map(|(i, r)| r.iter().map(|(&j, &w)| (j, inv_sqrt_deg[i] * w * inv_sqrt_deg[j])).collect())
        .collect();
    SparseMatrix { n_rows: n, n_cols: n, rows }
}

/// `layers` rounds of normalized propagation of the embedding table.
pub fn ges_smooth(item_embeddings: &Tensor, graph: &TransitionGraph, layers: usize) -> Tensor {
    let matrix = ges_matrix(graph);
    let d = item_embeddings.cols();
    let mut data = item_embeddings.data().to_vec();
    for _ in 0..layers {
        data = matrix.mul_dense(&data, d);
    }
    Tensor::new(item_embeddings.shape().to_vec(), data).expect("shape preserved")
}

/// Differentiable counterpart of [`ges_smooth`] with a prebuilt matrix.
pub fn ges_smooth_var(
    tape: &mut Tape,
    item_embeddings: Var,
    matrix: &Rc<SparseMatrix>,
    layers: usize,
) -> Result<Var, KernelError> {
    let mut x = item_embeddings;
    for _ in 0..layers {
        x = tape.sparse_matmul(Rc::clone(matrix), x)?;
    }
    Ok(x)
}
