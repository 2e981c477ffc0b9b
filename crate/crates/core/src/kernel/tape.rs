//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to run its vector-Jacobian product. Nodes are appended in evaluation
//! order, so the tape is already topologically sorted and `backward` replays
//! it from the loss towards the leaves.

use std::rc::Rc;

use rand::Rng as _;

use super::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, Tensor};
use super::{KernelError, Rng};

/// Handle to a differentiable tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    /// Position of the node on its tape.
    pub fn tape_id(self) -> usize {
        self.0
    }
}

/// Constant sparse matrix stored by rows, used for graph propagation.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseMatrix {
    pub fn mul_dense(&self, x: &[f64], cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_rows * cols];
        for (r, entries) in self.rows.iter().enumerate() {
            let out_row = &mut out[r * cols..(r + 1) * cols];
            for &(c, w) in entries {
                for (o, v) in out_row.iter_mut().zip(&x[c * cols..(c + 1) * cols]) {
                    *o += w * v;
                }
            }
        }
        out
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddRowVector(Var, Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchedMatMul { a: Var, b: Var, batch: usize, trans_b: bool },
    Gather { table: Var, ids: Vec<usize>, frozen_row: Option<usize> },
    MaskFill { x: Var, keep: Rc<[bool]> },
    Softmax { x: Var, tau: f64 },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Relu(Var),
    Dropout { x: Var, multiplier: Vec<f64> },
    Sum(Var),
    SumSquares { x: Var, skip_rows: usize },
    WeightedRowSquares { x: Var, weights: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64> },
    SoftCrossEntropy { logits: Var, teacher: Vec<f64>, tau: f64, probs: Vec<f64> },
    SparseMatMul { matrix: Rc<SparseMatrix>, x: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Single-threaded; one backward pass per tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf; receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient slot of `v` after `backward`, or `None` when nothing flowed into it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as a tensor, zero-filled when absent.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.value(v).shape().to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape matches value"),
            None => Tensor::zeros(shape),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), KernelError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(KernelError::Dimension(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize), KernelError> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(KernelError::Dimension(format!("{what}: expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.same_shape(a, b, "sub")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row_vector(&mut self, x: Var, bias: Var) -> Result<Var, KernelError> {
        let (m, n) = self.matrix_dims(x, "add_row_vector")?;
        if self.value(bias).numel() != n {
            return Err(KernelError::Dimension(format!(
                "add_row_vector: bias of shape {:?} does not match {n} columns",
                self.value(bias).shape()
            )));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddRowVector(x, bias), rg))
    }

    /// `a · b`, or `a · bᵀ` when `trans_b` is set.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, KernelError> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (br, bc) = self.matrix_dims(b, "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(KernelError::Dimension(format!(
                "matmul: shapes {:?} and {:?}{} have mismatched inner extents",
                self.value(a).shape(),
                self.value(b).shape(),
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        if trans_b {
            gemm_nt(ad, bd, &mut out, m, k, n);
        } else {
            gemm_nn(ad, bd, &mut out, m, k, n);
        }
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.matmul_ext(a, b, false)
    }

    /// Per-block product of two row-stacked batches. `a` is `(batch·m)×k`,
    /// `b` is `(batch·k)×n` (or `(batch·n)×k` with `trans_b`).
    pub fn batched_matmul(&mut self, a: Var, b: Var, batch: usize, trans_b: bool) -> Result<Var, KernelError> {
        let (ar, k) = self.matrix_dims(a, "batched_matmul")?;
        let (br, bc) = self.matrix_dims(b, "batched_matmul")?;
        if batch == 0 || ar % batch != 0 || br % batch != 0 {
            return Err(KernelError::Dimension(format!(
                "batched_matmul: {ar} and {br} rows do not split into {batch} blocks"
            )));
        }
        let m = ar / batch;
        let (kb, n) = if trans_b { (bc, br / batch) } else { (br / batch, bc) };
        if k != kb {
            return Err(KernelError::Dimension(format!(
                "batched_matmul: shapes {:?} and {:?} have mismatched inner extents",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let b_block = br / batch * bc;
        for blk in 0..batch {
            let a_s = &ad[blk * m * k..(blk + 1) * m * k];
            let b_s = &bd[blk * b_block..(blk + 1) * b_block];
            let o_s = &mut out[blk * m * n..(blk + 1) * m * n];
            if trans_b {
                gemm_nt(a_s, b_s, o_s, m, k, n);
            } else {
                gemm_nn(a_s, b_s, o_s, m, k, n);
            }
        }
        let value = Tensor::new(vec![batch * m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::BatchedMatMul { a, b, batch, trans_b }, rg))
    }

    /// Row lookup: output row `r` is `table[ids[r]]`. Gradients are scattered
    /// back, except into `frozen_row` which never receives one.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize], frozen_row: Option<usize>) -> Result<Var, KernelError> {
        let (rows, cols) = self.matrix_dims(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(KernelError::Dimension("gather_rows: empty id list".into()));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(KernelError::Index(format!("row {id} out of range for table with {rows} rows")));
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), cols], data)?;
        let rg = self.rg(table);
        Ok(self.push(value, Op::Gather { table, ids: ids.to_vec(), frozen_row }, rg))
    }

    /// Keeps entries where `keep` is true and replaces the rest with `fill`.
    pub fn mask_fill(&mut self, x: Var, keep: Rc<[bool]>, fill: f64) -> Result<Var, KernelError> {
        if keep.len() != self.value(x).numel() {
            return Err(KernelError::Dimension(format!(
                "mask_fill: mask of length {} for shape {:?}",
                keep.len(),
                self.value(x).shape()
            )));
        }
        let data = self.value(x).data().iter().zip(keep.iter()).map(|(&v, &k)| if k { v } else { fill }).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaskFill { x, keep }, rg))
    }

    /// Row-wise softmax of `x / tau` with max subtraction.
    pub fn softmax_rows(&mut self, x: Var, tau: f64) -> Result<Var, KernelError> {
        check_temperature(tau)?;
        let (m, n) = self.matrix_dims(x, "softmax_rows")?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row, tau);
        }
        let value = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x, tau }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, KernelError> {
        if !(eps > 0.0) {
            return Err(KernelError::Parameter(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (m, d) = self.matrix_dims(x, "layer_norm")?;
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(KernelError::Dimension(format!(
                "layer_norm: gain {:?} / bias {:?} do not match width {d}",
                self.value(gain).shape(),
                self.value(bias).shape()
            )));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = self.value(x).data().to_vec();
        let mut inv_std = Vec::with_capacity(m);
        let mut out = vec![0.0; m * d];
        for (row, out_row) in xhat.chunks_mut(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for ((v, o), (gv, bv)) in row.iter_mut().zip(out_row.iter_mut()).zip(g.iter().zip(b)) {
                *v = (*v - mean) * is;
                *o = *v * gv + bv;
            }
        }
        let value = Tensor::new(vec![m, d], out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    /// Inverted dropout. Identity (the same handle) when not training or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng, training: bool) -> Result<Var, KernelError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(KernelError::Parameter(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let n = self.value(x).numel();
        let multiplier: Vec<f64> =
            (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep_scale }).collect();
        let data = self.value(x).data().iter().zip(&multiplier).map(|(v, m)| v * m).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Dropout { x, multiplier }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Sum of squared entries, ignoring the first `skip_rows` rows.
    pub fn sum_squares(&mut self, x: Var, skip_rows: usize) -> Var {
        let t = self.value(x);
        let start = (skip_rows * t.cols()).min(t.numel());
        let s = t.data()[start..].iter().map(|v| v * v).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumSquares { x, skip_rows }, rg)
    }

    /// `Σ_r weights[r] · ‖x_r‖²`.
    pub fn weighted_row_squares(&mut self, x: Var, weights: &[f64]) -> Result<Var, KernelError> {
        let (m, d) = self.matrix_dims(x, "weighted_row_squares")?;
        if weights.len() != m {
            return Err(KernelError::Dimension(format!("{} weights for {m} rows", weights.len())));
        }
        let s = self.value(x).data().chunks(d).zip(weights).map(|(r, w)| w * dot(r, r)).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedRowSquares { x, weights: weights.to_vec() }, rg))
    }

    /// Summed cross-entropy `−Σ_r log softmax(logits_r)[target_r]` over rows
    /// with a target; rows with `None` contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var, KernelError> {
        let (m, n) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(KernelError::Dimension(format!("{} targets for {m} rows", targets.len())));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, target) in probs.chunks_mut(n).zip(targets) {
            let Some(t) = *target else { continue };
            if t >= n {
                return Err(KernelError::Index(format!("target column {t} out of range for {n} classes")));
            }
            let lse = log_sum_exp(row, 1.0);
            loss += lse - row[t];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, rg))
    }

    /// Summed soft-label cross-entropy `−Σ_r teacher_r · log softmax(logits_r / tau)`.
    pub fn soft_cross_entropy(&mut self, logits: Var, teacher: &Tensor, tau: f64) -> Result<Var, KernelError> {
        check_temperature(tau)?;
        let (_, n) = self.matrix_dims(logits, "soft_cross_entropy")?;
        if teacher.shape() != self.value(logits).shape() {
            return Err(KernelError::Dimension(format!(
                "soft_cross_entropy: teacher {:?} vs logits {:?}",
                teacher.shape(),
                self.value(logits).shape()
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, t_row) in probs.chunks_mut(n).zip(teacher.data().chunks(n)) {
            let lse = log_sum_exp(row, tau);
            for (v, t) in row.iter_mut().zip(t_row) {
                let log_p = *v / tau - lse;
                loss -= t * log_p;
                *v = log_p.exp();
            }
        }
        let rg = self.rg(logits);
        let op = Op::SoftCrossEntropy { logits, teacher: teacher.data().to_vec(), tau, probs };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Constant sparse matrix times `x`.
    pub fn sparse_matmul(&mut self, matrix: Rc<SparseMatrix>, x: Var) -> Result<Var, KernelError> {
        let (m, d) = self.matrix_dims(x, "sparse_matmul")?;
        if matrix.n_cols != m {
            return Err(KernelError::Dimension(format!(
                "sparse_matmul: {}×{} matrix against {m} rows",
                matrix.n_rows, matrix.n_cols
            )));
        }
        let out = matrix.mul_dense(self.value(x).data(), d);
        let value = Tensor::new(vec![matrix.n_rows, d], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SparseMatMul { matrix, x }, rg))
    }

    /// Propagates gradients from the scalar `loss` to every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<(), KernelError> {
        if !self.value(loss).is_scalar() {
            return Err(KernelError::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    axpy(gb, g, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    axpy(gb, g, -1.0);
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    axpy(ga, g, *f);
                }
            }
            Op::AddRowVector(x, bias) => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    axpy(gx, g, 1.0);
                }
                let n = nodes[bias.0].value.numel();
                if let Some(gb) = slot(grads, nodes, *bias) {
                    for row in g.chunks(n) {
                        axpy(gb, row, 1.0);
                    }
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (av.rows(), av.cols());
                let n = out.cols();
                if let Some(ga) = slot(grads, nodes, *a) {
                    if *trans_b {
                        // b is n×k
                        gemm_nn(g, bv.data(), ga, m, n, k);
                    } else {
                        // b is k×n
                        gemm_nt(g, bv.data(), ga, m, n, k);
                    }
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    if *trans_b {
                        gemm_tn(g, av.data(), gb, m, n, k);
                    } else {
                        gemm_tn(av.data(), g, gb, m, k, n);
                    }
                }
            }
            Op::BatchedMatMul { a, b, batch, trans_b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (av.rows() / batch, av.cols());
                let n = out.cols();
                let b_block = bv.numel() / batch;
                if let Some(ga) = slot(grads, nodes, *a) {
                    for blk in 0..*batch {
                        let gs = &g[blk * m * n..(blk + 1) * m * n];
                        let bs = &bv.data()[blk * b_block..(blk + 1) * b_block];
                        let gas = &mut ga[blk * m * k..(blk + 1) * m * k];
                        if *trans_b {
                            gemm_nn(gs, bs, gas, m, n, k);
                        } else {
                            gemm_nt(gs, bs, gas, m, n, k);
                        }
                    }
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    for blk in 0..*batch {
                        let gs = &g[blk * m * n..(blk + 1) * m * n];
                        let as_ = &av.data()[blk * m * k..(blk + 1) * m * k];
                        let gbs = &mut gb[blk * b_block..(blk + 1) * b_block];
                        if *trans_b {
                            gemm_tn(gs, as_, gbs, m, n, k);
                        } else {
                            gemm_tn(as_, gs, gbs, m, k, n);
                        }
                    }
                }
            }
            Op::Gather { table, ids, frozen_row } => {
                let cols = out.cols();
                if let Some(gt) = slot(grads, nodes, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        if Some(id) == *frozen_row {
                            continue;
                        }
                        axpy(&mut gt[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols], 1.0);
                    }
                }
            }
            Op::MaskFill { x, keep } => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    for ((d, s), &k) in gx.iter_mut().zip(g).zip(keep.iter()) {
                        if k {
                            *d += s;
                        }
                    }
                }
            }
            Op::Softmax { x, tau } => {
                let n = out.cols();
                if let Some(gx) = slot(grads, nodes, *x) {
                    for ((y, dy), dx) in out.data().chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                        let inner = dot(y, dy);
                        for ((d, yv), dyv) in dx.iter_mut().zip(y).zip(dy) {
                            *d += yv * (dyv - inner) / tau;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = out.cols();
                let gv = nodes[gain.0].value.data().to_vec();
                if let Some(gg) = slot(grads, nodes, *gain) {
                    for (dy, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((acc, a), b) in gg.iter_mut().zip(dy).zip(xh) {
                            *acc += a * b;
                        }
                    }
                }
                if let Some(gb) = slot(grads, nodes, *bias) {
                    for dy in g.chunks(d) {
                        axpy(gb, dy, 1.0);
                    }
                }
                if let Some(gx) = slot(grads, nodes, *x) {
                    let mut dxhat = vec![0.0; d];
                    for (r, (dy, xh)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for ((o, a), b) in dxhat.iter_mut().zip(dy).zip(&gv) {
                            *o = a * b;
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dot(&dxhat, xh) / d as f64;
                        let is = inv_std[r];
                        for ((o, dh), xv) in gx[r * d..(r + 1) * d].iter_mut().zip(&dxhat).zip(xh) {
                            *o += is * (dh - mean_d - xv * mean_dx);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    for ((d, s), y) in gx.iter_mut().zip(g).zip(out.data()) {
                        if *y > 0.0 {
                            *d += s;
                        }
                    }
                }
            }
            Op::Dropout { x, multiplier } => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    for ((d, s), m) in gx.iter_mut().zip(g).zip(multiplier) {
                        *d += s * m;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::SumSquares { x, skip_rows } => {
                let xv = &nodes[x.0].value;
                let start = (skip_rows * xv.cols()).min(xv.numel());
                if let Some(gx) = slot(grads, nodes, *x) {
                    for (d, v) in gx[start..].iter_mut().zip(&xv.data()[start..]) {
                        *d += 2.0 * g[0] * v;
                    }
                }
            }
            Op::WeightedRowSquares { x, weights } => {
                let xv = &nodes[x.0].value;
                let d = xv.cols();
                if let Some(gx) = slot(grads, nodes, *x) {
                    for ((dst, src), w) in gx.chunks_mut(d).zip(xv.data().chunks(d)).zip(weights) {
                        axpy(dst, src, 2.0 * g[0] * w);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = nodes[logits.0].value.cols();
                if let Some(gl) = slot(grads, nodes, *logits) {
                    for ((dst, p), t) in gl.chunks_mut(n).zip(probs.chunks(n)).zip(targets) {
                        let Some(t) = *t else { continue };
                        axpy(dst, p, g[0]);
                        dst[t] -= g[0];
                    }
                }
            }
            Op::SoftCrossEntropy { logits, teacher, tau, probs } => {
                let n = nodes[logits.0].value.cols();
                if let Some(gl) = slot(grads, nodes, *logits) {
                    for ((dst, p), t) in gl.chunks_mut(n).zip(probs.chunks(n)).zip(teacher.chunks(n)) {
                        let mass: f64 = t.iter().sum();
                        for ((d, pv), tv) in dst.iter_mut().zip(p).zip(t) {
                            *d += g[0] * (pv * mass - tv) / tau;
                        }
                    }
                }
            }
            Op::SparseMatMul { matrix, x } => {
                let d = out.cols();
                if let Some(gx) = slot(grads, nodes, *x) {
                    for (r, entries) in matrix.rows.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        for &(c, w) in entries {
                            axpy(&mut gx[c * d..(c + 1) * d], gr, w);
                        }
                    }
                }
            }
        }
    }
}

/// Gradient buffer of `v`, allocated on first use; `None` for constants.
fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn check_temperature(tau: f64) -> Result<(), KernelError> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(KernelError::Parameter(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// `log Σ exp(x_j / tau)`, stabilized by the row maximum.
pub fn log_sum_exp(row: &[f64], tau: f64) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max) / tau;
    let s: f64 = row.iter().map(|v| (v / tau - max).exp()).sum();
    max + s.ln()
}

/// Softmax of `row / tau` in place.
pub fn softmax_in_place(row: &mut [f64], tau: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / tau).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
