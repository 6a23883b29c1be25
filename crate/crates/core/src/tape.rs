//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every executed operation in topological order; each
//! node owns its forward value and, once [`Tape::backward`] has run, its
//! gradient. [`Var`] is a cheap handle into the tape. A tape is consumed by
//! `backward`: gradients stay readable, but recording further ops or calling
//! `backward` a second time is a contract error — training builds one fresh
//! tape per step.
//!
//! Every forward op validates its output: a NaN or infinity raises a numeric
//! error naming the op. Shape checks are explicit, with no broadcasting
//! beyond the bias-add pattern.

use crate::error::{Error, Result};
use crate::kernels::PeriodicKind;
use crate::rope::{block_transform, theta_schedule, BlockTransform, RopeConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    /// `[.., M, K] × [K, N]`, leading dims flattened into rows.
    MatMul { a: usize, b: usize },
    /// `[B, M, K] × [B, K, N]`.
    Bmm { a: usize, b: usize },
    /// Swap the last two dimensions.
    TransposeLast { a: usize },
    Add { a: usize, b: usize },
    /// `[.., N] + [N]` broadcast over the last dimension.
    AddBias { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: T },
    Relu { a: usize },
    /// Row softmax over the last dimension; the additive mask (if any) was
    /// applied before exponentiation and is not differentiated.
    SoftmaxRows { a: usize },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: T,
    },
    /// Gather rows of `table` by token id; output shape `ids_shape × [D]`.
    EmbeddingLookup { table: usize, ids: Vec<usize> },
    /// `[B, T, H·Dk] → [B·H, T, Dk]`.
    SplitHeads { a: usize, n_heads: usize },
    /// Inverse of `SplitHeads`.
    MergeHeads { a: usize, n_heads: usize },
    /// Rotary block transform along dim 1 positions of a `[N, T, Dk]` tensor.
    Rope { a: usize, kind: PeriodicKind, base: f64 },
    /// Mean NLL over rows whose target is not `ignore`; scalar output.
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        ignore: usize,
        counted: usize,
    },
    Sum { a: usize },
    /// Inverted dropout; `mask` holds 0 or 1/(1−p) per element.
    Dropout { a: usize, mask: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::TransposeLast { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::AddBias { .. } => "add_bias",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::SoftmaxRows { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::EmbeddingLookup { .. } => "embedding_lookup",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::Rope { .. } => "rope",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum { .. } => "sum",
            Op::Dropout { .. } => "dropout",
        }
    }

    fn parents(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Bmm { a, b } | Op::Add { a, b } | Op::AddBias { a, b }
            | Op::Mul { a, b } => vec![a, b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::EmbeddingLookup { table, .. } => vec![table],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::TransposeLast { a }
            | Op::Scale { a, .. }
            | Op::Relu { a }
            | Op::SoftmaxRows { a }
            | Op::SplitHeads { a, .. }
            | Op::MergeHeads { a, .. }
            | Op::Rope { a, .. }
            | Op::Sum { a }
            | Op::Dropout { a, .. } => vec![a],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of a node, present after `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.consumed {
            return Err(Error::contract(
                "tape already consumed by backward; start a new forward pass",
            ));
        }
        if !value.is_all_finite() {
            return Err(Error::numeric(op.name(), "non-finite value in output"));
        }
        let requires_grad = match &op {
            Op::Leaf => false, // set by `leaf`
            other => other.parents().iter().any(|&p| self.nodes[p].requires_grad),
        };
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Insert a tensor as a tape input.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        let v = self.push(value, Op::Leaf)?;
        self.nodes[v.0].requires_grad = requires_grad;
        Ok(v)
    }

    /// Non-differentiable input (mask, lookup table snapshot, etc.).
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if bv.rank() != 2 || av.rank() < 2 {
            return Err(Error::shape(format!(
                "matmul expects [.., M, K] × [K, N], got {:?} × {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let k = av.dim(av.rank() - 1);
        if k != bv.dim(0) {
            return Err(Error::shape(format!(
                "matmul inner dims differ: {:?} × {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let n = bv.dim(1);
        let rows = av.numel() / k;
        let out = mm_nn(av.data(), rows, k, bv.data(), n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(shape, out)?, Op::MatMul { a: a.0, b: b.0 })
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(1) {
            return Err(Error::shape(format!(
                "bmm expects [B, M, K] × [B, K, N], got {:?} × {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (bsz, m, k, n) = (av.dim(0), av.dim(1), av.dim(2), bv.dim(2));
        let mut out = Vec::with_capacity(bsz * m * n);
        for i in 0..bsz {
            out.extend(mm_nn(
                &av.data()[i * m * k..(i + 1) * m * k],
                m,
                k,
                &bv.data()[i * k * n..(i + 1) * k * n],
                n,
            ));
        }
        self.push(
            Tensor::new(vec![bsz, m, n], out)?,
            Op::Bmm { a: a.0, b: b.0 },
        )
    }

    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.rank() < 2 {
            return Err(Error::shape(format!(
                "transpose needs rank ≥ 2, got {:?}",
                av.shape()
            )));
        }
        let out = transpose_last_data(av);
        self.push(out, Op::TransposeLast { a: a.0 })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!(
                "add shapes differ: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x + y)
            .collect();
        self.push(
            Tensor::new(av.shape().to_vec(), data)?,
            Op::Add { a: a.0, b: b.0 },
        )
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        let width = *av.shape().last().unwrap_or(&0);
        if bv.rank() != 1 || bv.dim(0) != width {
            return Err(Error::shape(format!(
                "bias {:?} does not match last dim of {:?}",
                bv.shape(),
                av.shape()
            )));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(width) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push(
            Tensor::new(av.shape().to_vec(), data)?,
            Op::AddBias { a: a.0, b: bias.0 },
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!(
                "mul shapes differ: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x * y)
            .collect();
        self.push(
            Tensor::new(av.shape().to_vec(), data)?,
            Op::Mul { a: a.0, b: b.0 },
        )
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|&x| x * factor).collect();
        self.push(
            Tensor::new(av.shape().to_vec(), data)?,
            Op::Scale { a: a.0, factor },
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let data = av
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        self.push(Tensor::new(av.shape().to_vec(), data)?, Op::Relu { a: a.0 })
    }

    /// Softmax over the last dimension. `mask`, when given, must have the
    /// input's shape and is added before exponentiation (use a large
    /// negative number such as −1e30 to silence a slot).
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if let Some(m) = mask {
            if m.shape() != av.shape() {
                return Err(Error::shape(format!(
                    "softmax mask {:?} does not match input {:?}",
                    m.shape(),
                    av.shape()
                )));
            }
        }
        let width = *av.shape().last().unwrap_or(&0);
        if width == 0 {
            return Err(Error::shape("softmax over empty rows"));
        }
        let mut data = av.data().to_vec();
        if let Some(m) = mask {
            for (d, &mv) in data.iter_mut().zip(m.data()) {
                *d += mv;
            }
        }
        for row in data.chunks_mut(width) {
            softmax_row_in_place(row);
        }
        self.push(
            Tensor::new(av.shape().to_vec(), data)?,
            Op::SoftmaxRows { a: a.0 },
        )
    }

    /// Layer normalization over the last dimension with learned gain/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (xv, gv, bv) = (
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
        );
        let width = *xv.shape().last().unwrap_or(&0);
        if gv.rank() != 1 || gv.dim(0) != width || bv.rank() != 1 || bv.dim(0) != width {
            return Err(Error::shape(format!(
                "layer_norm gain/shift {:?}/{:?} do not match last dim of {:?}",
                gv.shape(),
                bv.shape(),
                xv.shape()
            )));
        }
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(width) {
            let (mean, inv_std) = row_moments(row, eps);
            for (i, &v) in row.iter().enumerate() {
                data.push((v - mean) * inv_std * gv.data()[i] + bv.data()[i]);
            }
        }
        self.push(
            Tensor::new(xv.shape().to_vec(), data)?,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
        )
    }

    /// Gather rows of an embedding table by id; `ids_shape` gives the
    /// logical layout of `ids` and becomes the leading output dims.
    pub fn embedding_lookup(
        &mut self,
        table: Var,
        ids: &[usize],
        ids_shape: &[usize],
    ) -> Result<Var> {
        let tv = &self.nodes[table.0].value;
        if tv.rank() != 2 {
            return Err(Error::shape(format!(
                "embedding table must be rank 2, got {:?}",
                tv.shape()
            )));
        }
        if ids.len() != ids_shape.iter().product::<usize>() {
            return Err(Error::shape("ids length does not match ids_shape"));
        }
        let (vocab, width) = (tv.dim(0), tv.dim(1));
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= vocab {
                return Err(Error::data(format!(
                    "token index {id} out of vocabulary (size {vocab})"
                )));
            }
            data.extend_from_slice(&tv.data()[id * width..(id + 1) * width]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(width);
        self.push(
            Tensor::new(shape, data)?,
            Op::EmbeddingLookup {
                table: table.0,
                ids: ids.to_vec(),
            },
        )
    }

    /// `[B, T, H·Dk] → [B·H, T, Dk]`.
    pub fn split_heads(&mut self, a: Var, n_heads: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.rank() != 3 || av.dim(2) % n_heads != 0 {
            return Err(Error::shape(format!(
                "cannot split {:?} into {} heads",
                av.shape(),
                n_heads
            )));
        }
        let out = split_heads_data(av, n_heads);
        self.push(out, Op::SplitHeads { a: a.0, n_heads })
    }

    /// `[B·H, T, Dk] → [B, T, H·Dk]`.
    pub fn merge_heads(&mut self, a: Var, n_heads: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.rank() != 3 || av.dim(0) % n_heads != 0 {
            return Err(Error::shape(format!(
                "cannot merge {:?} from {} heads",
                av.shape(),
                n_heads
            )));
        }
        let out = merge_heads_data(av, n_heads);
        self.push(out, Op::MergeHeads { a: a.0, n_heads })
    }

    /// Apply the rotary block transform to a `[N, T, Dk]` tensor, treating
    /// dim-1 indices as positions.
    pub fn rope_apply(&mut self, a: Var, kind: PeriodicKind, base: f64) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.rank() != 3 || av.dim(2) % 2 != 0 {
            return Err(Error::shape(format!(
                "rope expects [N, T, even Dk], got {:?}",
                av.shape()
            )));
        }
        let blocks = rope_blocks::<T>(kind, base, av.dim(1), av.dim(2))?;
        let out = rope_apply_data(av, &blocks, false);
        self.push(out, Op::Rope { a: a.0, kind, base })
    }

    /// Mean negative log-likelihood over positions whose target differs from
    /// `ignore_index`. Logits may be `[N, V]` or `[B, T, V]` with
    /// `targets.len()` equal to the number of rows.
    pub fn cross_entropy_with_ignore(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_index: usize,
    ) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        if lv.rank() < 2 {
            return Err(Error::shape("cross_entropy expects rank ≥ 2 logits"));
        }
        let vocab = lv.dim(lv.rank() - 1);
        let rows = lv.numel() / vocab;
        if targets.len() != rows {
            return Err(Error::shape(format!(
                "{} targets for {} logit rows",
                targets.len(),
                rows
            )));
        }
        let mut total = T::zero();
        let mut counted = 0usize;
        for (row, &t) in lv.data().chunks(vocab).zip(targets) {
            if t == ignore_index {
                continue;
            }
            if t >= vocab {
                return Err(Error::data(format!(
                    "target index {t} out of vocabulary (size {vocab})"
                )));
            }
            total += log_sum_exp(row) - row[t];
            counted += 1;
        }
        if counted == 0 {
            return Err(Error::data(
                "cross_entropy: every position carries the ignore index; mean undefined",
            ));
        }
        let mean = total / T::from_f64_lossy(counted as f64);
        self.push(
            Tensor::scalar(mean),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                ignore: ignore_index,
                counted,
            },
        )
    }

    /// Sum all elements into a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.nodes[a.0].value.data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum { a: a.0 })
    }

    /// Inverted dropout: each element survives with probability 1−p and is
    /// scaled by 1/(1−p). Draws `numel` values from `rng` in element order.
    pub fn dropout(
        &mut self,
        a: Var,
        p: f64,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Var> {
        use rand::Rng;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        let av = &self.nodes[a.0].value;
        let keep_scale = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..av.numel())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = av
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        self.push(
            Tensor::new(av.shape().to_vec(), data)?,
            Op::Dropout { a: a.0, mask },
        )
    }

    /// Propagate gradients from a scalar loss back to every node that
    /// requires them, then consume the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::contract(
                "backward already ran on this tape; record a new forward pass",
            ));
        }
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            // constant subgraph: nothing to do, grads stay absent
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::filled(
            self.nodes[loss.0].value.shape().to_vec(),
            T::one(),
        ));
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let grad = self.nodes[i].grad.take();
            {
                let g = grad.as_ref().unwrap();
                let deltas = self.parent_deltas(i, g)?;
                for (p, delta) in deltas {
                    self.accumulate(p, delta);
                }
            }
            self.nodes[i].grad = grad;
        }
        Ok(())
    }

    fn accumulate(&mut self, idx: usize, delta: Tensor<T>) {
        match &mut self.nodes[idx].grad {
            Some(g) => {
                for (o, &d) in g.data_mut().iter_mut().zip(delta.data()) {
                    *o += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Gradient contributions of node `i` to each parent that requires them.
    fn parent_deltas(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
        let needs = |p: usize| self.nodes[p].requires_grad;
        let value = |p: usize| &self.nodes[p].value;
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (value(*a), value(*b));
                let k = av.dim(av.rank() - 1);
                let n = bv.dim(1);
                let rows = av.numel() / k;
                if needs(*a) {
                    let d = mm_nt(g.data(), rows, n, bv.data(), k);
                    out.push((*a, Tensor::new(av.shape().to_vec(), d)?));
                }
                if needs(*b) {
                    let d = mm_tn(av.data(), rows, k, g.data(), n);
                    out.push((*b, Tensor::new(vec![k, n], d)?));
                }
            }
            Op::Bmm { a, b } => {
                let (av, bv) = (value(*a), value(*b));
                let (bsz, m, k, n) = (av.dim(0), av.dim(1), av.dim(2), bv.dim(2));
                if needs(*a) {
                    let mut d = Vec::with_capacity(av.numel());
                    for i in 0..bsz {
                        d.extend(mm_nt(
                            &g.data()[i * m * n..(i + 1) * m * n],
                            m,
                            n,
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            k,
                        ));
                    }
                    out.push((*a, Tensor::new(av.shape().to_vec(), d)?));
                }
                if needs(*b) {
                    let mut d = Vec::with_capacity(bv.numel());
                    for i in 0..bsz {
                        d.extend(mm_tn(
                            &av.data()[i * m * k..(i + 1) * m * k],
                            m,
                            k,
                            &g.data()[i * m * n..(i + 1) * m * n],
                            n,
                        ));
                    }
                    out.push((*b, Tensor::new(bv.shape().to_vec(), d)?));
                }
            }
            Op::TransposeLast { a } => {
                if needs(*a) {
                    out.push((*a, transpose_last_data(g)));
                }
            }
            Op::Add { a, b } => {
                if needs(*a) {
                    out.push((*a, g.clone()));
                }
                if needs(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::AddBias { a, b } => {
                if needs(*a) {
                    out.push((*a, g.clone()));
                }
                if needs(*b) {
                    let width = value(*b).dim(0);
                    let mut d = vec![T::zero(); width];
                    for row in g.data().chunks(width) {
                        for (o, &gv) in d.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                    out.push((*b, Tensor::new(vec![width], d)?));
                }
            }
            Op::Mul { a, b } => {
                if needs(*a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(value(*b).data())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    out.push((*a, Tensor::new(g.shape().to_vec(), d)?));
                }
                if needs(*b) {
                    let d = g
                        .data()
                        .iter()
                        .zip(value(*a).data())
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    out.push((*b, Tensor::new(g.shape().to_vec(), d)?));
                }
            }
            Op::Scale { a, factor } => {
                if needs(*a) {
                    let d = g.data().iter().map(|&gv| gv * *factor).collect();
                    out.push((*a, Tensor::new(g.shape().to_vec(), d)?));
                }
            }
            Op::Relu { a } => {
                if needs(*a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(value(*a).data())
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    out.push((*a, Tensor::new(g.shape().to_vec(), d)?));
                }
            }
            Op::SoftmaxRows { a } => {
                if needs(*a) {
                    let y = &self.nodes[i].value;
                    let width = *y.shape().last().unwrap();
                    let mut d = Vec::with_capacity(y.numel());
                    for (yr, gr) in y.data().chunks(width).zip(g.data().chunks(width)) {
                        let dot: T = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        d.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                    }
                    out.push((*a, Tensor::new(y.shape().to_vec(), d)?));
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = value(*x);
                let gv = value(*gamma);
                let width = gv.dim(0);
                let inv_width = T::one() / T::from_f64_lossy(width as f64);
                let mut dx = vec![T::zero(); xv.numel()];
                let mut dgamma = vec![T::zero(); width];
                let mut dbeta = vec![T::zero(); width];
                for (r, (xr, gr)) in xv
                    .data()
                    .chunks(width)
                    .zip(g.data().chunks(width))
                    .enumerate()
                {
                    let (mean, inv_std) = row_moments(xr, *eps);
                    // x̂ and the two row means the input gradient needs
                    let xhat: Vec<T> = xr.iter().map(|&v| (v - mean) * inv_std).collect();
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_xhat = T::zero();
                    for j in 0..width {
                        let dxhat = gr[j] * gv.data()[j];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat[j];
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                    mean_dxhat *= inv_width;
                    mean_dxhat_xhat *= inv_width;
                    for j in 0..width {
                        let dxhat = gr[j] * gv.data()[j];
                        dx[r * width + j] =
                            (dxhat - mean_dxhat - xhat[j] * mean_dxhat_xhat) * inv_std;
                    }
                }
                if needs(*x) {
                    out.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
                }
                if needs(*gamma) {
                    out.push((*gamma, Tensor::new(vec![width], dgamma)?));
                }
                if needs(*beta) {
                    out.push((*beta, Tensor::new(vec![width], dbeta)?));
                }
            }
            Op::EmbeddingLookup { table, ids } => {
                if needs(*table) {
                    let tv = value(*table);
                    let width = tv.dim(1);
                    let mut d = vec![T::zero(); tv.numel()];
                    for (&id, row) in ids.iter().zip(g.data().chunks(width)) {
                        for (o, &gv) in d[id * width..(id + 1) * width].iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                    out.push((*table, Tensor::new(tv.shape().to_vec(), d)?));
                }
            }
            Op::SplitHeads { a, n_heads } => {
                if needs(*a) {
                    out.push((*a, merge_heads_data(g, *n_heads)));
                }
            }
            Op::MergeHeads { a, n_heads } => {
                if needs(*a) {
                    out.push((*a, split_heads_data(g, *n_heads)));
                }
            }
            Op::Rope { a, kind, base } => {
                if needs(*a) {
                    let av = value(*a);
                    let blocks = rope_blocks::<T>(*kind, *base, av.dim(1), av.dim(2))?;
                    out.push((*a, rope_apply_data(g, &blocks, true)));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                counted,
            } => {
                if needs(*logits) {
                    let lv = value(*logits);
                    let vocab = lv.dim(lv.rank() - 1);
                    let scale = g.data()[0] / T::from_f64_lossy(*counted as f64);
                    let mut d = vec![T::zero(); lv.numel()];
                    for ((row, drow), &t) in lv
                        .data()
                        .chunks(vocab)
                        .zip(d.chunks_mut(vocab))
                        .zip(targets)
                    {
                        if t == *ignore {
                            continue;
                        }
                        let mut probs = row.to_vec();
                        softmax_row_in_place(&mut probs);
                        for (j, (o, &p)) in drow.iter_mut().zip(&probs).enumerate() {
                            let indicator = if j == t { T::one() } else { T::zero() };
                            *o = (p - indicator) * scale;
                        }
                    }
                    out.push((*logits, Tensor::new(lv.shape().to_vec(), d)?));
                }
            }
            Op::Sum { a } => {
                if needs(*a) {
                    let av = value(*a);
                    out.push((
                        *a,
                        Tensor::filled(av.shape().to_vec(), g.data()[0]),
                    ));
                }
            }
            Op::Dropout { a, mask } => {
                if needs(*a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(mask)
                        .map(|(&gv, &m)| gv * m)
                        .collect();
                    out.push((*a, Tensor::new(g.shape().to_vec(), d)?));
                }
            }
        }
        Ok(out)
    }
}

// ---- raw kernels ----------------------------------------------------------
//
// Inner loops run along contiguous rows so they vectorize. The kernels stay
// single-threaded on purpose: runs parallelize at the fold/encoding level,
// where workers share nothing.

/// C[m,n] = A[m,k] · B[k,n]. The k loop is unrolled by four so each pass
/// over the output row amortizes four accumulations.
fn mm_nn<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let row = |i: usize, orow: &mut [T]| {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut orow[..n];
        let mut kk = 0;
        while kk + 4 <= k {
            let (a0, a1, a2, a3) = (arow[kk], arow[kk + 1], arow[kk + 2], arow[kk + 3]);
            let b0 = &b[kk * n..][..n];
            let b1 = &b[(kk + 1) * n..][..n];
            let b2 = &b[(kk + 2) * n..][..n];
            let b3 = &b[(kk + 3) * n..][..n];
            for j in 0..n {
                orow[j] = orow[j] + a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            kk += 4;
        }
        while kk < k {
            let av = arow[kk];
            let brow = &b[kk * n..][..n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
            kk += 1;
        }
    };
    for (i, orow) in out.chunks_mut(n).enumerate() {
        row(i, orow);
    }
    out
}

/// C[m,k] = A[m,n] · B[k,n]ᵀ, via a materialized transpose of B so the
/// accumulation loop stays contiguous.
fn mm_nt<T: Scalar>(a: &[T], m: usize, n: usize, b: &[T], k: usize) -> Vec<T> {
    let mut bt = vec![T::zero(); n * k];
    for j in 0..k {
        for x in 0..n {
            bt[x * k + j] = b[j * n + x];
        }
    }
    mm_nn(a, m, n, &bt, k)
}

/// C[k,n] = A[m,k]ᵀ · B[m,n]; each output row j accumulates A[·,j]-scaled
/// rows of B, four source rows per pass.
fn mm_tn<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    let row = |j: usize, orow: &mut [T]| {
        let orow = &mut orow[..n];
        let mut r = 0;
        while r + 4 <= m {
            let (a0, a1, a2, a3) = (
                a[r * k + j],
                a[(r + 1) * k + j],
                a[(r + 2) * k + j],
                a[(r + 3) * k + j],
            );
            let b0 = &b[r * n..][..n];
            let b1 = &b[(r + 1) * n..][..n];
            let b2 = &b[(r + 2) * n..][..n];
            let b3 = &b[(r + 3) * n..][..n];
            for x in 0..n {
                orow[x] = orow[x] + a0 * b0[x] + a1 * b1[x] + a2 * b2[x] + a3 * b3[x];
            }
            r += 4;
        }
        while r < m {
            let av = a[r * k + j];
            let brow = &b[r * n..][..n];
            for x in 0..n {
                orow[x] += av * brow[x];
            }
            r += 1;
        }
    };
    for (j, orow) in out.chunks_mut(n).enumerate() {
        row(j, orow);
    }
    out
}

fn transpose_last_data<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let rank = t.rank();
    let (r, c) = (t.dim(rank - 2), t.dim(rank - 1));
    let batch = t.numel() / (r * c);
    let mut data = Vec::with_capacity(t.numel());
    for bi in 0..batch {
        let block = &t.data()[bi * r * c..(bi + 1) * r * c];
        for j in 0..c {
            for i in 0..r {
                data.push(block[i * c + j]);
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape.swap(rank - 2, rank - 1);
    Tensor::new(shape, data).expect("transpose preserves element count")
}

fn split_heads_data<T: Scalar>(t: &Tensor<T>, n_heads: usize) -> Tensor<T> {
    let (b, l, d) = (t.dim(0), t.dim(1), t.dim(2));
    let dk = d / n_heads;
    let mut data = vec![T::zero(); t.numel()];
    for bi in 0..b {
        for h in 0..n_heads {
            for ti in 0..l {
                let src = bi * l * d + ti * d + h * dk;
                let dst = (bi * n_heads + h) * l * dk + ti * dk;
                data[dst..dst + dk].copy_from_slice(&t.data()[src..src + dk]);
            }
        }
    }
    Tensor::new(vec![b * n_heads, l, dk], data).expect("split preserves element count")
}

fn merge_heads_data<T: Scalar>(t: &Tensor<T>, n_heads: usize) -> Tensor<T> {
    let (bh, l, dk) = (t.dim(0), t.dim(1), t.dim(2));
    let b = bh / n_heads;
    let d = dk * n_heads;
    let mut data = vec![T::zero(); t.numel()];
    for bi in 0..b {
        for h in 0..n_heads {
            for ti in 0..l {
                let src = (bi * n_heads + h) * l * dk + ti * dk;
                let dst = bi * l * d + ti * d + h * dk;
                data[dst..dst + dk].copy_from_slice(&t.data()[src..src + dk]);
            }
        }
    }
    Tensor::new(vec![b, l, d], data).expect("merge preserves element count")
}

fn rope_blocks<T: Scalar>(
    kind: PeriodicKind,
    base: f64,
    n_positions: usize,
    d_k: usize,
) -> Result<Vec<Vec<BlockTransform<T>>>> {
    let cfg = RopeConfig { d_k, base, kind };
    let thetas = theta_schedule(&cfg)?;
    (0..n_positions)
        .map(|m| {
            thetas
                .iter()
                .map(|&theta| block_transform(kind, m as f64 * theta))
                .collect()
        })
        .collect()
}

fn rope_apply_data<T: Scalar>(
    t: &Tensor<T>,
    blocks: &[Vec<BlockTransform<T>>],
    transposed: bool,
) -> Tensor<T> {
    let (n, l, dk) = (t.dim(0), t.dim(1), t.dim(2));
    let mut data = Vec::with_capacity(t.numel());
    for bi in 0..n {
        for ti in 0..l {
            let row = &t.data()[bi * l * dk + ti * dk..bi * l * dk + (ti + 1) * dk];
            for (j, block) in blocks[ti].iter().enumerate() {
                let (x, y) = (row[2 * j], row[2 * j + 1]);
                let (a, b) = if transposed {
                    block.apply_transposed(x, y)
                } else {
                    block.apply(x, y)
                };
                data.push(a);
                data.push(b);
            }
        }
    }
    Tensor::new(vec![n, l, dk], data).expect("rope preserves element count")
}

fn softmax_row_in_place<T: Scalar>(row: &mut [T]) {
    let mut max = row[0];
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let mut max = row[0];
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

fn row_moments<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let width = T::from_f64_lossy(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / width;
    let var = row
        .iter()
        .map(|&v| (v - mean) * (v - mean))
        .sum::<T>()
        / width;
    (mean, T::one() / (var + eps).sqrt())
}
