//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape of op nodes built during the forward pass; each node
//! stores its inputs, its output value, and the local gradient rule applied
//! during [`Graph::backward`]. Construction and backward are single-threaded
//! and visit nodes in a fixed order, so gradients are bitwise deterministic.
//! Every forward op validates its output for NaN/Inf and fails loudly naming
//! the op; silent divergence is the failure mode this guards against.

use crate::error::{IlmError, Result};
use crate::scalar::{sc, Scalar};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(IlmError::Dimension(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(IlmError::Dimension(format!(
                "shape {shape:?} implies {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![S::zero(); n], requires_grad: false }
    }

    pub fn filled(shape: Vec<usize>, v: S) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![v; n], requires_grad: false }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<S>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Rows of a matrix; a 1-D tensor counts as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() <= 1 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map_scalar<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64c(v.to_f64c())).collect(),
            requires_grad: self.requires_grad,
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: S },
    DivScalarVar { x: Var, s: Var },
    Exp { x: Var },
    Log { x: Var },
    Gelu { x: Var },
    SoftmaxLast { x: Var },
    LogSoftmaxLast { x: Var },
    MeanAll { x: Var },
    SumAll { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: S },
    L2NormalizeRows { x: Var },
    Cosine { u: Var, v: Var },
    GatherRows { t: Var, ids: Vec<usize> },
    NarrowCols { x: Var, start: usize, len: usize },
    ConcatRows { xs: Vec<Var> },
    ConcatCols { xs: Vec<Var> },
    Reshape { x: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool> },
    BceWithLogits { logits: Var, labels: Vec<S> },
}

struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    needs_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in forward order and visited once,
/// in reverse, by `backward`.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients keyed by `Var`. Leaves that require grad but were not reached
/// report zeros; everything else reports `None`.
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(IlmError::NonFinite { op: name });
        }
        self.nodes.push(Node { op, value, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Insert a leaf tensor. Gradient participation follows `requires_grad`.
    pub fn leaf(&mut self, t: Tensor<S>) -> Result<Var> {
        let needs = t.requires_grad();
        self.push(Op::Leaf, t, needs, "leaf")
    }

    /// Leaf from a constant (no gradient).
    pub fn constant(&mut self, t: Tensor<S>) -> Result<Var> {
        self.push(Op::Leaf, t, false, "leaf")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 {
            return Err(IlmError::Dimension("matmul expects 2-D operands".into()));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(IlmError::Dimension(format!(
                "matmul inner extents differ: {m}x{k} vs {k2}x{n}"
            )));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Matmul { a, b }, Tensor::new(vec![m, n], out)?, needs, "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(IlmError::Dimension("transpose expects a 2-D tensor".into()));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data()[i * n + j];
            }
        }
        let needs = self.needs(x);
        self.push(Op::Transpose { x }, Tensor::new(vec![n, m], out)?, needs, "transpose")
    }

    fn broadcast_check(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            return Ok(());
        }
        // b must match the trailing axes of a
        if sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb {
            return Ok(());
        }
        Err(IlmError::Dimension(format!(
            "{op}: cannot broadcast {sb:?} over {sa:?} (trailing-dimension expansion only)"
        )))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check(a, b, "add")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let nb = tb.numel();
        let mut out = ta.data().to_vec();
        for (i, o) in out.iter_mut().enumerate() {
            *o = *o + tb.data()[i % nb];
        }
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add { a, b }, Tensor::new(shape, out)?, needs, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check(a, b, "mul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let nb = tb.numel();
        let mut out = ta.data().to_vec();
        for (i, o) in out.iter_mut().enumerate() {
            *o = *o * tb.data()[i % nb];
        }
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Mul { a, b }, Tensor::new(shape, out)?, needs, "mul")
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let t = self.value(x);
        let out: Vec<S> = t.data().iter().map(|&v| v * c).collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        self.push(Op::Scale { x, c }, Tensor::new(shape, out)?, needs, "scale")
    }

    /// Elementwise division by an in-graph scalar (1-element tensor).
    pub fn div_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(IlmError::Dimension("div_scalar_var divisor must be a scalar".into()));
        }
        let d = self.value(s).data()[0];
        let t = self.value(x);
        let out: Vec<S> = t.data().iter().map(|&v| v / d).collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(x) || self.needs(s);
        self.push(Op::DivScalarVar { x, s }, Tensor::new(shape, out)?, needs, "div_scalar")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out: Vec<S> = t.data().iter().map(|v| v.exp()).collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        self.push(Op::Exp { x }, Tensor::new(shape, out)?, needs, "exp")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out: Vec<S> = t.data().iter().map(|v| v.ln()).collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        self.push(Op::Log { x }, Tensor::new(shape, out)?, needs, "log")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out: Vec<S> = t.data().iter().map(|&v| gelu_fwd(v)).collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        self.push(Op::Gelu { x }, Tensor::new(shape, out)?, needs, "gelu")
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = vec![S::zero(); rows * cols];
        for r in 0..rows {
            softmax_row(&t.data()[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
        }
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        self.push(Op::SoftmaxLast { x }, Tensor::new(shape, out)?, needs, "softmax")
    }

    pub fn log_softmax_last(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = vec![S::zero(); rows * cols];
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(row);
            for j in 0..cols {
                out[r * cols + j] = row[j] - lse;
            }
        }
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        self.push(Op::LogSoftmaxLast { x }, Tensor::new(shape, out)?, needs, "log_softmax")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = sc::<S>(t.numel() as f64);
        let s: S = t.data().iter().copied().sum();
        let needs = self.needs(x);
        self.push(Op::MeanAll { x }, Tensor::scalar(s / n), needs, "mean")
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: S = t.data().iter().copied().sum();
        let needs = self.needs(x);
        self.push(Op::SumAll { x }, Tensor::scalar(s), needs, "sum")
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(IlmError::Dimension("layer_norm affine params must match last axis".into()));
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = vec![S::zero(); rows * cols];
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let (mu, var) = row_stats(row);
            let inv = S::one() / (var + eps).sqrt();
            for j in 0..cols {
                out[r * cols + j] = (row[j] - mu) * inv * g[j] + b[j];
            }
        }
        let shape = t.shape().to_vec();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Op::LayerNorm { x, gamma, beta, eps },
            Tensor::new(shape, out)?,
            needs,
            "layer_norm",
        )
    }

    /// Normalize each row to unit L2 norm. Rows with norm below 1e-12 are
    /// degenerate.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = vec![S::zero(); rows * cols];
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let norm = l2_norm(row);
            if norm.to_f64c() < 1e-12 {
                return Err(IlmError::DegenerateInput(format!(
                    "l2_normalize_rows: row {r} has near-zero norm"
                )));
            }
            for j in 0..cols {
                out[r * cols + j] = row[j] / norm;
            }
        }
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        self.push(Op::L2NormalizeRows { x }, Tensor::new(shape, out)?, needs, "l2_normalize")
    }

    /// Cosine similarity of two equal-length vectors (any shape, flattened).
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        let (tu, tv) = (self.value(u), self.value(v));
        if tu.numel() != tv.numel() {
            return Err(IlmError::Dimension("cosine_similarity operands differ in length".into()));
        }
        let c = cosine_value(tu.data(), tv.data())?;
        let needs = self.needs(u) || self.needs(v);
        self.push(Op::Cosine { u, v }, Tensor::scalar(c), needs, "cosine_similarity")
    }

    /// Gather rows of a matrix by index (embedding lookup, row selection).
    pub fn gather_rows(&mut self, t: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(t);
        if tt.shape().len() != 2 {
            return Err(IlmError::Dimension("gather_rows expects a 2-D table".into()));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        if ids.is_empty() {
            return Err(IlmError::Dimension("gather_rows requires at least one index".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(IlmError::Vocabulary(format!("row index {bad} out of range (table has {v})")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        let needs = self.needs(t);
        self.push(
            Op::GatherRows { t, ids: ids.to_vec() },
            Tensor::new(vec![ids.len(), d], out)?,
            needs,
            "gather_rows",
        )
    }

    /// Column slice [start, start+len) of a matrix.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(IlmError::Dimension("narrow_cols expects a 2-D tensor".into()));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        if start + len > n || len == 0 {
            return Err(IlmError::Dimension(format!(
                "narrow_cols [{start}, {}) out of range for width {n}",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&t.data()[i * n + start..i * n + start + len]);
        }
        let needs = self.needs(x);
        self.push(Op::NarrowCols { x, start, len }, Tensor::new(vec![m, len], out)?, needs, "narrow_cols")
    }

    /// Stack matrices vertically (equal widths).
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(IlmError::Dimension("concat_rows needs at least one input".into()));
        }
        let d = self.value(xs[0]).cols();
        let mut rows = 0usize;
        for &x in xs {
            let t = self.value(x);
            if t.shape().len() != 2 || t.cols() != d {
                return Err(IlmError::Dimension("concat_rows inputs must be 2-D with equal widths".into()));
            }
            rows += t.shape()[0];
        }
        let mut out = Vec::with_capacity(rows * d);
        for &x in xs {
            out.extend_from_slice(self.value(x).data());
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        self.push(Op::ConcatRows { xs: xs.to_vec() }, Tensor::new(vec![rows, d], out)?, needs, "concat_rows")
    }

    /// Stack matrices horizontally (equal heights).
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(IlmError::Dimension("concat_cols needs at least one input".into()));
        }
        let m = self.value(xs[0]).shape()[0];
        let mut width = 0usize;
        for &x in xs {
            let t = self.value(x);
            if t.shape().len() != 2 || t.shape()[0] != m {
                return Err(IlmError::Dimension("concat_cols inputs must be 2-D with equal heights".into()));
            }
            width += t.cols();
        }
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            for &x in xs {
                let t = self.value(x);
                let n = t.cols();
                out.extend_from_slice(&t.data()[i * n..(i + 1) * n]);
            }
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        self.push(Op::ConcatCols { xs: xs.to_vec() }, Tensor::new(vec![m, width], out)?, needs, "concat_cols")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        let n: usize = shape.iter().product();
        if n != t.numel() || shape.iter().any(|&e| e == 0) {
            return Err(IlmError::Dimension(format!(
                "reshape {:?} -> {shape:?} changes element count",
                t.shape()
            )));
        }
        let data = t.data().to_vec();
        let needs = self.needs(x);
        self.push(Op::Reshape { x }, Tensor::new(shape, data)?, needs, "reshape")
    }

    /// Mean negative log-likelihood over unmasked positions.
    /// `mask[i] == true` means position `i` contributes to the loss.
    pub fn cross_entropy_nll(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, cols) = (t.rows(), t.cols());
        if targets.len() != rows || mask.len() != rows {
            return Err(IlmError::Dimension(format!(
                "cross_entropy: {rows} logit rows vs {} targets / {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(IlmError::Vocabulary(format!("target id {bad} out of range (vocab {cols})")));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(IlmError::DegenerateInput("cross_entropy: all positions masked".into()));
        }
        let mut total = S::zero();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let row = &t.data()[r * cols..(r + 1) * cols];
            total += log_sum_exp(row) - row[targets[r]];
        }
        let loss = total / sc::<S>(count as f64);
        let needs = self.needs(logits);
        self.push(
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec() },
            Tensor::scalar(loss),
            needs,
            "cross_entropy",
        )
    }

    /// Mean binary cross-entropy with logits; labels are 0/1.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[S]) -> Result<Var> {
        let t = self.value(logits);
        if t.numel() != labels.len() {
            return Err(IlmError::Dimension("bce_with_logits: logits/labels length mismatch".into()));
        }
        let n = sc::<S>(labels.len() as f64);
        let mut total = S::zero();
        for (&z, &y) in t.data().iter().zip(labels) {
            // max(z,0) - z*y + ln(1 + exp(-|z|))
            total += z.max(S::zero()) - z * y + (S::one() + (-z.abs()).exp()).ln();
        }
        let needs = self.needs(logits);
        self.push(
            Op::BceWithLogits { logits, labels: labels.to_vec() },
            Tensor::scalar(total / n),
            needs,
            "bce_with_logits",
        )
    }

    /// Reverse pass from a scalar loss. Returns gradients for every
    /// grad-requiring leaf (zero where the leaf is off the loss path).
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).numel() != 1 {
            return Err(IlmError::Usage("backward seed must be a scalar".into()));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        // requires_grad leaves never reached get explicit zeros
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() && grads[i].is_none() {
                grads[i] = Some(vec![S::zero(); node.value.numel()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.needs(*a) {
                    let da = acc(grads, a.0, m * k);
                    // dA = G * B^T
                    for i in 0..m {
                        for kk in 0..k {
                            let mut s = S::zero();
                            let grow = &g[i * n..(i + 1) * n];
                            let brow = &tb.data()[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            da[i * k + kk] += s;
                        }
                    }
                }
                if self.needs(*b) {
                    let db = acc(grads, b.0, k * n);
                    // dB = A^T * G
                    for i in 0..m {
                        for kk in 0..k {
                            let aik = ta.data()[i * k + kk];
                            let grow = &g[i * n..(i + 1) * n];
                            let drow = &mut db[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                drow[j] += aik * grow[j];
                            }
                        }
                    }
                }
            }
            Op::Transpose { x } => {
                if self.needs(*x) {
                    let t = self.value(*x);
                    let (m, n) = (t.shape()[0], t.shape()[1]);
                    let dx = acc(grads, x.0, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    let da = acc(grads, a.0, self.value(*a).numel());
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if self.needs(*b) {
                    let nb = self.value(*b).numel();
                    let db = acc(grads, b.0, nb);
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % nb] += gv;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let nb = tb.numel();
                if self.needs(*a) {
                    let da = acc(grads, a.0, ta.numel());
                    for (i, &gv) in g.iter().enumerate() {
                        da[i] += gv * tb.data()[i % nb];
                    }
                }
                if self.needs(*b) {
                    let db = acc(grads, b.0, nb);
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % nb] += gv * ta.data()[i];
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    let dx = acc(grads, x.0, self.value(*x).numel());
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv * *c;
                    }
                }
            }
            Op::DivScalarVar { x, s } => {
                let sv = self.value(*s).data()[0];
                let tx = self.value(*x);
                if self.needs(*x) {
                    let dx = acc(grads, x.0, tx.numel());
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv / sv;
                    }
                }
                if self.needs(*s) {
                    let mut dot = S::zero();
                    for (&gv, &xv) in g.iter().zip(tx.data()) {
                        dot += gv * xv;
                    }
                    let ds = acc(grads, s.0, 1);
                    ds[0] += -dot / (sv * sv);
                }
            }
            Op::Exp { x } => {
                if self.needs(*x) {
                    let dx = acc(grads, x.0, out.numel());
                    for i in 0..g.len() {
                        dx[i] += g[i] * out.data()[i];
                    }
                }
            }
            Op::Log { x } => {
                if self.needs(*x) {
                    let tx = self.value(*x);
                    let dx = acc(grads, x.0, tx.numel());
                    for i in 0..g.len() {
                        dx[i] += g[i] / tx.data()[i];
                    }
                }
            }
            Op::Gelu { x } => {
                if self.needs(*x) {
                    let tx = self.value(*x);
                    let dx = acc(grads, x.0, tx.numel());
                    for i in 0..g.len() {
                        dx[i] += g[i] * gelu_bwd(tx.data()[i]);
                    }
                }
            }
            Op::SoftmaxLast { x } => {
                if self.needs(*x) {
                    let (rows, cols) = (out.rows(), out.cols());
                    let dx = acc(grads, x.0, rows * cols);
                    for r in 0..rows {
                        let y = &out.data()[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mut dot = S::zero();
                        for j in 0..cols {
                            dot += gr[j] * y[j];
                        }
                        for j in 0..cols {
                            dx[r * cols + j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxLast { x } => {
                if self.needs(*x) {
                    let (rows, cols) = (out.rows(), out.cols());
                    let dx = acc(grads, x.0, rows * cols);
                    for r in 0..rows {
                        let y = &out.data()[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mut gsum = S::zero();
                        for j in 0..cols {
                            gsum += gr[j];
                        }
                        for j in 0..cols {
                            dx[r * cols + j] += gr[j] - y[j].exp() * gsum;
                        }
                    }
                }
            }
            Op::MeanAll { x } => {
                if self.needs(*x) {
                    let n = self.value(*x).numel();
                    let dx = acc(grads, x.0, n);
                    let gv = g[0] / sc::<S>(n as f64);
                    for d in dx.iter_mut() {
                        *d += gv;
                    }
                }
            }
            Op::SumAll { x } => {
                if self.needs(*x) {
                    let n = self.value(*x).numel();
                    let dx = acc(grads, x.0, n);
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let tx = self.value(*x);
                let (rows, cols) = (tx.rows(), tx.cols());
                let gam = self.value(*gamma).data();
                let colsf = sc::<S>(cols as f64);
                for r in 0..rows {
                    let row = &tx.data()[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let (mu, var) = row_stats(row);
                    let inv = S::one() / (var + *eps).sqrt();
                    if self.needs(*gamma) || self.needs(*beta) || self.needs(*x) {
                        let mut mean_q = S::zero();
                        let mut mean_qx = S::zero();
                        for j in 0..cols {
                            let xh = (row[j] - mu) * inv;
                            let q = gr[j] * gam[j];
                            mean_q += q;
                            mean_qx += q * xh;
                        }
                        mean_q /= colsf;
                        mean_qx /= colsf;
                        if self.needs(*x) {
                            let dx = acc(grads, x.0, rows * cols);
                            for j in 0..cols {
                                let xh = (row[j] - mu) * inv;
                                let q = gr[j] * gam[j];
                                dx[r * cols + j] += (q - mean_q - xh * mean_qx) * inv;
                            }
                        }
                        if self.needs(*gamma) {
                            let dg = acc(grads, gamma.0, cols);
                            for j in 0..cols {
                                let xh = (row[j] - mu) * inv;
                                dg[j] += gr[j] * xh;
                            }
                        }
                        if self.needs(*beta) {
                            let db = acc(grads, beta.0, cols);
                            for j in 0..cols {
                                db[j] += gr[j];
                            }
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x } => {
                if self.needs(*x) {
                    let tx = self.value(*x);
                    let (rows, cols) = (tx.rows(), tx.cols());
                    let dx = acc(grads, x.0, rows * cols);
                    for r in 0..rows {
                        let row = &tx.data()[r * cols..(r + 1) * cols];
                        let y = &out.data()[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let norm = l2_norm(row);
                        let mut dot = S::zero();
                        for j in 0..cols {
                            dot += gr[j] * y[j];
                        }
                        for j in 0..cols {
                            dx[r * cols + j] += (gr[j] - y[j] * dot) / norm;
                        }
                    }
                }
            }
            Op::Cosine { u, v } => {
                let (tu, tv) = (self.value(*u), self.value(*v));
                let c = out.data()[0];
                let (nu, nv) = (l2_norm(tu.data()), l2_norm(tv.data()));
                let gv0 = g[0];
                if self.needs(*u) {
                    let du = acc(grads, u.0, tu.numel());
                    for i in 0..tu.numel() {
                        du[i] += gv0 * (tv.data()[i] / (nu * nv) - c * tu.data()[i] / (nu * nu));
                    }
                }
                if self.needs(*v) {
                    let dv = acc(grads, v.0, tv.numel());
                    for i in 0..tv.numel() {
                        dv[i] += gv0 * (tu.data()[i] / (nu * nv) - c * tv.data()[i] / (nv * nv));
                    }
                }
            }
            Op::GatherRows { t, ids } => {
                if self.needs(*t) {
                    let table = self.value(*t);
                    let d = table.shape()[1];
                    let dt = acc(grads, t.0, table.numel());
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::NarrowCols { x, start, len } => {
                if self.needs(*x) {
                    let tx = self.value(*x);
                    let (m, n) = (tx.shape()[0], tx.shape()[1]);
                    let dx = acc(grads, x.0, m * n);
                    for i in 0..m {
                        for j in 0..*len {
                            dx[i * n + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::ConcatRows { xs } => {
                let mut offset = 0usize;
                for &x in xs {
                    let n = self.value(x).numel();
                    if self.needs(x) {
                        let dx = acc(grads, x.0, n);
                        for i in 0..n {
                            dx[i] += g[offset + i];
                        }
                    }
                    offset += n;
                }
            }
            Op::ConcatCols { xs } => {
                let m = self.value(xs[0]).shape()[0];
                let total: usize = xs.iter().map(|&x| self.value(x).cols()).sum();
                let mut col0 = 0usize;
                for &x in xs {
                    let w = self.value(x).cols();
                    if self.needs(x) {
                        let dx = acc(grads, x.0, m * w);
                        for i in 0..m {
                            for j in 0..w {
                                dx[i * w + j] += g[i * total + col0 + j];
                            }
                        }
                    }
                    col0 += w;
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    let dx = acc(grads, x.0, self.value(*x).numel());
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, mask } => {
                if self.needs(*logits) {
                    let t = self.value(*logits);
                    let (rows, cols) = (t.rows(), t.cols());
                    let count = mask.iter().filter(|&&m| m).count();
                    let w = g[0] / sc::<S>(count as f64);
                    let dx = acc(grads, logits.0, rows * cols);
                    for r in 0..rows {
                        if !mask[r] {
                            continue;
                        }
                        let row = &t.data()[r * cols..(r + 1) * cols];
                        let lse = log_sum_exp(row);
                        for j in 0..cols {
                            let p = (row[j] - lse).exp();
                            let onehot = if j == targets[r] { S::one() } else { S::zero() };
                            dx[r * cols + j] += (p - onehot) * w;
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, labels } => {
                if self.needs(*logits) {
                    let t = self.value(*logits);
                    let n = labels.len();
                    let w = g[0] / sc::<S>(n as f64);
                    let dx = acc(grads, logits.0, n);
                    for i in 0..n {
                        let z = t.data()[i];
                        let sig = S::one() / (S::one() + (-z).exp());
                        dx[i] += (sig - labels[i]) * w;
                    }
                }
            }
        }
    }
}

fn acc<'a, S: Scalar>(grads: &'a mut [Option<Vec<S>>], idx: usize, n: usize) -> &'a mut [S] {
    grads[idx].get_or_insert_with(|| vec![S::zero(); n]).as_mut_slice()
}

fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

fn row_stats<S: Scalar>(row: &[S]) -> (S, S) {
    let n = sc::<S>(row.len() as f64);
    let mut mu = S::zero();
    for &v in row {
        mu += v;
    }
    mu /= n;
    let mut var = S::zero();
    for &v in row {
        let d = v - mu;
        var += d * d;
    }
    (mu, var / n)
}

fn l2_norm<S: Scalar>(v: &[S]) -> S {
    let mut s = S::zero();
    for &x in v {
        s += x * x;
    }
    s.sqrt()
}

/// Log-sum-exp with row-max subtraction.
pub fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let mut m = row[0];
    for &v in &row[1..] {
        if v > m {
            m = v;
        }
    }
    let mut s = S::zero();
    for &v in row {
        s += (v - m).exp();
    }
    m + s.ln()
}

fn softmax_row<S: Scalar>(row: &[S], out: &mut [S]) {
    let mut m = row[0];
    for &v in &row[1..] {
        if v > m {
            m = v;
        }
    }
    let mut s = S::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o = *o / s;
    }
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = sc::<S>(0.7978845608028654); // sqrt(2/pi)
    let a = sc::<S>(0.044715);
    let u = c * (x + a * x * x * x);
    sc::<S>(0.5) * x * (S::one() + u.tanh())
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let c = sc::<S>(0.7978845608028654);
    let a = sc::<S>(0.044715);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (S::one() + sc::<S>(3.0) * a * x * x);
    sc::<S>(0.5) * (S::one() + t) + sc::<S>(0.5) * x * (S::one() - t * t) * du
}

/// Plain cosine similarity on slices; errors on near-zero norm.
pub fn cosine_value<S: Scalar>(u: &[S], v: &[S]) -> Result<S> {
    let (nu, nv) = (l2_norm(u), l2_norm(v));
    if nu.to_f64c() < 1e-12 || nv.to_f64c() < 1e-12 {
        return Err(IlmError::DegenerateInput("cosine_similarity on zero-norm vector".into()));
    }
    let mut dot = S::zero();
    for (&a, &b) in u.iter().zip(v) {
        dot += a * b;
    }
    Ok(dot / (nu * nv))
}

// ── Parameter registry ───────────────────────────────────────────────

/// Handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named parameter tensors owned by a model, bound into a fresh graph each
/// step and updated from the resulting gradients.
pub struct ParamSet<S> {
    entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<S>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|(n, _)| *n == name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, t.with_grad()));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    /// Replace tensor data by name; shapes must match.
    pub fn load_named(&mut self, name: &str, data: &[S], shape: &[usize]) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| IlmError::Checkpoint(format!("unknown parameter `{name}`")))?;
        let t = self.get_mut(id);
        if t.shape() != shape {
            return Err(IlmError::Checkpoint(format!(
                "parameter `{name}` shape mismatch: model {:?} vs checkpoint {shape:?}",
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    /// Order-stable checksum of all parameter bytes (f32-quantized view).
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, t) in &self.entries {
            for b in name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
            }
            for v in t.data() {
                for b in v.to_f32c().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Per-step binding of a `ParamSet` into a graph.
pub struct Bound {
    vars: Vec<Var>,
    trainable: bool,
}

impl Bound {
    /// Binding over pre-inserted leaves, ordered by `ParamId`. Used by the
    /// gradient-check harness.
    pub fn from_vars(vars: Vec<Var>, trainable: bool) -> Self {
        Bound { vars, trainable }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }
}

impl<S: Scalar> Graph<S> {
    /// Bind all parameters as leaves. `trainable = false` binds them as
    /// constants (the frozen-backbone path).
    pub fn bind(&mut self, params: &ParamSet<S>, trainable: bool) -> Result<Bound> {
        let mut vars = Vec::with_capacity(params.len());
        for id in params.ids() {
            let mut t = params.get(id).clone();
            if !trainable {
                t = Tensor { requires_grad: false, ..t };
            }
            vars.push(self.leaf(t)?);
        }
        Ok(Bound { vars, trainable })
    }

    /// Collect gradients for a bound parameter set, ordered by `ParamId`.
    /// Entries are `None` when the binding is frozen.
    pub fn param_grads(&self, grads: &Gradients<S>, bound: &Bound) -> Vec<Option<Vec<S>>> {
        bound
            .vars
            .iter()
            .map(|v| if bound.trainable { grads.get(*v).map(|g| g.to_vec()) } else { None })
            .collect()
    }
}

pub mod gradcheck {
    //! Central finite-difference gradient checking used by the test suites.

    use super::*;

    /// Max relative error between analytic gradients and central finite
    /// differences over every element of every parameter.
    ///
    /// `build` must construct the forward pass from the bound leaves and
    /// return the scalar loss.
    pub fn max_rel_error<F>(params: &[Tensor<f64>], step: f64, build: F) -> f64
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Var,
    {
        let run = |tensors: &[Tensor<f64>]| -> (f64, Vec<Vec<f64>>) {
            let mut g: Graph<f64> = Graph::new();
            let vars: Vec<Var> = tensors
                .iter()
                .map(|t| g.leaf(t.clone().with_grad()).expect("leaf"))
                .collect();
            let loss = build(&mut g, &vars);
            let grads = g.backward(loss).expect("backward");
            let loss_v = g.value(loss).data()[0];
            let gs = vars
                .iter()
                .map(|v| grads.get(*v).expect("leaf gradient").to_vec())
                .collect();
            (loss_v, gs)
        };
        let eval = |tensors: &[Tensor<f64>]| -> f64 {
            let mut g: Graph<f64> = Graph::new();
            let vars: Vec<Var> =
                tensors.iter().map(|t| g.leaf(t.clone()).expect("leaf")).collect();
            let loss = build(&mut g, &vars);
            g.value(loss).data()[0]
        };

        let (_, analytic) = run(params);
        let mut worst = 0.0f64;
        for (pi, p) in params.iter().enumerate() {
            for ei in 0..p.numel() {
                let mut plus = params.to_vec();
                plus[pi].data_mut()[ei] += step;
                let mut minus = params.to_vec();
                minus[pi].data_mut()[ei] -= step;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
                let a = analytic[pi][ei];
                let denom = a.abs().max(numeric.abs()).max(1.0);
                worst = worst.max((a - numeric).abs() / denom);
            }
        }
        worst
    }
}
