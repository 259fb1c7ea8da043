//! Reverse-mode automatic differentiation on a linear tape.
//!
//! All model math runs through [`Tape`]: the forward pass records one node
//! per operation, `backward` replays the nodes in reverse and accumulates
//! gradients into every tensor created with `requires_grad`. Storage is flat
//! row-major `f64`; there is no broadcasting beyond what the model needs
//! (a row-wise bias add).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(usize);

/// N-dimensional array of `f64` with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero dimension in {:?}", shape)));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Recorded backward rule. Inputs are tape indices of operands; whatever
/// extra state the rule needs (masks, target ids) is captured here.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { x: usize },
    Add { a: usize, b: usize },
    AddBias { x: usize, bias: usize },
    Mul { a: usize, b: usize },
    AddScalar { x: usize },
    MulScalar { x: usize, c: f64 },
    Relu { x: usize },
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    CrossEntropy { logits: usize, targets: Vec<u32>, pad: Option<u32>, count: usize },
    EmbeddingLookup { table: usize, ids: Vec<u32> },
    Dropout { x: usize, mask: Vec<f64> },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize, len: usize },
    MaskedFill { x: usize, mask: Vec<bool> },
    Sum { x: usize },
}

/// Linear record of a forward computation. Nodes are appended in execution
/// order, so inputs always precede their consumers and a single reverse
/// sweep visits each node exactly once.
pub struct Tape {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// A[m,k] * B[k,n] with a blocked i-k-j loop; shared by forward and backward.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// Iterate over every lane of `shape` along `axis`, yielding
/// (start offset, stride); lane elements live at `start + i * stride`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize)) {
    let axis_len = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let numel: usize = shape.iter().product();
    let outer = numel / (axis_len * stride);
    for o in 0..outer {
        for inner in 0..stride {
            f(o * axis_len * stride + inner, stride);
        }
    }
}

fn require_2d(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::shape(op, format!("expected 2-d tensor, got {:?}", t.shape)));
    }
    Ok((t.shape[0], t.shape[1]))
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a caller-constructed tensor as a leaf.
    pub fn leaf(&mut self, t: Tensor) -> TensorRef {
        self.push(t, Op::Leaf)
    }

    /// Leaf that participates in gradient accumulation.
    pub fn param(&mut self, data: &[f64], shape: &[usize]) -> Result<TensorRef> {
        let t = Tensor::new(data.to_vec(), shape.to_vec())?.with_grad();
        Ok(self.leaf(t))
    }

    /// Leaf excluded from gradient accumulation.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorRef> {
        Ok(self.leaf(Tensor::new(data, shape)?))
    }

    pub fn value(&self, r: TensorRef) -> &Tensor {
        &self.nodes[r.0]
    }

    pub fn data(&self, r: TensorRef) -> &[f64] {
        &self.nodes[r.0].data
    }

    pub fn shape(&self, r: TensorRef) -> &[usize] {
        &self.nodes[r.0].shape
    }

    pub fn grad(&self, r: TensorRef) -> Option<&[f64]> {
        self.nodes[r.0].grad.as_deref()
    }

    /// Clear accumulated gradients on every node. Resets are always explicit;
    /// repeated `backward` calls without one keep accumulating.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, t: Tensor, op: Op) -> TensorRef {
        debug_assert!(
            t.data.iter().all(|v| v.is_finite()),
            "non-finite value produced by {:?}",
            op
        );
        self.nodes.push(t);
        self.ops.push(op);
        TensorRef(self.nodes.len() - 1)
    }

    fn out(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op) -> TensorRef {
        self.push(Tensor { shape, data, requires_grad: false, grad: None }, op)
    }

    // ---- forward operations ------------------------------------------------

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (m, k) = require_2d(self.value(a), "matmul")?;
        let (k2, n) = require_2d(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions disagree: [{m}x{k}] * [{k2}x{n}]"),
            ));
        }
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        Ok(self.out(data, vec![m, n], Op::Matmul { a: a.0, b: b.0 }))
    }

    pub fn transpose(&mut self, x: TensorRef) -> Result<TensorRef> {
        let (rows, cols) = require_2d(self.value(x), "transpose")?;
        let data = transpose_raw(&self.nodes[x.0].data, rows, cols);
        Ok(self.out(data, vec![cols, rows], Op::Transpose { x: x.0 }))
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.out(data, shape, Op::Add { a: a.0, b: b.0 }))
    }

    /// `[m,n] + [n]`, the bias term of an affine layer.
    pub fn add_bias(&mut self, x: TensorRef, bias: TensorRef) -> Result<TensorRef> {
        let (m, n) = require_2d(self.value(x), "add_bias")?;
        if self.shape(bias) != [n] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} does not match row width {n}", self.shape(bias)),
            ));
        }
        let mut data = self.nodes[x.0].data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += self.nodes[bias.0].data[j];
            }
        }
        Ok(self.out(data, vec![m, n], Op::AddBias { x: x.0, bias: bias.0 }))
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.out(data, shape, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn add_scalar(&mut self, x: TensorRef, c: f64) -> TensorRef {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v + c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.out(data, shape, Op::AddScalar { x: x.0 })
    }

    pub fn mul_scalar(&mut self, x: TensorRef, c: f64) -> TensorRef {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.out(data, shape, Op::MulScalar { x: x.0, c })
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let neg = self.mul_scalar(b, -1.0);
        self.add(a, neg)
    }

    pub fn relu(&mut self, x: TensorRef) -> TensorRef {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.out(data, shape, Op::Relu { x: x.0 })
    }

    /// Max-subtracted softmax along `axis`; each lane sums to 1.
    pub fn softmax(&mut self, x: TensorRef, axis: usize) -> Result<TensorRef> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::arg("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let mut data = self.nodes[x.0].data.clone();
        let axis_len = shape[axis];
        for_each_lane(&shape, axis, |start, stride| {
            let mut max = f64::NEG_INFINITY;
            for i in 0..axis_len {
                max = max.max(data[start + i * stride]);
            }
            let mut sum = 0.0;
            for i in 0..axis_len {
                let e = (data[start + i * stride] - max).exp();
                data[start + i * stride] = e;
                sum += e;
            }
            for i in 0..axis_len {
                data[start + i * stride] /= sum;
            }
        });
        Ok(self.out(data, shape, Op::Softmax { x: x.0, axis }))
    }

    /// `x - logsumexp(x)` along `axis`.
    pub fn log_softmax(&mut self, x: TensorRef, axis: usize) -> Result<TensorRef> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::arg(
                "log_softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let mut data = self.nodes[x.0].data.clone();
        let axis_len = shape[axis];
        for_each_lane(&shape, axis, |start, stride| {
            let mut max = f64::NEG_INFINITY;
            for i in 0..axis_len {
                max = max.max(data[start + i * stride]);
            }
            let mut sum = 0.0;
            for i in 0..axis_len {
                sum += (data[start + i * stride] - max).exp();
            }
            let lse = max + sum.ln();
            for i in 0..axis_len {
                data[start + i * stride] -= lse;
            }
        });
        Ok(self.out(data, shape, Op::LogSoftmax { x: x.0, axis }))
    }

    /// Per-row normalization over the last dimension (population variance,
    /// `eps` added to the variance), then elementwise `gain * x_hat + bias`.
    pub fn layer_norm(
        &mut self,
        x: TensorRef,
        gain: TensorRef,
        bias: TensorRef,
        eps: f64,
    ) -> Result<TensorRef> {
        let shape = self.nodes[x.0].shape.clone();
        let n = *shape.last().ok_or_else(|| Error::shape("layer_norm", "0-d input"))?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} do not match last dim {n}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let rows = self.nodes[x.0].data.len() / n;
        let mut data = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &self.nodes[x.0].data[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                let xhat = (row[j] - mean) * inv;
                data[r * n + j] = xhat * self.nodes[gain.0].data[j] + self.nodes[bias.0].data[j];
            }
        }
        Ok(self.out(data, shape, Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, eps }))
    }

    /// Mean over non-padding positions of `-log softmax(logits)[target]`.
    pub fn cross_entropy(
        &mut self,
        logits: TensorRef,
        targets: &[u32],
        pad: Option<u32>,
    ) -> Result<TensorRef> {
        let (t, vocab) = require_2d(self.value(logits), "cross_entropy")?;
        if targets.len() != t {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {} logit rows", targets.len(), t),
            ));
        }
        if t == 0 {
            return Err(Error::arg("cross_entropy", "empty target sequence"));
        }
        if let Some(&bad) = targets.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::arg(
                "cross_entropy",
                format!("target id {bad} out of range for vocab {vocab}"),
            ));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, &tgt) in targets.iter().enumerate() {
            if pad == Some(tgt) {
                continue;
            }
            let row = &self.nodes[logits.0].data[i * vocab..(i + 1) * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[tgt as usize];
            count += 1;
        }
        if count == 0 {
            return Err(Error::arg("cross_entropy", "all targets are padding"));
        }
        let loss = total / count as f64;
        Ok(self.out(
            vec![loss],
            vec![1],
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), pad, count },
        ))
    }

    /// Gather rows of `table` by id; backward scatter-adds into the table.
    pub fn embedding_lookup(&mut self, table: TensorRef, ids: &[u32]) -> Result<TensorRef> {
        let (rows, width) = require_2d(self.value(table), "embedding_lookup")?;
        if ids.is_empty() {
            return Err(Error::arg("embedding_lookup", "empty id sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= rows) {
            return Err(Error::arg(
                "embedding_lookup",
                format!("id {bad} out of range for table with {rows} rows"),
            ));
        }
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            let r = id as usize;
            data.extend_from_slice(&self.nodes[table.0].data[r * width..(r + 1) * width]);
        }
        Ok(self.out(
            data,
            vec![ids.len(), width],
            Op::EmbeddingLookup { table: table.0, ids: ids.to_vec() },
        ))
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)` at train time
    /// so inference needs no rescaling.
    pub fn dropout(&mut self, x: TensorRef, p: f64, rng: &mut ChaCha8Rng) -> Result<TensorRef> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::arg("dropout", format!("ratio {p} outside [0,1)")));
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.nodes[x.0].data.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data: Vec<f64> = self.nodes[x.0].data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.out(data, shape, Op::Dropout { x: x.0, mask }))
    }

    /// Stack 2-d tensors of equal width vertically.
    pub fn concat_rows(&mut self, parts: &[TensorRef]) -> Result<TensorRef> {
        if parts.is_empty() {
            return Err(Error::arg("concat_rows", "no parts"));
        }
        let (_, width) = require_2d(self.value(parts[0]), "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, w) = require_2d(self.value(p), "concat_rows")?;
            if w != width {
                return Err(Error::shape("concat_rows", format!("widths {width} vs {w}")));
            }
            rows += r;
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        Ok(self.out(
            data,
            vec![rows, width],
            Op::ConcatRows { parts: parts.iter().map(|p| p.0).collect() },
        ))
    }

    /// Stack 2-d tensors of equal height horizontally.
    pub fn concat_cols(&mut self, parts: &[TensorRef]) -> Result<TensorRef> {
        if parts.is_empty() {
            return Err(Error::arg("concat_cols", "no parts"));
        }
        let (rows, _) = require_2d(self.value(parts[0]), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, w) = require_2d(self.value(p), "concat_cols")?;
            if r != rows {
                return Err(Error::shape("concat_cols", format!("heights {rows} vs {r}")));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&self.nodes[p.0].data[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        Ok(self.out(
            data,
            vec![rows, total],
            Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() },
        ))
    }

    pub fn slice_rows(&mut self, x: TensorRef, start: usize, len: usize) -> Result<TensorRef> {
        let (rows, width) = require_2d(self.value(x), "slice_rows")?;
        if start + len > rows || len == 0 {
            return Err(Error::arg(
                "slice_rows",
                format!("rows {start}..{} of {rows}", start + len),
            ));
        }
        let data = self.nodes[x.0].data[start * width..(start + len) * width].to_vec();
        Ok(self.out(data, vec![len, width], Op::SliceRows { x: x.0, start }))
    }

    pub fn slice_cols(&mut self, x: TensorRef, start: usize, len: usize) -> Result<TensorRef> {
        let (rows, width) = require_2d(self.value(x), "slice_cols")?;
        if start + len > width || len == 0 {
            return Err(Error::arg(
                "slice_cols",
                format!("cols {start}..{} of {width}", start + len),
            ));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.nodes[x.0].data[r * width + start..r * width + start + len]);
        }
        Ok(self.out(data, vec![rows, len], Op::SliceCols { x: x.0, start, len }))
    }

    /// Replace entries where `mask` is true with `value` (used for attention
    /// masks; gradient is zero at masked positions).
    pub fn masked_fill(&mut self, x: TensorRef, mask: &[bool], value: f64) -> Result<TensorRef> {
        if mask.len() != self.nodes[x.0].data.len() {
            return Err(Error::shape(
                "masked_fill",
                format!("mask length {} vs {} elements", mask.len(), self.nodes[x.0].data.len()),
            ));
        }
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .zip(mask)
            .map(|(v, &m)| if m { value } else { *v })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.out(data, shape, Op::MaskedFill { x: x.0, mask: mask.to_vec() }))
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, x: TensorRef) -> TensorRef {
        let total: f64 = self.nodes[x.0].data.iter().sum();
        self.out(vec![total], vec![1], Op::Sum { x: x.0 })
    }

    pub fn mean(&mut self, x: TensorRef) -> TensorRef {
        let n = self.nodes[x.0].data.len() as f64;
        let s = self.sum(x);
        self.mul_scalar(s, 1.0 / n)
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulate gradients of `loss` into every node; `loss` must be scalar.
    /// Gradients add onto whatever is already stored; resetting is the
    /// caller's job via [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: TensorRef) -> Result<()> {
        if self.nodes[loss.0].numel() != 1 {
            return Err(Error::arg(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].shape),
            ));
        }
        let n = loss.0 + 1;
        // Local gradient buffers for this sweep; merged into node grads at the end.
        let mut grads: Vec<Vec<f64>> = self.nodes[..n].iter().map(|t| vec![0.0; t.numel()]).collect();
        grads[loss.0][0] = 1.0;

        for i in (0..n).rev() {
            if grads[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            match &self.ops[i] {
                Op::Leaf => {
                    grads[i] = g;
                    continue;
                }
                Op::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let m = self.nodes[a].shape[0];
                    let k = self.nodes[a].shape[1];
                    let nn = self.nodes[b].shape[1];
                    let bt = transpose_raw(&self.nodes[b].data, k, nn);
                    let da = matmul_raw(&g, &bt, m, nn, k);
                    let at = transpose_raw(&self.nodes[a].data, m, k);
                    let db = matmul_raw(&at, &g, k, m, nn);
                    axpy(&mut grads[a], &da);
                    axpy(&mut grads[b], &db);
                }
                Op::Transpose { x } => {
                    let x = *x;
                    let rows = self.nodes[x].shape[0];
                    let cols = self.nodes[x].shape[1];
                    let dg = transpose_raw(&g, cols, rows);
                    axpy(&mut grads[x], &dg);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    axpy(&mut grads[a], &g);
                    axpy(&mut grads[b], &g);
                }
                Op::AddBias { x, bias } => {
                    let (x, bias) = (*x, *bias);
                    let nn = self.nodes[bias].data.len();
                    axpy(&mut grads[x], &g);
                    let rows = g.len() / nn;
                    for r in 0..rows {
                        for j in 0..nn {
                            grads[bias][j] += g[r * nn + j];
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    for (idx, &gv) in g.iter().enumerate() {
                        grads[a][idx] += gv * self.nodes[b].data[idx];
                    }
                    for (idx, &gv) in g.iter().enumerate() {
                        grads[b][idx] += gv * self.nodes[a].data[idx];
                    }
                }
                Op::AddScalar { x } => axpy(&mut grads[*x], &g),
                Op::MulScalar { x, c } => {
                    let (x, c) = (*x, *c);
                    for (idx, &gv) in g.iter().enumerate() {
                        grads[x][idx] += gv * c;
                    }
                }
                Op::Relu { x } => {
                    let x = *x;
                    for (idx, &gv) in g.iter().enumerate() {
                        if self.nodes[x].data[idx] > 0.0 {
                            grads[x][idx] += gv;
                        }
                    }
                }
                Op::Softmax { x, axis } => {
                    let (x, axis) = (*x, *axis);
                    let shape = self.nodes[i].shape.clone();
                    let y = &self.nodes[i].data;
                    let axis_len = shape[axis];
                    let mut dx = vec![0.0; y.len()];
                    for_each_lane(&shape, axis, |start, stride| {
                        let mut dot = 0.0;
                        for j in 0..axis_len {
                            let idx = start + j * stride;
                            dot += g[idx] * y[idx];
                        }
                        for j in 0..axis_len {
                            let idx = start + j * stride;
                            dx[idx] = y[idx] * (g[idx] - dot);
                        }
                    });
                    axpy(&mut grads[x], &dx);
                }
                Op::LogSoftmax { x, axis } => {
                    let (x, axis) = (*x, *axis);
                    let shape = self.nodes[i].shape.clone();
                    let y = &self.nodes[i].data; // log-probs
                    let axis_len = shape[axis];
                    let mut dx = vec![0.0; y.len()];
                    for_each_lane(&shape, axis, |start, stride| {
                        let mut gsum = 0.0;
                        for j in 0..axis_len {
                            gsum += g[start + j * stride];
                        }
                        for j in 0..axis_len {
                            let idx = start + j * stride;
                            dx[idx] = g[idx] - y[idx].exp() * gsum;
                        }
                    });
                    axpy(&mut grads[x], &dx);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
                    let nn = self.nodes[gain].data.len();
                    let rows = g.len() / nn;
                    let nf = nn as f64;
                    for r in 0..rows {
                        let row = &self.nodes[x].data[r * nn..(r + 1) * nn];
                        let gr = &g[r * nn..(r + 1) * nn];
                        let mean = row.iter().sum::<f64>() / nf;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                        let inv = 1.0 / (var + eps).sqrt();
                        // d wrt gain/bias and the normalized vector
                        let mut dxhat = vec![0.0; nn];
                        let mut dxhat_mean = 0.0;
                        let mut dxhat_xhat_mean = 0.0;
                        for j in 0..nn {
                            let xhat = (row[j] - mean) * inv;
                            grads[gain][j] += gr[j] * xhat;
                            grads[bias][j] += gr[j];
                            let d = gr[j] * self.nodes[gain].data[j];
                            dxhat[j] = d;
                            dxhat_mean += d;
                            dxhat_xhat_mean += d * xhat;
                        }
                        dxhat_mean /= nf;
                        dxhat_xhat_mean /= nf;
                        for j in 0..nn {
                            let xhat = (row[j] - mean) * inv;
                            grads[x][r * nn + j] +=
                                inv * (dxhat[j] - dxhat_mean - xhat * dxhat_xhat_mean);
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, pad, count } => {
                    let (logits, count) = (*logits, *count);
                    let upstream = g[0];
                    let vocab = self.nodes[logits].shape[1];
                    let scale = upstream / count as f64;
                    for (r, &tgt) in targets.iter().enumerate() {
                        if *pad == Some(tgt) {
                            continue;
                        }
                        let row = &self.nodes[logits].data[r * vocab..(r + 1) * vocab];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for j in 0..vocab {
                            let p = (row[j] - max).exp() / denom;
                            let onehot = if j == tgt as usize { 1.0 } else { 0.0 };
                            grads[logits][r * vocab + j] += scale * (p - onehot);
                        }
                    }
                }
                Op::EmbeddingLookup { table, ids } => {
                    let table = *table;
                    let width = self.nodes[table].shape[1];
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = id as usize * width;
                        for j in 0..width {
                            grads[table][dst + j] += g[r * width + j];
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    let x = *x;
                    for (idx, (&gv, &m)) in g.iter().zip(mask.iter()).enumerate() {
                        grads[x][idx] += gv * m;
                    }
                }
                Op::ConcatRows { parts } => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p].data.len();
                        axpy(&mut grads[p], &g[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::ConcatCols { parts } => {
                    let parts = parts.clone();
                    let rows = self.nodes[i].shape[0];
                    let total = self.nodes[i].shape[1];
                    let mut offset = 0;
                    for p in parts {
                        let w = self.nodes[p].shape[1];
                        for r in 0..rows {
                            for j in 0..w {
                                grads[p][r * w + j] += g[r * total + offset + j];
                            }
                        }
                        offset += w;
                    }
                }
                Op::SliceRows { x, start } => {
                    let (x, start) = (*x, *start);
                    let width = self.nodes[x].shape[1];
                    axpy(&mut grads[x][start * width..start * width + g.len()], &g);
                }
                Op::SliceCols { x, start, len } => {
                    let (x, start, len) = (*x, *start, *len);
                    let width = self.nodes[x].shape[1];
                    let rows = g.len() / len;
                    for r in 0..rows {
                        for j in 0..len {
                            grads[x][r * width + start + j] += g[r * len + j];
                        }
                    }
                }
                Op::MaskedFill { x, mask } => {
                    let x = *x;
                    for (idx, (&gv, &m)) in g.iter().zip(mask.iter()).enumerate() {
                        if !m {
                            grads[x][idx] += gv;
                        }
                    }
                }
                Op::Sum { x } => {
                    let x = *x;
                    let gv = g[0];
                    for slot in grads[x].iter_mut() {
                        *slot += gv;
                    }
                }
            }
        }

        // Merge sweep results into persistent grads of requires_grad tensors.
        for (i, node) in self.nodes[..n].iter_mut().enumerate() {
            if !node.requires_grad {
                continue;
            }
            let acc = node.grad.get_or_insert_with(|| vec![0.0; grads[i].len()]);
            axpy(acc, &grads[i]);
        }
        Ok(())
    }
}

fn axpy(acc: &mut [f64], g: &[f64]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}
