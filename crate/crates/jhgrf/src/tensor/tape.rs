//! The recording tape: forward operations and their reverse-mode adjoints.

use rand::Rng;

use super::{numel, Tensor, TensorError};

/// Handle to a node on a [`Tape`]. Ids are assigned in recording order, so a
/// node's inputs always have smaller ids than the node itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    Neg,
    Sqrt,
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Unary { a: usize, kind: UnaryKind },
    Binary { a: usize, b: usize, kind: BinaryKind },
    /// `k * a`, with `k` a compile-time constant of the graph.
    Scale { a: usize, k: f64 },
    /// `a + k` elementwise; the constant is not needed for the adjoint.
    AddScalar { a: usize },
    /// Batched matrix product over the two trailing axes.
    MatMul { a: usize, b: usize },
    SoftmaxLast { a: usize },
    /// Softmax over the last axis where each exponential is scaled by a
    /// non-negative weight; all-zero rows produce all-zero output.
    MaskedSoftmaxLast { logits: usize, weights: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    /// Sum over the last axis, keeping it as extent 1.
    SumLast { a: usize },
    Reshape { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    ConcatLast { a: usize, b: usize },
    /// Select one index along an axis, dropping that axis.
    IndexAxis { a: usize, axis: usize, index: usize },
    /// Stack equal-shaped tensors along a fresh axis.
    StackAxis { parts: Vec<usize>, axis: usize },
    /// Forward: 1.0 where `a >= threshold` else 0.0. Backward: identity
    /// (straight-through estimator).
    HardThreshold { a: usize },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Records a forward pass and replays it in reverse to accumulate gradients.
///
/// A tape is consumed by its first [`Tape::backward`] call; a second call
/// reports [`TensorError::DetachedTensor`]. Node values remain readable after
/// consumption, as do the gradients of the pass.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Vec<f64>>>,
    first_nonfinite: Option<(usize, usize)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Right-aligned broadcast of two shapes; extents must match or be 1.
fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return None;
        }
    }
    Some(out)
}

/// Strides of `shape` right-aligned into `out_nd` axes, with stride 0 on
/// broadcast (extent 1 or missing) axes, so walking output coordinates lands
/// on the correct input element.
fn broadcast_strides(shape: &[usize], out_nd: usize) -> Vec<usize> {
    let native = strides_of(shape);
    let mut out = vec![0usize; out_nd];
    let offset = out_nd - shape.len();
    for i in 0..shape.len() {
        out[offset + i] = if shape[i] == 1 { 0 } else { native[i] };
    }
    out
}

/// Flat offsets into two broadcast operands for one output element.
#[inline]
fn broadcast_offsets(flat: usize, out_shape: &[usize], sa: &[usize], sb: &[usize]) -> (usize, usize) {
    let mut rem = flat;
    let (mut ia, mut ib) = (0, 0);
    for d in (0..out_shape.len()).rev() {
        let c = rem % out_shape[d];
        rem /= out_shape[d];
        ia += c * sa[d];
        ib += c * sb[d];
    }
    (ia, ib)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: None,
            first_nonfinite: None,
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Position of the first non-finite value produced so far, as
    /// `(node, flat offset)`. Only maintained in debug builds.
    pub fn first_nonfinite(&self) -> Option<(usize, usize)> {
        self.first_nonfinite
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>) -> TensorId {
        debug_assert_eq!(numel(&shape), values.len());
        if cfg!(debug_assertions) && self.first_nonfinite.is_none() {
            if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                self.first_nonfinite = Some((self.nodes.len(), i));
            }
        }
        self.nodes.push(Node { op, shape, values });
        TensorId(self.nodes.len() - 1)
    }

    fn check(&self, id: TensorId) -> Result<usize, TensorError> {
        if id.0 < self.nodes.len() {
            Ok(id.0)
        } else {
            Err(TensorError::DetachedTensor)
        }
    }

    /// Copies a tensor onto the tape as a leaf node.
    pub fn place(&mut self, t: &Tensor) -> TensorId {
        self.push(Op::Leaf, t.shape().to_vec(), t.values().to_vec())
    }

    /// Like [`Tape::place`], additionally recording the assigned id in the
    /// tensor's `tape_id` so its gradient can be harvested later.
    pub fn place_tracked(&mut self, t: &mut Tensor) -> TensorId {
        let id = self.place(t);
        t.tape_id = Some(id);
        id
    }

    /// Creates a leaf directly from a shape and values.
    pub fn leaf(&mut self, shape: &[usize], values: Vec<f64>) -> Result<TensorId, TensorError> {
        if numel(shape) != values.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "leaf shape {:?} implies {} elements, got {}",
                shape,
                numel(shape),
                values.len()
            )));
        }
        Ok(self.push(Op::Leaf, shape.to_vec(), values))
    }

    /// Scalar leaf (rank zero).
    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(Op::Leaf, Vec::new(), vec![v])
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    /// Snapshot of a node as an owned [`Tensor`].
    pub fn to_tensor(&self, id: TensorId) -> Tensor {
        Tensor {
            shape: self.nodes[id.0].shape.clone(),
            values: self.nodes[id.0].values.clone(),
            grad: None,
            tape_id: Some(id),
        }
    }

    // ── pointwise ──────────────────────────────────────────────────────

    fn unary(&mut self, a: TensorId, kind: UnaryKind) -> Result<TensorId, TensorError> {
        let a = self.check(a)?;
        let x = &self.nodes[a];
        if kind == UnaryKind::Log {
            if let Some(i) = x.values.iter().position(|v| *v <= 0.0) {
                return Err(TensorError::DomainError(format!(
                    "log of non-positive value {} at flat index {}",
                    x.values[i], i
                )));
            }
        }
        if kind == UnaryKind::Sqrt {
            if let Some(i) = x.values.iter().position(|v| *v < 0.0) {
                return Err(TensorError::DomainError(format!(
                    "sqrt of negative value {} at flat index {}",
                    x.values[i], i
                )));
            }
        }
        let values: Vec<f64> = x
            .values
            .iter()
            .map(|&v| match kind {
                UnaryKind::Sigmoid => 1.0 / (1.0 + (-v).exp()),
                UnaryKind::Tanh => v.tanh(),
                UnaryKind::Relu => v.max(0.0),
                UnaryKind::Exp => v.exp(),
                UnaryKind::Log => v.ln(),
                UnaryKind::Neg => -v,
                UnaryKind::Sqrt => v.sqrt(),
                UnaryKind::Abs => v.abs(),
            })
            .collect();
        let shape = x.shape.clone();
        Ok(self.push(Op::Unary { a, kind }, shape, values))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.unary(a, UnaryKind::Sigmoid)
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.unary(a, UnaryKind::Tanh)
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.unary(a, UnaryKind::Relu)
    }

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.unary(a, UnaryKind::Exp)
    }

    pub fn log(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.unary(a, UnaryKind::Log)
    }

    pub fn neg(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.unary(a, UnaryKind::Neg)
    }

    pub fn sqrt(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.unary(a, UnaryKind::Sqrt)
    }

    pub fn abs(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.unary(a, UnaryKind::Abs)
    }

    fn binary(&mut self, a: TensorId, b: TensorId, kind: BinaryKind) -> Result<TensorId, TensorError> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        let out_shape = broadcast_shapes(sa, sb).ok_or_else(|| {
            TensorError::ShapeMismatch(format!("cannot broadcast {:?} with {:?}", sa, sb))
        })?;
        let stra = broadcast_strides(sa, out_shape.len());
        let strb = broadcast_strides(sb, out_shape.len());
        let n = numel(&out_shape);
        let mut values = vec![0.0; n];
        for (flat, out) in values.iter_mut().enumerate() {
            let (ia, ib) = broadcast_offsets(flat, &out_shape, &stra, &strb);
            let (va, vb) = (self.nodes[a].values[ia], self.nodes[b].values[ib]);
            *out = match kind {
                BinaryKind::Add => va + vb,
                BinaryKind::Sub => va - vb,
                BinaryKind::Mul => va * vb,
                BinaryKind::Div => va / vb,
            };
        }
        Ok(self.push(Op::Binary { a, b, kind }, out_shape, values))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary(a, b, BinaryKind::Div)
    }

    /// `k * a` for a constant `k`.
    pub fn scale(&mut self, a: TensorId, k: f64) -> Result<TensorId, TensorError> {
        let a = self.check(a)?;
        let values = self.nodes[a].values.iter().map(|v| k * v).collect();
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::Scale { a, k }, shape, values))
    }

    /// `a + k` for a constant `k`.
    pub fn add_scalar(&mut self, a: TensorId, k: f64) -> Result<TensorId, TensorError> {
        let a = self.check(a)?;
        let values = self.nodes[a].values.iter().map(|v| v + k).collect();
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::AddScalar { a }, shape, values))
    }

    // ── contractions and reductions ────────────────────────────────────

    /// Batched matrix product. The two trailing axes multiply as matrices;
    /// leading axes broadcast.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul needs rank >= 2 operands, got {:?} and {:?}",
                sa, sb
            )));
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (q2, r) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if q != q2 {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul inner axes disagree: {:?} vs {:?}",
                sa, sb
            )));
        }
        let batch = broadcast_shapes(&sa[..sa.len() - 2], &sb[..sb.len() - 2]).ok_or_else(|| {
            TensorError::ShapeMismatch(format!(
                "matmul batch axes do not broadcast: {:?} vs {:?}",
                sa, sb
            ))
        })?;
        let stra = broadcast_strides(&sa[..sa.len() - 2], batch.len());
        let strb = broadcast_strides(&sb[..sb.len() - 2], batch.len());
        let mut out_shape = batch.clone();
        out_shape.extend_from_slice(&[p, r]);
        let mut values = vec![0.0; numel(&out_shape)];
        let (ma, mb, mo) = (p * q, q * r, p * r);
        for flat in 0..numel(&batch) {
            let (ba, bb) = broadcast_offsets(flat, &batch, &stra, &strb);
            let (oa, ob, oo) = (ba * ma, bb * mb, flat * mo);
            let av = &self.nodes[a].values;
            let bv = &self.nodes[b].values;
            for i in 0..p {
                for k in 0..q {
                    let x = av[oa + i * q + k];
                    if x == 0.0 {
                        continue;
                    }
                    let row = &bv[ob + k * r..ob + (k + 1) * r];
                    let out = &mut values[oo + i * r..oo + (i + 1) * r];
                    for (o, y) in out.iter_mut().zip(row) {
                        *o += x * y;
                    }
                }
            }
        }
        Ok(self.push(Op::MatMul { a, b }, out_shape, values))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_lastdim(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let a = self.check(a)?;
        let shape = self.nodes[a].shape.clone();
        if shape.is_empty() {
            return Err(TensorError::ShapeMismatch(
                "softmax needs rank >= 1".to_string(),
            ));
        }
        let k = shape[shape.len() - 1];
        let x = &self.nodes[a].values;
        let mut values = vec![0.0; x.len()];
        for row in 0..x.len() / k.max(1) {
            let src = &x[row * k..(row + 1) * k];
            let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut values[row * k..(row + 1) * k];
            let mut s = 0.0;
            for (d, v) in dst.iter_mut().zip(src) {
                *d = (v - m).exp();
                s += *d;
            }
            for d in dst.iter_mut() {
                *d /= s;
            }
        }
        Ok(self.push(Op::SoftmaxLast { a }, shape, values))
    }

    /// Softmax over the last axis where entry `i` is weighted by
    /// `weights[i] >= 0`: `out_i = w_i e^{l_i} / sum_j w_j e^{l_j}`.
    ///
    /// Rows whose weights are all zero yield all-zero output and propagate no
    /// gradient; this realizes soft neighborhood membership where hard zero
    /// weight means "not a member".
    pub fn masked_softmax_lastdim(
        &mut self,
        logits: TensorId,
        weights: TensorId,
    ) -> Result<TensorId, TensorError> {
        let (l, w) = (self.check(logits)?, self.check(weights)?);
        let shape = self.nodes[l].shape.clone();
        if shape != self.nodes[w].shape {
            return Err(TensorError::ShapeMismatch(format!(
                "masked softmax logits {:?} vs weights {:?}",
                shape, self.nodes[w].shape
            )));
        }
        if shape.is_empty() {
            return Err(TensorError::ShapeMismatch(
                "masked softmax needs rank >= 1".to_string(),
            ));
        }
        let k = shape[shape.len() - 1];
        let lv = &self.nodes[l].values;
        let wv = &self.nodes[w].values;
        let mut values = vec![0.0; lv.len()];
        for row in 0..lv.len() / k.max(1) {
            let (lo, hi) = (row * k, (row + 1) * k);
            let m = lv[lo..hi].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for i in lo..hi {
                values[i] = wv[i] * (lv[i] - m).exp();
                s += values[i];
            }
            if s > 0.0 {
                for v in &mut values[lo..hi] {
                    *v /= s;
                }
            } else {
                values[lo..hi].fill(0.0);
            }
        }
        Ok(self.push(Op::MaskedSoftmaxLast { logits: l, weights: w }, shape, values))
    }

    /// Sum of every element, as a rank-zero tensor.
    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let a = self.check(a)?;
        let s: f64 = self.nodes[a].values.iter().sum();
        Ok(self.push(Op::SumAll { a }, Vec::new(), vec![s]))
    }

    /// Mean of every element, as a rank-zero tensor.
    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let a = self.check(a)?;
        let n = self.nodes[a].values.len();
        let s: f64 = self.nodes[a].values.iter().sum();
        Ok(self.push(Op::MeanAll { a }, Vec::new(), vec![s / n as f64]))
    }

    /// Sum over the last axis, keeping it with extent 1.
    pub fn sum_lastdim(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let a = self.check(a)?;
        let shape = self.nodes[a].shape.clone();
        if shape.is_empty() {
            return Err(TensorError::ShapeMismatch(
                "sum_lastdim needs rank >= 1".to_string(),
            ));
        }
        let k = shape[shape.len() - 1];
        let x = &self.nodes[a].values;
        let rows = x.len() / k.max(1);
        let mut values = vec![0.0; rows];
        for (row, v) in values.iter_mut().enumerate() {
            *v = x[row * k..(row + 1) * k].iter().sum();
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = 1;
        Ok(self.push(Op::SumLast { a }, out_shape, values))
    }

    /// Mean over the last axis, keeping it with extent 1.
    pub fn mean_lastdim(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let k = *self
            .shape(a)
            .last()
            .ok_or_else(|| TensorError::ShapeMismatch("mean_lastdim needs rank >= 1".to_string()))?;
        let s = self.sum_lastdim(a)?;
        self.scale(s, 1.0 / k as f64)
    }

    /// `(x - mean) / sqrt(var + eps)` along the last axis, as a composite of
    /// primitive ops so gradients flow through the statistics.
    pub fn standardize_lastdim(&mut self, a: TensorId, eps: f64) -> Result<TensorId, TensorError> {
        if eps <= 0.0 {
            return Err(TensorError::DomainError(format!(
                "standardize_lastdim eps must be positive, got {eps}"
            )));
        }
        let mu = self.mean_lastdim(a)?;
        let centered = self.sub(a, mu)?;
        let sq = self.mul(centered, centered)?;
        let var = self.mean_lastdim(sq)?;
        let shifted = self.add_scalar(var, eps)?;
        let sd = self.sqrt(shifted)?;
        self.div(centered, sd)
    }

    // ── shape plumbing ─────────────────────────────────────────────────

    pub fn reshape(&mut self, a: TensorId, new_shape: &[usize]) -> Result<TensorId, TensorError> {
        let a = self.check(a)?;
        if numel(new_shape) != self.nodes[a].values.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "reshape {:?} -> {:?} changes element count",
                self.nodes[a].shape, new_shape
            )));
        }
        let values = self.nodes[a].values.clone();
        Ok(self.push(Op::Reshape { a }, new_shape.to_vec(), values))
    }

    /// Reorders axes: output axis `j` is input axis `perm[j]`.
    pub fn permute(&mut self, a: TensorId, perm: &[usize]) -> Result<TensorId, TensorError> {
        let a = self.check(a)?;
        let shape = &self.nodes[a].shape;
        let nd = shape.len();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::ShapeMismatch(format!(
                "invalid permutation {:?} for rank {}",
                perm, nd
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides_of(shape);
        let stride_map: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let x = &self.nodes[a].values;
        let mut values = vec![0.0; x.len()];
        for (flat, out) in values.iter_mut().enumerate() {
            let mut rem = flat;
            let mut src = 0;
            for d in (0..nd).rev() {
                let c = rem % out_shape[d];
                rem /= out_shape[d];
                src += c * stride_map[d];
            }
            *out = x[src];
        }
        Ok(self.push(Op::Permute { a, perm: perm.to_vec() }, out_shape, values))
    }

    /// Concatenates two tensors along the last axis; all other axes must
    /// match exactly.
    pub fn concat_lastdim(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(TensorError::ShapeMismatch(format!(
                "concat_lastdim of {:?} and {:?}",
                sa, sb
            )));
        }
        let (ka, kb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = ka + kb;
        let rows = numel(&out_shape) / (ka + kb).max(1);
        let mut values = Vec::with_capacity(numel(&out_shape));
        for row in 0..rows {
            values.extend_from_slice(&self.nodes[a].values[row * ka..(row + 1) * ka]);
            values.extend_from_slice(&self.nodes[b].values[row * kb..(row + 1) * kb]);
        }
        Ok(self.push(Op::ConcatLast { a, b }, out_shape, values))
    }

    /// Selects one index along `axis`, dropping that axis.
    pub fn index_axis(&mut self, a: TensorId, axis: usize, index: usize) -> Result<TensorId, TensorError> {
        let a = self.check(a)?;
        let shape = &self.nodes[a].shape;
        if axis >= shape.len() || index >= shape[axis] {
            return Err(TensorError::ShapeMismatch(format!(
                "index_axis(axis={}, index={}) on shape {:?}",
                axis, index, shape
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let extent = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape[..axis].to_vec();
        out_shape.extend_from_slice(&shape[axis + 1..]);
        let x = &self.nodes[a].values;
        let mut values = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let src = (o * extent + index) * inner;
            values.extend_from_slice(&x[src..src + inner]);
        }
        Ok(self.push(Op::IndexAxis { a, axis, index }, out_shape, values))
    }

    /// Stacks equal-shaped tensors along a new axis inserted at `axis`.
    pub fn stack_axis(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::ShapeMismatch("stack of zero tensors".to_string()));
        }
        let ids: Vec<usize> = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<_, _>>()?;
        let base = self.nodes[ids[0]].shape.clone();
        if axis > base.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "stack axis {} out of range for rank {}",
                axis,
                base.len()
            )));
        }
        for &id in &ids[1..] {
            if self.nodes[id].shape != base {
                return Err(TensorError::ShapeMismatch(format!(
                    "stack of {:?} with {:?}",
                    base, self.nodes[id].shape
                )));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis..].iter().product();
        let mut out_shape = base[..axis].to_vec();
        out_shape.push(ids.len());
        out_shape.extend_from_slice(&base[axis..]);
        let mut values = vec![0.0; outer * ids.len() * inner];
        for (p, &id) in ids.iter().enumerate() {
            let src = &self.nodes[id].values;
            for o in 0..outer {
                let dst = (o * ids.len() + p) * inner;
                values[dst..dst + inner].copy_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        Ok(self.push(Op::StackAxis { parts: ids, axis }, out_shape, values))
    }

    /// Hard 0/1 threshold with a straight-through gradient.
    pub fn hard_threshold_st(&mut self, a: TensorId, threshold: f64) -> Result<TensorId, TensorError> {
        let a = self.check(a)?;
        let values = self
            .nodes[a]
            .values
            .iter()
            .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
            .collect();
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::HardThreshold { a }, shape, values))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// scales survivors by `1/(1-rate)`. Records the mask as a leaf, so the
    /// backward pass is exact for the sampled mask.
    pub fn dropout<R: Rng>(
        &mut self,
        a: TensorId,
        rate: f64,
        rng: &mut R,
    ) -> Result<TensorId, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::DomainError(format!(
                "dropout rate {} outside [0, 1)",
                rate
            )));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        self.check(a)?;
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.nodes[a.0].values.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let m = self.leaf(&shape, mask)?;
        self.mul(a, m)
    }

    // ── reverse pass ───────────────────────────────────────────────────

    /// Accumulates gradients of a scalar `loss` with respect to every node,
    /// visiting each recorded operation exactly once in reverse order.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.grads.is_some() {
            return Err(TensorError::DetachedTensor);
        }
        let loss = self.check(loss)?;
        if self.nodes[loss].values.len() != 1 {
            return Err(TensorError::NotScalar(self.nodes[loss].values.len()));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.values.len()])
            .collect();
        grads[loss][0] = 1.0;

        for i in (0..=loss).rev() {
            // Split off this node's gradient so earlier entries stay writable.
            let (before, after) = grads.split_at_mut(i);
            let g: &[f64] = &after[0];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Unary { a, kind } => {
                    let x = &self.nodes[*a].values;
                    let y = &node.values;
                    let ga = &mut before[*a];
                    for j in 0..g.len() {
                        let d = match kind {
                            UnaryKind::Sigmoid => y[j] * (1.0 - y[j]),
                            UnaryKind::Tanh => 1.0 - y[j] * y[j],
                            UnaryKind::Relu => {
                                if x[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Exp => y[j],
                            UnaryKind::Log => 1.0 / x[j],
                            UnaryKind::Neg => -1.0,
                            UnaryKind::Sqrt => 0.5 / y[j],
                            UnaryKind::Abs => {
                                if x[j] > 0.0 {
                                    1.0
                                } else if x[j] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        ga[j] += g[j] * d;
                    }
                }
                Op::Binary { a, b, kind } => {
                    let out_shape = &node.shape;
                    let sa = broadcast_strides(&self.nodes[*a].shape, out_shape.len());
                    let sb = broadcast_strides(&self.nodes[*b].shape, out_shape.len());
                    let av = &self.nodes[*a].values;
                    let bv = &self.nodes[*b].values;
                    // a and b may coincide (x*x); accumulate into split halves.
                    for flat in 0..g.len() {
                        if g[flat] == 0.0 {
                            continue;
                        }
                        let (ia, ib) = broadcast_offsets(flat, out_shape, &sa, &sb);
                        let (da, db) = match kind {
                            BinaryKind::Add => (1.0, 1.0),
                            BinaryKind::Sub => (1.0, -1.0),
                            BinaryKind::Mul => (bv[ib], av[ia]),
                            BinaryKind::Div => {
                                (1.0 / bv[ib], -av[ia] / (bv[ib] * bv[ib]))
                            }
                        };
                        before[*a][ia] += g[flat] * da;
                        before[*b][ib] += g[flat] * db;
                    }
                }
                Op::Scale { a, k } => {
                    let ga = &mut before[*a];
                    for j in 0..g.len() {
                        ga[j] += g[j] * k;
                    }
                }
                Op::AddScalar { a } => {
                    let ga = &mut before[*a];
                    for j in 0..g.len() {
                        ga[j] += g[j];
                    }
                }
                Op::MatMul { a, b } => {
                    let (sa_full, sb_full) = (&self.nodes[*a].shape, &self.nodes[*b].shape);
                    let (p, q) = (sa_full[sa_full.len() - 2], sa_full[sa_full.len() - 1]);
                    let r = sb_full[sb_full.len() - 1];
                    let batch = node.shape[..node.shape.len() - 2].to_vec();
                    let stra = broadcast_strides(&sa_full[..sa_full.len() - 2], batch.len());
                    let strb = broadcast_strides(&sb_full[..sb_full.len() - 2], batch.len());
                    let (ma, mb, mo) = (p * q, q * r, p * r);
                    let av = &self.nodes[*a].values;
                    let bv = &self.nodes[*b].values;
                    for flat in 0..numel(&batch) {
                        let (ba, bb) = broadcast_offsets(flat, &batch, &stra, &strb);
                        let (oa, ob, oo) = (ba * ma, bb * mb, flat * mo);
                        for i in 0..p {
                            for j in 0..r {
                                let gv = g[oo + i * r + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                for k in 0..q {
                                    before[*a][oa + i * q + k] += gv * bv[ob + k * r + j];
                                    before[*b][ob + k * r + j] += gv * av[oa + i * q + k];
                                }
                            }
                        }
                    }
                }
                Op::SoftmaxLast { a } => {
                    let k = *node.shape.last().unwrap();
                    let y = &node.values;
                    let ga = &mut before[*a];
                    for row in 0..y.len() / k.max(1) {
                        let (lo, hi) = (row * k, (row + 1) * k);
                        let dot: f64 = (lo..hi).map(|j| g[j] * y[j]).sum();
                        for j in lo..hi {
                            ga[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
                Op::MaskedSoftmaxLast { logits, weights } => {
                    let k = *node.shape.last().unwrap();
                    let y = &node.values;
                    let lv = &self.nodes[*logits].values;
                    let wv = &self.nodes[*weights].values;
                    for row in 0..y.len() / k.max(1) {
                        let (lo, hi) = (row * k, (row + 1) * k);
                        let m = lv[lo..hi].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let s: f64 = (lo..hi).map(|j| wv[j] * (lv[j] - m).exp()).sum();
                        if s <= 0.0 {
                            continue;
                        }
                        let dot: f64 = (lo..hi).map(|j| g[j] * y[j]).sum();
                        for j in lo..hi {
                            before[*logits][j] += y[j] * (g[j] - dot);
                            before[*weights][j] += (lv[j] - m).exp() * (g[j] - dot) / s;
                        }
                    }
                }
                Op::SumAll { a } => {
                    let ga = &mut before[*a];
                    for v in ga.iter_mut() {
                        *v += g[0];
                    }
                }
                Op::MeanAll { a } => {
                    let ga = &mut before[*a];
                    let k = 1.0 / ga.len() as f64;
                    for v in ga.iter_mut() {
                        *v += g[0] * k;
                    }
                }
                Op::SumLast { a } => {
                    let ga = &mut before[*a];
                    let k = self.nodes[*a].shape.last().copied().unwrap_or(1);
                    for (row, &gv) in g.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        for v in &mut ga[row * k..(row + 1) * k] {
                            *v += gv;
                        }
                    }
                }
                Op::Reshape { a } => {
                    let ga = &mut before[*a];
                    for j in 0..g.len() {
                        ga[j] += g[j];
                    }
                }
                Op::Permute { a, perm } => {
                    let in_strides = strides_of(&self.nodes[*a].shape);
                    let stride_map: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                    let out_shape = &node.shape;
                    let ga = &mut before[*a];
                    for flat in 0..g.len() {
                        if g[flat] == 0.0 {
                            continue;
                        }
                        let mut rem = flat;
                        let mut src = 0;
                        for d in (0..out_shape.len()).rev() {
                            let c = rem % out_shape[d];
                            rem /= out_shape[d];
                            src += c * stride_map[d];
                        }
                        ga[src] += g[flat];
                    }
                }
                Op::ConcatLast { a, b } => {
                    let ka = *self.nodes[*a].shape.last().unwrap();
                    let kb = *self.nodes[*b].shape.last().unwrap();
                    let rows = g.len() / (ka + kb).max(1);
                    for row in 0..rows {
                        let base = row * (ka + kb);
                        for j in 0..ka {
                            before[*a][row * ka + j] += g[base + j];
                        }
                        for j in 0..kb {
                            before[*b][row * kb + j] += g[base + ka + j];
                        }
                    }
                }
                Op::IndexAxis { a, axis, index } => {
                    let shape = &self.nodes[*a].shape;
                    let outer: usize = shape[..*axis].iter().product();
                    let extent = shape[*axis];
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let ga = &mut before[*a];
                    for o in 0..outer {
                        let dst = (o * extent + index) * inner;
                        for j in 0..inner {
                            ga[dst + j] += g[o * inner + j];
                        }
                    }
                }
                Op::StackAxis { parts, axis } => {
                    let base = &self.nodes[parts[0]].shape;
                    let outer: usize = base[..*axis].iter().product();
                    let inner: usize = base[*axis..].iter().product();
                    for (pi, &part) in parts.iter().enumerate() {
                        let gp = &mut before[part];
                        for o in 0..outer {
                            let src = (o * parts.len() + pi) * inner;
                            for j in 0..inner {
                                gp[o * inner + j] += g[src + j];
                            }
                        }
                    }
                }
                Op::HardThreshold { a } => {
                    let ga = &mut before[*a];
                    for j in 0..g.len() {
                        ga[j] += g[j];
                    }
                }
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the loss with respect to a node, after [`Tape::backward`].
    pub fn grad(&self, id: TensorId) -> Result<&[f64], TensorError> {
        let grads = self.grads.as_ref().ok_or(TensorError::DetachedTensor)?;
        grads.get(id.0).map(|v| v.as_slice()).ok_or(TensorError::DetachedTensor)
    }

    /// Copies the gradient for a tracked tensor into its `grad` slot.
    pub fn read_grad_into(&self, t: &mut Tensor) -> Result<(), TensorError> {
        let id = t.tape_id.ok_or(TensorError::DetachedTensor)?;
        let g = self.grad(id)?;
        if g.len() != t.numel() {
            return Err(TensorError::ShapeMismatch(format!(
                "gradient has {} elements, tensor has {}",
                g.len(),
                t.numel()
            )));
        }
        t.grad = Some(g.to_vec());
        Ok(())
    }
}
