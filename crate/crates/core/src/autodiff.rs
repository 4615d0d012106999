//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as it executes. [`Graph::backward`]
//! replays the record in reverse and leaves gradients on every leaf whose
//! tensor was created with `requires_grad`. Because the tape is rebuilt on
//! every forward pass, the model topology is free to change between steps,
//! which is what subnet sampling needs.
//!
//! Gradients on leaves accumulate across repeated `backward` calls; gradients
//! on interior nodes are recomputed from scratch each call.

use crate::scalar::{gemm, Scalar};
use crate::tensor::{Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBroadcast(Var, Var),
    Linear(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    BroadcastBatch(Var),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Gelu { input: Var, tanh: Vec<T> },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of executed operations, in execution order.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    validate: bool,
    no_grad: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

type OpResult = Result<Var, TensorError>;

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn invalid(op: &'static str, shape: &[usize], reason: impl Into<String>) -> TensorError {
    TensorError::InvalidShape {
        op,
        shape: shape.to_vec(),
        reason: reason.into(),
    }
}

/// Strides of a row-major shape.
fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Copies `src` laid out as `shape` into the permuted layout `perm`.
fn permute_data<T: Copy>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    // When the last axis stays in place, whole rows can be copied at once.
    let run = if perm.last() == Some(&(rank - 1)) { shape[rank - 1] } else { 1 };
    let axes = if run > 1 { rank - 1 } else { rank };
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm[..axes].iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm[..axes].iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; axes];
    let mut offset = 0usize;
    for _ in 0..src.len() / run {
        out.extend_from_slice(&src[offset..offset + run]);
        for ax in (0..axes).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const GELU_COEFF: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Stops glibc from handing large freed buffers back to the kernel.
///
/// Every step allocates and frees the same multi-megabyte activations; with
/// the default thresholds each of them is a fresh `mmap` whose pages fault
/// in again, which costs more than the arithmetic.
fn keep_heap_resident() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| {
            // SAFETY: mallopt only adjusts allocator tuning parameters.
            unsafe {
                libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
                libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
            }
        });
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        keep_heap_resident();
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            validate: false,
            no_grad: false,
        }
    }

    /// A graph that records no gradient information at all.
    pub fn inference() -> Self {
        Self {
            no_grad: true,
            ..Self::new()
        }
    }

    /// Enables NaN/Inf detection on every operation output.
    pub fn with_validation(mut self, flag: bool) -> Self {
        self.validate = flag;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. It takes part in differentiation when the tensor's
    /// `requires_grad` flag is set and the graph is not in inference mode.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad() && !self.no_grad;
        self.push(tensor, Op::Leaf, requires_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grad(v).map(|g| {
            Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("grad matches value shape")
        })
    }

    /// Clears all stored gradients, including leaf accumulators.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && !self.no_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn emit(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> OpResult {
        if self.validate && data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op, requires_grad))
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> OpResult {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(name, sa, sb));
        }
        let shape = sa.to_vec();
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.emit(name, shape, data, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> OpResult {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> OpResult {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> OpResult {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> OpResult {
        let shape = self.shape(a).to_vec();
        let data = self.data(a).iter().map(|&x| x * s).collect();
        self.emit("scale", shape, data, Op::Scale(a, s), &[a])
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape
    /// (bias vectors, positional embeddings).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> OpResult {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add_broadcast", sa, sb));
        }
        let shape = sa.to_vec();
        let bias = self.data(b);
        let mut data = self.data(a).to_vec();
        for row in data.chunks_mut(bias.len()) {
            row.iter_mut().zip(bias).for_each(|(x, &y)| *x += y);
        }
        self.emit("add_broadcast", shape, data, Op::AddBroadcast(a, b), &[a, b])
    }

    /// Standard matrix product of `[m×k]` and `[k×n]` operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> OpResult {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        self.linear_impl("matmul", a, b)
    }

    /// Applies `w: [k×n]` to the last axis of `x: [..., k]`.
    pub fn linear(&mut self, x: Var, w: Var) -> OpResult {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(shape_err("linear", sx, sw));
        }
        self.linear_impl("linear", x, w)
    }

    fn linear_impl(&mut self, name: &'static str, x: Var, w: Var) -> OpResult {
        let sx = self.shape(x).to_vec();
        let (k, n) = (self.shape(w)[0], self.shape(w)[1]);
        let m = self.nodes[x.0].value.numel() / k;
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.data(x), (k, 1), self.data(w), (n, 1), &mut out, (n, 1), false);
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        self.emit(name, shape, out, Op::Linear(x, w), &[x, w])
    }

    /// Batched product of `[g×m×k]` with `[g×k×n]`, or with `[g×n×k]`
    /// read transposed when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> OpResult {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(shape_err("batch_matmul", &sa, &sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let b_strides = if trans_b { (1, k) } else { (n, 1) };
        let mut out = vec![T::zero(); g * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                (k, 1),
                &db[i * k * n..(i + 1) * k * n],
                b_strides,
                &mut out[i * m * n..(i + 1) * m * n],
                (n, 1),
                false,
            );
        }
        self.emit("batch_matmul", vec![g, m, n], out, Op::BatchMatMul { a, b, trans_b }, &[a, b])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> OpResult {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(invalid("transpose", self.shape(x), "rank must be at least 2"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> OpResult {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid("permute", &shape, format!("bad permutation {perm:?}")));
        }
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(self.data(x), &shape, perm);
        self.emit("permute", out_shape, data, Op::Permute(x, perm.to_vec()), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> OpResult {
        let value = self.nodes[x.0].value.reshaped(shape)?;
        let requires_grad = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::Reshape(x), requires_grad))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> OpResult {
        let first = match inputs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => return Err(invalid("concat", &[], "no inputs")),
        };
        if axis >= first.len() {
            return Err(invalid("concat", &first, format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.emit("concat", shape, data, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    /// Takes `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> OpResult {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(invalid(
                "slice",
                &shape,
                format!("range {start}..{} on axis {axis}", start + len),
            ));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.emit("slice", out_shape, data, Op::Slice { input: x, axis, start }, &[x])
    }

    /// Repeats `x` along a new leading axis of size `batch`.
    pub fn broadcast_batch(&mut self, x: Var, batch: usize) -> OpResult {
        if batch == 0 {
            return Err(invalid("broadcast_batch", self.shape(x), "batch must be positive"));
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(self.shape(x));
        let src = self.data(x);
        let mut data = Vec::with_capacity(src.len() * batch);
        for _ in 0..batch {
            data.extend_from_slice(src);
        }
        self.emit("broadcast_batch", shape, data, Op::BroadcastBatch(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> OpResult {
        let s = self.data(x).iter().copied().sum();
        self.emit("sum", vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> OpResult {
        let d = self.data(x);
        let s: T = d.iter().copied().sum();
        let m = s / T::from_usize(d.len()).unwrap();
        self.emit("mean", vec![1], vec![m], Op::Mean(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> OpResult {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().map(|&v| v.max(T::zero())).collect();
        self.emit("relu", shape, data, Op::Relu(x), &[x])
    }

    /// GELU, tanh approximation:
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> OpResult {
        let shape = self.shape(x).to_vec();
        let (c, k) = (T::lit(SQRT_2_OVER_PI), T::lit(GELU_COEFF));
        let (half, two) = (T::lit(0.5), T::lit(2.0));
        let src = self.data(x);
        // tanh(u) = 1 − 2/(e^{2u} + 1); saturates cleanly at ±1.
        let mut tanh: Vec<T> = src.iter().map(|&v| two * c * (v + k * v * v * v)).collect();
        T::exp_slice(&mut tanh);
        tanh.iter_mut().for_each(|t| *t = T::one() - two / (*t + T::one()));
        let data: Vec<T> = tanh.iter().zip(src).map(|(&t, &v)| half * v * (T::one() + t)).collect();
        self.emit("gelu", shape, data, Op::Gelu { input: x, tanh }, &[x])
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax(&mut self, x: Var) -> OpResult {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| invalid("softmax", &shape, "empty shape"))?;
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            row.iter_mut().for_each(|v| *v -= max);
            T::exp_slice(row);
            let total: T = row.iter().copied().sum();
            let inv = T::one() / total;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        self.emit("softmax", shape, data, Op::Softmax(x), &[x])
    }

    /// Normalizes each last-axis row to zero mean and unit variance
    /// (biased variance plus `eps`), then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> OpResult {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(shape_err("layer_norm", &shape, self.shape(gamma)));
        }
        let nf = T::from_usize(n).unwrap();
        let (g, b) = (self.data(gamma), self.data(beta));
        let src = self.data(x);
        let rows = src.len() / n;
        let mut xhat = Vec::with_capacity(src.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(src.len());
        for row in src.chunks(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                data.push(h * g[j] + b[j]);
            }
        }
        self.emit(
            "layer_norm",
            shape,
            data,
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
            &[x, gamma, beta],
        )
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> OpResult {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(invalid(
                "cross_entropy",
                &shape,
                format!("expected [{}, classes]", labels.len()),
            ));
        }
        let classes = shape[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::LabelOutOfRange { label, classes });
        }
        let mut probs = self.data(logits).to_vec();
        let mut total = T::zero();
        for (row, &label) in probs.chunks_mut(classes).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[label];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = total / T::from_usize(labels.len()).unwrap();
        self.emit(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
        )
    }

    /// Back-propagates from a single-element `loss`.
    ///
    /// Leaf gradients accumulate across calls; call [`Graph::zero_grad`] to
    /// reset them.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let shape = self.shape(loss);
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NotScalar { shape: shape.to_vec() });
        }
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(dy) = self.grads[i].take() else { continue };
            self.backprop_node(i, &dy);
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, dy: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let data = |v: &Var| nodes[v.0].value.data();
        let shape = |v: &Var| nodes[v.0].value.shape();
        let wants = |v: &Var| nodes[v.0].requires_grad;
        // Adds into the gradient buffer of `v`, allocating it on first use.
        // Nodes that do not require a gradient are never touched.
        let mut acc = |v: &Var, f: &mut dyn FnMut(&mut [T])| {
            if nodes[v.0].requires_grad {
                let len = nodes[v.0].value.numel();
                f(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]));
            }
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(a, &mut |g| add_into(g, dy));
                acc(b, &mut |g| add_into(g, dy));
            }
            Op::Sub(a, b) => {
                acc(a, &mut |g| add_into(g, dy));
                acc(b, &mut |g| g.iter_mut().zip(dy).for_each(|(g, &d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (da, db) = (data(a), data(b));
                acc(a, &mut |g| g.iter_mut().zip(dy).zip(db).for_each(|((g, &d), &o)| *g += d * o));
                acc(b, &mut |g| g.iter_mut().zip(dy).zip(da).for_each(|((g, &d), &o)| *g += d * o));
            }
            Op::Scale(a, s) => {
                let s = *s;
                acc(a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d * s));
            }
            Op::AddBroadcast(a, b) => {
                acc(a, &mut |g| add_into(g, dy));
                acc(b, &mut |g| {
                    let n = g.len();
                    dy.chunks(n).for_each(|chunk| add_into(g, chunk));
                });
            }
            Op::Linear(x, w) => {
                let (k, n) = (shape(w)[0], shape(w)[1]);
                let m = dy.len() / n;
                let (xd, wd) = (data(x), data(w));
                // dX[m×k] += dY[m×n] · Wᵀ
                acc(x, &mut |g| gemm(m, n, k, dy, (n, 1), wd, (1, n), g, (k, 1), true));
                // dW[k×n] += Xᵀ · dY
                acc(w, &mut |g| gemm(k, m, n, xd, (1, k), dy, (n, 1), g, (n, 1), true));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (sa, sb) = (shape(a), shape(b));
                let (groups, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (mn, mk, kn) = (m * n, m * k, k * n);
                let (ad, bd) = (data(a), data(b));
                // dA = dC · Bᵀ, where the stored B is either k×n or n×k.
                let b_t = if *trans_b { (k, 1) } else { (1, n) };
                acc(a, &mut |g| {
                    for i in 0..groups {
                        gemm(m, n, k, &dy[i * mn..(i + 1) * mn], (n, 1), &bd[i * kn..(i + 1) * kn], b_t, &mut g[i * mk..(i + 1) * mk], (k, 1), true);
                    }
                });
                let trans = *trans_b;
                acc(b, &mut |g| {
                    for i in 0..groups {
                        let dyi = &dy[i * mn..(i + 1) * mn];
                        let ai = &ad[i * mk..(i + 1) * mk];
                        let gi = &mut g[i * kn..(i + 1) * kn];
                        if trans {
                            // dB[n×k] = dCᵀ · A
                            gemm(n, m, k, dyi, (1, n), ai, (k, 1), gi, (k, 1), true);
                        } else {
                            // dB[k×n] = Aᵀ · dC
                            gemm(k, m, n, ai, (1, k), dyi, (n, 1), gi, (n, 1), true);
                        }
                    }
                });
            }
            Op::Permute(x, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (j, &p) in perm.iter().enumerate() {
                    inverse[p] = j;
                }
                if wants(x) {
                    let back = permute_data(dy, out.shape(), &inverse);
                    acc(x, &mut |g| add_into(g, &back));
                }
            }
            Op::Reshape(x) => acc(x, &mut |g| add_into(g, dy)),
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = shape(v)[*axis];
                    let block = len * inner;
                    acc(v, &mut |g| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            add_into(&mut g[o * block..(o + 1) * block], &dy[src..src + block]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let len = out.shape()[*axis];
                let (outer, n, inner) = axis_split(shape(input), *axis);
                let block = len * inner;
                acc(input, &mut |g| {
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        add_into(&mut g[dst..dst + block], &dy[o * block..(o + 1) * block]);
                    }
                });
            }
            Op::BroadcastBatch(x) => acc(x, &mut |g| {
                let n = g.len();
                dy.chunks(n).for_each(|chunk| add_into(g, chunk));
            }),
            Op::Sum(x) => acc(x, &mut |g| g.iter_mut().for_each(|g| *g += dy[0])),
            Op::Mean(x) => {
                let d = dy[0] / T::from_usize(nodes[x.0].value.numel()).unwrap();
                acc(x, &mut |g| g.iter_mut().for_each(|g| *g += d));
            }
            Op::Relu(x) => {
                let xd = data(x);
                acc(x, &mut |g| {
                    for ((g, &d), &v) in g.iter_mut().zip(dy).zip(xd) {
                        if v > T::zero() {
                            *g += d;
                        }
                    }
                });
            }
            Op::Gelu { input, tanh } => {
                let xd = data(input);
                let (c, k) = (T::lit(SQRT_2_OVER_PI), T::lit(GELU_COEFF));
                let (half, three) = (T::lit(0.5), T::lit(3.0));
                acc(input, &mut |g| {
                    for (((g, &d), &v), &t) in g.iter_mut().zip(dy).zip(xd).zip(tanh) {
                        let du = c * (T::one() + three * k * v * v);
                        *g += d * (half * (T::one() + t) + half * v * (T::one() - t * t) * du);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = out.data();
                let n = *out.shape().last().unwrap();
                acc(x, &mut |g| {
                    for ((g, dy), y) in g.chunks_mut(n).zip(dy.chunks(n)).zip(y.chunks(n)) {
                        let dot: T = dy.iter().zip(y).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            g[j] += y[j] * (dy[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let n = shape(gamma)[0];
                let nf = T::from_usize(n).unwrap();
                let gd = data(gamma);
                acc(x, &mut |g| {
                    for (r, (g, dy)) in g.chunks_mut(n).zip(dy.chunks(n)).enumerate() {
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut mean_g = T::zero();
                        let mut mean_gx = T::zero();
                        for j in 0..n {
                            let gj = dy[j] * gd[j];
                            mean_g += gj;
                            mean_gx += gj * xh[j];
                        }
                        mean_g /= nf;
                        mean_gx /= nf;
                        for j in 0..n {
                            g[j] += inv_std[r] * (dy[j] * gd[j] - mean_g - xh[j] * mean_gx);
                        }
                    }
                });
                acc(gamma, &mut |g| {
                    for (dy, xh) in dy.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            g[j] += dy[j] * xh[j];
                        }
                    }
                });
                acc(beta, &mut |g| dy.chunks(n).for_each(|dy| add_into(g, dy)));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = shape(logits)[1];
                let scale = dy[0] / T::from_usize(labels.len()).unwrap();
                acc(logits, &mut |g| {
                    for (r, (g, p)) in g.chunks_mut(classes).zip(probs.chunks(classes)).enumerate() {
                        for j in 0..classes {
                            let target = if j == labels[r] { T::one() } else { T::zero() };
                            g[j] += (p[j] - target) * scale;
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}
