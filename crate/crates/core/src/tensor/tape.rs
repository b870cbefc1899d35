use super::{axis_split, Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape(Var),
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Softmax { a: Var, axis: usize },
    MaxReduce { a: Var, axis: usize, argmax: Vec<usize> },
    SumReduce { a: Var, axis: usize },
    Lookup { table: Var, ids: Vec<usize> },
    MaskFill { a: Var, mask: Vec<bool> },
    WhereRows { mask: Vec<bool>, a: Var, b: Var },
    BceWithLogits { logits: Var, labels: Vec<f64> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order so they can be replayed backwards.
///
/// Nodes are appended only, so every node's inputs precede it and a single
/// reverse sweep visits each operation after all of its consumers.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    checked: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<Tensor<T>> {
        self.grads[var.0].as_ref().map(|g| Tensor {
            shape: self.shapes[var.0].clone(),
            data: g.clone(),
        })
    }

    /// Gradient of `var`, or zeros of the right shape when nothing flowed into it.
    pub fn get_or_zero(&self, var: Var) -> Tensor<T> {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn suffix_of(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// `c[m,n] (+)= op(a) op(b)` where `op` optionally transposes.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Real>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) {
    match (trans_a, trans_b) {
        (false, false) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = a[i * k + p];
                    if aip == T::zero() {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (cj, &bj) in crow.iter_mut().zip(brow) {
                        *cj += aip * bj;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = T::zero();
                    for (&x, &y) in arow.iter().zip(brow) {
                        acc += x * y;
                    }
                    c[i * n + j] += acc;
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let api = a[p * m + i];
                    if api == T::zero() {
                        continue;
                    }
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (cj, &bj) in crow.iter_mut().zip(brow) {
                        *cj += api * bj;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = T::zero();
                    for p in 0..k {
                        acc += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += acc;
                }
            }
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn unary<T: Real>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&x| f(x)).collect(),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            checked: false,
        }
    }

    /// In checked mode every op output is scanned for NaN/inf (masked fills excepted).
    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].value.shape
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.checked && !matches!(op, Op::MaskFill { .. }) && !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    /// Matrix product. `a` is `[m,k]` or `[batch,m,k]`; `b` is `[k,n]` (shared across
    /// the batch) or `[batch,k,n]`. With `trans_b`, `b` is stored as `[n,k]` / `[batch,n,k]`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            left: sa.clone(),
            right: sb.clone(),
        };
        let (batch, m, k) = match sa.len() {
            2 => (1, sa[0], sa[1]),
            3 => (sa[0], sa[1], sa[2]),
            _ => return Err(mismatch()),
        };
        let (b_batched, kb, n) = match (sb.len(), trans_b) {
            (2, false) => (false, sb[0], sb[1]),
            (2, true) => (false, sb[1], sb[0]),
            (3, false) => (true, sb[1], sb[2]),
            (3, true) => (true, sb[2], sb[1]),
            _ => return Err(mismatch()),
        };
        if kb != k || (b_batched && (sa.len() != 3 || sb[0] != batch)) {
            return Err(mismatch());
        }
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut out = vec![T::zero(); batch * m * n];
        if b_batched {
            for s in 0..batch {
                gemm(
                    &av[s * m * k..(s + 1) * m * k],
                    &bv[s * k * n..(s + 1) * k * n],
                    &mut out[s * m * n..(s + 1) * m * n],
                    m,
                    k,
                    n,
                    false,
                    trans_b,
                );
            }
        } else {
            gemm(av, bv, &mut out, batch * m, k, n, false, trans_b);
        }
        let shape = if sa.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        self.push(
            "matmul",
            Tensor { shape, data: out },
            Op::MatMul { a, b, trans_b },
            &[a, b],
        )
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !suffix_of(&tb.shape, &ta.shape) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let period = tb.numel().max(1);
        let data = ta
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data[i % period]))
            .collect();
        Ok(Tensor {
            shape: ta.shape.clone(),
            data,
        })
    }

    /// `a + b`, with `b` broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let cf = T::lit(c);
        let v = unary(self.value(a), |x| x * cf);
        self.push("scale", v, Op::Scale(a, c), &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => {
                return Err(TensorError::InvalidShape {
                    op: "concat",
                    shape: Vec::new(),
                    reason: "no inputs".into(),
                })
            }
        };
        if axis >= first.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: first,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: first.clone(),
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = &self.nodes[v.0].value;
                let chunk = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(
            "concat",
            Tensor { shape, data },
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// `len` entries of `a` along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape: s,
                reason: format!("axis {axis} range {start}..{}", start + len),
            });
        }
        let (outer, ext, inner) = axis_split(&s, axis);
        let src = &self.nodes[a.0].value.data;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push("slice", Tensor { shape, data }, Op::Slice { a, axis, start }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: s,
                reason: "rank < 2".into(),
            });
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = s[..s.len() - 2].iter().product::<usize>();
        let src = &self.nodes[a.0].value.data;
        let mut data = vec![T::zero(); src.len()];
        for b in 0..batch {
            let off = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    data[off + j * r + i] = src[off + i * c + j];
                }
            }
        }
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 1, n - 2);
        self.push("transpose", Tensor { shape, data }, Op::Transpose(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = unary(self.value(a), |x| x.tanh());
        self.push("tanh", v, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = unary(self.value(a), sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = unary(self.value(a), |x| if x > T::zero() { x } else { T::zero() });
        self.push("relu", v, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = unary(self.value(a), |x| x.exp());
        self.push("exp", v, Op::Exp(a), &[a])
    }

    /// Softmax along `axis`, computed with max subtraction. Entries equal to
    /// `-inf` receive weight exactly zero.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(TensorError::InvalidShape {
                op: "softmax",
                shape: s,
                reason: format!("axis {axis} out of range"),
            });
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let src = &self.nodes[a.0].value.data;
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| o * len * inner + l * inner + i;
                let mut mx = T::neg_infinity();
                for l in 0..len {
                    mx = mx.max(src[idx(l)]);
                }
                let mut total = T::zero();
                for l in 0..len {
                    let e = (src[idx(l)] - mx).exp();
                    data[idx(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    data[idx(l)] = data[idx(l)] / total;
                }
            }
        }
        self.push("softmax", Tensor { shape: s, data }, Op::Softmax { a, axis }, &[a])
    }

    /// Maximum along `axis`. The gradient flows only to the first maximal entry.
    pub fn max_reduce(&mut self, a: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(TensorError::InvalidShape {
                op: "max_reduce",
                shape: s,
                reason: format!("axis {axis} empty or out of range"),
            });
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let src = &self.nodes[a.0].value.data;
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = src[o * len * inner + i];
                for l in 1..len {
                    let v = src[o * len * inner + l * inner + i];
                    if v > best_v {
                        best = l;
                        best_v = v;
                    }
                }
                data.push(best_v);
                argmax.push(best);
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let var = self.push(
            "max_reduce",
            Tensor { shape, data },
            Op::MaxReduce {
                a,
                axis,
                argmax: argmax.clone(),
            },
            &[a],
        )?;
        Ok((var, argmax))
    }

    pub fn sum_reduce(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(TensorError::InvalidShape {
                op: "sum_reduce",
                shape: s,
                reason: format!("axis {axis} out of range"),
            });
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let src = &self.nodes[a.0].value.data;
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += src[o * len * inner + l * inner + i];
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        self.push("sum_reduce", Tensor { shape, data }, Op::SumReduce { a, axis }, &[a])
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, &[n])?;
        self.sum_reduce(flat, 0)
    }

    /// Rows of a `[rows, width]` table selected by `ids`, giving `[ids.len(), width]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "embedding_lookup",
                shape: s,
                reason: "table must be rank 2".into(),
            });
        }
        let (rows, width) = (s[0], s[1]);
        let src = &self.nodes[table.0].value.data;
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding_lookup",
                    index: id,
                    bound: rows,
                });
            }
            data.extend_from_slice(&src[id * width..(id + 1) * width]);
        }
        self.push(
            "embedding_lookup",
            Tensor {
                shape: vec![ids.len(), width],
                data,
            },
            Op::Lookup {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Replaces every element whose mask entry is `true` with `value`.
    pub fn mask_fill(&mut self, a: Var, mask: &[bool], value: f64) -> Result<Var> {
        let t = self.value(a);
        if mask.len() != t.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "mask_fill",
                left: t.shape.clone(),
                right: vec![mask.len()],
            });
        }
        let fill = T::lit(value);
        let data = t
            .data
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { fill } else { x })
            .collect();
        let v = Tensor {
            shape: t.shape.clone(),
            data,
        };
        self.push(
            "mask_fill",
            v,
            Op::MaskFill {
                a,
                mask: mask.to_vec(),
            },
            &[a],
        )
    }

    /// Row-wise select: row `r` comes from `a` when `mask[r]`, else from `b`.
    /// Rows are the slices of the last axis.
    pub fn where_rows(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let width = ta.shape.last().copied().unwrap_or(1);
        if ta.shape != tb.shape || mask.len() * width != ta.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "where_rows",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let mut data = Vec::with_capacity(ta.numel());
        for (r, &m) in mask.iter().enumerate() {
            let src = if m { ta } else { tb };
            data.extend_from_slice(&src.data[r * width..(r + 1) * width]);
        }
        let v = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        self.push(
            "where_rows",
            v,
            Op::WhereRows {
                mask: mask.to_vec(),
                a,
                b,
            },
            &[a, b],
        )
    }

    /// Mean binary cross-entropy of sigmoid(logits) against 0/1 labels, computed
    /// in logit space: `max(z,0) - z*y + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        if t.numel() != labels.len() || labels.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                left: t.shape.clone(),
                right: vec![labels.len()],
            });
        }
        let mut total = 0.0;
        for (&z, &y) in t.data.iter().zip(labels) {
            let z = z.as_f64();
            total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        }
        let v = Tensor::scalar(T::lit(total / labels.len() as f64));
        self.push(
            "bce_with_logits",
            v,
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out_shape = self.shape(output);
        if self.value(output).numel() != 1 {
            return Err(TensorError::NotScalar(out_shape.to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[output.0] = Some(vec![T::one()]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.wants(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let b_batched = tb.rank() == 3;
                let k = *ta.shape.last().unwrap();
                let n = *out.shape.last().unwrap();
                let batch = if ta.rank() == 3 { ta.shape[0] } else { 1 };
                let m = ta.numel() / (batch * k);
                // dA = dC op(B)^T
                self.accumulate(grads, a, |ga| {
                    if b_batched {
                        for s in 0..batch {
                            gemm(
                                &g[s * m * n..(s + 1) * m * n],
                                &tb.data[s * k * n..(s + 1) * k * n],
                                &mut ga[s * m * k..(s + 1) * m * k],
                                m,
                                n,
                                k,
                                false,
                                !trans_b,
                            );
                        }
                    } else {
                        gemm(g, &tb.data, ga, batch * m, n, k, false, !trans_b);
                    }
                });
                // dB = A^T dC, or dC^T A when B is stored transposed
                self.accumulate(grads, b, |gb| {
                    let per = |s: usize, mm: usize, gb: &mut [T]| {
                        let av = &ta.data[s * mm * k..(s + 1) * mm * k];
                        let gv = &g[s * mm * n..(s + 1) * mm * n];
                        if trans_b {
                            gemm(gv, av, gb, n, mm, k, true, false);
                        } else {
                            gemm(av, gv, gb, k, mm, n, true, false);
                        }
                    };
                    if b_batched {
                        for s in 0..batch {
                            per(s, m, &mut gb[s * k * n..(s + 1) * k * n]);
                        }
                    } else {
                        per(0, batch * m, gb);
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                self.accumulate(grads, *a, |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    let p = gb.len().max(1);
                    for (i, &y) in g.iter().enumerate() {
                        gb[i % p] += sign * y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let va = &self.nodes[a.0].value.data;
                let vb = &self.nodes[b.0].value.data;
                let p = vb.len().max(1);
                self.accumulate(grads, *a, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * vb[i % p];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (i, &y) in g.iter().enumerate() {
                        gb[i % p] += y * va[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = T::lit(*c);
                self.accumulate(grads, *a, |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += c * y;
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_split(&out.shape, *axis);
                let mut offset = 0;
                let total = out.shape[*axis] * inner;
                for &v in inputs {
                    let chunk = self.nodes[v.0].value.shape[*axis] * inner;
                    self.accumulate(grads, v, |gv| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            for (x, &y) in gv[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Slice { a, axis, start } => {
                let src_shape = &self.nodes[a.0].value.shape;
                let (outer, ext, inner) = axis_split(src_shape, *axis);
                let len = out.shape[*axis];
                self.accumulate(grads, *a, |ga| {
                    for o in 0..outer {
                        let base = o * ext * inner + start * inner;
                        let gsrc = &g[o * len * inner..(o + 1) * len * inner];
                        for (x, &y) in ga[base..base + len * inner].iter_mut().zip(gsrc) {
                            *x += y;
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::Transpose(a) => {
                let s = &out.shape;
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = out.numel() / (r * c).max(1);
                self.accumulate(grads, *a, |ga| {
                    for b in 0..batch {
                        let off = b * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                ga[off + j * r + i] += g[off + i * c + j];
                            }
                        }
                    }
                });
            }
            Op::Tanh(a) => self.accumulate(grads, *a, |ga| {
                for ((x, &y), &o) in ga.iter_mut().zip(g).zip(&out.data) {
                    *x += y * (T::one() - o * o);
                }
            }),
            Op::Sigmoid(a) => self.accumulate(grads, *a, |ga| {
                for ((x, &y), &o) in ga.iter_mut().zip(g).zip(&out.data) {
                    *x += y * o * (T::one() - o);
                }
            }),
            Op::Relu(a) => self.accumulate(grads, *a, |ga| {
                for ((x, &y), &o) in ga.iter_mut().zip(g).zip(&out.data) {
                    if o > T::zero() {
                        *x += y;
                    }
                }
            }),
            Op::Exp(a) => self.accumulate(grads, *a, |ga| {
                for ((x, &y), &o) in ga.iter_mut().zip(g).zip(&out.data) {
                    *x += y * o;
                }
            }),
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = axis_split(&out.shape, *axis);
                self.accumulate(grads, *a, |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |l: usize| o * len * inner + l * inner + i;
                            let mut dot = T::zero();
                            for l in 0..len {
                                dot += g[idx(l)] * out.data[idx(l)];
                            }
                            for l in 0..len {
                                ga[idx(l)] += out.data[idx(l)] * (g[idx(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaxReduce { a, axis, argmax } => {
                let src_shape = &self.nodes[a.0].value.shape;
                let (outer, len, inner) = axis_split(src_shape, *axis);
                self.accumulate(grads, *a, |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let k = o * inner + i;
                            ga[o * len * inner + argmax[k] * inner + i] += g[k];
                        }
                    }
                });
            }
            Op::SumReduce { a, axis } => {
                let src_shape = &self.nodes[a.0].value.shape;
                let (outer, len, inner) = axis_split(src_shape, *axis);
                self.accumulate(grads, *a, |ga| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                ga[o * len * inner + l * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::Lookup { table, ids } => {
                let width = self.nodes[table.0].value.shape[1];
                self.accumulate(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for (x, &y) in gt[id * width..(id + 1) * width]
                            .iter_mut()
                            .zip(&g[r * width..(r + 1) * width])
                        {
                            *x += y;
                        }
                    }
                });
            }
            Op::MaskFill { a, mask } => self.accumulate(grads, *a, |ga| {
                for ((x, &y), &m) in ga.iter_mut().zip(g).zip(mask) {
                    if !m {
                        *x += y;
                    }
                }
            }),
            Op::WhereRows { mask, a, b } => {
                let width = out.shape.last().copied().unwrap_or(1);
                for (v, take) in [(*a, true), (*b, false)] {
                    self.accumulate(grads, v, |gv| {
                        for (r, &m) in mask.iter().enumerate() {
                            if m == take {
                                for c in r * width..(r + 1) * width {
                                    gv[c] += g[c];
                                }
                            }
                        }
                    });
                }
            }
            Op::BceWithLogits { logits, labels } => {
                let z = &self.nodes[logits.0].value.data;
                let scale = g[0] / T::lit(labels.len() as f64);
                self.accumulate(grads, *logits, |gz| {
                    for ((x, &zi), &y) in gz.iter_mut().zip(z).zip(labels) {
                        *x += scale * (sigmoid(zi) - T::lit(y));
                    }
                });
            }
        }
    }
}
