//! Tape of recorded array operations with a reverse sweep.
//!
//! Every op appends one node holding its forward value, so node order is a
//! topological order and `backward` is a single reverse scan.

use crate::diffcore::tensor::{matmul_raw, transpose_raw, Tensor};
use crate::error::{MrtError, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Broadcast(Var),
    Scale(Var, f64),
    Offset(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Softmax(Var, usize),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Select(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Conv1d(Var, Var),
    DepthwiseConv1d(Var, Var),
    MaxPool2(Var, Vec<usize>),
    Upsample2(Var),
    LayerNorm(Var, Vec<f64>),
    WindowMean(Var, usize),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Build with the op methods, then call [`Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of `shape` when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn expect_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(MrtError::dim(op, t.shape(), &[0, 0])),
    }
}

/// `(outer, axis_len, inner)` view of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_unary(&mut self, value: Tensor, op: Op, input: Var) -> Var {
        let ng = self.nodes[input.0].needs_grad;
        self.push(value, op, ng)
    }

    fn push_many(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let ng = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, ng)
    }

    /// Input or parameter. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (p, q) = expect_2d("matmul", ta)?;
        let (q2, r) = expect_2d("matmul", tb)?;
        if q != q2 {
            return Err(MrtError::dim("matmul", ta.shape(), tb.shape()));
        }
        let out = Tensor::new(vec![p, r], matmul_raw(ta.data(), tb.data(), p, q, r))?;
        Ok(self.push_many(out, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(MrtError::dim(name, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push_many(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push_many(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push_many(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("div", a, b, |x, y| x / y)?;
        Ok(self.push_many(out, Op::Div(a, b), &[a, b]))
    }

    /// Expands singleton dimensions of a 2-D tensor to `rows×cols`.
    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = expect_2d("broadcast", ta)?;
        if (r != 1 && r != rows) || (c != 1 && c != cols) {
            return Err(MrtError::dim("broadcast", ta.shape(), &[rows, cols]));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let si = if r == 1 { 0 } else { i };
            for j in 0..cols {
                let sj = if c == 1 { 0 } else { j };
                data.push(ta.data()[si * c + sj]);
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push_unary(out, Op::Broadcast(a), a))
    }

    /// `a + b` with `b` broadcast to `a`'s 2-D shape (row bias, column bias, or scalar-like).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = expect_2d("add_broadcast", self.value(a))?;
        let bb = if self.value(b).shape() == [r, c] {
            b
        } else {
            self.broadcast(b, r, c)?
        };
        self.add(a, bb)
    }

    /// `a ⊙ b` with `b` broadcast to `a`'s 2-D shape.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = expect_2d("mul_broadcast", self.value(a))?;
        let bb = if self.value(b).shape() == [r, c] {
            b
        } else {
            self.broadcast(b, r, c)?
        };
        self.mul(a, bb)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push_unary(out, Op::Scale(a, c), a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `a + c` elementwise.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push_unary(out, Op::Offset(a), a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push_unary(out, Op::Sigmoid(a), a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push_unary(out, Op::Tanh(a), a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push_unary(out, Op::Relu(a), a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push_unary(out, Op::Exp(a), a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push_unary(out, Op::Log(a), a)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push_unary(out, Op::Clamp(a, lo, hi), a)
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.ndim() {
            return Err(MrtError::dim("softmax", ta.shape(), &[axis]));
        }
        let (outer, len, inner) = axis_split(ta.shape(), axis);
        let src = ta.data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    data[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    data[at(k)] /= total;
                }
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push_unary(out, Op::Softmax(a, axis), a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = expect_2d("transpose", ta)?;
        let out = Tensor::new(vec![c, r], transpose_raw(ta.data(), r, c))?;
        Ok(self.push_unary(out, Op::Transpose(a), a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push_unary(out, Op::Reshape(a), a))
    }

    /// Concatenates 2-D tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| MrtError::Contract("concat_cols of nothing".into()))?;
        let (rows, _) = expect_2d("concat_cols", self.value(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = expect_2d("concat_cols", self.value(p))?;
            if r != rows {
                return Err(MrtError::dim(
                    "concat_cols",
                    self.value(*first).shape(),
                    self.value(p).shape(),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push_many(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks 2-D tensors with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| MrtError::Contract("concat_rows of nothing".into()))?;
        let (_, cols) = expect_2d("concat_rows", self.value(*first))?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = expect_2d("concat_rows", self.value(p))?;
            if c != cols {
                return Err(MrtError::dim(
                    "concat_rows",
                    self.value(*first).shape(),
                    self.value(p).shape(),
                ));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push_many(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = expect_2d("slice_cols", ta)?;
        if start + len > c {
            return Err(MrtError::dim("slice_cols", ta.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&ta.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![r, len], data)?;
        Ok(self.push_unary(out, Op::SliceCols(a, start), a))
    }

    /// Rows `start..start + len` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = expect_2d("slice_rows", ta)?;
        if start + len > r {
            return Err(MrtError::dim("slice_rows", ta.shape(), &[start, len]));
        }
        let data = ta.data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::new(vec![len, c], data)?;
        Ok(self.push_unary(out, Op::SliceRows(a, start), a))
    }

    /// Gathers flat (row-major) positions into a 1-D tensor.
    pub fn select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= ta.len()) {
            return Err(MrtError::dim("select", ta.shape(), &[bad]));
        }
        let data = indices.iter().map(|&i| ta.data()[i]).collect();
        let out = Tensor::vector(data);
        Ok(self.push_unary(out, Op::Select(a, indices.to_vec()), a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push_unary(out, Op::Sum(a), a)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push_unary(out, Op::Mean(a), a)
    }

    /// "Same" zero-padded 1-D convolution (cross-correlation) over rows.
    ///
    /// `x` is `n×d_in`, `w` is `k×d_in×d_out` with odd `k`; output is `n×d_out`.
    pub fn conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (n, d_in) = expect_2d("conv1d", tx)?;
        let (k, wd_in, d_out) = match *tw.shape() {
            [k, a, b] => (k, a, b),
            _ => return Err(MrtError::dim("conv1d", tx.shape(), tw.shape())),
        };
        if k % 2 == 0 {
            return Err(MrtError::Config(format!("conv1d kernel must be odd, got {k}")));
        }
        if wd_in != d_in {
            return Err(MrtError::dim("conv1d", tx.shape(), tw.shape()));
        }
        let pad = k / 2;
        let (xs, ws) = (tx.data(), tw.data());
        let mut out = vec![0.0; n * d_out];
        for i in 0..n {
            let orow = &mut out[i * d_out..(i + 1) * d_out];
            for t in 0..k {
                let Some(src) = (i + t).checked_sub(pad).filter(|&s| s < n) else {
                    continue;
                };
                for c in 0..d_in {
                    let xv = xs[src * d_in + c];
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &ws[(t * d_in + c) * d_out..(t * d_in + c + 1) * d_out];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, d_out], out)?;
        Ok(self.push_many(out, Op::Conv1d(x, w), &[x, w]))
    }

    /// "Same" zero-padded depthwise convolution: `x` is `n×d`, `w` is `k×d`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (n, d) = expect_2d("depthwise_conv1d", tx)?;
        let (k, wd) = expect_2d("depthwise_conv1d", tw)?;
        if k % 2 == 0 {
            return Err(MrtError::Config(format!(
                "depthwise_conv1d kernel must be odd, got {k}"
            )));
        }
        if wd != d {
            return Err(MrtError::dim("depthwise_conv1d", tx.shape(), tw.shape()));
        }
        let pad = k / 2;
        let (xs, ws) = (tx.data(), tw.data());
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for t in 0..k {
                let Some(src) = (i + t).checked_sub(pad).filter(|&s| s < n) else {
                    continue;
                };
                for c in 0..d {
                    out[i * d + c] += ws[t * d + c] * xs[src * d + c];
                }
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        Ok(self.push_many(out, Op::DepthwiseConv1d(x, w), &[x, w]))
    }

    /// Non-overlapping max-pool over rows, window 2 and stride 2.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, d) = expect_2d("max_pool2", tx)?;
        if n % 2 != 0 {
            return Err(MrtError::Contract(format!(
                "max_pool2 needs an even length, got {n}"
            )));
        }
        let xs = tx.data();
        let mut out = Vec::with_capacity(n / 2 * d);
        let mut arg = Vec::with_capacity(n / 2 * d);
        for i in 0..n / 2 {
            for c in 0..d {
                let (a, b) = ((2 * i) * d + c, (2 * i + 1) * d + c);
                let pick = if xs[b] > xs[a] { b } else { a };
                out.push(xs[pick]);
                arg.push(pick);
            }
        }
        let out = Tensor::new(vec![n / 2, d], out)?;
        Ok(self.push_unary(out, Op::MaxPool2(x, arg), x))
    }

    /// Nearest-neighbour ×2 upsampling over rows.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, d) = expect_2d("upsample2", tx)?;
        let mut out = Vec::with_capacity(2 * n * d);
        for i in 0..n {
            out.extend_from_slice(tx.row(i));
            out.extend_from_slice(tx.row(i));
        }
        let out = Tensor::new(vec![2 * n, d], out)?;
        Ok(self.push_unary(out, Op::Upsample2(x), x))
    }

    /// Per-row standardisation `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (n, d) = expect_2d("layer_norm", tx)?;
        let mut out = Vec::with_capacity(n * d);
        let mut rstd = Vec::with_capacity(n);
        for i in 0..n {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            out.extend(row.iter().map(|v| (v - mean) * r));
            rstd.push(r);
        }
        let out = Tensor::new(vec![n, d], out)?;
        Ok(self.push_unary(out, Op::LayerNorm(x, rstd), x))
    }

    /// Means of every length-`window` run of a 1-D tensor, stride 1.
    pub fn window_mean(&mut self, x: Var, window: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() != 1 || window == 0 || window > tx.len() {
            return Err(MrtError::Contract(format!(
                "window_mean: window {window} over shape {:?}",
                tx.shape()
            )));
        }
        let xs = tx.data();
        let data = (0..=xs.len() - window)
            .map(|i| xs[i..i + window].iter().sum::<f64>() / window as f64)
            .collect();
        let out = Tensor::vector(data);
        Ok(self.push_unary(out, Op::WindowMean(x, window), x))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(MrtError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
        }

        for (node, slot) in self.nodes.iter().zip(grads.iter_mut()) {
            if !(matches!(node.op, Op::Leaf) && node.needs_grad) {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contribution: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Like `accumulate`, but adds into the slot in place via `f(slot_data)`.
    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let shape = self.value(v).shape().to_vec();
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(&shape));
        f(slot.data_mut());
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        let gd = g.data();
        let like = |v: Var, data: Vec<f64>| Tensor::new(self.value(v).shape().to_vec(), data);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (p, q) = (ta.rows(), ta.cols());
                let r = tb.cols();
                if self.nodes[a.0].needs_grad {
                    let bt = transpose_raw(tb.data(), q, r);
                    self.accumulate(grads, *a, like(*a, matmul_raw(gd, &bt, p, r, q))?);
                }
                if self.nodes[b.0].needs_grad {
                    let at = transpose_raw(ta.data(), p, q);
                    self.accumulate(grads, *b, like(*b, matmul_raw(&at, gd, q, p, r))?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = gd.iter().zip(tb.data()).map(|(g, b)| g * b).collect();
                let gb = gd.iter().zip(ta.data()).map(|(g, a)| g * a).collect();
                self.accumulate(grads, *a, like(*a, ga)?);
                self.accumulate(grads, *b, like(*b, gb)?);
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = gd.iter().zip(tb.data()).map(|(g, b)| g / b).collect();
                let gb = gd
                    .iter()
                    .zip(ta.data().iter().zip(tb.data()))
                    .map(|(g, (a, b))| -g * a / (b * b))
                    .collect();
                self.accumulate(grads, *a, like(*a, ga)?);
                self.accumulate(grads, *b, like(*b, gb)?);
            }
            Op::Broadcast(a) => {
                let ta = self.value(*a);
                let (r, c) = (ta.rows(), ta.cols());
                let (rows, cols) = (y.rows(), y.cols());
                self.accumulate_with(grads, *a, |dst| {
                    for i in 0..rows {
                        let si = if r == 1 { 0 } else { i };
                        for j in 0..cols {
                            let sj = if c == 1 { 0 } else { j };
                            dst[si * c + sj] += gd[i * cols + j];
                        }
                    }
                });
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c)),
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::Sigmoid(a) => {
                let d = gd.iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.accumulate(grads, *a, like(*a, d)?);
            }
            Op::Tanh(a) => {
                let d = gd.iter().zip(y.data()).map(|(g, t)| g * (1.0 - t * t)).collect();
                self.accumulate(grads, *a, like(*a, d)?);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, like(*a, d)?);
            }
            Op::Exp(a) => {
                let d = gd.iter().zip(y.data()).map(|(g, e)| g * e).collect();
                self.accumulate(grads, *a, like(*a, d)?);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(g, x)| g / x).collect();
                self.accumulate(grads, *a, like(*a, d)?);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, like(*a, d)?);
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let ys = y.data();
                let mut d = vec![0.0; ys.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let dot: f64 = (0..len).map(|k| gd[at(k)] * ys[at(k)]).sum();
                        for k in 0..len {
                            d[at(k)] = ys[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, like(*a, d)?);
            }
            Op::Transpose(a) => {
                let d = transpose_raw(gd, y.rows(), y.cols());
                self.accumulate(grads, *a, like(*a, d)?);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, like(*a, gd.to_vec())?),
            Op::ConcatCols(parts) => {
                let (rows, total) = (y.rows(), y.cols());
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    self.accumulate_with(grads, p, |dst| {
                        for i in 0..rows {
                            let src = &gd[i * total + offset..i * total + offset + c];
                            for (d, s) in dst[i * c..(i + 1) * c].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate_with(grads, p, |dst| {
                        for (d, s) in dst.iter_mut().zip(&gd[offset..offset + n]) {
                            *d += s;
                        }
                    });
                    offset += n;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, len) = (y.rows(), y.cols());
                let c = self.value(*a).cols();
                self.accumulate_with(grads, *a, |dst| {
                    for i in 0..rows {
                        for j in 0..len {
                            dst[i * c + start + j] += gd[i * len + j];
                        }
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let c = y.cols();
                self.accumulate_with(grads, *a, |dst| {
                    for (d, s) in dst[start * c..start * c + gd.len()].iter_mut().zip(gd) {
                        *d += s;
                    }
                });
            }
            Op::Select(a, indices) => {
                self.accumulate_with(grads, *a, |dst| {
                    for (&i, s) in indices.iter().zip(gd) {
                        dst[i] += s;
                    }
                });
            }
            Op::Sum(a) => {
                let s = gd[0];
                self.accumulate(grads, *a, self.value(*a).map(|_| s));
            }
            Op::Mean(a) => {
                let s = gd[0] / self.value(*a).len() as f64;
                self.accumulate(grads, *a, self.value(*a).map(|_| s));
            }
            Op::Conv1d(x, w) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, d_in) = (tx.rows(), tx.cols());
                let (k, d_out) = (tw.shape()[0], tw.shape()[2]);
                let pad = k / 2;
                let (xs, ws) = (tx.data(), tw.data());
                self.accumulate_with(grads, *x, |gx| {
                    for i in 0..n {
                        let grow = &gd[i * d_out..(i + 1) * d_out];
                        for t in 0..k {
                            let Some(src) = (i + t).checked_sub(pad).filter(|&s| s < n) else {
                                continue;
                            };
                            for c in 0..d_in {
                                let wrow = &ws[(t * d_in + c) * d_out..(t * d_in + c + 1) * d_out];
                                gx[src * d_in + c] +=
                                    wrow.iter().zip(grow).map(|(w, g)| w * g).sum::<f64>();
                            }
                        }
                    }
                });
                self.accumulate_with(grads, *w, |gw| {
                    for i in 0..n {
                        let grow = &gd[i * d_out..(i + 1) * d_out];
                        for t in 0..k {
                            let Some(src) = (i + t).checked_sub(pad).filter(|&s| s < n) else {
                                continue;
                            };
                            for c in 0..d_in {
                                let xv = xs[src * d_in + c];
                                let base = (t * d_in + c) * d_out;
                                for (o, g) in grow.iter().enumerate() {
                                    gw[base + o] += xv * g;
                                }
                            }
                        }
                    }
                });
            }
            Op::DepthwiseConv1d(x, w) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, d) = (tx.rows(), tx.cols());
                let k = tw.rows();
                let pad = k / 2;
                let (xs, ws) = (tx.data(), tw.data());
                self.accumulate_with(grads, *x, |gx| {
                    for i in 0..n {
                        for t in 0..k {
                            let Some(src) = (i + t).checked_sub(pad).filter(|&s| s < n) else {
                                continue;
                            };
                            for c in 0..d {
                                gx[src * d + c] += ws[t * d + c] * gd[i * d + c];
                            }
                        }
                    }
                });
                self.accumulate_with(grads, *w, |gw| {
                    for i in 0..n {
                        for t in 0..k {
                            let Some(src) = (i + t).checked_sub(pad).filter(|&s| s < n) else {
                                continue;
                            };
                            for c in 0..d {
                                gw[t * d + c] += xs[src * d + c] * gd[i * d + c];
                            }
                        }
                    }
                });
            }
            Op::MaxPool2(x, arg) => {
                self.accumulate_with(grads, *x, |gx| {
                    for (&src, g) in arg.iter().zip(gd) {
                        gx[src] += g;
                    }
                });
            }
            Op::Upsample2(x) => {
                let d = y.cols();
                let n = self.value(*x).rows();
                self.accumulate_with(grads, *x, |gx| {
                    for i in 0..n {
                        for c in 0..d {
                            gx[i * d + c] += gd[(2 * i) * d + c] + gd[(2 * i + 1) * d + c];
                        }
                    }
                });
            }
            Op::LayerNorm(x, rstd) => {
                let (n, d) = (y.rows(), y.cols());
                let ys = y.data();
                let mut out = vec![0.0; n * d];
                for i in 0..n {
                    let gr = &gd[i * d..(i + 1) * d];
                    let yr = &ys[i * d..(i + 1) * d];
                    let g_mean = gr.iter().sum::<f64>() / d as f64;
                    let gy_mean = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / d as f64;
                    for c in 0..d {
                        out[i * d + c] = rstd[i] * (gr[c] - g_mean - yr[c] * gy_mean);
                    }
                }
                self.accumulate(grads, *x, like(*x, out)?);
            }
            Op::WindowMean(x, window) => {
                let inv = 1.0 / *window as f64;
                self.accumulate_with(grads, *x, |gx| {
                    for (i, g) in gd.iter().enumerate() {
                        for slot in &mut gx[i..i + window] {
                            *slot += g * inv;
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
