//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node whose inputs already live on the tape, so node
//! order is a topological order and `backward` is a single reverse sweep.

use super::conv::{self, ConvGeom};
use super::{cosine_raw, rows_cols, Float, Tensor};
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LogSigmoid(Var),
    SoftmaxRow(Var),
    LogSoftmaxRow(Var),
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    ChannelBias(Var, Var),
    MaxPool2d { x: Var, argmax: Vec<usize> },
    GlobalAvgPool { x: Var, plane: usize },
    L2Normalize { x: Var, degenerate: Vec<bool> },
    CosineRows { a: Var, b: Var, degenerate: Vec<bool> },
    CosineMatrix { a: Var, b: Var },
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    GatherRows(Var, Vec<usize>),
    SegmentMean(Var, Vec<usize>),
    Diag(Var),
    Column(Var, usize),
    MulRows(Var, Var),
    ConcatCols(Vec<Var>),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Single-writer recording of a forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    exec: Exec,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients returned by [`Tape::backward`], one per node that requires grad.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Zero-norm rows seen by an `l2_normalize` or `cosine_rows` node.
    pub fn degenerate_rows(&self, v: Var) -> Option<&[bool]> {
        match &self.nodes[v.0].op {
            Op::L2Normalize { degenerate, .. } | Op::CosineRows { degenerate, .. } => {
                Some(degenerate)
            }
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        debug_assert!(value.all_finite(), "non-finite output from {op:?}");
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    // ---- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let out = matmul_raw(self.val(a).data(), self.val(b).data(), sa[0], sa[1], sb[1]);
        Ok(self.push(Tensor::from_parts(vec![sa[0], sb[1]], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `x W + b` for `x` of shape `[n, p]` (or `[p]`), `W` `[p, q]`, `b` `[q]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        let (n, p) = match sx.as_slice() {
            [p] => (1, *p),
            [n, p] => (*n, *p),
            _ => return Err(Error::dim("affine", &sx, &sw)),
        };
        if sw.len() != 2 || sw[0] != p {
            return Err(Error::dim("affine", &sx, &sw));
        }
        let q = sw[1];
        if sb != [q] {
            return Err(Error::dim("affine", &sw, &sb));
        }
        let mut out = matmul_raw(self.val(x).data(), self.val(w).data(), n, p, q);
        let bias = self.val(b).data();
        for row in out.chunks_mut(q) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let shape = if sx.len() == 1 { vec![q] } else { vec![n, q] };
        Ok(self.push(Tensor::from_parts(shape, out), Op::Affine(x, w, b), &[x, w, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("transpose", &s, &[2]));
        }
        let out = transpose_raw(self.val(x).data(), s[0], s[1]);
        Ok(self.push(Tensor::from_parts(vec![s[1], s[0]], out), Op::Transpose(x), &[x]))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::cast(factor);
        let t = self.val(x).map(|v| v * f);
        self.push(t, Op::Scale(x, factor), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::cast(c);
        let t = self.val(x).map(|v| v + c);
        self.push(t, Op::AddScalar(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.val(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(t, Op::Relu(x), &[x])
    }

    /// Elementwise `ln(sigmoid(x))`, evaluated without overflow.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let t = self.val(x).map(log_sigmoid_raw);
        self.push(t, Op::LogSigmoid(x), &[x])
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_row(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let (_, c) = t.rows_cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(t, Op::SoftmaxRow(x), &[x])
    }

    pub fn log_softmax_row(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let (_, c) = t.rows_cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let t = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(t, Op::LogSoftmaxRow(x), &[x])
    }

    /// Cross-correlation of `x` (`[C, H, W]` or `[N, C, H, W]`) with kernels
    /// `[C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        let (n, batched) = match sx.len() {
            3 => (1, false),
            4 => (sx[0], true),
            _ => return Err(Error::dim("conv2d", &sx, &sk)),
        };
        let off = sx.len() - 3;
        let (c_in, h, w) = (sx[off], sx[off + 1], sx[off + 2]);
        if sk.len() != 4 || sk[1] != c_in || sk[2] != sk[3] {
            return Err(Error::dim("conv2d", &sx, &sk));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be at least 1"));
        }
        let ks = sk[2];
        let (Some(oh), Some(ow)) = (
            ConvGeom::out_len(ks, h, stride, padding),
            ConvGeom::out_len(ks, w, stride, padding),
        ) else {
            return Err(Error::dim("conv2d (kernel larger than padded input)", &sx, &sk));
        };
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out: sk[0],
            k: ks,
            stride,
            pad: padding,
            oh,
            ow,
        };
        let out = conv::conv2d_forward(self.val(x).data(), self.val(k).data(), geom, self.exec);
        let shape = if batched {
            vec![n, geom.c_out, oh, ow]
        } else {
            vec![geom.c_out, oh, ow]
        };
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, k, geom }, &[x, k]))
    }

    /// Adds a per-channel bias `[C]` to `[C, H, W]` or `[N, C, H, W]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.len() < 3 || sb != [sx[sx.len() - 3]] {
            return Err(Error::dim("channel_bias", &sx, &sb));
        }
        let c = sb[0];
        let plane = sx[sx.len() - 2] * sx[sx.len() - 1];
        let bias = self.val(b).data();
        let mut out = self.val(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = bias[i % c];
            for v in chunk {
                *v += bv;
            }
        }
        Ok(self.push(Tensor::from_parts(sx, out), Op::ChannelBias(x, b), &[x, b]))
    }

    /// Non-overlapping max pooling with window and stride `size`.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 3 || size == 0 || sx[sx.len() - 1] < size || sx[sx.len() - 2] < size {
            return Err(Error::dim("max_pool2d", &sx, &[size, size]));
        }
        let (h, w) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        let planes = self.val(x).len() / (h * w);
        let (out, argmax) = conv::max_pool_forward(self.val(x).data(), planes, h, w, size);
        let mut shape = sx.clone();
        let nd = shape.len();
        shape[nd - 2] = h / size;
        shape[nd - 1] = w / size;
        Ok(self.push(Tensor::from_parts(shape, out), Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// Mean over the two trailing spatial axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 3 {
            return Err(Error::dim("global_avg_pool", &sx, &[3]));
        }
        let plane = sx[sx.len() - 2] * sx[sx.len() - 1];
        let inv = T::one() / T::cast(plane as f64);
        let out = self
            .val(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let shape = sx[..sx.len() - 2].to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::GlobalAvgPool { x, plane }, &[x]))
    }

    /// Unit-normalizes each row along the last axis; zero rows stay zero and
    /// are reported by [`Tape::degenerate_rows`].
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let (_, c) = t.rows_cols();
        let mut out = t.data().to_vec();
        let mut degenerate = Vec::new();
        for row in out.chunks_mut(c) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm == T::zero() {
                degenerate.push(true);
            } else {
                degenerate.push(false);
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
        }
        let t = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(t, Op::L2Normalize { x, degenerate }, &[x])
    }

    /// Row-wise cosine similarity of two equal-shape tensors. A `[d]` pair
    /// yields a scalar; `[n, d]` yields `[n]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() || ta.ndim() == 0 {
            return Err(Error::dim("cosine_rows", ta.shape(), tb.shape()));
        }
        let (n, _) = ta.rows_cols();
        let mut out = Vec::with_capacity(n);
        let mut degenerate = Vec::with_capacity(n);
        for i in 0..n {
            let c = cosine_raw(ta.row(i), tb.row(i));
            out.push(c.value);
            degenerate.push(c.degenerate);
        }
        let shape = ta.shape()[..ta.ndim() - 1].to_vec();
        let t = Tensor::from_parts(shape, out);
        Ok(self.push(t, Op::CosineRows { a, b, degenerate }, &[a, b]))
    }

    /// All-pairs cosine similarity: `[n, d] x [m, d] -> [n, m]`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(Error::dim("cosine_matrix", ta.shape(), tb.shape()));
        }
        let (n, m) = (ta.shape()[0], tb.shape()[0]);
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                out.push(cosine_raw(ta.row(i), tb.row(j)).value);
            }
        }
        let t = Tensor::from_parts(vec![n, m], out);
        Ok(self.push(t, Op::CosineMatrix { a, b }, &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let s = t.data().iter().copied().sum::<T>() / T::cast(t.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("dot", ta.shape(), tb.shape()));
        }
        let s = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).sum::<T>();
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), &[a, b]))
    }

    /// Selects rows (or elements of a vector) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.val(x);
        let (rows, c) = if t.ndim() == 1 { (t.len(), 1) } else { t.rows_cols() };
        if t.ndim() == 0 || idx.iter().any(|&i| i >= rows) || idx.is_empty() {
            return Err(Error::contract(format!(
                "gather_rows: index out of range for shape {:?}",
                t.shape()
            )));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        if t.ndim() > 2 {
            return Err(Error::dim("gather_rows", t.shape(), &[2]));
        }
        let t = Tensor::from_parts(shape, out);
        Ok(self.push(t, Op::GatherRows(x, idx.to_vec()), &[x]))
    }

    /// Means of consecutive row segments: `[sum(lengths), d] -> [segments, d]`.
    pub fn segment_mean(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let t = self.val(x);
        let total: usize = lengths.iter().sum();
        if t.ndim() != 2 || t.shape()[0] != total || lengths.contains(&0) {
            return Err(Error::dim("segment_mean", t.shape(), &[total]));
        }
        let d = t.shape()[1];
        let mut out = Vec::with_capacity(lengths.len() * d);
        let mut start = 0;
        for &len in lengths {
            let inv = T::one() / T::cast(len as f64);
            for j in 0..d {
                let s = (start..start + len).map(|r| t.data()[r * d + j]).sum::<T>();
                out.push(s * inv);
            }
            start += len;
        }
        let t = Tensor::from_parts(vec![lengths.len(), d], out);
        Ok(self.push(t, Op::SegmentMean(x, lengths.to_vec()), &[x]))
    }

    /// Diagonal of a square matrix.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x);
        if t.ndim() != 2 || t.shape()[0] != t.shape()[1] {
            return Err(Error::dim("diag", t.shape(), &[2]));
        }
        let n = t.shape()[0];
        let out = (0..n).map(|i| t.data()[i * n + i]).collect();
        Ok(self.push(Tensor::from_parts(vec![n], out), Op::Diag(x), &[x]))
    }

    /// Column `j` of a matrix as a vector.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let t = self.val(x);
        if t.ndim() != 2 || j >= t.shape()[1] {
            return Err(Error::dim("column", t.shape(), &[j]));
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let out = (0..n).map(|i| t.data()[i * c + j]).collect();
        Ok(self.push(Tensor::from_parts(vec![n], out), Op::Column(x, j), &[x]))
    }

    /// Scales row `i` of `x` (`[n, d]`) by `s[i]` (`s` of shape `[n]`).
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.val(x), self.val(s));
        if tx.ndim() != 2 || ts.shape() != [tx.shape()[0]] {
            return Err(Error::dim("mul_rows", tx.shape(), ts.shape()));
        }
        let d = tx.shape()[1];
        let mut out = tx.data().to_vec();
        for (row, &sv) in out.chunks_mut(d).zip(ts.data()) {
            for v in row {
                *v *= sv;
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(t, Op::MulRows(x, s), &[x, s]))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_cols needs at least one input"));
        };
        let n = self.shape(first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != n {
                return Err(Error::dim("concat_cols", self.shape(first), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.val(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::from_parts(vec![n, total], out);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Mean squared error between equal-shape tensors.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    // ---- reverse sweep -----------------------------------------------

    /// Gradients of a scalar `loss` with respect to every node that requires
    /// grad. Parameters not reached from `loss` receive zero tensors.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.val(loss);
        if lt.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !node.requires_grad {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                Some(match g {
                    Some(data) => Tensor::from_parts(shape, data),
                    None => Tensor::zeros(&shape),
                })
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: impl FnOnce(&mut [T])) {
        if !self.wants(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![T::zero(); self.nodes[v.0].value.len()]);
        }
        contrib(slot.as_mut().expect("initialized above"));
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, p, q) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                self.accumulate(grads, *a, |ga| {
                    // dA = G B^T
                    let bt = transpose_raw(vb, p, q);
                    add_into(ga, &matmul_raw(g, &bt, n, q, p));
                });
                self.accumulate(grads, *b, |gb| {
                    // dB = A^T G
                    let at = transpose_raw(va, n, p);
                    add_into(gb, &matmul_raw(&at, g, p, n, q));
                });
            }
            Op::Affine(x, w, b) => {
                let sw = self.shape(*w);
                let (p, q) = (sw[0], sw[1]);
                let n = g.len() / q;
                let (vx, vw) = (self.val(*x).data(), self.val(*w).data());
                self.accumulate(grads, *x, |gx| {
                    let wt = transpose_raw(vw, p, q);
                    add_into(gx, &matmul_raw(g, &wt, n, q, p));
                });
                self.accumulate(grads, *w, |gw| {
                    let xt = transpose_raw(vx, n, p);
                    add_into(gw, &matmul_raw(&xt, g, p, n, q));
                });
                self.accumulate(grads, *b, |gb| {
                    for row in g.chunks(q) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Transpose(x) => {
                let s = out.shape();
                self.accumulate(grads, *x, |gx| add_into(gx, &transpose_raw(g, s[0], s[1])));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| {
                    for (d, &v) in gb.iter_mut().zip(g) {
                        *d -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for ((d, &gv), &bv) in ga.iter_mut().zip(g).zip(vb) {
                        *d += gv * bv;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((d, &gv), &av) in gb.iter_mut().zip(g).zip(va) {
                        *d += gv * av;
                    }
                });
            }
            Op::Scale(x, f) => {
                let f = T::cast(*f);
                self.accumulate(grads, *x, |gx| {
                    for (d, &v) in gx.iter_mut().zip(g) {
                        *d += v * f;
                    }
                });
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                self.accumulate(grads, *x, |gx| add_into(gx, g));
            }
            Op::Relu(x) => {
                let vx = self.val(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((d, &gv), &xv) in gx.iter_mut().zip(g).zip(vx) {
                        if xv > T::zero() {
                            *d += gv;
                        }
                    }
                });
            }
            Op::LogSigmoid(x) => {
                // d/dx ln sigma(x) = sigma(-x)
                let vx = self.val(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((d, &gv), &xv) in gx.iter_mut().zip(g).zip(vx) {
                        *d += gv * sigmoid_raw(-xv);
                    }
                });
            }
            Op::SoftmaxRow(x) => {
                let (_, c) = rows_cols(out.shape());
                self.accumulate(grads, *x, |gx| {
                    for ((drow, grow), yrow) in gx.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                        let dotp: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((d, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (gv - dotp);
                        }
                    }
                });
            }
            Op::LogSoftmaxRow(x) => {
                let (_, c) = rows_cols(out.shape());
                self.accumulate(grads, *x, |gx| {
                    for ((drow, grow), yrow) in gx.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                        let gsum: T = grow.iter().copied().sum();
                        for ((d, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += gv - y.exp() * gsum;
                        }
                    }
                });
            }
            Op::Conv2d { x, k, geom } => {
                let (gx, gk) = conv::conv2d_backward(
                    self.val(*x).data(),
                    self.val(*k).data(),
                    g,
                    *geom,
                    self.wants(*x),
                    self.wants(*k),
                    self.exec,
                );
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, |d| add_into(d, &gx));
                }
                if let Some(gk) = gk {
                    self.accumulate(grads, *k, |d| add_into(d, &gk));
                }
            }
            Op::ChannelBias(x, b) => {
                self.accumulate(grads, *x, |gx| add_into(gx, g));
                let s = out.shape();
                let c = s[s.len() - 3];
                let plane = s[s.len() - 2] * s[s.len() - 1];
                self.accumulate(grads, *b, |gb| {
                    for (i, chunk) in g.chunks(plane).enumerate() {
                        gb[i % c] += chunk.iter().copied().sum::<T>();
                    }
                });
            }
            Op::MaxPool2d { x, argmax } => {
                self.accumulate(grads, *x, |gx| {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        gx[src] += gv;
                    }
                });
            }
            Op::GlobalAvgPool { x, plane } => {
                let inv = T::one() / T::cast(*plane as f64);
                self.accumulate(grads, *x, |gx| {
                    for (chunk, &gv) in gx.chunks_mut(*plane).zip(g) {
                        for d in chunk {
                            *d += gv * inv;
                        }
                    }
                });
            }
            Op::L2Normalize { x, degenerate } => {
                let (_, c) = rows_cols(out.shape());
                let vx = self.val(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for (r, &deg) in degenerate.iter().enumerate() {
                        if deg {
                            continue;
                        }
                        let xr = &vx[r * c..(r + 1) * c];
                        let yr = &out.data()[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                        let gy: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += (gr[j] - yr[j] * gy) / norm;
                        }
                    }
                });
            }
            Op::CosineRows { a, b, degenerate } => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (_, d) = ta.rows_cols();
                let mut da = vec![T::zero(); ta.len()];
                let mut db = vec![T::zero(); tb.len()];
                for (r, &deg) in degenerate.iter().enumerate() {
                    if deg {
                        continue;
                    }
                    cosine_grad(
                        ta.row(r),
                        tb.row(r),
                        out.data()[r],
                        g[r],
                        &mut da[r * d..(r + 1) * d],
                        &mut db[r * d..(r + 1) * d],
                    );
                }
                self.accumulate(grads, *a, |ga| add_into(ga, &da));
                self.accumulate(grads, *b, |gb| add_into(gb, &db));
            }
            Op::CosineMatrix { a, b } => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (n, d) = (ta.shape()[0], ta.shape()[1]);
                let m = tb.shape()[0];
                let mut da = vec![T::zero(); ta.len()];
                let mut db = vec![T::zero(); tb.len()];
                for i in 0..n {
                    for j in 0..m {
                        let (ra, rb) = (ta.row(i), tb.row(j));
                        if cosine_raw(ra, rb).degenerate {
                            continue;
                        }
                        let (ga_row, gb_row) = (&mut da[i * d..(i + 1) * d], &mut db[j * d..(j + 1) * d]);
                        cosine_grad(ra, rb, out.data()[i * m + j], g[i * m + j], ga_row, gb_row);
                    }
                }
                self.accumulate(grads, *a, |ga| add_into(ga, &da));
                self.accumulate(grads, *b, |gb| add_into(gb, &db));
            }
            Op::Sum(x) => {
                let gv = g[0];
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|d| *d += gv));
            }
            Op::Mean(x) => {
                let n = self.val(*x).len();
                let gv = g[0] / T::cast(n as f64);
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|d| *d += gv));
            }
            Op::Dot(a, b) => {
                let gv = g[0];
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for (d, &bv) in ga.iter_mut().zip(vb) {
                        *d += gv * bv;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (d, &av) in gb.iter_mut().zip(va) {
                        *d += gv * av;
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                let c = if self.val(*x).ndim() == 1 { 1 } else { self.val(*x).rows_cols().1 };
                self.accumulate(grads, *x, |gx| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::SegmentMean(x, lengths) => {
                let d = out.shape()[1];
                self.accumulate(grads, *x, |gx| {
                    let mut start = 0;
                    for (s, &len) in lengths.iter().enumerate() {
                        let inv = T::one() / T::cast(len as f64);
                        for r in start..start + len {
                            for j in 0..d {
                                gx[r * d + j] += g[s * d + j] * inv;
                            }
                        }
                        start += len;
                    }
                });
            }
            Op::Diag(x) => {
                let n = g.len();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..n {
                        gx[i * n + i] += g[i];
                    }
                });
            }
            Op::Column(x, j) => {
                let c = self.shape(*x)[1];
                self.accumulate(grads, *x, |gx| {
                    for (i, &gv) in g.iter().enumerate() {
                        gx[i * c + j] += gv;
                    }
                });
            }
            Op::MulRows(x, s) => {
                let (vx, vs) = (self.val(*x).data(), self.val(*s).data());
                let d = self.shape(*x)[1];
                self.accumulate(grads, *x, |gx| {
                    for ((drow, grow), &sv) in gx.chunks_mut(d).zip(g.chunks(d)).zip(vs) {
                        for (dv, &gv) in drow.iter_mut().zip(grow) {
                            *dv += gv * sv;
                        }
                    }
                });
                self.accumulate(grads, *s, |gs| {
                    for ((dv, grow), xrow) in gs.iter_mut().zip(g.chunks(d)).zip(vx.chunks(d)) {
                        *dv += grow.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<T>();
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    self.accumulate(grads, p, |gp| {
                        for (i, drow) in gp.chunks_mut(w).enumerate() {
                            add_into(drow, &g[i * total + offset..i * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
        }
    }
}

/// Accumulates the gradient of `upstream * cos(a, b)` into `da`, `db`.
fn cosine_grad<T: Float>(a: &[T], b: &[T], cos: T, upstream: T, da: &mut [T], db: &mut [T]) {
    let na = a.iter().map(|&v| v * v).sum::<T>().sqrt();
    let nb = b.iter().map(|&v| v * v).sum::<T>().sqrt();
    let inv = T::one() / (na * nb);
    for j in 0..a.len() {
        da[j] += upstream * (b[j] * inv - cos * a[j] / (na * na));
        db[j] += upstream * (a[j] * inv - cos * b[j] / (nb * nb));
    }
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn matmul_raw<T: Float>(a: &[T], b: &[T], n: usize, p: usize, q: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * q];
    for i in 0..n {
        let orow = &mut out[i * q..(i + 1) * q];
        for k in 0..p {
            let av = a[i * p + k];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[k * q..(k + 1) * q]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw<T: Float>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub(crate) fn softmax_in_place<T: Float>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn relu_raw<T: Float>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

pub(crate) fn sigmoid_raw<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sigmoid_raw<T: Float>(x: T) -> T {
    // ln sigma(x) = -softplus(-x)
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
