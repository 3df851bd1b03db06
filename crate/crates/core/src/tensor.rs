//! Dense `f64` tensors and a tape for reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value and enough saved state to run its backward
//! rule; [`Tape::backward`] then walks the nodes in reverse order. Node ids
//! are assigned in push order, so inputs always precede their consumers.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Row-major dense array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Every extent must be positive and their product must equal `data.len()`.
    /// An empty shape denotes a scalar.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) || numel(&shape) != data.len() {
            return Err(Error::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// First element; the value of a scalar.
    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var, MatMulDims),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        rstd: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    MeanOf(Vec<Var>),
    PairwiseDistance(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Operation record for one forward pass.
///
/// Leaves may borrow their values (model parameters) for the lifetime of the
/// tape; every other node owns its output.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf that takes part in differentiation.
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(value), true)
    }

    /// Records a borrowed leaf without gradient tracking.
    pub fn input(&mut self, value: &'a Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(value), false)
    }

    /// Records an owned leaf, e.g. an image or a test input.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Owned(value), requires_grad)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(Tensor { shape, data }),
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) loss with respect to
    /// `v`. `None` when `v` does not require grad or does not reach the loss.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, op, &[a, b])
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, data, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, Op::Scale(x, s), |v| v * s)
    }

    /// `x[..., c] + row[c]`, broadcasting `row` over all leading positions.
    /// `row` may have any shape with `c` elements.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&1);
        if self.value(row).len() != c {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: self.shape(x).to_vec(),
                right: self.shape(row).to_vec(),
            });
        }
        let r = self.data(row);
        let data = self
            .data(x)
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, data, Op::AddRow(x, row), &[x, row]))
    }

    /// Matrix product over the last two axes. `b` is either a plain matrix,
    /// shared across the batch, or carries the same batch axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            left: sa.to_vec(),
            right: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let b_batched = !lead_b.is_empty();
        if k != k2 || (b_batched && lead_a != lead_b) {
            return Err(mismatch());
        }
        let dims = MatMulDims {
            batch: numel(lead_a),
            m,
            k,
            n,
            b_batched,
        };
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        let mut out = vec![0.0; dims.batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for t in 0..dims.batch {
            let boff = if b_batched { t * k * n } else { 0 };
            gemm(
                m,
                k,
                n,
                &ad[t * m * k..(t + 1) * m * k],
                (k, 1),
                &bd[boff..boff + k * n],
                (n, 1),
                &mut out[t * m * n..(t + 1) * m * n],
                0.0,
            );
        }
        Ok(self.push(shape, out, Op::MatMul(a, b, dims), &[a, b]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let rank = shape.len();
        let mut seen = vec![false; rank];
        for &a in axes {
            if a >= rank || seen[a] {
                return Err(Error::InvalidAxis { axis: a, rank });
            }
            seen[a] = true;
        }
        if axes.len() != rank {
            return Err(Error::InvalidAxis {
                axis: axes.len(),
                rank,
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let data = permute_data(self.data(x), shape, axes);
        Ok(self.push(out_shape, data, Op::Permute(x, axes.to_vec()), &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::InvalidAxis { axis: 1, rank });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape.to_vec(),
            });
        }
        let data = self.data(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = split_axis(self.shape(x), axis)?;
        let mut out = self.data(x).to_vec();
        for_each_lane(outer, n, inner, |idx| {
            let max = idx.clone().map(|i| out[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for i in idx.clone() {
                out[i] = libm::exp(out[i] - max);
                sum += out[i];
            }
            for i in idx {
                out[i] /= sum;
            }
        });
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Softmax(x, axis), &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = split_axis(self.shape(x), axis)?;
        let mut out = self.data(x).to_vec();
        for_each_lane(outer, n, inner, |idx| {
            let max = idx.clone().map(|i| out[i]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = idx.clone().map(|i| libm::exp(out[i] - max)).sum();
            let lse = max + libm::log(sum);
            for i in idx {
                out[i] -= lse;
            }
        });
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::LogSoftmax(x, axis), &[x]))
    }

    /// Normalises each vector along the last axis, then applies `gain` and
    /// `bias` (both of that axis' length). `eps` goes inside the square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let c = *self.shape(x).last().ok_or(Error::InvalidAxis { axis: 0, rank: 0 })?;
        for p in [gain, bias] {
            if self.value(p).len() != c {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let xd = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let rows = xd.len() / c;
        let mut normed = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / libm::sqrt(var + eps);
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                normed[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normed,
            rstd,
        };
        Ok(self.push(shape, out, op, &[x, gain, bias]))
    }

    /// Training-mode batch normalisation of `x: [B, c]` over the batch axis,
    /// using the biased batch variance. Returns the output together with the
    /// batch mean and biased variance per feature.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::InvalidAxis {
                axis: 1,
                rank: shape.len(),
            });
        }
        let (bsz, c) = (shape[0], shape[1]);
        for p in [gain, bias] {
            if self.value(p).len() != c {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    left: shape.clone(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let xd = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for r in 0..bsz {
            for j in 0..c {
                mean[j] += xd[r * c + j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= bsz as f64);
        for r in 0..bsz {
            for j in 0..c {
                let d = xd[r * c + j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= bsz as f64);
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let mut normed = vec![0.0; bsz * c];
        let mut out = vec![0.0; bsz * c];
        for r in 0..bsz {
            for j in 0..c {
                let xh = (xd[r * c + j] - mean[j]) * rstd[j];
                normed[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + b[j];
            }
        }
        let op = Op::BatchNorm {
            x,
            gain,
            bias,
            normed,
            rstd,
        };
        let y = self.push(shape, out, op, &[x, gain, bias]);
        Ok((y, mean, var))
    }

    /// Exact GELU, `x * Phi(x)` with the Gaussian CDF.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), |v| {
            0.5 * v * (1.0 + libm::erf(v * core::f64::consts::FRAC_1_SQRT_2))
        })
    }

    /// `ln(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, Op::Softplus(x), softplus)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.data(x).iter().sum::<f64>() / n;
        self.push(Vec::new(), vec![s], Op::Mean(x), &[x])
    }

    /// Concatenates along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::ShapeMismatch {
            op: "concat_rows",
            left: Vec::new(),
            right: Vec::new(),
        })?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(first).to_vec(),
                    right: s.to_vec(),
                });
            }
            rows += s[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(self.push(shape, data, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Selects rows (first-axis slices) in the given order.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let extent = *shape.first().ok_or(Error::InvalidAxis { axis: 0, rank: 0 })?;
        if rows.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                left: shape.to_vec(),
                right: Vec::new(),
            });
        }
        let width = numel(&shape[1..]);
        let xd = self.data(x);
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= extent {
                return Err(Error::IndexOutOfRange { index: r, extent });
            }
            data.extend_from_slice(&xd[r * width..(r + 1) * width]);
        }
        let mut out_shape = vec![rows.len()];
        out_shape.extend_from_slice(&shape[1..]);
        Ok(self.push(out_shape, data, Op::GatherRows(x, rows.to_vec()), &[x]))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..end).collect();
        self.gather_rows(x, &rows)
    }

    /// Picks elements by flat row-major index; the output is one-dimensional.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xd = self.data(x);
        let mut data = Vec::with_capacity(indices.len());
        for &i in indices {
            data.push(*xd.get(i).ok_or(Error::IndexOutOfRange {
                index: i,
                extent: xd.len(),
            })?);
        }
        Ok(self.push(
            vec![indices.len()],
            data,
            Op::Gather(x, indices.to_vec()),
            &[x],
        ))
    }

    /// Element-wise arithmetic mean of same-shaped tensors, accumulated as a
    /// running mean so that identical inputs reproduce themselves exactly.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::StructureMismatch)?;
        for &x in xs {
            self.same_shape("mean_of", first, x)?;
        }
        let mut acc = self.data(first).to_vec();
        for (i, &x) in xs.iter().enumerate().skip(1) {
            let k = (i + 1) as f64;
            for (a, &v) in acc.iter_mut().zip(self.data(x)) {
                *a += (v - *a) / k;
            }
        }
        let shape = self.shape(first).to_vec();
        Ok(self.push(shape, acc, Op::MeanOf(xs.to_vec()), xs))
    }

    /// Euclidean distance matrix `[B, B]` between the rows of `x: [B, c]`.
    pub fn pairwise_distance(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 {
            return Err(Error::InvalidAxis {
                axis: 1,
                rank: shape.len(),
            });
        }
        let (b, c) = (shape[0], shape[1]);
        let xd = self.data(x);
        let mut out = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                let s: f64 = (0..c)
                    .map(|t| {
                        let d = xd[i * c + t] - xd[j * c + t];
                        d * d
                    })
                    .sum();
                out[i * b + j] = libm::sqrt(s);
            }
        }
        Ok(self.push(vec![b, b], out, Op::PairwiseDistance(x), &[x]))
    }

    /// Populates [`grad`](Self::grad) for every node that requires grad and
    /// reaches `loss`. Gradients from multiple uses of a node are summed.
    /// Previous gradients on the tape are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = if node.requires_grad { g } else { None };
        }
        Ok(())
    }

    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data.as_slice();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |gx| {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += s * b)
            }),
            Op::AddRow(x, row) => {
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*row, &mut |gr| {
                    let c = gr.len();
                    for chunk in g.chunks(c) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::MatMul(a, b, d) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let (m, k, n) = (d.m, d.k, d.n);
                // dA = dC B^T
                acc(*a, &mut |ga| {
                    for t in 0..d.batch {
                        let boff = if d.b_batched { t * k * n } else { 0 };
                        gemm(
                            m,
                            n,
                            k,
                            &g[t * m * n..(t + 1) * m * n],
                            (n, 1),
                            &bd[boff..boff + k * n],
                            (1, n),
                            &mut ga[t * m * k..(t + 1) * m * k],
                            1.0,
                        );
                    }
                });
                // dB = A^T dC, summed over the batch when B is shared
                acc(*b, &mut |gb| {
                    for t in 0..d.batch {
                        let boff = if d.b_batched { t * k * n } else { 0 };
                        gemm(
                            k,
                            m,
                            n,
                            &ad[t * m * k..(t + 1) * m * k],
                            (1, k),
                            &g[t * m * n..(t + 1) * m * n],
                            (n, 1),
                            &mut gb[boff..boff + k * n],
                            1.0,
                        );
                    }
                });
            }
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let back = permute_data(g, &node.value.shape, &inverse);
                acc(*x, &mut |gx| add_into(gx, &back));
            }
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Softmax(x, axis) => {
                let (outer, n, inner) = split_axis(&node.value.shape, *axis).expect("checked");
                acc(*x, &mut |gx| {
                    for_each_lane(outer, n, inner, |idx| {
                        let dot: f64 = idx.clone().map(|i| g[i] * out[i]).sum();
                        for i in idx {
                            gx[i] += out[i] * (g[i] - dot);
                        }
                    })
                });
            }
            Op::LogSoftmax(x, axis) => {
                let (outer, n, inner) = split_axis(&node.value.shape, *axis).expect("checked");
                acc(*x, &mut |gx| {
                    for_each_lane(outer, n, inner, |idx| {
                        let gsum: f64 = idx.clone().map(|i| g[i]).sum();
                        for i in idx {
                            gx[i] += g[i] - libm::exp(out[i]) * gsum;
                        }
                    })
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let gd = self.data(*gain);
                let c = gd.len();
                acc(*gain, &mut |gg| {
                    for (gr, nr) in g.chunks(c).zip(normed.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * nr[j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for gr in g.chunks(c) {
                        add_into(gb, gr);
                    }
                });
                acc(*x, &mut |gx| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let span = r * c..(r + 1) * c;
                        let (gr, nr) = (&g[span.clone()], &normed[span.clone()]);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dxh = gr[j] * gd[j];
                            m1 += dxh;
                            m2 += dxh * nr[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dxh = gr[j] * gd[j];
                            gx[r * c + j] += rs * (dxh - m1 - nr[j] * m2);
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let gd = self.data(*gain);
                let c = gd.len();
                let bsz = normed.len() / c;
                acc(*gain, &mut |gg| {
                    for (gr, nr) in g.chunks(c).zip(normed.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * nr[j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for gr in g.chunks(c) {
                        add_into(gb, gr);
                    }
                });
                acc(*x, &mut |gx| {
                    for j in 0..c {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for r in 0..bsz {
                            let dxh = g[r * c + j] * gd[j];
                            m1 += dxh;
                            m2 += dxh * normed[r * c + j];
                        }
                        m1 /= bsz as f64;
                        m2 /= bsz as f64;
                        for r in 0..bsz {
                            let dxh = g[r * c + j] * gd[j];
                            gx[r * c + j] += rstd[j] * (dxh - m1 - normed[r * c + j] * m2);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        let v = xd[i];
                        let cdf = 0.5 * (1.0 + libm::erf(v * core::f64::consts::FRAC_1_SQRT_2));
                        let pdf = libm::exp(-0.5 * v * v) * INV_SQRT_2PI;
                        gx[i] += g[i] * (cdf + v * pdf);
                    }
                });
            }
            Op::Softplus(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * sigmoid(xd[i]);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => acc(*x, &mut |gx| {
                let s = g[0] / gx.len() as f64;
                gx.iter_mut().for_each(|v| *v += s)
            }),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let span = &g[offset..offset + n];
                    acc(p, &mut |gp| add_into(gp, span));
                    offset += n;
                }
            }
            Op::GatherRows(x, rows) => {
                let width = numel(&node.value.shape[1..]);
                acc(*x, &mut |gx| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(
                            &mut gx[r * width..(r + 1) * width],
                            &g[i * width..(i + 1) * width],
                        );
                    }
                });
            }
            Op::Gather(x, indices) => acc(*x, &mut |gx| {
                for (i, &j) in indices.iter().enumerate() {
                    gx[j] += g[i];
                }
            }),
            Op::MeanOf(xs) => {
                let inv = 1.0 / xs.len() as f64;
                for &x in xs {
                    acc(x, &mut |gx| {
                        gx.iter_mut().zip(g).for_each(|(a, b)| *a += inv * b)
                    });
                }
            }
            Op::PairwiseDistance(x) => {
                let xd = self.data(*x);
                let b = node.value.shape[0];
                let c = xd.len() / b;
                acc(*x, &mut |gx| {
                    for i in 0..b {
                        for j in 0..b {
                            let d = out[i * b + j];
                            let w = g[i * b + j];
                            if d == 0.0 || w == 0.0 {
                                continue;
                            }
                            for t in 0..c {
                                let u = w * (xd[i * c + t] - xd[j * c + t]) / d;
                                gx[i * c + t] += u;
                                gx[j * c + t] -= u;
                            }
                        }
                    }
                });
            }
        }
    }
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    Ok((
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    ))
}

/// Calls `f` with the flat indices of every 1-D lane along the split axis.
fn for_each_lane(
    outer: usize,
    n: usize,
    inner: usize,
    mut f: impl FnMut(core::iter::StepBy<core::ops::Range<usize>>),
) {
    for o in 0..outer {
        for i in 0..inner {
            let start = o * n * inner + i;
            f((start..start + n * inner).step_by(inner));
        }
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// `c = beta * c + a @ b` for row-major `c: [m, n]`. `a: [m, k]` and
/// `b: [k, n]` are addressed through (row stride, column stride) pairs.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    assert!(b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    assert_eq!(c.len(), m * n);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert_eq!(Tensor::scalar(2.0).len(), 1);
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), false);
        let m = tape.leaf(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]), false);
        let p = tape.matmul(i, m).unwrap();
        assert_eq!(tape.data(p), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]), false);
        let b = tape.leaf(t(&[2, 1], &[3.0, 4.0]), false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[1, 1]);
        assert_eq!(tape.data(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[2, 3]), false);
        match tape.matmul(a, b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn batched_matmul_broadcasts_plain_rhs() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let b = tape.leaf(t(&[2, 1], &[1.0, 1.0]), false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1, 1]);
        assert_eq!(tape.data(c), &[3.0, 7.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.0, 0.0, 0.0]), false);
        let s = tape.softmax(x, 0).unwrap();
        for &v in tape.data(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.leaf(t(&[2], &[1000.0, 0.0]), false);
        let s = tape.softmax(x, 0).unwrap();
        assert!((tape.data(s)[0] - 1.0).abs() < 1e-12);
        assert!(tape.data(s)[1].abs() < 1e-12);
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), false);
        let s = tape.softmax(x, 0).unwrap();
        let expected = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (v, e) in tape.data(s).iter().zip(expected) {
            assert!((v - e).abs() < 1e-12);
        }
        assert!(matches!(
            tape.softmax(x, 1),
            Err(Error::InvalidAxis { axis: 1, rank: 1 })
        ));
    }

    #[test]
    fn softmax_along_inner_axis() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[0.0, 5.0, 0.0, -5.0]), false);
        let s = tape.softmax(x, 0).unwrap();
        let d = tape.data(s);
        assert!((d[0] - 0.5).abs() < 1e-15 && (d[2] - 0.5).abs() < 1e-15);
        assert!((d[1] + d[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.leaf(Tensor::full(&[4], 1.0), false);
        let b = tape.leaf(Tensor::zeros(&[4]), false);
        let x = tape.leaf(t(&[4], &[5.0; 4]), false);
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        assert_eq!(tape.data(y), &[0.0; 4]);

        let g = tape.leaf(Tensor::full(&[2], 1.0), false);
        let b = tape.leaf(Tensor::zeros(&[2]), false);
        let x = tape.leaf(t(&[2], &[1.0, -1.0]), false);
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        assert_eq!(tape.data(y), &[1.0, -1.0]);
    }

    #[test]
    fn backward_trivial_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.5, -2.0, 7.0]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_and_constant_nodes_have_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2], 1.0), true);
        let c = tape.leaf(Tensor::full(&[2], 2.0), false);
        let unused = tape.leaf(Tensor::full(&[2], 1.0), true);
        let y = tape.mul(x, c).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
        assert!(tape.grad(c).is_none());
        assert!(tape.grad(unused).is_none());
    }

    #[test]
    fn mean_of_identical_inputs_is_exact() {
        let mut tape = Tape::new();
        let v = t(&[3], &[0.1, 1.0 / 3.0, -7.7]);
        let xs: Vec<Var> = (0..7).map(|_| tape.leaf(v.clone(), false)).collect();
        let m = tape.mean_of(&xs).unwrap();
        assert_eq!(tape.data(m), v.data());
    }

    #[test]
    fn pairwise_distance_three_four_five() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[3.0, 4.0, 0.0, 0.0]), false);
        let d = tape.pairwise_distance(x).unwrap();
        assert_eq!(tape.data(d), &[0.0, 5.0, 5.0, 0.0]);
    }

    #[test]
    fn permute_round_trip_is_identity() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(|v| v as f64 * 0.37).collect();
        let x = tape.leaf(t(&[2, 3, 4], &data), false);
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        let q = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.data(q), &data[..]);
        assert!(tape.permute(x, &[0, 0, 1]).is_err());
    }
}
