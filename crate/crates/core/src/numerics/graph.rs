//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the tape in reverse and applies each node's local rule. Nodes are
//! appended only after their inputs, so the tape is topologically ordered by
//! construction.

use super::tensor::{axis_split, Tensor};
use super::TensorError;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, batched: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    Softplus(Var),
    Softmax { a: Var, axis: usize },
    LogSoftmax { a: Var, axis: usize },
    Sum { a: Var, axis: usize },
    Mean { a: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    Permute { a: Var, perm: Vec<usize> },
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    L2Normalize { a: Var, axis: usize },
    LayerNorm { a: Var, axis: usize, eps: f64 },
    WeightedLogSumExp { a: Var, weights: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn shape_err(msg: String) -> TensorError {
    TensorError::ShapeMismatch(msg)
}

/// out[m×n] += a[m×k] · b[k×n]
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×k] += a[m×n] · b[k×n]ᵀ
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn permuted_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// Gathers `data` (with `shape`) into the axis order `perm`.
fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = permuted_strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf; receives a gradient in `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn check_finite(&self, a: Var, what: &str) -> Result<(), TensorError> {
        if self.value(a).is_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFiniteInput(what.to_string()))
        }
    }

    fn check_axis(&self, a: Var, axis: usize) -> Result<(), TensorError> {
        let rank = self.shape(a).len();
        if axis >= rank {
            return Err(shape_err(format!("axis {axis} out of range for rank {rank}")));
        }
        Ok(())
    }

    /// `a[..., m, k] · b[k, n]`, or batched `a[B, m, k] · b[B, k, n]` when
    /// both operands have the same leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err(format!("matmul needs rank >= 2, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(shape_err(format!("matmul inner dims differ: {sa:?} · {sb:?}")));
        }
        let batched = sb.len() > 2;
        let lead = &sa[..sa.len() - 2];
        if batched && lead != &sb[..sb.len() - 2] {
            return Err(shape_err(format!("matmul batch dims differ: {sa:?} · {sb:?}")));
        }
        let batch: usize = lead.iter().product();
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        if batched {
            for t in 0..batch {
                gemm_nn(
                    &av[t * m * k..(t + 1) * m * k],
                    &bv[t * k * n..(t + 1) * k * n],
                    &mut out[t * m * n..(t + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        } else {
            gemm_nn(av, bv, &mut out, batch * m, k, n);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul { a, b, batched }, rg))
    }

    fn broadcast_check(&self, a: Var, b: Var, name: &str) -> Result<(), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(format!("{name}: {sb:?} does not broadcast onto {sa:?}")));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let av = self.value(a);
        let bv = self.value(b).data();
        let nb = bv.len();
        let data = av.data().iter().enumerate().map(|(i, &x)| f(x, bv[i % nb])).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    /// Elementwise `a + b`; `b` may match a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.broadcast_check(a, b, "add")?;
        Ok(self.binary(a, b, Op::Add { a, b }, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.broadcast_check(a, b, "sub")?;
        Ok(self.binary(a, b, Op::Sub { a, b }, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.broadcast_check(a, b, "mul")?;
        Ok(self.binary(a, b, Op::Mul { a, b }, |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale { a, c }, |x| x * c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check_finite(a, "log")?;
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(TensorError::NonFiniteInput("log of non-positive value".into()));
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), |x| {
            0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    fn along_axis(&mut self, a: Var, axis: usize, op: Op, f: impl Fn(&[f64], &mut [f64])) -> Result<Var, TensorError> {
        self.check_axis(a, axis)?;
        let src = self.value(a);
        let (outer, n, inner) = axis_split(src.shape(), axis);
        let data = src.data();
        let mut out = vec![0.0; data.len()];
        let mut lane = vec![0.0; n];
        let mut res = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for k in 0..n {
                    lane[k] = data[(o * n + k) * inner + i];
                }
                f(&lane, &mut res);
                for k in 0..n {
                    out[(o * n + k) * inner + i] = res[k];
                }
            }
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(value, op, rg))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_finite(a, "softmax")?;
        self.along_axis(a, axis, Op::Softmax { a, axis }, |x, y| {
            let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (yi, &xi) in y.iter_mut().zip(x) {
                *yi = (xi - m).exp();
                s += *yi;
            }
            for yi in y.iter_mut() {
                *yi /= s;
            }
        })
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_finite(a, "log_softmax")?;
        self.along_axis(a, axis, Op::LogSoftmax { a, axis }, |x, y| {
            let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + x.iter().map(|&xi| (xi - m).exp()).sum::<f64>().ln();
            for (yi, &xi) in y.iter_mut().zip(x) {
                *yi = xi - lse;
            }
        })
    }

    /// Rows scaled to unit Euclidean norm along `axis`; zero rows stay zero.
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_finite(a, "l2_normalize")?;
        self.along_axis(a, axis, Op::L2Normalize { a, axis }, |x, y| {
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (yi, &xi) in y.iter_mut().zip(x) {
                *yi = if norm > 0.0 { xi / norm } else { 0.0 };
            }
        })
    }

    /// Standardizes along `axis` (no affine parameters).
    pub fn layer_norm(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var, TensorError> {
        self.along_axis(a, axis, Op::LayerNorm { a, axis, eps }, |x, y| {
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for (yi, &xi) in y.iter_mut().zip(x) {
                *yi = (xi - mean) * inv;
            }
        })
    }

    fn reduce(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var, TensorError> {
        self.check_axis(a, axis)?;
        let src = self.value(a);
        let (outer, n, inner) = axis_split(src.shape(), axis);
        let data = src.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += data[(o * n + k) * inner + i];
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= n as f64);
        }
        let mut shape = src.shape().to_vec();
        shape.remove(axis);
        let op = if mean {
            Op::Mean { a, axis }
        } else {
            Op::Sum { a, axis }
        };
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    /// Sums out `axis`.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce(a, axis, false)
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce(a, axis, true)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(shape_err(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let (out_shape, out) = permute_data(self.value(a).data(), &shape, perm);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Permute { a, perm: perm.to_vec() }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(shape_err("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or_else(|| shape_err("concat of nothing".into()))?;
        self.check_axis(first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().enumerate().any(|(d, &n)| d != axis && n != base[d]) {
                return Err(shape_err(format!("concat: {s:?} incompatible with {base:?}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        self.check_axis(a, axis)?;
        let shape = self.shape(a).to_vec();
        if start >= end || end > shape[axis] {
            return Err(shape_err(format!(
                "slice {start}..{end} out of range for axis {axis} of {shape:?}"
            )));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = end - start;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::Slice { a, axis, start }, rg))
    }

    /// `log Σ_k w_k exp(a_k)` along the last axis with constant non-negative
    /// weights of the same shape as `a`. Every lane needs a positive weight.
    pub fn weighted_logsumexp(&mut self, a: Var, weights: &Tensor) -> Result<Var, TensorError> {
        let src = self.value(a);
        if src.shape() != weights.shape() || src.rank() == 0 {
            return Err(shape_err(format!(
                "weights {:?} do not match input {:?}",
                weights.shape(),
                src.shape()
            )));
        }
        if !src.is_finite() {
            return Err(TensorError::NonFiniteInput("weighted_logsumexp".into()));
        }
        let n = *src.shape().last().unwrap();
        let rows = src.numel() / n;
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &src.data()[r * n..(r + 1) * n];
            let w = &weights.data()[r * n..(r + 1) * n];
            if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(TensorError::NonFiniteInput("negative or non-finite weight".into()));
            }
            let m = x
                .iter()
                .zip(w)
                .filter(|(_, &wk)| wk > 0.0)
                .map(|(&xk, _)| xk)
                .fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(TensorError::NonFiniteInput("lane with all-zero weights".into()));
            }
            let s: f64 = x
                .iter()
                .zip(w)
                .filter(|(_, &wk)| wk > 0.0)
                .map(|(&xk, &wk)| wk * (xk - m).exp())
                .sum();
            out.push(m + s.ln());
        }
        let shape = src.shape()[..src.rank() - 1].to_vec();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::WeightedLogSumExp {
                a,
                weights: weights.data().to_vec(),
            },
            rg,
        ))
    }

    /// Populates gradients of `loss` for every node that depends on a
    /// trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.apply_rule(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn apply_rule(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.nodes[idx].value.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b, batched } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |ga| {
                    if *batched {
                        for t in 0..batch {
                            gemm_nt(
                                &g[t * m * n..(t + 1) * m * n],
                                &bv[t * k * n..(t + 1) * k * n],
                                &mut ga[t * m * k..(t + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    } else {
                        gemm_nt(g, bv, ga, batch * m, n, k);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    if *batched {
                        for t in 0..batch {
                            gemm_tn(
                                &av[t * m * k..(t + 1) * m * k],
                                &g[t * m * n..(t + 1) * m * n],
                                &mut gb[t * k * n..(t + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    } else {
                        gemm_tn(av, g, gb, batch * m, k, n);
                    }
                });
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(self.nodes[idx].op, Op::Sub { .. }) {
                    -1.0
                } else {
                    1.0
                };
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                });
                self.accumulate(grads, *b, |gb| {
                    let nb = gb.len();
                    for (i, y) in g.iter().enumerate() {
                        gb[i % nb] += sign * y;
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let nb = bv.len();
                self.accumulate(grads, *a, |ga| {
                    for (i, y) in g.iter().enumerate() {
                        ga[i] += y * bv[i % nb];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (i, y) in g.iter().enumerate() {
                        gb[i % nb] += y * av[i];
                    }
                });
            }
            Op::Scale { a, c } => self.accumulate(grads, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }),
            Op::Exp(a) => self.accumulate(grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * out[i];
                }
            }),
            Op::Log(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / av[i];
                    }
                })
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Tanh(a) => self.accumulate(grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            }),
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        let x = av[i];
                        let u = GELU_C * (x + GELU_K * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                        ga[i] += g[i] * d;
                    }
                })
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                })
            }
            Op::Softplus(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * sigmoid(av[i]);
                    }
                })
            }
            Op::Softmax { a, axis }
            | Op::LogSoftmax { a, axis }
            | Op::L2Normalize { a, axis }
            | Op::LayerNorm { a, axis, .. } => {
                let (outer, n, inner) = axis_split(self.shape(*a), *axis);
                let av = self.value(*a).data();
                let op = &self.nodes[idx].op;
                self.accumulate(grads, *a, |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            match op {
                                Op::Softmax { .. } => {
                                    let dot: f64 = (0..n).map(|k| g[at(k)] * out[at(k)]).sum();
                                    for k in 0..n {
                                        ga[at(k)] += out[at(k)] * (g[at(k)] - dot);
                                    }
                                }
                                Op::LogSoftmax { .. } => {
                                    let gs: f64 = (0..n).map(|k| g[at(k)]).sum();
                                    for k in 0..n {
                                        ga[at(k)] += g[at(k)] - out[at(k)].exp() * gs;
                                    }
                                }
                                Op::L2Normalize { .. } => {
                                    let norm = (0..n).map(|k| av[at(k)] * av[at(k)]).sum::<f64>().sqrt();
                                    if norm > 0.0 {
                                        let dot: f64 = (0..n).map(|k| g[at(k)] * out[at(k)]).sum();
                                        for k in 0..n {
                                            ga[at(k)] += (g[at(k)] - out[at(k)] * dot) / norm;
                                        }
                                    }
                                }
                                Op::LayerNorm { eps, .. } => {
                                    let nf = n as f64;
                                    let mean = (0..n).map(|k| av[at(k)]).sum::<f64>() / nf;
                                    let var = (0..n).map(|k| (av[at(k)] - mean) * (av[at(k)] - mean)).sum::<f64>() / nf;
                                    let inv = 1.0 / (var + eps).sqrt();
                                    let gm = (0..n).map(|k| g[at(k)]).sum::<f64>() / nf;
                                    let gy = (0..n).map(|k| g[at(k)] * out[at(k)]).sum::<f64>() / nf;
                                    for k in 0..n {
                                        ga[at(k)] += inv * (g[at(k)] - gm - out[at(k)] * gy);
                                    }
                                }
                                _ => unreachable!(),
                            }
                        }
                    }
                })
            }
            Op::Sum { a, axis } | Op::Mean { a, axis } => {
                let (outer, n, inner) = axis_split(self.shape(*a), *axis);
                let c = if matches!(self.nodes[idx].op, Op::Mean { .. }) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                self.accumulate(grads, *a, |ga| {
                    for o in 0..outer {
                        for k in 0..n {
                            for i in 0..inner {
                                ga[(o * n + k) * inner + i] += c * g[o * inner + i];
                            }
                        }
                    }
                })
            }
            Op::SumAll(a) | Op::MeanAll(a) => {
                let n = self.value(*a).numel();
                let c = if matches!(self.nodes[idx].op, Op::MeanAll(_)) {
                    g[0] / n as f64
                } else {
                    g[0]
                };
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += c));
            }
            Op::Permute { a, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (_, back) = permute_data(g, self.nodes[idx].value.shape(), &inverse);
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y);
                });
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }),
            Op::Concat { parts, axis } => {
                let shape = self.nodes[idx].value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    self.accumulate(grads, p, |gp| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            gp[o * n * inner..(o + 1) * n * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    });
                    offset += n;
                }
            }
            Op::Slice { a, axis, start } => {
                let (outer, n, inner) = axis_split(self.shape(*a), *axis);
                let len = self.nodes[idx].value.shape()[*axis];
                self.accumulate(grads, *a, |ga| {
                    for o in 0..outer {
                        let dst = &mut ga[(o * n + start) * inner..(o * n + start + len) * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                })
            }
            Op::WeightedLogSumExp { a, weights } => {
                let av = self.value(*a).data();
                let n = *self.shape(*a).last().unwrap();
                self.accumulate(grads, *a, |ga| {
                    for r in 0..out.len() {
                        for k in 0..n {
                            let w = weights[r * n + k];
                            if w > 0.0 {
                                ga[r * n + k] += g[r] * w * (av[r * n + k] - out[r]).exp();
                            }
                        }
                    }
                })
            }
        }
    }
}
