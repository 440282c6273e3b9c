//! Reverse-mode tape.
//!
//! A [`Graph`] records every primitive applied to its leaves. Values are
//! computed eagerly when a node is pushed; [`Graph::backward`] walks the
//! record in reverse to accumulate gradients of a scalar loss.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Constant,
    Param(String),
    Linear(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddSuffix(Var, Var),
    MulSuffix(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Gelu(Var),
    Silu(Var),
    Square(Var),
    Softmax { x: Var, axis: usize },
    Normalize { x: Var, axis: usize, eps: T },
    Reshape(Var),
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    RepeatTokens { x: Var, n: usize },
    Concat(Var, Var),
    Sum(Var),
    Mean(Var),
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match *self {
            Constant | Param(_) => vec![],
            Linear(a, b)
            | BatchMatMul { a, b, .. }
            | Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | AddSuffix(a, b)
            | MulSuffix(a, b)
            | Concat(a, b) => vec![a, b],
            Scale(a, _)
            | AddScalar(a, _)
            | Gelu(a)
            | Silu(a)
            | Square(a)
            | Reshape(a)
            | Sum(a)
            | Mean(a) => vec![a],
            Softmax { x, .. }
            | Normalize { x, .. }
            | SplitHeads { x, .. }
            | MergeHeads { x, .. }
            | RepeatTokens { x, .. } => vec![x],
        }
    }
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
    // Per-lane 1/std for Normalize.
    aux: Vec<T>,
    // Target shape for Reshape replays.
    shape_hint: Vec<usize>,
}

/// Single-writer tape of primitive operations.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(Arc::new(t), Op::Constant, false)
    }

    pub fn constant_arc(&mut self, t: Arc<Tensor<T>>) -> Var {
        self.leaf(t, Op::Constant, false)
    }

    /// Registers a trainable leaf whose gradient [`Graph::backward`] reports.
    pub fn param(&mut self, name: impl Into<String>, t: Arc<Tensor<T>>) -> Var {
        self.leaf(t, Op::Param(name.into()), true)
    }

    /// Constant copy of `v`'s current value; blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.leaf(value, Op::Constant, false)
    }

    fn leaf(&mut self, value: Arc<Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            aux: Vec::new(),
            shape_hint: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<T>, shape_hint: Vec<usize>) -> Result<Var> {
        let (value, aux) = self.compute(&op, &shape_hint, |v| &self.nodes[v.0].value)?;
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
            aux,
            shape_hint,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `x[.., k] · w[k, n]`, applied to every row of `x`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        self.push(Op::Linear(x, w), vec![])
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.linear(x, w)?;
        self.add_suffix(y, b)
    }

    /// Alias of [`Graph::linear`] for rank-2 operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(TensorError::Rank {
                op: "matmul",
                expected: 2,
                shape: self.shape(a).to_vec(),
            });
        }
        self.linear(a, b)
    }

    /// Batched product: `a[B,m,k] · b[B,k,n]`, or `a · bᵀ` for `b[B,n,k]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        self.push(Op::BatchMatMul { a, b, trans_b }, vec![])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b), vec![])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b), vec![])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b), vec![])
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s.
    pub fn add_suffix(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::AddSuffix(a, b), vec![])
    }

    /// `a ⊙ b` where `b`'s shape is a trailing suffix of `a`'s.
    pub fn mul_suffix(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MulSuffix(a, b), vec![])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.push(Op::Scale(a, c), vec![])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.push(Op::AddScalar(a, c), vec![])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Gelu(a), vec![])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Silu(a), vec![])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Square(a), vec![])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.push(Op::Softmax { x, axis }, vec![])
    }

    /// Zero mean, unit variance along `axis` (no affine).
    pub fn normalize(&mut self, x: Var, axis: usize, eps: T) -> Result<Var> {
        self.push(Op::Normalize { x, axis, eps }, vec![])
    }

    /// Normalization over the last axis followed by a per-feature affine map.
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, eps: T) -> Result<Var> {
        let axis = self.shape(x).len().checked_sub(1).ok_or(TensorError::Rank {
            op: "layer_norm",
            expected: 1,
            shape: vec![],
        })?;
        let n = self.normalize(x, axis, eps)?;
        let s = self.mul_suffix(n, scale)?;
        self.add_suffix(s, shift)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape(x), shape.to_vec())
    }

    /// `[B, N, H·d] → [B·H, N, d]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        self.push(Op::SplitHeads { x, heads }, vec![])
    }

    /// `[B·H, N, d] → [B, N, H·d]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        self.push(Op::MergeHeads { x, heads }, vec![])
    }

    /// `[B, D] → [B, n, D]`, copying each row `n` times.
    pub fn repeat_tokens(&mut self, x: Var, n: usize) -> Result<Var> {
        self.push(Op::RepeatTokens { x, n }, vec![])
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Concat(a, b), vec![])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a), vec![])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a), vec![])
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let s = self.square(d)?;
        self.mean(s)
    }

    /// Recomputes every non-leaf value from the recorded operations.
    pub fn replay(&self) -> Result<Vec<Tensor<T>>> {
        let mut values: Vec<Arc<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Constant | Op::Param(_) => node.value.clone(),
                ref op => Arc::new(self.compute(op, &node.shape_hint, |v| &values[v.0])?.0),
            };
            values.push(v);
        }
        Ok(values.into_iter().map(|v| (*v).clone()).collect())
    }

    fn compute<'a>(
        &self,
        op: &Op<T>,
        hint: &[usize],
        val: impl Fn(Var) -> &'a Arc<Tensor<T>>,
    ) -> Result<(Tensor<T>, Vec<T>)>
    where
        T: 'a,
    {
        let plain = |t: Tensor<T>| Ok((t, Vec::new()));
        match *op {
            Op::Constant | Op::Param(_) => unreachable!("leaves are not recomputed"),
            Op::Linear(x, w) => plain(linear_fwd(val(x), val(w))?),
            Op::BatchMatMul { a, b, trans_b } => plain(bmm_fwd(val(a), val(b), trans_b)?),
            Op::Add(a, b) => plain(val(a).add(val(b))?),
            Op::Sub(a, b) => plain(val(a).sub(val(b))?),
            Op::Mul(a, b) => plain(val(a).mul(val(b))?),
            Op::AddSuffix(a, b) => plain(suffix_fwd(val(a), val(b), "add_suffix", |x, y| x + y)?),
            Op::MulSuffix(a, b) => plain(suffix_fwd(val(a), val(b), "mul_suffix", |x, y| x * y)?),
            Op::Scale(a, c) => plain(val(a).scale(c)),
            Op::AddScalar(a, c) => plain(val(a).map(|v| v + c)),
            Op::Gelu(a) => plain(val(a).map(kernels::gelu)),
            Op::Silu(a) => plain(val(a).map(kernels::silu)),
            Op::Square(a) => plain(val(a).map(|v| v * v)),
            Op::Softmax { x, axis } => plain(val(x).softmax(axis)?),
            Op::Normalize { x, axis, eps } => {
                let x = val(x);
                x.check_axis(axis, "normalize")?;
                let (o, l, i) = kernels::axis_split(x.shape(), axis);
                let mut out = vec![T::zero(); x.len()];
                let mut inv = vec![T::zero(); o * i];
                kernels::normalize(x.data(), &mut out, &mut inv, o, l, i, eps);
                Ok((Tensor::new(x.shape(), out)?, inv))
            }
            Op::Reshape(x) => plain(val(x).reshape(hint)?),
            Op::SplitHeads { x, heads } => plain(split_heads(val(x), heads)?),
            Op::MergeHeads { x, heads } => plain(merge_heads(val(x), heads)?),
            Op::RepeatTokens { x, n } => plain(repeat_tokens(val(x), n)?),
            Op::Concat(a, b) => plain(concat_last(val(a), val(b))?),
            Op::Sum(a) => plain(Tensor::scalar(val(a).sum())),
            Op::Mean(a) => {
                let a = val(a);
                let n = T::from_usize(a.len().max(1)).unwrap();
                plain(Tensor::scalar(a.sum() / n))
            }
        }
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// depends on a parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param(name) => Some((name.clone(), Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let val = |v: Var| &*self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, t: Tensor<T>| -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match node.op {
            Op::Constant | Op::Param(_) => {}
            Op::Linear(x, w) => {
                let (xv, wv) = (val(x), val(w));
                let (k, n) = wv.as_matrix("linear")?;
                let m: usize = xv.shape()[..xv.rank() - 1].iter().product();
                if wants(x) {
                    let mut wt = vec![T::zero(); k * n];
                    kernels::transpose(k, n, wv.data(), &mut wt);
                    let mut dx = vec![T::zero(); m * k];
                    kernels::gemm(m, n, k, g.data(), &wt, &mut dx);
                    acc(x, Tensor::new(xv.shape(), dx)?)?;
                }
                if wants(w) {
                    let mut xt = vec![T::zero(); m * k];
                    kernels::transpose(m, k, xv.data(), &mut xt);
                    let mut dw = vec![T::zero(); k * n];
                    kernels::gemm(k, m, n, &xt, g.data(), &mut dw);
                    acc(w, Tensor::new(wv.shape(), dw)?)?;
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (val(a), val(b));
                let (batch, m, k) = dims3(av, "batch_matmul")?;
                let n = if trans_b { bv.shape()[1] } else { bv.shape()[2] };
                if wants(a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    let mut bt = vec![T::zero(); k * n];
                    for s in 0..batch {
                        let bs = &bv.data()[s * k * n..(s + 1) * k * n];
                        // dA = dC · B_effᵀ, and B_effᵀ is the stored b when trans_b.
                        let b_eff_t: &[T] = if trans_b {
                            bs
                        } else {
                            kernels::transpose(k, n, bs, &mut bt);
                            &bt
                        };
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &g.data()[s * m * n..(s + 1) * m * n],
                            b_eff_t,
                            &mut da[s * m * k..(s + 1) * m * k],
                        );
                    }
                    acc(a, Tensor::new(av.shape(), da)?)?;
                }
                if wants(b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    let mut tmp = vec![T::zero(); m * n.max(k)];
                    for s in 0..batch {
                        let as_ = &av.data()[s * m * k..(s + 1) * m * k];
                        let gs = &g.data()[s * m * n..(s + 1) * m * n];
                        let out = &mut db[s * k * n..(s + 1) * k * n];
                        if trans_b {
                            // db[n×k] = dCᵀ[n×m] · A[m×k]
                            let gt = &mut tmp[..n * m];
                            kernels::transpose(m, n, gs, gt);
                            kernels::gemm(n, m, k, gt, as_, out);
                        } else {
                            let at = &mut tmp[..k * m];
                            kernels::transpose(m, k, as_, at);
                            kernels::gemm(k, m, n, at, gs, out);
                        }
                    }
                    acc(b, Tensor::new(bv.shape(), db)?)?;
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    acc(a, g.clone())?;
                }
                if wants(b) {
                    acc(b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    acc(a, g.clone())?;
                }
                if wants(b) {
                    acc(b, g.scale(-T::one()))?;
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    acc(a, g.mul(val(b))?)?;
                }
                if wants(b) {
                    acc(b, g.mul(val(a))?)?;
                }
            }
            Op::AddSuffix(a, b) => {
                if wants(a) {
                    acc(a, g.clone())?;
                }
                if wants(b) {
                    acc(b, reduce_suffix(g, val(b).shape(), |gv, _| gv)?)?;
                }
            }
            Op::MulSuffix(a, b) => {
                let (av, bv) = (val(a), val(b));
                if wants(a) {
                    acc(a, suffix_fwd(g, bv, "mul_suffix", |x, y| x * y)?)?;
                }
                if wants(b) {
                    let ga = g.mul(av)?;
                    acc(b, reduce_suffix(&ga, bv.shape(), |gv, _| gv)?)?;
                }
            }
            Op::Scale(a, c) => acc(a, g.scale(c))?,
            Op::AddScalar(a, _) => acc(a, g.clone())?,
            Op::Gelu(a) => acc(a, g.zip_map(val(a), "gelu", |gv, x| gv * kernels::gelu_grad(x))?)?,
            Op::Silu(a) => acc(a, g.zip_map(val(a), "silu", |gv, x| gv * kernels::silu_grad(x))?)?,
            Op::Square(a) => acc(a, g.zip_map(val(a), "square", |gv, x| gv * (x + x))?)?,
            Op::Softmax { x, axis } => {
                let y = &*node.value;
                let (o, l, i) = kernels::axis_split(y.shape(), axis);
                let mut dx = vec![T::zero(); y.len()];
                for oo in 0..o {
                    for q in 0..i {
                        let at = |j: usize| oo * l * i + j * i + q;
                        let mut dot = T::zero();
                        for j in 0..l {
                            dot += g.data()[at(j)] * y.data()[at(j)];
                        }
                        for j in 0..l {
                            dx[at(j)] = y.data()[at(j)] * (g.data()[at(j)] - dot);
                        }
                    }
                }
                acc(x, Tensor::new(y.shape(), dx)?)?;
            }
            Op::Normalize { x, axis, .. } => {
                let y = &*node.value;
                let (o, l, i) = kernels::axis_split(y.shape(), axis);
                let nl = T::from_usize(l).unwrap();
                let mut dx = vec![T::zero(); y.len()];
                for oo in 0..o {
                    for q in 0..i {
                        let at = |j: usize| oo * l * i + j * i + q;
                        let is = node.aux[oo * i + q];
                        let (mut mg, mut mgy) = (T::zero(), T::zero());
                        for j in 0..l {
                            mg += g.data()[at(j)];
                            mgy += g.data()[at(j)] * y.data()[at(j)];
                        }
                        mg /= nl;
                        mgy /= nl;
                        for j in 0..l {
                            dx[at(j)] = is * (g.data()[at(j)] - mg - y.data()[at(j)] * mgy);
                        }
                    }
                }
                acc(x, Tensor::new(y.shape(), dx)?)?;
            }
            Op::Reshape(x) => acc(x, g.reshape(val(x).shape())?)?,
            Op::SplitHeads { x, heads } => acc(x, merge_heads(g, heads)?)?,
            Op::MergeHeads { x, heads } => acc(x, split_heads(g, heads)?)?,
            Op::RepeatTokens { x, n } => {
                let xv = val(x);
                let (b, d) = xv.as_matrix("repeat_tokens")?;
                let mut dx = vec![T::zero(); b * d];
                for bi in 0..b {
                    for t in 0..n {
                        let src = &g.data()[(bi * n + t) * d..(bi * n + t + 1) * d];
                        for (o, &s) in dx[bi * d..(bi + 1) * d].iter_mut().zip(src) {
                            *o += s;
                        }
                    }
                }
                acc(x, Tensor::new(xv.shape(), dx)?)?;
            }
            Op::Concat(a, b) => {
                let (da, db) = (val(a).last_dim(), val(b).last_dim());
                let rows = g.rows();
                if wants(a) {
                    let mut out = Vec::with_capacity(rows * da);
                    for r in 0..rows {
                        out.extend_from_slice(&g.row(r)[..da]);
                    }
                    acc(a, Tensor::new(val(a).shape(), out)?)?;
                }
                if wants(b) {
                    let mut out = Vec::with_capacity(rows * db);
                    for r in 0..rows {
                        out.extend_from_slice(&g.row(r)[da..]);
                    }
                    acc(b, Tensor::new(val(b).shape(), out)?)?;
                }
            }
            Op::Sum(a) => acc(a, Tensor::full(val(a).shape(), g.item()))?,
            Op::Mean(a) => {
                let n = T::from_usize(val(a).len().max(1)).unwrap();
                acc(a, Tensor::full(val(a).shape(), g.item() / n))?
            }
        }
        Ok(())
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(String, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros of `shape` when `v` is not connected to the loss.
    pub fn wrt(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Parameters on the tape that received no gradient from the loss.
    pub fn disconnected(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|(_, v)| self.grads[v.0].is_none())
            .map(|(n, _)| n.as_str())
            .collect()
    }
}

fn dims3<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape()[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(TensorError::Rank {
            op,
            expected: 3,
            shape: t.shape().to_vec(),
        }),
    }
}

fn linear_fwd<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, n) = w.as_matrix("linear")?;
    if x.rank() == 0 || x.last_dim() != k {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let m: usize = x.shape()[..x.rank() - 1].iter().product();
    let mut out = vec![T::zero(); m * n];
    kernels::gemm(m, k, n, x.data(), w.data(), &mut out);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Tensor::new(&shape, out)
}

fn bmm_fwd<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
    let (batch, m, k) = dims3(a, "batch_matmul")?;
    let (bb, b1, b2) = dims3(b, "batch_matmul")?;
    let (kb, n) = if trans_b { (b2, b1) } else { (b1, b2) };
    if bb != batch || kb != k {
        return Err(TensorError::ShapeMismatch {
            op: "batch_matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![T::zero(); batch * m * n];
    let mut bt = vec![T::zero(); k * n];
    for s in 0..batch {
        let bs = &b.data()[s * k * n..(s + 1) * k * n];
        let beff: &[T] = if trans_b {
            kernels::transpose(n, k, bs, &mut bt);
            &bt
        } else {
            bs
        };
        kernels::gemm(
            m,
            k,
            n,
            &a.data()[s * m * k..(s + 1) * m * k],
            beff,
            &mut out[s * m * n..(s + 1) * m * n],
        );
    }
    Tensor::new(&[batch, m, n], out)
}

fn suffix_fwd<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &'static str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if b.rank() > a.rank() || a.shape()[a.rank() - b.rank()..] != *b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let bl = b.len();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, b.data()[i % bl]))
        .collect();
    Tensor::new(a.shape(), data)
}

fn reduce_suffix<T: Scalar>(
    g: &Tensor<T>,
    shape: &[usize],
    f: impl Fn(T, usize) -> T,
) -> Result<Tensor<T>> {
    let bl: usize = shape.iter().product();
    let mut out = vec![T::zero(); bl];
    for (i, &gv) in g.data().iter().enumerate() {
        out[i % bl] += f(gv, i);
    }
    Tensor::new(shape, out)
}

fn split_heads<T: Scalar>(x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let (b, n, w) = dims3(x, "split_heads")?;
    if heads == 0 || w % heads != 0 {
        return Err(TensorError::Invalid {
            op: "split_heads",
            detail: format!("width {w} not divisible by {heads} heads"),
        });
    }
    let d = w / heads;
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for t in 0..n {
            for h in 0..heads {
                let src = (bi * n + t) * w + h * d;
                let dst = ((bi * heads + h) * n + t) * d;
                out[dst..dst + d].copy_from_slice(&x.data()[src..src + d]);
            }
        }
    }
    Tensor::new(&[b * heads, n, d], out)
}

fn merge_heads<T: Scalar>(x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let (bh, n, d) = dims3(x, "merge_heads")?;
    if heads == 0 || bh % heads != 0 {
        return Err(TensorError::Invalid {
            op: "merge_heads",
            detail: format!("leading extent {bh} not divisible by {heads} heads"),
        });
    }
    let b = bh / heads;
    let w = heads * d;
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for t in 0..n {
            for h in 0..heads {
                let dst = (bi * n + t) * w + h * d;
                let src = ((bi * heads + h) * n + t) * d;
                out[dst..dst + d].copy_from_slice(&x.data()[src..src + d]);
            }
        }
    }
    Tensor::new(&[b, n, w], out)
}

fn repeat_tokens<T: Scalar>(x: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    let (b, d) = x.as_matrix("repeat_tokens")?;
    let mut out = Vec::with_capacity(b * n * d);
    for bi in 0..b {
        for _ in 0..n {
            out.extend_from_slice(&x.data()[bi * d..(bi + 1) * d]);
        }
    }
    Tensor::new(&[b, n, d], out)
}

fn concat_last<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() == 0 || a.rank() != b.rank() || a.shape()[..a.rank() - 1] != b.shape()[..b.rank() - 1] {
        return Err(TensorError::ShapeMismatch {
            op: "concat",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let rows = a.rows();
    let mut out = Vec::with_capacity(a.len() + b.len());
    for r in 0..rows {
        out.extend_from_slice(a.row(r));
        out.extend_from_slice(b.row(r));
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() += b.last_dim();
    Tensor::new(&shape, out)
}
