//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only arena. Every operation evaluates eagerly
//! when it is recorded, so [`Graph::value`] is a lookup and repeated
//! evaluation of a node always returns the identical tensor. Parameters
//! enter a graph through [`Graph::param`] (one node per parameter per
//! graph) and [`Graph::backward`] accumulates their gradients into the
//! [`ParamStore`] they came from.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Fill value used to exclude attention logits; `exp` of it underflows to exactly 0.
pub const MASK_VALUE: f64 = -1.0e30;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, rstd: Vec<f64> },
    Gelu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64> },
    Mean(Var),
    Sum(Var),
    MaskFill { x: Var, mask: Vec<bool> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    leaf_grad: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
    check_finite: bool,
}

// ---------------------------------------------------------------- kernels

/// `c (+)= op(a) * op(b)` with `op(a)` of shape `[m, k]` and `op(b)` of shape `[k, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices are exactly m*k, k*n and m*n long and the strides
    // above address only elements inside them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// How operand entries map onto entries of the broadcast output.
enum Plan {
    Same,
    /// The operand repeats every `m` output entries.
    Suffix(usize),
    General(Vec<usize>),
}

impl Plan {
    fn new(out: &[usize], operand: &[usize]) -> Plan {
        if out == operand {
            return Plan::Same;
        }
        let m = numel(operand);
        let trimmed: Vec<usize> = {
            let first = operand.iter().position(|&d| d != 1).unwrap_or(operand.len());
            operand[first..].to_vec()
        };
        if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
            return Plan::Suffix(m);
        }
        let rank = out.len();
        let mut strides = vec![0usize; rank];
        let mut s = 1;
        for i in (0..rank).rev() {
            let j = i as isize - (rank - operand.len()) as isize;
            if j >= 0 {
                let d = operand[j as usize];
                if d != 1 {
                    strides[i] = s;
                }
                s *= d;
            }
        }
        let total = numel(out);
        let mut idx = Vec::with_capacity(total);
        let mut counter = vec![0usize; rank];
        let mut cur = 0usize;
        for _ in 0..total {
            idx.push(cur);
            for i in (0..rank).rev() {
                counter[i] += 1;
                cur += strides[i];
                if counter[i] < out[i] {
                    break;
                }
                cur -= strides[i] * counter[i];
                counter[i] = 0;
            }
        }
        Plan::General(idx)
    }

    #[inline]
    fn index(&self, k: usize) -> usize {
        match self {
            Plan::Same => k,
            Plan::Suffix(m) => k % m,
            Plan::General(idx) => idx[k],
        }
    }

    /// Sums `grad` (output-shaped) down to the operand shape.
    fn reduce(&self, grad: &[f64], operand: &[usize]) -> Tensor {
        match self {
            Plan::Same => Tensor::from_parts_unchecked(operand.to_vec(), grad.to_vec()),
            _ => {
                let mut out = vec![0.0; numel(operand)];
                for (k, g) in grad.iter().enumerate() {
                    out[self.index(k)] += g;
                }
                Tensor::from_parts_unchecked(operand.to_vec(), out)
            }
        }
    }
}

fn erf_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI)
}

// ---------------------------------------------------------------- graph

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that fails any operation whose result contains NaN or infinity.
    pub fn with_finite_check() -> Self {
        Self {
            check_finite: true,
            ..Self::default()
        }
    }

    pub fn set_finite_check(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            leaf_grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Forward value of a node.
    pub fn evaluate(&self, v: Var) -> Tensor {
        self.value(v).clone()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    /// Gradient accumulated on a leaf created with `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].leaf_grad.as_ref()
    }

    pub fn zero_leaf_grads(&mut self) {
        for n in &mut self.nodes {
            n.leaf_grad = None;
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// The node for a stored parameter; created on first use within this graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
            needs_grad: true,
            leaf_grad: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Forward value without gradient flow.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.push("detach", value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                })
            }
        };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul", Tensor::from_parts_unchecked(vec![m, n], out), Op::MatMul(a, b), ng)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or(Error::ShapeMismatch {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let pa = Plan::new(&out_shape, &sa);
        let pb = Plan::new(&out_shape, &sb);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let total = numel(&out_shape);
        let data: Vec<f64> = match (&pa, &pb) {
            (Plan::Same, Plan::Same) => da.iter().zip(db).map(|(x, y)| f(*x, *y)).collect(),
            (Plan::Same, Plan::Suffix(m)) => da
                .chunks(*m)
                .flat_map(|chunk| chunk.iter().zip(db).map(|(x, y)| f(*x, *y)))
                .collect(),
            _ => (0..total).map(|k| f(da[pa.index(k)], db[pb.index(k)])).collect(),
        };
        let ng = self.needs(a) || self.needs(b);
        Ok((Tensor::from_parts_unchecked(out_shape, data), ng))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, ng) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add(a, b), ng)
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, ng) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::from_parts_unchecked(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect());
        let ng = self.needs(x);
        self.push("scale", value, Op::Scale(x, c), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.needs(x);
        self.push("transpose", Tensor::from_parts_unchecked(vec![c, r], out), Op::Transpose(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let ng = self.needs(x);
        self.push("reshape", value, Op::Reshape(x), ng)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("concat of zero tensors"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat axis out of range"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * n..(o + 1) * n]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push("concat", Tensor::from_parts_unchecked(out_shape, out), Op::Concat(parts.to_vec(), axis), ng)
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(invalid(alloc::format!(
                "slice [{start}, {}) on axis {axis} of shape {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let ng = self.needs(x);
        self.push("slice", Tensor::from_parts_unchecked(out_shape, out), Op::Slice { x, axis, start }, ng)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(invalid("softmax axis out of range"));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = libm::exp(src[at(j)] - max);
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[at(j)] /= sum;
                }
            }
        }
        let ng = self.needs(x);
        self.push("softmax", Tensor::from_parts_unchecked(shape, out), Op::Softmax { x, axis }, ng)
    }

    /// Normalizes the last axis to zero mean and unit variance (biased variance).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| invalid("layer_norm of a scalar"))?;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let mut rstd = Vec::with_capacity(src.len() / d);
        for (row, dst) in src.chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / libm::sqrt(var + eps);
            for (o, v) in dst.iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
            rstd.push(r);
        }
        let ng = self.needs(x);
        self.push("layer_norm", Tensor::from_parts_unchecked(shape, out), Op::LayerNorm { x, rstd }, ng)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::from_parts_unchecked(
            t.shape().to_vec(),
            t.data().iter().map(|&v| v * erf_cdf(v)).collect(),
        );
        let ng = self.needs(x);
        self.push("gelu", value, Op::Gelu(x), ng)
    }

    /// Gathers rows of a `[rows, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, dim) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(invalid("embedding lookup with no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            if i >= rows {
                return Err(Error::IndexOutOfRange {
                    what: "embedding table",
                    index: i,
                    size: rows,
                });
            }
            out.extend_from_slice(self.value(table).row(i));
        }
        let ng = self.needs(table);
        self.push(
            "embedding",
            Tensor::from_parts_unchecked(vec![ids.len(), dim], out),
            Op::Embedding { table, ids: ids.to_vec() },
            ng,
        )
    }

    /// Mean cross-entropy of `[n, classes]` logits over rows whose target is `Some`.
    ///
    /// With no scored rows the result is exactly 0 and no gradient flows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (n, c) = self.value(logits).dims2()?;
        if targets.len() != n {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![n, c],
                rhs: vec![targets.len()],
            });
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= c {
                return Err(Error::IndexOutOfRange {
                    what: "cross_entropy classes",
                    index: t,
                    size: c,
                });
            }
            let row = &src[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| libm::exp(v - max)).sum();
            let lse = max + libm::log(sum);
            for j in 0..c {
                probs[r * c + j] = libm::exp(row[j] - lse);
            }
            total += lse - row[t];
            count += 1;
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        let ng = self.needs(logits) && count > 0;
        self.push(
            "cross_entropy",
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.needs(x);
        self.push("mean", Tensor::scalar(value), Op::Mean(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).data().iter().sum::<f64>();
        let ng = self.needs(x);
        self.push("sum", Tensor::scalar(value), Op::Sum(x), ng)
    }

    /// Replaces entries where `mask` is true with `fill`; no gradient flows through them.
    pub fn mask_fill(&mut self, x: Var, mask: &[bool], fill: f64) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.len() {
            return Err(Error::ShapeMismatch {
                op: "mask_fill",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = t
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let value = Tensor::from_parts_unchecked(t.shape().to_vec(), data);
        let ng = self.needs(x);
        self.push("mask_fill", value, Op::MaskFill { x, mask: mask.to_vec() }, ng)
    }

    // ------------------------------------------------------------ backward

    /// Back-propagates from a scalar `loss`.
    ///
    /// Parameter gradients are added to `store`; gradients of leaves created
    /// with `requires_grad` are added to the leaf's slot ([`Graph::grad`]).
    /// Nothing is cleared, so repeated calls accumulate.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts_unchecked(shape.to_vec(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => match &mut self.nodes[i].leaf_grad {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                },
                Op::Param(id) => store.accumulate_grad(*id, &g),
                op => {
                    let contributions = self.vjp(op, i, &g);
                    for (v, t) in contributions {
                        if !self.nodes[v.0].needs_grad {
                            continue;
                        }
                        match &mut grads[v.0] {
                            Some(acc) => acc.add_assign(&t),
                            slot => *slot = Some(t),
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` with upstream gradient `g`.
    fn vjp(&self, op: &Op, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let out = &self.nodes[i].value;
        let gd = g.data();
        match op {
            Op::Leaf | Op::Param(_) => Vec::new(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let mut res = Vec::with_capacity(2);
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, tb.data(), true, &mut da, false);
                    res.push((*a, Tensor::from_parts_unchecked(vec![m, k], da)));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, gd, false, &mut db, false);
                    res.push((*b, Tensor::from_parts_unchecked(vec![k, n], db)));
                }
                res
            }
            Op::Add(a, b) => {
                let mut res = Vec::with_capacity(2);
                for v in [*a, *b] {
                    if self.needs(v) {
                        let s = self.shape(v);
                        res.push((v, Plan::new(out.shape(), s).reduce(gd, s)));
                    }
                }
                res
            }
            Op::Mul(a, b) => {
                let mut res = Vec::with_capacity(2);
                for (v, w) in [(*a, *b), (*b, *a)] {
                    if !self.needs(v) {
                        continue;
                    }
                    let pw = Plan::new(out.shape(), self.shape(w));
                    let wd = self.value(w).data();
                    let prod: Vec<f64> = gd.iter().enumerate().map(|(k, x)| x * wd[pw.index(k)]).collect();
                    let s = self.shape(v);
                    res.push((v, Plan::new(out.shape(), s).reduce(&prod, s)));
                }
                res
            }
            Op::Scale(x, c) => vec![(*x, with_data(g, gd.iter().map(|v| v * c).collect()))],
            Op::Transpose(x) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] = gd[i * c + j];
                    }
                }
                vec![(*x, Tensor::from_parts_unchecked(vec![c, r], dx))]
            }
            Op::Reshape(x) => vec![(*x, Tensor::from_parts_unchecked(self.shape(*x).to_vec(), gd.to_vec()))],
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            dp.extend_from_slice(&gd[base..base + n * inner]);
                        }
                        res.push((p, Tensor::from_parts_unchecked(self.shape(p).to_vec(), dp)));
                    }
                    offset += n;
                }
                res
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x);
                let (outer, n, inner) = split_axis(shape, *axis);
                let len = out.shape()[*axis];
                let mut dx = vec![0.0; numel(shape)];
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    dx[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, Tensor::from_parts_unchecked(shape.to_vec(), dx))]
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let dot: f64 = (0..n).map(|j| gd[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            dx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                vec![(*x, with_data(g, dx))]
            }
            Op::LayerNorm { x, rstd } => {
                let d = *out.shape().last().unwrap();
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for (r, &s) in rstd.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let mean_g = gr.iter().sum::<f64>() / d as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = s * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
                vec![(*x, with_data(g, dx))]
            }
            Op::Gelu(x) => {
                let xs = self.value(*x).data();
                let dx = xs
                    .iter()
                    .zip(gd)
                    .map(|(&v, gv)| gv * (erf_cdf(v) + v * normal_pdf(v)))
                    .collect();
                vec![(*x, with_data(g, dx))]
            }
            Op::Embedding { table, ids } => {
                let shape = self.shape(*table);
                let dim = shape[1];
                let mut dt = vec![0.0; numel(shape)];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..dim {
                        dt[id * dim + j] += gd[r * dim + j];
                    }
                }
                vec![(*table, Tensor::from_parts_unchecked(shape.to_vec(), dt))]
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let shape = self.shape(*logits);
                let c = shape[1];
                let count = targets.iter().filter(|t| t.is_some()).count();
                let scale = gd[0] / count.max(1) as f64;
                let mut dl = vec![0.0; numel(shape)];
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..c {
                        dl[r * c + j] = probs[r * c + j] * scale;
                    }
                    dl[r * c + t] -= scale;
                }
                vec![(*logits, Tensor::from_parts_unchecked(shape.to_vec(), dl))]
            }
            Op::Mean(x) => {
                let shape = self.shape(*x);
                let n = numel(shape);
                vec![(*x, Tensor::full(shape, gd[0] / n as f64))]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(self.shape(*x), gd[0]))],
            Op::MaskFill { x, mask } => {
                let dx = gd.iter().zip(mask).map(|(&v, &m)| if m { 0.0 } else { v }).collect();
                vec![(*x, with_data(g, dx))]
            }
        }
    }
}

fn with_data(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::from_parts_unchecked(like.shape().to_vec(), data)
}
