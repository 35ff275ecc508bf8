//! Append-only tape of primitive applications with reverse-mode differentiation.
//!
//! Every primitive records its output value (and, for a few ops, a small amount
//! of saved state) on the tape. Nodes only ever reference earlier nodes, so the
//! node order is already a topological order and `backward` is a single reverse
//! sweep.

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The differentiable primitives.
///
/// Shape rules:
/// * `MatMul`: `[m,k]·[k,n]` or batched `[g,m,k]·[g,k,n]`; with `trans_b` the
///   right operand is stored transposed (`[n,k]` / `[g,n,k]`).
/// * `Add` / `Mul`: the right operand has the same shape as the left, a suffix
///   of its shape (broadcast over leading axes), or shape `[1]`.
/// * `RowLogSoftmax`, `LayerNorm`, `Gelu`: shape preserving; the first two act
///   on the last axis.
/// * `CausalSoftmax`: `[.., t, t]`; entries above the diagonal become 0.
/// * `Embedding`: table `[r, d]` → `[ids.len(), d]`.
/// * `Slice` / `Concat`: along `axis`.
/// * `ReduceMean`: any → `[1]`.
/// * `GatherLogp`: `[n, v]` → `[n]`, picking column `targets[i]` of row `i`.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    MatMul { trans_b: bool },
    Add,
    Mul,
    Scale(f64),
    RowLogSoftmax,
    CausalSoftmax,
    LayerNorm { eps: f64 },
    Gelu,
    Embedding { ids: Vec<u32> },
    Slice { axis: usize, start: usize, len: usize },
    Concat { axis: usize },
    ReduceMean,
    GatherLogp { targets: Vec<u32> },
    Reshape { shape: Vec<usize> },
    Permute { perm: Vec<usize> },
}

impl Primitive {
    fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul { .. } => "matmul",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::RowLogSoftmax => "row_log_softmax",
            Primitive::CausalSoftmax => "causal_softmax",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::Gelu => "gelu",
            Primitive::Embedding { .. } => "embedding_lookup",
            Primitive::Slice { .. } => "slice",
            Primitive::Concat { .. } => "concat",
            Primitive::ReduceMean => "reduce_mean",
            Primitive::GatherLogp { .. } => "gather_logp",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Permute { .. } => "permute",
        }
    }
}

#[derive(Debug, Clone)]
enum NodeKind {
    Constant,
    Param,
    Op(Primitive),
}

#[derive(Debug, Clone)]
struct Node {
    kind: NodeKind,
    inputs: Vec<NodeId>,
    value: Tensor,
    /// Per-row reciprocal std for layer norm; empty otherwise.
    saved: Vec<f64>,
    requires_grad: bool,
}

/// Recording of a computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every parameter leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<(NodeId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.iter().find(|(n, _)| *n == id).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(n, t)| (*n, t))
    }

    pub fn into_vec(self) -> Vec<(NodeId, Tensor)> {
        self.grads
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, false)
    }

    /// Leaf whose gradient `backward` reports.
    pub fn param(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor, param: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: if param { "param" } else { "constant" } });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            kind: if param { NodeKind::Param } else { NodeKind::Constant },
            inputs: Vec::new(),
            value,
            saved: Vec::new(),
            requires_grad: param,
        });
        Ok(id)
    }

    /// Applies `prim` to `inputs`, records it, and returns the new node.
    pub fn apply(&mut self, prim: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        for &i in inputs {
            if i.0 >= self.nodes.len() {
                return Err(Error::InvalidArgument(format!("unknown node {}", i.0)));
            }
        }
        let vals: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
        let (value, saved) = forward(&prim, &vals)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: prim.name() });
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { kind: NodeKind::Op(prim), inputs: inputs.to_vec(), value, saved, requires_grad });
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MatMul { trans_b: false }, &[a, b])
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MatMul { trans_b: true }, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Primitive::Scale(c), &[a])
    }

    pub fn row_log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::RowLogSoftmax, &[a])
    }

    pub fn causal_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::CausalSoftmax, &[a])
    }

    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        self.apply(Primitive::LayerNorm { eps }, &[a])
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Gelu, &[a])
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        self.apply(Primitive::Embedding { ids: ids.to_vec() }, &[table])
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.apply(Primitive::Slice { axis, start, len }, &[a])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        self.apply(Primitive::Concat { axis }, parts)
    }

    pub fn reduce_mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::ReduceMean, &[a])
    }

    pub fn gather_logp(&mut self, logp: NodeId, targets: &[u32]) -> Result<NodeId> {
        self.apply(Primitive::GatherLogp { targets: targets.to_vec() }, &[logp])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(Primitive::Reshape { shape: shape.to_vec() }, &[a])
    }

    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        self.apply(Primitive::Permute { perm: perm.to_vec() }, &[a])
    }

    /// Reverse sweep from a scalar node. Returns d(loss)/d(param) for every
    /// parameter leaf that the loss depends on; parameters the loss does not
    /// reach get a zero tensor.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let NodeKind::Op(prim) = &node.kind else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|i| self.nodes[i.0].requires_grad).collect();
            let input_grads = vjp(prim, &inputs, &node.value, &node.saved, &g, &needs)?;
            for (k, ig) in input_grads.into_iter().enumerate() {
                let Some(ig) = ig else { continue };
                let target = node.inputs[k].0;
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }

        let mut out = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.kind, NodeKind::Param) {
                let g = if id <= loss.0 { grads[id].take() } else { None };
                out.push((NodeId(id), g.unwrap_or_else(|| Tensor::zeros(node.value.shape()))));
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn mismatch(op: &'static str, ts: &[&Tensor]) -> Error {
    Error::ShapeMismatch { op, shapes: ts.iter().map(|t| t.shape().to_vec()).collect() }
}

fn arity(prim: &Primitive, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::InvalidArgument(format!("{} expects {n} inputs, got {}", prim.name(), inputs.len())));
    }
    Ok(())
}

/// `C = A·B` (+ `beta·C`) for strided operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    debug_assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the asserted extents keep every strided access inside the slices,
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct MatMulDims {
    g: usize,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_dims(a: &Tensor, b: &Tensor, trans_b: bool) -> Result<MatMulDims> {
    let (sa, sb) = (a.shape(), b.shape());
    let (g, m, k, bk, n) = match (sa.len(), sb.len()) {
        (2, 2) => {
            let (bk, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
            (1, sa[0], sa[1], bk, n)
        }
        (3, 3) if sa[0] == sb[0] => {
            let (bk, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
            (sa[0], sa[1], sa[2], bk, n)
        }
        _ => return Err(mismatch("matmul", &[a, b])),
    };
    if k != bk {
        return Err(mismatch("matmul", &[a, b]));
    }
    Ok(MatMulDims { g, m, k, n })
}

fn broadcast_ok(a: &Tensor, b: &Tensor) -> bool {
    if b.len() == 1 && b.rank() == 1 {
        return true;
    }
    let (sa, sb) = (a.shape(), b.shape());
    sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let th = u.tanh();
    let y = 0.5 * x * (1.0 + th);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(x: &Tensor, perm: &[usize]) -> Tensor {
    let shape = x.shape();
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    // When the last axis stays in place, copy whole contiguous rows.
    let (outer_rank, run) = if perm[rank - 1] == rank - 1 { (rank - 1, shape[rank - 1]) } else { (rank, 1) };
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; outer_rank];
    let data = x.data();
    for _ in 0..x.len() / run {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.extend_from_slice(&data[off..off + run]);
        for ax in (0..outer_rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permute preserves size")
}

// Inputs are always finite: leaves and every recorded output are checked.
fn forward(prim: &Primitive, inputs: &[&Tensor]) -> Result<(Tensor, Vec<f64>)> {
    let out = match prim {
        Primitive::MatMul { trans_b } => {
            arity(prim, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let d = matmul_dims(a, b, *trans_b)?;
            let mut c = vec![0.0; d.g * d.m * d.n];
            let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
            for gi in 0..d.g {
                let (rsb, csb) = if *trans_b { (1, d.k) } else { (d.n, 1) };
                gemm(
                    d.m,
                    d.k,
                    d.n,
                    &a.data()[gi * sa..(gi + 1) * sa],
                    d.k,
                    1,
                    &b.data()[gi * sb..(gi + 1) * sb],
                    rsb,
                    csb,
                    &mut c[gi * sc..(gi + 1) * sc],
                    0.0,
                );
            }
            let shape = if a.rank() == 2 { vec![d.m, d.n] } else { vec![d.g, d.m, d.n] };
            Tensor::new(shape, c)?
        }
        Primitive::Add | Primitive::Mul => {
            arity(prim, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if !broadcast_ok(a, b) {
                return Err(mismatch(prim.name(), &[a, b]));
            }
            let bd = b.data();
            let mut data = a.data().to_vec();
            let is_add = matches!(prim, Primitive::Add);
            for chunk in data.chunks_mut(bd.len()) {
                if is_add {
                    chunk.iter_mut().zip(bd).for_each(|(x, y)| *x += y);
                } else {
                    chunk.iter_mut().zip(bd).for_each(|(x, y)| *x *= y);
                }
            }
            Tensor::new(a.shape().to_vec(), data)?
        }
        Primitive::Scale(c) => {
            arity(prim, inputs, 1)?;
            let a = inputs[0];
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| x * c).collect())?
        }
        Primitive::RowLogSoftmax => {
            arity(prim, inputs, 1)?;
            let a = inputs[0];
            let cols = a.cols();
            let mut out = Vec::with_capacity(a.len());
            for row in a.data().chunks(cols) {
                let lse = log_sum_exp(row);
                out.extend(row.iter().map(|x| x - lse));
            }
            Tensor::new(a.shape().to_vec(), out)?
        }
        Primitive::CausalSoftmax => {
            arity(prim, inputs, 1)?;
            let a = inputs[0];
            let s = a.shape();
            if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
                return Err(mismatch("causal_softmax", &[a]));
            }
            let t = a.cols();
            let mut out = vec![0.0; a.len()];
            for (r, (row, orow)) in a.data().chunks(t).zip(out.chunks_mut(t)).enumerate() {
                let i = r % t;
                let live = &row[..=i];
                let mx = live.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..=i {
                    let e = (row[j] - mx).exp();
                    orow[j] = e;
                    z += e;
                }
                for o in &mut orow[..=i] {
                    *o /= z;
                }
            }
            Tensor::new(s.to_vec(), out)?
        }
        Primitive::LayerNorm { eps } => {
            arity(prim, inputs, 1)?;
            let a = inputs[0];
            let cols = a.cols();
            let mut out = Vec::with_capacity(a.len());
            let mut rstds = Vec::with_capacity(a.rows());
            for row in a.data().chunks(cols) {
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                rstds.push(rstd);
                out.extend(row.iter().map(|x| (x - mean) * rstd));
            }
            return Ok((Tensor::new(a.shape().to_vec(), out)?, rstds));
        }
        Primitive::Gelu => {
            arity(prim, inputs, 1)?;
            let a = inputs[0];
            let (y, dy): (Vec<f64>, Vec<f64>) = a.data().iter().map(|&x| gelu_parts(x)).unzip();
            return Ok((Tensor::new(a.shape().to_vec(), y)?, dy));
        }
        Primitive::Embedding { ids } => {
            arity(prim, inputs, 1)?;
            let table = inputs[0];
            if table.rank() != 2 || ids.is_empty() {
                return Err(mismatch("embedding_lookup", &[table]));
            }
            let (rows, d) = (table.shape()[0], table.shape()[1]);
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id as usize >= rows {
                    return Err(Error::TokenOutOfRange { id, vocab: rows });
                }
                out.extend_from_slice(table.row(id as usize));
            }
            Tensor::new(vec![ids.len(), d], out)?
        }
        Primitive::Slice { axis, start, len } => {
            arity(prim, inputs, 1)?;
            let a = inputs[0];
            if *axis >= a.rank() || *len == 0 || start + len > a.shape()[*axis] {
                return Err(mismatch("slice", &[a]));
            }
            let (outer, n, inner) = axis_split(a.shape(), *axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * n * inner;
                out.extend_from_slice(&a.data()[base + start * inner..base + (start + len) * inner]);
            }
            let mut shape = a.shape().to_vec();
            shape[*axis] = *len;
            Tensor::new(shape, out)?
        }
        Primitive::Concat { axis } => {
            if inputs.is_empty() {
                return Err(Error::InvalidArgument("concat of nothing".into()));
            }
            let first = inputs[0].shape();
            if *axis >= first.len() {
                return Err(mismatch("concat", inputs));
            }
            for t in inputs {
                let s = t.shape();
                let same = s.len() == first.len() && s.iter().zip(first).enumerate().all(|(i, (x, y))| i == *axis || x == y);
                if !same {
                    return Err(mismatch("concat", inputs));
                }
            }
            let (outer, _, inner) = axis_split(first, *axis);
            let total: usize = inputs.iter().map(|t| t.shape()[*axis]).sum();
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in inputs {
                    let n = t.shape()[*axis];
                    out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
                }
            }
            let mut shape = first.to_vec();
            shape[*axis] = total;
            Tensor::new(shape, out)?
        }
        Primitive::ReduceMean => {
            arity(prim, inputs, 1)?;
            let a = inputs[0];
            Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
        }
        Primitive::GatherLogp { targets } => {
            arity(prim, inputs, 1)?;
            let a = inputs[0];
            if a.rank() != 2 || a.shape()[0] != targets.len() {
                return Err(Error::ShapeMismatch {
                    op: "gather_logp",
                    shapes: vec![a.shape().to_vec(), vec![targets.len()]],
                });
            }
            let v = a.cols();
            let mut out = Vec::with_capacity(targets.len());
            for (i, &t) in targets.iter().enumerate() {
                if t as usize >= v {
                    return Err(Error::TokenOutOfRange { id: t, vocab: v });
                }
                out.push(a.data()[i * v + t as usize]);
            }
            Tensor::new(vec![targets.len()], out)?
        }
        Primitive::Reshape { shape } => {
            arity(prim, inputs, 1)?;
            inputs[0].clone().reshaped(shape)?
        }
        Primitive::Permute { perm } => {
            arity(prim, inputs, 1)?;
            let a = inputs[0];
            let mut seen = vec![false; a.rank()];
            if perm.len() != a.rank() || perm.iter().any(|&p| p >= a.rank() || std::mem::replace(&mut seen[p], true)) {
                return Err(Error::ShapeMismatch { op: "permute", shapes: vec![a.shape().to_vec(), perm.clone()] });
            }
            permute_data(a, perm)
        }
    };
    Ok((out, Vec::new()))
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Sums a broadcast-expanded gradient back down to the operand's shape.
fn reduce_broadcast(full: Vec<f64>, target: &Tensor) -> Tensor {
    let bn = target.len();
    if bn == full.len() {
        return Tensor::new(target.shape().to_vec(), full).expect("same size");
    }
    let mut out = vec![0.0; bn];
    for chunk in full.chunks(bn) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::new(target.shape().to_vec(), out).expect("same size")
}

fn vjp(
    prim: &Primitive,
    inputs: &[&Tensor],
    out: &Tensor,
    saved: &[f64],
    g: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let gd = g.data();
    let res = match prim {
        Primitive::MatMul { trans_b } => {
            let (a, b) = (inputs[0], inputs[1]);
            let d = matmul_dims(a, b, *trans_b)?;
            let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
            let mut ga = needs[0].then(|| vec![0.0; a.len()]);
            let mut gb = needs[1].then(|| vec![0.0; b.len()]);
            for gi in 0..d.g {
                let gc = &gd[gi * sc..(gi + 1) * sc];
                let ab = &a.data()[gi * sa..(gi + 1) * sa];
                let bb = &b.data()[gi * sb..(gi + 1) * sb];
                if let Some(ga) = ga.as_mut() {
                    // dA = dC · B^T  (B^T is [n,k])
                    let (rs, cs) = if *trans_b { (d.k, 1) } else { (1, d.n) };
                    gemm(d.m, d.n, d.k, gc, d.n, 1, bb, rs, cs, &mut ga[gi * sa..(gi + 1) * sa], 0.0);
                }
                if let Some(gb) = gb.as_mut() {
                    let dst = &mut gb[gi * sb..(gi + 1) * sb];
                    if *trans_b {
                        // dB[n,k] = dC^T · A
                        gemm(d.n, d.m, d.k, gc, 1, d.n, ab, d.k, 1, dst, 0.0);
                    } else {
                        // dB[k,n] = A^T · dC
                        gemm(d.k, d.m, d.n, ab, 1, d.k, gc, d.n, 1, dst, 0.0);
                    }
                }
            }
            vec![
                ga.map(|v| Tensor::new(a.shape().to_vec(), v).expect("shape")),
                gb.map(|v| Tensor::new(b.shape().to_vec(), v).expect("shape")),
            ]
        }
        Primitive::Add => {
            let b = inputs[1];
            let gb = needs[1].then(|| reduce_broadcast(gd.to_vec(), b));
            vec![needs[0].then(|| g.clone()), gb]
        }
        Primitive::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let ga = needs[0].then(|| {
                let mut v = gd.to_vec();
                for chunk in v.chunks_mut(b.len()) {
                    chunk.iter_mut().zip(b.data()).for_each(|(x, y)| *x *= y);
                }
                Tensor::new(a.shape().to_vec(), v).expect("shape")
            });
            let gb = needs[1].then(|| {
                let full = gd.iter().zip(a.data()).map(|(x, y)| x * y).collect();
                reduce_broadcast(full, b)
            });
            vec![ga, gb]
        }
        Primitive::Scale(c) => {
            vec![Some(Tensor::new(g.shape().to_vec(), gd.iter().map(|x| x * c).collect())?)]
        }
        Primitive::RowLogSoftmax => {
            let cols = out.cols();
            let mut gx = Vec::with_capacity(out.len());
            for (yrow, grow) in out.data().chunks(cols).zip(gd.chunks(cols)) {
                let s: f64 = grow.iter().sum();
                gx.extend(yrow.iter().zip(grow).map(|(y, gy)| gy - y.exp() * s));
            }
            vec![Some(Tensor::new(out.shape().to_vec(), gx)?)]
        }
        Primitive::CausalSoftmax => {
            let t = out.cols();
            let mut gx = Vec::with_capacity(out.len());
            for (prow, grow) in out.data().chunks(t).zip(gd.chunks(t)) {
                let dot: f64 = prow.iter().zip(grow).map(|(p, gy)| p * gy).sum();
                gx.extend(prow.iter().zip(grow).map(|(p, gy)| p * (gy - dot)));
            }
            vec![Some(Tensor::new(out.shape().to_vec(), gx)?)]
        }
        Primitive::LayerNorm { .. } => {
            let cols = out.cols();
            let n = cols as f64;
            let mut gx = Vec::with_capacity(out.len());
            for ((yrow, grow), rstd) in out.data().chunks(cols).zip(gd.chunks(cols)).zip(saved) {
                let mg = grow.iter().sum::<f64>() / n;
                let mgy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n;
                gx.extend(yrow.iter().zip(grow).map(|(y, gy)| rstd * (gy - mg - y * mgy)));
            }
            vec![Some(Tensor::new(out.shape().to_vec(), gx)?)]
        }
        Primitive::Gelu => {
            let a = inputs[0];
            let gx = saved.iter().zip(gd).map(|(dy, gy)| gy * dy).collect();
            vec![Some(Tensor::new(a.shape().to_vec(), gx)?)]
        }
        Primitive::Embedding { ids } => {
            let table = inputs[0];
            let d = table.cols();
            let mut gt = Tensor::zeros(table.shape());
            let gtd = gt.data_mut();
            for (i, &id) in ids.iter().enumerate() {
                let dst = &mut gtd[id as usize * d..(id as usize + 1) * d];
                for (o, v) in dst.iter_mut().zip(&gd[i * d..(i + 1) * d]) {
                    *o += v;
                }
            }
            vec![Some(gt)]
        }
        Primitive::Slice { axis, start, len } => {
            let a = inputs[0];
            let (outer, n, inner) = axis_split(a.shape(), *axis);
            let mut gx = vec![0.0; a.len()];
            for o in 0..outer {
                let base = o * n * inner;
                gx[base + start * inner..base + (start + len) * inner]
                    .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::new(a.shape().to_vec(), gx)?)]
        }
        Primitive::Concat { axis } => {
            let (outer, total, inner) = axis_split(out.shape(), *axis);
            let mut parts: Vec<Vec<f64>> = inputs.iter().map(|t| Vec::with_capacity(t.len())).collect();
            for o in 0..outer {
                let mut off = o * total * inner;
                for (p, t) in parts.iter_mut().zip(inputs) {
                    let n = t.shape()[*axis] * inner;
                    p.extend_from_slice(&gd[off..off + n]);
                    off += n;
                }
            }
            parts
                .into_iter()
                .zip(inputs)
                .zip(needs)
                .map(|((p, t), &need)| need.then(|| Tensor::new(t.shape().to_vec(), p).expect("shape")))
                .collect()
        }
        Primitive::ReduceMean => {
            let a = inputs[0];
            vec![Some(Tensor::full(a.shape(), gd[0] / a.len() as f64))]
        }
        Primitive::GatherLogp { targets } => {
            let a = inputs[0];
            let v = a.cols();
            let mut gx = Tensor::zeros(a.shape());
            for (i, &t) in targets.iter().enumerate() {
                gx.data_mut()[i * v + t as usize] = gd[i];
            }
            vec![Some(gx)]
        }
        Primitive::Reshape { .. } => {
            vec![Some(g.clone().reshaped(inputs[0].shape())?)]
        }
        Primitive::Permute { perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            vec![Some(permute_data(g, &inv))]
        }
    };
    Ok(res)
}
