use std::collections::HashMap;

use super::arena;
use super::kernels::{self, col2im, conv_out_len, gemm_view, im2col, ConvGeom, Stft, View};
use super::real::Real;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Neg,
    Exp,
    Log,
    Sqrt,
    Square,
    Sigmoid,
    Tanh,
    Gelu,
    Relu,
    Abs,
    Softplus,
    Pow(f64),
    Scale(f64),
    Offset(f64),
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Reduce {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary(NodeId, Unary),
    Binary(NodeId, NodeId, Binary),
    Reduce {
        a: NodeId,
        axis: Option<usize>,
        kind: Reduce,
    },
    Softmax(NodeId),
    LayerNorm(NodeId, f64),
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        dil: usize,
    },
    ConvT1d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    Concat(Vec<NodeId>, usize),
    Slice {
        a: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Gather {
        a: NodeId,
        axis: usize,
        index: Vec<usize>,
    },
    Rope(NodeId, f64),
    StftMag {
        x: NodeId,
        n_fft: usize,
        hop: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Unary(..) => "unary",
            Op::Binary(_, _, Binary::Add) => "add",
            Op::Binary(_, _, Binary::Sub) => "sub",
            Op::Binary(_, _, Binary::Mul) => "mul",
            Op::Binary(_, _, Binary::Div) => "div",
            Op::Reduce { .. } => "reduce",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::MatMul { .. } => "matmul",
            Op::Conv1d { .. } => "conv1d",
            Op::ConvT1d { .. } => "conv_transpose1d",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::Gather { .. } => "gather",
            Op::Rope(..) => "rope",
            Op::StftMag { .. } => "stft_mag",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Unary(a, _)
            | Op::Reduce { a, .. }
            | Op::Softmax(a)
            | Op::LayerNorm(a, _)
            | Op::Slice { a, .. }
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Gather { a, .. }
            | Op::Rope(a, _) => vec![*a],
            Op::StftMag { x, .. } => vec![*x],
            Op::Binary(a, b, _) | Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Conv1d { x, w, .. } | Op::ConvT1d { x, w, .. } => vec![*x, *w],
            Op::Concat(xs, _) => xs.clone(),
        }
    }
}

struct Node<T> {
    op: Op,
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Taped computation graph.
///
/// Operations evaluate eagerly as they are recorded. Leaves can later be
/// rebound and the whole tape replayed with [`Graph::evaluate`]; backward is
/// refused until that replay has happened.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    names: HashMap<String, NodeId>,
    stale: bool,
    bytes: usize,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Drop for Graph<T> {
    fn drop(&mut self) {
        arena::free(self.bytes);
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `(outer, n, inner)` split of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Matmul operand geometry: batch count and per-batch logical views.
struct MmGeom {
    batch: usize,
    shared_b: bool,
    m: usize,
    k: usize,
    n: usize,
    a_rows: usize,
    a_cols: usize,
    b_rows: usize,
    b_cols: usize,
}

impl MmGeom {
    fn a_view(&self, i: usize) -> View {
        View::row_major(i * self.a_rows * self.a_cols, self.a_rows, self.a_cols)
    }

    fn b_view(&self, i: usize) -> View {
        let i = if self.shared_b { 0 } else { i };
        View::row_major(i * self.b_rows * self.b_cols, self.b_rows, self.b_cols)
    }

    fn c_view(&self, i: usize) -> View {
        View::row_major(i * self.m * self.n, self.m, self.n)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            names: HashMap::new(),
            stale: false,
            bytes: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn account(&mut self, elems: usize) {
        let b = elems * std::mem::size_of::<T>();
        self.bytes += b;
        arena::alloc(b);
    }

    fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.node(id).value
    }

    pub fn tensor(&self, id: NodeId) -> Tensor<T> {
        let n = self.node(id);
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
        }
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> T {
        self.node(id).value[0]
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.node(id).requires_grad
    }

    fn push_leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> NodeId {
        self.account(t.data.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: t.shape,
            value: t.data,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor<T>) -> NodeId {
        self.push_leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push_leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push_leaf(t, requires_grad)
    }

    /// Named leaf that can later be rebound with [`Graph::bind`].
    pub fn input(&mut self, name: &str, t: Tensor<T>, requires_grad: bool) -> NodeId {
        let id = self.push_leaf(t, requires_grad);
        self.names.insert(name.to_owned(), id);
        id
    }

    /// Registers a name for an arbitrary node so it can be fetched after
    /// [`Graph::evaluate_named`].
    pub fn name(&mut self, id: NodeId, name: &str) {
        self.names.insert(name.to_owned(), id);
    }

    pub fn lookup(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    /// Replaces the value of a leaf. The tape must be replayed before the
    /// next backward pass.
    pub fn set_leaf(&mut self, id: NodeId, t: Tensor<T>) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::invalid(format!("node {} is not a leaf", id.0)));
        }
        if node.shape != t.shape {
            return Err(Error::Shape {
                op: "bind",
                node: id.0,
                lhs: node.shape.clone(),
                rhs: t.shape,
            });
        }
        node.value = t.data;
        self.stale = true;
        Ok(())
    }

    pub(crate) fn set_leaf_element(&mut self, id: NodeId, i: usize, v: T) {
        self.nodes[id.0].value[i] = v;
        self.stale = true;
    }

    pub fn bind(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let id = self
            .lookup(name)
            .ok_or_else(|| Error::invalid(format!("no graph input named {name:?}")))?;
        self.set_leaf(id, t)
    }

    /// Replays every recorded operation from the current leaf values.
    pub fn evaluate(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let (shape, value) = self.compute(&op, i)?;
            let node = &mut self.nodes[i];
            if shape != node.shape {
                return Err(Error::Shape {
                    op: op.name(),
                    node: i,
                    lhs: node.shape.clone(),
                    rhs: shape,
                });
            }
            node.value = value;
        }
        self.stale = false;
        Ok(())
    }

    /// Binds `inputs`, replays the tape and returns every named node.
    pub fn evaluate_named(
        &mut self,
        inputs: impl IntoIterator<Item = (String, Tensor<T>)>,
    ) -> Result<HashMap<String, Tensor<T>>> {
        for (name, t) in inputs {
            self.bind(&name, t)?;
        }
        self.evaluate()?;
        Ok(self
            .names
            .iter()
            .map(|(k, &id)| (k.clone(), self.tensor(id)))
            .collect())
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let idx = self.nodes.len();
        let (shape, value) = self.compute(&op, idx)?;
        let requires_grad = op.inputs().iter().any(|&i| self.node(i).requires_grad);
        self.account(value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
            grad: None,
        });
        Ok(NodeId(idx))
    }

    fn shape_err(&self, op: &'static str, node: usize, a: NodeId, b: NodeId) -> Error {
        Error::Shape {
            op,
            node,
            lhs: self.node(a).shape.clone(),
            rhs: self.node(b).shape.clone(),
        }
    }

    fn check_axis(&self, op: &'static str, node: usize, a: NodeId, axis: usize) -> Result<()> {
        if axis >= self.node(a).shape.len() {
            return Err(Error::Shape {
                op,
                node,
                lhs: self.node(a).shape.clone(),
                rhs: vec![axis],
            });
        }
        Ok(())
    }

    // ---------------------------------------------------------------- forward

    fn compute(&self, op: &Op, idx: usize) -> Result<(Vec<usize>, Vec<T>)> {
        match op {
            Op::Leaf => unreachable!("leaves are not recomputed"),
            Op::Unary(a, u) => {
                let x = &self.node(*a).value;
                Ok((self.node(*a).shape.clone(), unary_map(*u, x)))
            }
            Op::Binary(a, b, kind) => {
                let (na, nb) = (&self.node(*a), &self.node(*b));
                if !na.shape.ends_with(&nb.shape) {
                    return Err(self.shape_err(op.name(), idx, *a, *b));
                }
                let out = match kind {
                    Binary::Add => bcast_map(&na.value, &nb.value, |x, y| x + y),
                    Binary::Sub => bcast_map(&na.value, &nb.value, |x, y| x - y),
                    Binary::Mul => bcast_map(&na.value, &nb.value, |x, y| x * y),
                    Binary::Div => bcast_map(&na.value, &nb.value, |x, y| x / y),
                };
                Ok((na.shape.clone(), out))
            }
            Op::Reduce { a, axis, kind } => {
                let n = self.node(*a);
                match axis {
                    None => {
                        let v = reduce_slice(*kind, n.value.iter().copied(), n.value.len());
                        Ok((vec![], vec![v]))
                    }
                    Some(ax) => {
                        self.check_axis("reduce", idx, *a, *ax)?;
                        let (outer, len, inner) = split_axis(&n.shape, *ax);
                        let mut out = Vec::with_capacity(outer * inner);
                        for o in 0..outer {
                            for i in 0..inner {
                                let it = (0..len).map(|j| n.value[(o * len + j) * inner + i]);
                                out.push(reduce_slice(*kind, it, len));
                            }
                        }
                        let mut shape = n.shape.clone();
                        shape.remove(*ax);
                        Ok((shape, out))
                    }
                }
            }
            Op::Softmax(a) => {
                let n = self.node(*a);
                let d = *n.shape.last().unwrap_or(&1);
                let mut out = vec![T::zero(); n.value.len()];
                for (row, dst) in n.value.chunks(d).zip(out.chunks_mut(d)) {
                    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut s = 0.0f64;
                    for (o, &x) in dst.iter_mut().zip(row) {
                        *o = (x - m).exp();
                        s += o.f64();
                    }
                    let inv = T::lit(1.0 / s);
                    dst.iter_mut().for_each(|o| *o = *o * inv);
                }
                Ok((n.shape.clone(), out))
            }
            Op::LayerNorm(a, eps) => {
                let n = self.node(*a);
                let d = *n.shape.last().unwrap_or(&1);
                let mut out = vec![T::zero(); n.value.len()];
                for (row, dst) in n.value.chunks(d).zip(out.chunks_mut(d)) {
                    let (mean, rstd) = row_stats(row, *eps);
                    for (o, &x) in dst.iter_mut().zip(row) {
                        *o = T::lit((x.f64() - mean) * rstd);
                    }
                }
                Ok((n.shape.clone(), out))
            }
            Op::MatMul { a, b, ta, tb } => {
                let g = self.mm_geom(idx, *a, *b, *ta, *tb)?;
                let (av, bv) = (&self.node(*a).value, &self.node(*b).value);
                let mut out = vec![T::zero(); g.batch * g.m * g.n];
                if g.shared_b && !*ta {
                    let rows = g.batch * g.m;
                    gemm_view(
                        av,
                        View::row_major(0, rows, g.k),
                        bv,
                        g.b_view(0).maybe_t(*tb),
                        &mut out,
                        View::row_major(0, rows, g.n),
                        true,
                    );
                } else {
                    for i in 0..g.batch {
                        gemm_view(
                            av,
                            g.a_view(i).maybe_t(*ta),
                            bv,
                            g.b_view(i).maybe_t(*tb),
                            &mut out,
                            g.c_view(i),
                            true,
                        );
                    }
                }
                let mut shape = self.node(*a).shape.clone();
                let r = shape.len();
                shape[r - 2] = g.m;
                shape[r - 1] = g.n;
                Ok((shape, out))
            }
            Op::Conv1d { x, w, stride, pad, dil } => {
                let (geom, c_out) = self.conv_geom(idx, *x, *w, *stride, *pad, *dil)?;
                let cols = im2col(&self.node(*x).value, &geom);
                let rows = geom.batch * geom.len_out;
                let kc = geom.kernel * geom.c_in;
                let mut out = vec![T::zero(); rows * c_out];
                gemm_view(
                    &cols,
                    View::row_major(0, rows, kc),
                    &self.node(*w).value,
                    View::row_major(0, kc, c_out),
                    &mut out,
                    View::row_major(0, rows, c_out),
                    true,
                );
                Ok((vec![geom.batch, geom.len_out, c_out], out))
            }
            Op::ConvT1d { x, w, stride, pad } => {
                let (geom, c_out) = self.convt_geom(idx, *x, *w, *stride, *pad)?;
                // Transposed conv is the adjoint of a conv whose input is
                // this op's output; geom describes that conv.
                let rows = geom.batch * geom.len_out;
                let (c_in, kernel) = (self.node(*x).shape[2], geom.kernel);
                let mut cols = vec![T::zero(); rows * kernel * c_out];
                gemm_view(
                    &self.node(*x).value,
                    View::row_major(0, rows, c_in),
                    &self.node(*w).value,
                    View::row_major(0, c_in, kernel * c_out),
                    &mut cols,
                    View::row_major(0, rows, kernel * c_out),
                    true,
                );
                let mut out = vec![T::zero(); geom.batch * geom.len_in * c_out];
                col2im(&cols, &geom, &mut out);
                Ok((vec![geom.batch, geom.len_in, c_out], out))
            }
            Op::Concat(xs, axis) => {
                let first = xs
                    .first()
                    .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
                self.check_axis("concat", idx, *first, *axis)?;
                let base = &self.node(*first).shape;
                let mut total = 0;
                for &x in xs {
                    let s = &self.node(x).shape;
                    let compatible = s.len() == base.len()
                        && s.iter()
                            .zip(base)
                            .enumerate()
                            .all(|(d, (p, q))| d == *axis || p == q);
                    if !compatible {
                        return Err(self.shape_err("concat", idx, *first, x));
                    }
                    total += s[*axis];
                }
                let (outer, _, inner) = split_axis(base, *axis);
                let mut out = Vec::with_capacity(outer * total * inner);
                for o in 0..outer {
                    for &x in xs {
                        let n = self.node(x);
                        let chunk = n.shape[*axis] * inner;
                        out.extend_from_slice(&n.value[o * chunk..(o + 1) * chunk]);
                    }
                }
                let mut shape = base.clone();
                shape[*axis] = total;
                Ok((shape, out))
            }
            Op::Slice { a, axis, start, len } => {
                self.check_axis("slice", idx, *a, *axis)?;
                let n = self.node(*a);
                if start + len > n.shape[*axis] {
                    return Err(Error::Shape {
                        op: "slice",
                        node: idx,
                        lhs: n.shape.clone(),
                        rhs: vec![*start, *len],
                    });
                }
                let (outer, full, inner) = split_axis(&n.shape, *axis);
                let mut out = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    out.extend_from_slice(&n.value[base..base + len * inner]);
                }
                let mut shape = n.shape.clone();
                shape[*axis] = *len;
                Ok((shape, out))
            }
            Op::Reshape(a) => {
                // Target shape is stored on the node itself.
                let shape = self
                    .nodes
                    .get(idx)
                    .map(|n| n.shape.clone())
                    .ok_or_else(|| Error::invalid("reshape replay before record"))?;
                Ok((shape, self.node(*a).value.clone()))
            }
            Op::Permute(a, perm) => {
                let n = self.node(*a);
                let mut sorted = perm.clone();
                sorted.sort_unstable();
                if sorted != (0..n.shape.len()).collect::<Vec<_>>() {
                    return Err(Error::Shape {
                        op: "permute",
                        node: idx,
                        lhs: n.shape.clone(),
                        rhs: perm.clone(),
                    });
                }
                let shape: Vec<usize> = perm.iter().map(|&p| n.shape[p]).collect();
                let src = permute_index(&n.shape, perm);
                Ok((shape, src.iter().map(|&i| n.value[i]).collect()))
            }
            Op::Gather { a, axis, index } => {
                self.check_axis("gather", idx, *a, *axis)?;
                let n = self.node(*a);
                let (outer, full, inner) = split_axis(&n.shape, *axis);
                if let Some(&bad) = index.iter().find(|&&i| i >= full) {
                    return Err(Error::Shape {
                        op: "gather",
                        node: idx,
                        lhs: n.shape.clone(),
                        rhs: vec![bad],
                    });
                }
                let mut out = Vec::with_capacity(outer * index.len() * inner);
                for o in 0..outer {
                    for &j in index {
                        let base = (o * full + j) * inner;
                        out.extend_from_slice(&n.value[base..base + inner]);
                    }
                }
                let mut shape = n.shape.clone();
                shape[*axis] = index.len();
                Ok((shape, out))
            }
            Op::Rope(a, base) => {
                let n = self.node(*a);
                let r = n.shape.len();
                if r < 2 || n.shape[r - 1] % 2 != 0 {
                    return Err(Error::Shape {
                        op: "rope",
                        node: idx,
                        lhs: n.shape.clone(),
                        rhs: vec![2],
                    });
                }
                let out = rope_apply(&n.value, &n.shape, *base, false);
                Ok((n.shape.clone(), out))
            }
            Op::StftMag { x, n_fft, hop } => {
                let n = self.node(*x);
                if n.shape.len() != 2 || n.shape[1] < *n_fft || *hop == 0 {
                    return Err(Error::Shape {
                        op: "stft_mag",
                        node: idx,
                        lhs: n.shape.clone(),
                        rhs: vec![*n_fft, *hop],
                    });
                }
                let stft = Stft::<T>::new(*n_fft, *hop);
                let (rows, len) = (n.shape[0], n.shape[1]);
                let out = stft.forward(&n.value, rows, len);
                Ok((vec![rows, stft.frames(len), stft.bins()], out))
            }
        }
    }

    fn mm_geom(&self, idx: usize, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<MmGeom> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        let err = || self.shape_err("matmul", idx, a, b);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (a_rows, a_cols) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (b_rows, b_cols) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (a_cols, a_rows) } else { (a_rows, a_cols) };
        let (k2, n) = if tb { (b_cols, b_rows) } else { (b_rows, b_cols) };
        if k != k2 {
            return Err(err());
        }
        let batch = numel(&sa[..sa.len() - 2]);
        let shared_b = sb.len() == 2;
        if !shared_b && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(err());
        }
        Ok(MmGeom {
            batch,
            shared_b,
            m,
            k,
            n,
            a_rows,
            a_cols,
            b_rows,
            b_cols,
        })
    }

    fn conv_geom(
        &self,
        idx: usize,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        dil: usize,
    ) -> Result<(ConvGeom, usize)> {
        let (sx, sw) = (&self.node(x).shape, &self.node(w).shape);
        let err = || self.shape_err("conv1d", idx, x, w);
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] || sw[0] == 0 || dil == 0 {
            return Err(err());
        }
        let len_out = conv_out_len(sx[1], sw[0], stride, pad, dil).ok_or_else(err)?;
        Ok((
            ConvGeom {
                batch: sx[0],
                len_in: sx[1],
                c_in: sx[2],
                len_out,
                kernel: sw[0],
                stride,
                pad,
                dil,
            },
            sw[2],
        ))
    }

    /// Geometry of the forward conv that a transposed conv inverts: its
    /// `len_in`/`c_in` describe the transposed conv's output.
    fn convt_geom(
        &self,
        idx: usize,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<(ConvGeom, usize)> {
        let (sx, sw) = (&self.node(x).shape, &self.node(w).shape);
        let err = || self.shape_err("conv_transpose1d", idx, x, w);
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[0] || stride == 0 || sx[1] == 0 {
            return Err(err());
        }
        let kernel = sw[1];
        let full = (sx[1] - 1) * stride + kernel;
        if full < 2 * pad + 1 {
            return Err(err());
        }
        let len = full - 2 * pad;
        Ok((
            ConvGeom {
                batch: sx[0],
                len_in: len,
                c_in: sw[2],
                len_out: sx[1],
                kernel,
                stride,
                pad,
                dil: 1,
            },
            sw[2],
        ))
    }

    // --------------------------------------------------------------- builders

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Binary(a, b, Binary::Add))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Binary(a, b, Binary::Sub))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Binary(a, b, Binary::Mul))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Binary(a, b, Binary::Div))
    }

    fn unary(&mut self, a: NodeId, u: Unary) -> Result<NodeId> {
        self.push(Op::Unary(a, u))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Unary::Neg)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Unary::Log)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Unary::Sqrt)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Unary::Square)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Unary::Tanh)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Unary::Gelu)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Unary::Relu)
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Unary::Abs)
    }

    /// `log(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Unary::Softplus)
    }

    pub fn pow(&mut self, a: NodeId, p: f64) -> Result<NodeId> {
        self.unary(a, Unary::Pow(p))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(a, Unary::Scale(c))
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(a, Unary::Offset(c))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if lo > hi {
            return Err(Error::invalid(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary(a, Unary::Clamp(lo, hi))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Reduce {
            a,
            axis: None,
            kind: Reduce::Sum,
        })
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Reduce {
            a,
            axis: None,
            kind: Reduce::Mean,
        })
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.push(Op::Reduce {
            a,
            axis: Some(axis),
            kind: Reduce::Sum,
        })
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.push(Op::Reduce {
            a,
            axis: Some(axis),
            kind: Reduce::Mean,
        })
    }

    pub fn max_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.push(Op::Reduce {
            a,
            axis: Some(axis),
            kind: Reduce::Max,
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax(a))
    }

    /// Normalization over the last axis, without affine parameters.
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        self.push(Op::LayerNorm(a, eps))
    }

    /// `a @ b` over the last two axes. `b` is either 2-D (shared across
    /// the leading axes of `a`) or has the same leading axes as `a`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul {
            a,
            b,
            ta: false,
            tb: false,
        })
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        if ta && self.node(b).shape.len() == 2 && self.node(a).shape.len() > 2 {
            return Err(Error::invalid("transposed lhs needs a batched rhs"));
        }
        self.push(Op::MatMul { a, b, ta, tb })
    }

    /// Channels-last conv: `x [B, L, Cin]`, `w [K, Cin, Cout]`.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        dil: usize,
    ) -> Result<NodeId> {
        self.push(Op::Conv1d {
            x,
            w,
            stride,
            pad,
            dil,
        })
    }

    /// Channels-last transposed conv: `x [B, L, Cin]`, `w [Cin, K, Cout]`,
    /// output length `(L - 1) * stride - 2 * pad + K`.
    pub fn conv_transpose1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        self.push(Op::ConvT1d { x, w, stride, pad })
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        self.push(Op::Concat(xs.to_vec(), axis))
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::Slice {
            a,
            axis,
            start,
            len,
        })
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let n = self.node(a);
        if numel(shape) != n.value.len() {
            return Err(Error::Shape {
                op: "reshape",
                node: self.nodes.len(),
                lhs: n.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = n.value.clone();
        let requires_grad = n.requires_grad;
        self.account(value.len());
        self.nodes.push(Node {
            op: Op::Reshape(a),
            shape: shape.to_vec(),
            value,
            requires_grad,
            grad: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        self.push(Op::Permute(a, perm.to_vec()))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let r = self.node(a).shape.len();
        if r < 2 {
            return Err(Error::invalid("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    /// Index-select along `axis`; repeated indices accumulate in backward.
    pub fn gather(&mut self, a: NodeId, axis: usize, index: &[usize]) -> Result<NodeId> {
        self.push(Op::Gather {
            a,
            axis,
            index: index.to_vec(),
        })
    }

    /// Rotary position encoding over the last axis, positions along the
    /// second-to-last axis, rotate-half pairing.
    pub fn rope(&mut self, a: NodeId, base: f64) -> Result<NodeId> {
        self.push(Op::Rope(a, base))
    }

    /// Hann-windowed STFT magnitudes: `x [B, L]` to `[B, frames, n_fft/2+1]`.
    pub fn stft_mag(&mut self, x: NodeId, n_fft: usize, hop: usize) -> Result<NodeId> {
        self.push(Op::StftMag { x, n_fft, hop })
    }

    // --------------------------------------------------------------- backward

    /// Accumulated gradient of a node, if backward has reached it.
    pub fn grad(&self, id: NodeId) -> Option<Tensor<T>> {
        let n = self.node(id);
        n.grad.as_ref().map(|g| Tensor {
            shape: n.shape.clone(),
            data: g.clone(),
        })
    }

    pub fn zero_grad(&mut self) {
        let mut freed = 0;
        for n in &mut self.nodes {
            if let Some(g) = n.grad.take() {
                freed += g.len();
            }
        }
        let b = freed * std::mem::size_of::<T>();
        self.bytes -= b;
        arena::free(b);
    }

    /// Reverse pass from a scalar node. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, out: NodeId) -> Result<()> {
        if self.stale {
            return Err(Error::Backward(
                "leaves were rebound; call evaluate() before backward()".into(),
            ));
        }
        let n_out = self.node(out).value.len();
        if n_out != 1 {
            return Err(Error::Backward(format!(
                "output node {} has shape {:?}, expected a scalar",
                out.0,
                self.node(out).shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![T::one()]);
        let elem = std::mem::size_of::<T>();
        let mut temp_bytes = elem;
        arena::alloc(elem);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                temp_bytes -= g.len() * elem;
                arena::free(g.len() * elem);
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => {
                        add_into(acc, &g);
                        temp_bytes -= g.len() * elem;
                        arena::free(g.len() * elem);
                    }
                    None => {
                        // Ownership moves from the temporaries to the graph.
                        temp_bytes -= g.len() * elem;
                        self.bytes += g.len() * elem;
                        node.grad = Some(g);
                    }
                }
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (input, contrib) in self.backprop(&op, i, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => add_into(acc, &contrib),
                    slot @ None => {
                        temp_bytes += contrib.len() * elem;
                        arena::alloc(contrib.len() * elem);
                        *slot = Some(contrib);
                    }
                }
            }
            temp_bytes -= g.len() * elem;
            arena::free(g.len() * elem);
        }
        debug_assert_eq!(temp_bytes, 0);
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.node(id).requires_grad
    }

    /// Gradient contributions of node `idx` to its inputs.
    fn backprop(&self, op: &Op, idx: usize, g: &[T]) -> Result<Vec<(NodeId, Vec<T>)>> {
        let y = &self.nodes[idx].value;
        let mut out = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Unary(a, u) => {
                let x = &self.node(*a).value;
                out.push((*a, unary_grad_map(*u, x, y, g)));
            }
            Op::Binary(a, b, kind) => {
                let (xa, xb) = (&self.node(*a).value, &self.node(*b).value);
                let period = xb.len().max(1);
                if self.wants(*a) {
                    let da = match kind {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => bcast_map(g, xb, |g, q| g * q),
                        Binary::Div => bcast_map(g, xb, |g, q| g / q),
                    };
                    out.push((*a, da));
                }
                if self.wants(*b) && period == xa.len() {
                    let db = match kind {
                        Binary::Add => g.to_vec(),
                        Binary::Sub => g.iter().map(|&g| -g).collect(),
                        Binary::Mul => g.iter().zip(xa).map(|(&g, &p)| g * p).collect(),
                        Binary::Div => g
                            .iter()
                            .zip(xa)
                            .zip(xb)
                            .map(|((&g, &p), &q)| -g * p / (q * q))
                            .collect(),
                    };
                    out.push((*b, db));
                } else if self.wants(*b) {
                    let mut acc = vec![0.0f64; period];
                    for (ca, cg) in xa.chunks(period).zip(g.chunks(period)) {
                        for (((s, &p), &q), &g) in acc.iter_mut().zip(ca).zip(xb).zip(cg) {
                            *s += match kind {
                                Binary::Add => g,
                                Binary::Sub => -g,
                                Binary::Mul => g * p,
                                Binary::Div => -g * p / (q * q),
                            }
                            .f64();
                        }
                    }
                    out.push((*b, acc.into_iter().map(T::lit).collect()));
                }
            }
            Op::Reduce { a, axis, kind } => {
                let n = self.node(*a);
                let mut dx = vec![T::zero(); n.value.len()];
                match axis {
                    None => match kind {
                        Reduce::Sum => dx.iter_mut().for_each(|d| *d = g[0]),
                        Reduce::Mean => {
                            let v = g[0] / T::lit(n.value.len() as f64);
                            dx.iter_mut().for_each(|d| *d = v);
                        }
                        Reduce::Max => {
                            if let Some(j) = argmax(n.value.iter().copied()) {
                                dx[j] = g[0];
                            }
                        }
                    },
                    Some(ax) => {
                        let (outer, len, inner) = split_axis(&n.shape, *ax);
                        for o in 0..outer {
                            for i in 0..inner {
                                let gi = g[o * inner + i];
                                let at = |j: usize| (o * len + j) * inner + i;
                                match kind {
                                    Reduce::Sum => (0..len).for_each(|j| dx[at(j)] = gi),
                                    Reduce::Mean => {
                                        let v = gi / T::lit(len as f64);
                                        (0..len).for_each(|j| dx[at(j)] = v);
                                    }
                                    Reduce::Max => {
                                        if let Some(j) = argmax((0..len).map(|j| n.value[at(j)])) {
                                            dx[at(j)] = gi;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                out.push((*a, dx));
            }
            Op::Softmax(a) => {
                let d = *self.nodes[idx].shape.last().unwrap_or(&1);
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(&p, &q)| (p * q).f64()).sum();
                    let dot = T::lit(dot);
                    for ((o, &p), &q) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = p * (q - dot);
                    }
                }
                out.push((*a, dx));
            }
            Op::LayerNorm(a, eps) => {
                let x = &self.node(*a).value;
                let d = *self.nodes[idx].shape.last().unwrap_or(&1);
                let mut dx = vec![T::zero(); x.len()];
                for (((xr, yr), gr), dr) in x
                    .chunks(d)
                    .zip(y.chunks(d))
                    .zip(g.chunks(d))
                    .zip(dx.chunks_mut(d))
                {
                    let (_, rstd) = row_stats(xr, *eps);
                    let mg: f64 = gr.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
                    let mgy: f64 =
                        gr.iter().zip(yr).map(|(&p, &q)| (p * q).f64()).sum::<f64>() / d as f64;
                    for ((o, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = T::lit(rstd * (gv.f64() - mg - yv.f64() * mgy));
                    }
                }
                out.push((*a, dx));
            }
            Op::MatMul { a, b, ta, tb } => {
                let geo = self.mm_geom(idx, *a, *b, *ta, *tb)?;
                let (av, bv) = (&self.node(*a).value, &self.node(*b).value);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); av.len()];
                    if geo.shared_b && !*ta {
                        let rows = geo.batch * geo.m;
                        gemm_view(
                            g,
                            View::row_major(0, rows, geo.n),
                            bv,
                            geo.b_view(0).maybe_t(*tb).t(),
                            &mut da,
                            View::row_major(0, rows, geo.k),
                            true,
                        );
                    } else {
                        for i in 0..geo.batch {
                            gemm_view(
                                g,
                                geo.c_view(i),
                                bv,
                                geo.b_view(i).maybe_t(*tb).t(),
                                &mut da,
                                geo.a_view(i).maybe_t(*ta),
                                true,
                            );
                        }
                    }
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); bv.len()];
                    if geo.shared_b && !*ta {
                        let rows = geo.batch * geo.m;
                        gemm_view(
                            av,
                            View::row_major(0, rows, geo.k).t(),
                            g,
                            View::row_major(0, rows, geo.n),
                            &mut db,
                            geo.b_view(0).maybe_t(*tb),
                            true,
                        );
                    } else {
                        for i in 0..geo.batch {
                            gemm_view(
                                av,
                                geo.a_view(i).maybe_t(*ta).t(),
                                g,
                                geo.c_view(i),
                                &mut db,
                                geo.b_view(i).maybe_t(*tb),
                                !(geo.shared_b && i > 0),
                            );
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Conv1d { x, w, stride, pad, dil } => {
                let (geom, c_out) = self.conv_geom(idx, *x, *w, *stride, *pad, *dil)?;
                let rows = geom.batch * geom.len_out;
                let kc = geom.kernel * geom.c_in;
                if self.wants(*w) {
                    let cols = im2col(&self.node(*x).value, &geom);
                    let mut dw = vec![T::zero(); kc * c_out];
                    gemm_view(
                        &cols,
                        View::row_major(0, rows, kc).t(),
                        g,
                        View::row_major(0, rows, c_out),
                        &mut dw,
                        View::row_major(0, kc, c_out),
                        true,
                    );
                    out.push((*w, dw));
                }
                if self.wants(*x) {
                    let mut dcols = vec![T::zero(); rows * kc];
                    gemm_view(
                        g,
                        View::row_major(0, rows, c_out),
                        &self.node(*w).value,
                        View::row_major(0, kc, c_out).t(),
                        &mut dcols,
                        View::row_major(0, rows, kc),
                        true,
                    );
                    let mut dx = vec![T::zero(); self.node(*x).value.len()];
                    col2im(&dcols, &geom, &mut dx);
                    out.push((*x, dx));
                }
            }
            Op::ConvT1d { x, w, stride, pad } => {
                let (geom, c_out) = self.convt_geom(idx, *x, *w, *stride, *pad)?;
                let rows = geom.batch * geom.len_out;
                let c_in = self.node(*x).shape[2];
                let kco = geom.kernel * c_out;
                let dcols = im2col(g, &geom);
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); c_in * kco];
                    gemm_view(
                        &self.node(*x).value,
                        View::row_major(0, rows, c_in).t(),
                        &dcols,
                        View::row_major(0, rows, kco),
                        &mut dw,
                        View::row_major(0, c_in, kco),
                        true,
                    );
                    out.push((*w, dw));
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); rows * c_in];
                    gemm_view(
                        &dcols,
                        View::row_major(0, rows, kco),
                        &self.node(*w).value,
                        View::row_major(0, c_in, kco).t(),
                        &mut dx,
                        View::row_major(0, rows, c_in),
                        true,
                    );
                    out.push((*x, dx));
                }
            }
            Op::Concat(xs, axis) => {
                let shape = &self.nodes[idx].shape;
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.node(x).shape[*axis];
                    if self.wants(x) {
                        let mut dx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dx.extend_from_slice(&g[base..base + len * inner]);
                        }
                        out.push((x, dx));
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start, len } => {
                let n = self.node(*a);
                let (outer, full, inner) = split_axis(&n.shape, *axis);
                let mut dx = vec![T::zero(); n.value.len()];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*a, dx));
            }
            Op::Reshape(a) => out.push((*a, g.to_vec())),
            Op::Permute(a, perm) => {
                let n = self.node(*a);
                let src = permute_index(&n.shape, perm);
                let mut dx = vec![T::zero(); n.value.len()];
                for (&s, &gv) in src.iter().zip(g) {
                    dx[s] = gv;
                }
                out.push((*a, dx));
            }
            Op::Gather { a, axis, index } => {
                let n = self.node(*a);
                let (outer, full, inner) = split_axis(&n.shape, *axis);
                let mut dx = vec![T::zero(); n.value.len()];
                for o in 0..outer {
                    for (k, &j) in index.iter().enumerate() {
                        let src = (o * index.len() + k) * inner;
                        let dst = (o * full + j) * inner;
                        add_into(&mut dx[dst..dst + inner], &g[src..src + inner]);
                    }
                }
                out.push((*a, dx));
            }
            Op::Rope(a, base) => {
                let shape = &self.nodes[idx].shape;
                out.push((*a, rope_apply(g, shape, *base, true)));
            }
            Op::StftMag { x, n_fft, hop } => {
                let n = self.node(*x);
                let stft = Stft::<T>::new(*n_fft, *hop);
                let mut dx = vec![T::zero(); n.value.len()];
                stft.backward(&n.value, y, g, n.shape[0], n.shape[1], &mut dx);
                out.push((*x, dx));
            }
        }
        Ok(out)
    }
}

/// `a op b` with `b` repeating along the leading axes of `a`.
#[inline]
fn bcast_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    if a.len() == b.len() {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let mut out = Vec::with_capacity(a.len());
    for chunk in a.chunks(b.len().max(1)) {
        out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
    }
    out
}

fn unary_map<T: Real>(u: Unary, x: &[T]) -> Vec<T> {
    let m = |f: &dyn Fn(T) -> T| x.iter().map(|&v| f(v)).collect();
    match u {
        Unary::Gelu => x.iter().map(|&v| kernels::gelu(v)).collect(),
        Unary::Tanh => x.iter().map(|&v| kernels::tanh(v)).collect(),
        Unary::Scale(c) => {
            let c = T::lit(c);
            x.iter().map(|&v| v * c).collect()
        }
        Unary::Offset(c) => {
            let c = T::lit(c);
            x.iter().map(|&v| v + c).collect()
        }
        Unary::Square => x.iter().map(|&v| v * v).collect(),
        Unary::Exp => x.iter().map(|&v| v.exp()).collect(),
        _ => m(&|v| unary(u, v)),
    }
}

fn unary_grad_map<T: Real>(u: Unary, x: &[T], y: &[T], g: &[T]) -> Vec<T> {
    match u {
        Unary::Gelu => x.iter().zip(g).map(|(&x, &g)| g * kernels::gelu_grad(x)).collect(),
        Unary::Scale(c) => {
            let c = T::lit(c);
            g.iter().map(|&g| g * c).collect()
        }
        Unary::Offset(_) => g.to_vec(),
        Unary::Tanh => y.iter().zip(g).map(|(&y, &g)| g * (T::one() - y * y)).collect(),
        _ => x
            .iter()
            .zip(y)
            .zip(g)
            .map(|((&x, &y), &g)| g * unary_grad(u, x, y))
            .collect(),
    }
}

fn unary<T: Real>(u: Unary, x: T) -> T {
    match u {
        Unary::Neg => -x,
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Sqrt => x.sqrt(),
        Unary::Square => x * x,
        Unary::Sigmoid => kernels::sigmoid(x),
        Unary::Tanh => kernels::tanh(x),
        Unary::Gelu => kernels::gelu(x),
        Unary::Relu => x.max(T::zero()),
        Unary::Abs => x.abs(),
        Unary::Softplus => kernels::softplus(x),
        Unary::Pow(p) => x.powf(T::lit(p)),
        Unary::Scale(c) => x * T::lit(c),
        Unary::Offset(c) => x + T::lit(c),
        Unary::Clamp(lo, hi) => x.max(T::lit(lo)).min(T::lit(hi)),
    }
}

/// Local derivative given input `x` and output `y`.
fn unary_grad<T: Real>(u: Unary, x: T, y: T) -> T {
    let one = T::one();
    let zero = T::zero();
    match u {
        Unary::Neg => -one,
        Unary::Exp => y,
        Unary::Log => one / x,
        Unary::Sqrt => T::lit(0.5) / y,
        Unary::Square => T::lit(2.0) * x,
        Unary::Sigmoid => y * (one - y),
        Unary::Tanh => one - y * y,
        Unary::Gelu => kernels::gelu_grad(x),
        Unary::Relu => {
            if x > zero {
                one
            } else {
                zero
            }
        }
        Unary::Abs => {
            if x > zero {
                one
            } else if x < zero {
                -one
            } else {
                zero
            }
        }
        Unary::Softplus => kernels::sigmoid(x),
        Unary::Pow(p) => T::lit(p) * x.powf(T::lit(p - 1.0)),
        Unary::Scale(c) => T::lit(c),
        Unary::Offset(_) => one,
        Unary::Clamp(lo, hi) => {
            if x >= T::lit(lo) && x <= T::lit(hi) {
                one
            } else {
                zero
            }
        }
    }
}

fn reduce_slice<T: Real>(kind: Reduce, it: impl Iterator<Item = T>, len: usize) -> T {
    match kind {
        Reduce::Sum => T::lit(it.map(|v| v.f64()).sum()),
        Reduce::Mean => T::lit(it.map(|v| v.f64()).sum::<f64>() / len.max(1) as f64),
        Reduce::Max => it.fold(T::neg_infinity(), T::max),
    }
}

fn argmax<T: Real>(it: impl Iterator<Item = T>) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, v) in it.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

fn row_stats<T: Real>(row: &[T], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().map(|v| v.f64()).sum::<f64>() / d;
    let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

/// For each output element of a permutation, the flat input index it reads.
fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = numel(shape);
    let mut idx = Vec::with_capacity(total);
    let r = out_shape.len();
    if r == 0 {
        return vec![0];
    }
    let inner = out_shape[r - 1];
    let inner_stride = src_strides[r - 1];
    let mut counter = vec![0usize; r - 1];
    let outer = total / inner.max(1);
    for _ in 0..outer {
        let base: usize = counter
            .iter()
            .zip(&src_strides[..r - 1])
            .map(|(c, s)| c * s)
            .sum();
        idx.extend((0..inner).map(|j| base + j * inner_stride));
        for d in (0..r - 1).rev() {
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    idx
}

/// Applies the rotation (or its transpose, for backward).
fn rope_apply<T: Real>(x: &[T], shape: &[usize], base: f64, transpose: bool) -> Vec<T> {
    let r = shape.len();
    let (n, d) = (shape[r - 2], shape[r - 1]);
    let half = d / 2;
    let (cos, sin) = kernels::rope_table(n, d, base);
    let sign = if transpose { -1.0 } else { 1.0 };
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(n * d).zip(out.chunks_mut(n * d)) {
        for p in 0..n {
            let row = &src[p * d..(p + 1) * d];
            let o = &mut dst[p * d..(p + 1) * d];
            for i in 0..half {
                let c = T::lit(cos[p * half + i]);
                let s = T::lit(sign * sin[p * half + i]);
                let (a, b) = (row[i], row[i + half]);
                o[i] = a * c - b * s;
                o[i + half] = a * s + b * c;
            }
        }
    }
    out
}
