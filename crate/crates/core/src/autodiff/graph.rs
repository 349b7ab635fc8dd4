use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use super::array::axis_split;
use super::{DenseArray, ParamStore};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation defined outside this module, e.g. sparse convolution.
///
/// `backward` returns one gradient per input, in input order, with the
/// input's element count; entries for inputs where `needs[i]` is false may be
/// `None`.
pub trait CustomOp: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&DenseArray]) -> Result<DenseArray>;
    fn backward(
        &self,
        inputs: &[&DenseArray],
        output: &DenseArray,
        grad_out: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

#[derive(Debug)]
enum Op {
    Constant,
    Variable,
    Param(String),
    Affine { x: NodeId, w: NodeId, b: Option<NodeId> },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax { x: NodeId, axis: usize },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, axis: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Reshape(NodeId),
    Sum(NodeId),
    SumAxis { x: NodeId, axis: usize },
    Concat(Vec<NodeId>),
    GatherRows { x: NodeId, rows: Arc<[usize]> },
    ScatterRows { x: NodeId, rows: Arc<[usize]> },
    Outer(NodeId, NodeId),
    MatVec(NodeId, NodeId),
    SmoothL1 { pred: NodeId, target: Vec<f64>, delta: f64 },
    BceWithLogits { logits: NodeId, labels: Vec<f64> },
    Custom { op: Arc<dyn CustomOp>, inputs: Vec<NodeId> },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Variable => "variable",
            Op::Param(_) => "param",
            Op::Affine { .. } => "linear",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Concat(_) => "concat",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::Outer(..) => "outer",
            Op::MatVec(..) => "matvec",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Constant | Op::Variable | Op::Param(_) => vec![],
            Op::Affine { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Add(a, b) | Op::Mul(a, b) | Op::Outer(a, b) | Op::MatVec(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Relu(x) | Op::Sigmoid(x) | Op::Reshape(x) | Op::Sum(x) => vec![*x],
            Op::Softmax { x, .. } | Op::SumAxis { x, .. } => vec![*x],
            Op::GatherRows { x, .. } | Op::ScatterRows { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Concat(parts) => parts.clone(),
            Op::SmoothL1 { pred, .. } => vec![*pred],
            Op::BceWithLogits { logits, .. } => vec![*logits],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: DenseArray,
    needs_grad: bool,
}

/// Append-only record of array operations, replayed in reverse by
/// [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
}

/// Gradients of tracked [`Graph::variable`] leaves.
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: HashMap<NodeId, DenseArray>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&DenseArray> {
        self.by_node.get(&id)
    }
}

fn dims_str(d: &[usize]) -> String {
    format!("{d:?}")
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

    pub fn value(&self, id: NodeId) -> &DenseArray {
        &self.nodes[id.0].value
    }

    pub fn dims(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.dims()
    }

    pub fn op_tag(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.tag()
    }

    pub fn input_ids(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    /// Names of all parameters referenced so far.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    fn push(&mut self, op: Op, value: DenseArray) -> NodeId {
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Variable | Op::Param(_) => true,
            other => other.inputs().iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> &DenseArray {
        &self.nodes[id.0].value
    }

    pub fn constant(&mut self, value: DenseArray) -> NodeId {
        self.push(Op::Constant, value)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, value: DenseArray) -> NodeId {
        self.push(Op::Variable, value)
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let value = store.get(name)?.clone();
        let id = self.push(Op::Param(name.to_string()), value);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// `y = x W + b` over the trailing axis of `x`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (self.val(x), self.val(w));
        if wv.rank() != 2 || xv.last_dim() != wv.dims()[0] {
            return Err(Error::shape(
                "linear",
                format!("input dim {}", wv.dims()[0]),
                format!("input dim {} (x dims {:?}, weight dims {:?})", xv.last_dim(), xv.dims(), wv.dims()),
            ));
        }
        let (k, n) = (wv.dims()[0], wv.dims()[1]);
        if let Some(b) = b {
            if self.val(b).dims() != [n] {
                return Err(Error::shape("linear bias", dims_str(&[n]), dims_str(self.val(b).dims())));
            }
        }
        let m = xv.rows();
        let mut out = matmul(xv.data(), wv.data(), m, k, n);
        if let Some(b) = b {
            let bv = self.val(b).data();
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
            }
        }
        let mut dims = xv.dims().to_vec();
        *dims.last_mut().unwrap() = n;
        Ok(self.push(Op::Affine { x, w, b }, DenseArray::from_raw(dims, out)))
    }

    /// Affine map using parameters `{prefix}.w` and `{prefix}.b`.
    pub fn linear(&mut self, store: &ParamStore, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.param(store, &format!("{prefix}.w"))?;
        let b = self.param(store, &format!("{prefix}.b"))?;
        self.affine(x, w, Some(b))
    }

    fn same_dims(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.val(a).dims() != self.val(b).dims() {
            return Err(Error::shape(op, dims_str(self.val(a).dims()), dims_str(self.val(b).dims())));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_dims("add", a, b)?;
        let data = self.val(a).data().iter().zip(self.val(b).data()).map(|(x, y)| x + y).collect();
        let dims = self.val(a).dims().to_vec();
        Ok(self.push(Op::Add(a, b), DenseArray::from_raw(dims, data)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_dims("mul", a, b)?;
        let data = self.val(a).data().iter().zip(self.val(b).data()).map(|(x, y)| x * y).collect();
        let dims = self.val(a).dims().to_vec();
        Ok(self.push(Op::Mul(a, b), DenseArray::from_raw(dims, data)))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let v = self.val(x);
        let data = v.data().iter().map(|x| x * factor).collect();
        let dims = v.dims().to_vec();
        self.push(Op::Scale(x, factor), DenseArray::from_raw(dims, data))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.val(x);
        let data = v.data().iter().map(|x| x.max(0.0)).collect();
        let dims = v.dims().to_vec();
        self.push(Op::Relu(x), DenseArray::from_raw(dims, data))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.val(x);
        let data = v.data().iter().map(|&x| sigmoid(x)).collect();
        let dims = v.dims().to_vec();
        self.push(Op::Sigmoid(x), DenseArray::from_raw(dims, data))
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = self.val(x);
        if axis >= v.rank() {
            return Err(Error::shape("softmax", format!("axis < {}", v.rank()), axis));
        }
        let (outer, len, inner) = axis_split(v.dims(), axis);
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| src[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for a in 0..len {
                    let e = (src[at(a)] - max).exp();
                    out[at(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    out[at(a)] /= total;
                }
            }
        }
        let dims = v.dims().to_vec();
        Ok(self.push(Op::Softmax { x, axis }, DenseArray::from_raw(dims, out)))
    }

    /// Normalizes each slice along `axis` to zero mean and unit variance, then
    /// applies per-position `gain` and `bias` (both of length `dims[axis]`).
    pub fn layer_norm_with(&mut self, x: NodeId, gain: NodeId, bias: NodeId, axis: usize) -> Result<NodeId> {
        let v = self.val(x);
        if axis >= v.rank() {
            return Err(Error::shape("layer_norm", format!("axis < {}", v.rank()), axis));
        }
        let (outer, len, inner) = axis_split(v.dims(), axis);
        if self.val(gain).dims() != [len] || self.val(bias).dims() != [len] {
            return Err(Error::shape("layer_norm affine", dims_str(&[len]), dims_str(self.val(gain).dims())));
        }
        let (g, b) = (self.val(gain).data(), self.val(bias).data());
        let src = v.data();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mean = (0..len).map(|a| src[at(a)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|a| (src[at(a)] - mean).powi(2)).sum::<f64>() / len as f64;
                let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std.push(is);
                for a in 0..len {
                    let h = (src[at(a)] - mean) * is;
                    xhat[at(a)] = h;
                    out[at(a)] = h * g[a] + b[a];
                }
            }
        }
        let dims = v.dims().to_vec();
        Ok(self.push(Op::LayerNorm { x, gain, bias, axis, xhat, inv_std }, DenseArray::from_raw(dims, out)))
    }

    /// Layer normalization with parameters `{prefix}.gain` and `{prefix}.bias`.
    pub fn layer_norm(&mut self, store: &ParamStore, x: NodeId, axis: usize, prefix: &str) -> Result<NodeId> {
        let g = self.param(store, &format!("{prefix}.gain"))?;
        let b = self.param(store, &format!("{prefix}.bias"))?;
        self.layer_norm_with(x, g, b, axis)
    }

    pub fn reshape(&mut self, x: NodeId, dims: Vec<usize>) -> Result<NodeId> {
        let value = self.val(x).clone().reshape(dims)?;
        Ok(self.push(Op::Reshape(x), value))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = self.val(x).data().iter().sum();
        self.push(Op::Sum(x), DenseArray::scalar(total))
    }

    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = self.val(x);
        if axis >= v.rank() {
            return Err(Error::shape("sum_axis", format!("axis < {}", v.rank()), axis));
        }
        let (outer, len, inner) = axis_split(v.dims(), axis);
        let src = v.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut dims = v.dims().to_vec();
        dims.remove(axis);
        if dims.is_empty() {
            dims.push(1);
        }
        Ok(self.push(Op::SumAxis { x, axis }, DenseArray::from_raw(dims, out)))
    }

    /// Concatenates along the trailing axis; leading dims must agree.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat", "at least one part", 0))?;
        let lead = self.val(first).dims()[..self.val(first).rank() - 1].to_vec();
        for &p in parts {
            let d = self.val(p).dims();
            if d[..d.len() - 1] != lead[..] {
                return Err(Error::shape("concat", dims_str(&lead), dims_str(d)));
            }
        }
        let rows = self.val(first).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.val(p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.val(p).row(r));
            }
        }
        let mut dims = lead;
        dims.push(total);
        Ok(self.push(Op::Concat(parts.to_vec()), DenseArray::from_raw(dims, out)))
    }

    /// `out[r] = x[rows[r]]` on the `[rows, last_dim]` view.
    pub fn gather_rows(&mut self, x: NodeId, rows: Arc<[usize]>) -> Result<NodeId> {
        let v = self.val(x);
        let (n, c) = (v.rows(), v.last_dim());
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape("gather_rows", format!("row < {n}"), bad));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows.iter() {
            out.extend_from_slice(v.row(r));
        }
        Ok(self.push(Op::GatherRows { x, rows: rows.clone() }, DenseArray::from_raw(vec![rows.len(), c], out)))
    }

    /// Places row `r` of `x` at row `rows[r]` of an `[n_out, c]` zero matrix.
    pub fn scatter_rows(&mut self, x: NodeId, rows: Arc<[usize]>, n_out: usize) -> Result<NodeId> {
        let v = self.val(x);
        let c = v.last_dim();
        if rows.len() != v.rows() {
            return Err(Error::shape("scatter_rows", format!("{} row targets", v.rows()), rows.len()));
        }
        let mut seen = vec![false; n_out];
        for &r in rows.iter() {
            if r >= n_out || std::mem::replace(&mut seen[r], true) {
                return Err(Error::shape("scatter_rows", format!("unique rows < {n_out}"), r));
            }
        }
        let mut out = vec![0.0; n_out * c];
        for (src, &dst) in rows.iter().enumerate() {
            out[dst * c..(dst + 1) * c].copy_from_slice(v.row(src));
        }
        Ok(self.push(Op::ScatterRows { x, rows }, DenseArray::from_raw(vec![n_out, c], out)))
    }

    /// Batched outer product: `[n, p] x [n, q] -> [n, p, q]`.
    pub fn outer(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.rank() != 2 || bv.rank() != 2 || av.dims()[0] != bv.dims()[0] {
            return Err(Error::shape("outer", dims_str(av.dims()), dims_str(bv.dims())));
        }
        let (n, p, q) = (av.dims()[0], av.dims()[1], bv.dims()[1]);
        let mut out = Vec::with_capacity(n * p * q);
        for r in 0..n {
            for &x in av.row(r) {
                out.extend(bv.row(r).iter().map(|y| x * y));
            }
        }
        Ok(self.push(Op::Outer(a, b), DenseArray::from_raw(vec![n, p, q], out)))
    }

    /// Batched matrix-vector product: `[n, p, q] x [n, q] -> [n, p]`.
    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (mv, vv) = (self.val(m), self.val(v));
        if mv.rank() != 3 || vv.rank() != 2 || mv.dims()[0] != vv.dims()[0] || mv.dims()[2] != vv.dims()[1] {
            return Err(Error::shape("matvec", dims_str(mv.dims()), dims_str(vv.dims())));
        }
        let (n, p, q) = (mv.dims()[0], mv.dims()[1], mv.dims()[2]);
        let (md, vd) = (mv.data(), vv.data());
        let mut out = vec![0.0; n * p];
        for r in 0..n {
            let vrow = &vd[r * q..(r + 1) * q];
            for i in 0..p {
                let mrow = &md[(r * p + i) * q..(r * p + i + 1) * q];
                out[r * p + i] = mrow.iter().zip(vrow).map(|(a, b)| a * b).sum();
            }
        }
        Ok(self.push(Op::MatVec(m, v), DenseArray::from_raw(vec![n, p], out)))
    }

    /// Mean smooth-L1 between `pred` and a constant `target`:
    /// `0.5 x^2 / delta` for `|x| < delta`, else `|x| - 0.5 delta`.
    /// An empty input yields 0.
    pub fn smooth_l1(&mut self, pred: NodeId, target: &DenseArray, delta: f64) -> Result<NodeId> {
        if !(delta > 0.0) {
            return Err(Error::Invalid(format!("smooth_l1 delta must be positive, got {delta}")));
        }
        let pv = self.val(pred);
        if pv.dims() != target.dims() {
            return Err(Error::shape("smooth_l1", dims_str(pv.dims()), dims_str(target.dims())));
        }
        let n = pv.len();
        let total: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| smooth_l1_value(p - t, delta))
            .sum();
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        Ok(self.push(
            Op::SmoothL1 { pred, target: target.data().to_vec(), delta },
            DenseArray::scalar(loss),
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `labels`.
    pub fn bce_with_logits(&mut self, logits: NodeId, labels: &[f64]) -> Result<NodeId> {
        let lv = self.val(logits);
        if lv.len() != labels.len() {
            return Err(Error::shape("bce_with_logits", format!("{} labels", lv.len()), labels.len()));
        }
        let n = labels.len();
        let total: f64 = lv
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        Ok(self.push(
            Op::BceWithLogits { logits, labels: labels.to_vec() },
            DenseArray::scalar(loss),
        ))
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[NodeId]) -> Result<NodeId> {
        let value = {
            let vals: Vec<&DenseArray> = inputs.iter().map(|&i| self.val(i)).collect();
            op.forward(&vals)?
        };
        Ok(self.push(Op::Custom { op, inputs: inputs.to_vec() }, value))
    }

    /// Reverse-mode accumulation from a scalar `loss`. Parameter gradients are
    /// added into `store` (parameters this graph never touched receive zero
    /// gradients); gradients of [`Graph::variable`] leaves are returned.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<Gradients> {
        let lv = self.val(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.dims().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut result = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let contributions = self.node_backward(node, &g);
            for (input, contrib) in contributions {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            match &node.op {
                Op::Param(name) => store.accumulate_grad(name, &g)?,
                Op::Variable => {
                    result
                        .by_node
                        .insert(NodeId(idx), DenseArray::from_raw(node.value.dims().to_vec(), g));
                }
                _ => {}
            }
        }
        store.fill_missing_grads();
        Ok(result)
    }

    fn node_backward(&self, node: &Node, g: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
        let needs = |id: NodeId| self.nodes[id.0].needs_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Constant | Op::Variable | Op::Param(_) => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let (k, n) = (wv.dims()[0], wv.dims()[1]);
                let m = xv.rows();
                if needs(*x) {
                    out.push((*x, matmul_bt(g, wv.data(), m, n, k)));
                }
                if needs(*w) {
                    out.push((*w, matmul_at(xv.data(), g, m, k, n)));
                }
                if let Some(b) = b {
                    if needs(*b) {
                        let mut db = vec![0.0; n];
                        for row in g.chunks(n) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                        out.push((*b, db));
                    }
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                if needs(*a) {
                    out.push((*a, g.iter().zip(bv).map(|(g, b)| g * b).collect()));
                }
                if needs(*b) {
                    out.push((*b, g.iter().zip(av).map(|(g, a)| g * a).collect()));
                }
            }
            Op::Scale(x, f) => out.push((*x, g.iter().map(|v| v * f).collect())),
            Op::Relu(x) => {
                let xv = self.val(*x).data();
                out.push((*x, g.iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect()));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                out.push((*x, g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect()));
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.dims(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                        for a in 0..len {
                            dx[at(a)] = y[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::LayerNorm { x, gain, bias, axis, xhat, inv_std } => {
                let (outer, len, inner) = axis_split(node.value.dims(), *axis);
                let gv = self.val(*gain).data();
                let mut dx = vec![0.0; xhat.len()];
                let mut dgain = vec![0.0; len];
                let mut dbias = vec![0.0; len];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for a in 0..len {
                            let dh = g[at(a)] * gv[a];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[at(a)];
                            dgain[a] += g[at(a)] * xhat[at(a)];
                            dbias[a] += g[at(a)];
                        }
                        mean_dh /= len as f64;
                        mean_dh_h /= len as f64;
                        let is = inv_std[o * inner + i];
                        for a in 0..len {
                            let dh = g[at(a)] * gv[a];
                            dx[at(a)] = is * (dh - mean_dh - xhat[at(a)] * mean_dh_h);
                        }
                    }
                }
                if needs(*x) {
                    out.push((*x, dx));
                }
                out.push((*gain, dgain));
                out.push((*bias, dbias));
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Sum(x) => out.push((*x, vec![g[0]; self.val(*x).len()])),
            Op::SumAxis { x, axis } => {
                let xv = self.val(*x);
                let (outer, len, inner) = axis_split(xv.dims(), *axis);
                let mut dx = vec![0.0; xv.len()];
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        dx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                out.push((*x, dx));
            }
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.val(p).last_dim();
                    if needs(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        out.push((p, dp));
                    }
                    offset += w;
                }
            }
            Op::GatherRows { x, rows } => {
                let xv = self.val(*x);
                let c = xv.last_dim();
                let mut dx = vec![0.0; xv.len()];
                for (dst, &src) in rows.iter().enumerate() {
                    for j in 0..c {
                        dx[src * c + j] += g[dst * c + j];
                    }
                }
                out.push((*x, dx));
            }
            Op::ScatterRows { x, rows } => {
                let c = node.value.last_dim();
                let mut dx = Vec::with_capacity(rows.len() * c);
                for &dst in rows.iter() {
                    dx.extend_from_slice(&g[dst * c..(dst + 1) * c]);
                }
                out.push((*x, dx));
            }
            Op::Outer(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (n, p, q) = (av.dims()[0], av.dims()[1], bv.dims()[1]);
                let mut da = vec![0.0; n * p];
                let mut db = vec![0.0; n * q];
                for r in 0..n {
                    let (arow, brow) = (av.row(r), bv.row(r));
                    for i in 0..p {
                        let grow = &g[(r * p + i) * q..(r * p + i + 1) * q];
                        da[r * p + i] = grow.iter().zip(brow).map(|(g, b)| g * b).sum();
                        for j in 0..q {
                            db[r * q + j] += grow[j] * arow[i];
                        }
                    }
                }
                if needs(*a) {
                    out.push((*a, da));
                }
                if needs(*b) {
                    out.push((*b, db));
                }
            }
            Op::MatVec(m, v) => {
                let (mv, vv) = (self.val(*m), self.val(*v));
                let (n, p, q) = (mv.dims()[0], mv.dims()[1], mv.dims()[2]);
                let (md, vd) = (mv.data(), vv.data());
                let mut dm = vec![0.0; n * p * q];
                let mut dv = vec![0.0; n * q];
                for r in 0..n {
                    for i in 0..p {
                        let gi = g[r * p + i];
                        let base = (r * p + i) * q;
                        for j in 0..q {
                            dm[base + j] = gi * vd[r * q + j];
                            dv[r * q + j] += gi * md[base + j];
                        }
                    }
                }
                if needs(*m) {
                    out.push((*m, dm));
                }
                if needs(*v) {
                    out.push((*v, dv));
                }
            }
            Op::SmoothL1 { pred, target, delta } => {
                let pv = self.val(*pred).data();
                let n = pv.len().max(1) as f64;
                let dx = pv
                    .iter()
                    .zip(target)
                    .map(|(p, t)| {
                        let x = p - t;
                        let d = if x.abs() < *delta { x / delta } else { x.signum() };
                        g[0] * d / n
                    })
                    .collect();
                out.push((*pred, dx));
            }
            Op::BceWithLogits { logits, labels } => {
                let lv = self.val(*logits).data();
                let n = lv.len().max(1) as f64;
                let dx = lv.iter().zip(labels).map(|(&z, y)| g[0] * (sigmoid(z) - y) / n).collect();
                out.push((*logits, dx));
            }
            Op::Custom { op, inputs } => {
                let vals: Vec<&DenseArray> = inputs.iter().map(|&i| self.val(i)).collect();
                let need: Vec<bool> = inputs.iter().map(|&i| needs(i)).collect();
                for (i, grad) in op.backward(&vals, &node.value, g, &need).into_iter().enumerate() {
                    if let Some(grad) = grad {
                        out.push((inputs[i], grad));
                    }
                }
            }
        }
        out
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn smooth_l1_value(x: f64, delta: f64) -> f64 {
    if x.abs() < delta {
        0.5 * x * x / delta
    } else {
        x.abs() - 0.5 * delta
    }
}

/// `a[m,k] * b[k,n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m,n] * b[k,n]^T`.
pub(crate) fn matmul_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[m,k]^T * b[m,n]`.
pub(crate) fn matmul_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
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
    out
}
