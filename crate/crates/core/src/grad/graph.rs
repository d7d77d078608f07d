//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every op as it executes. Node ids are assigned in
//! creation order, which is already a topological order, so `backward`
//! is a single sweep from the loss node down to the leaves.
//!
//! Every op also charges a cost to the current tag (see
//! [`Graph::scoped`]), which is how the profiler obtains instrumented
//! multiply-add counts without a second code path.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use super::params::ParamStore;
use super::tensor::{inverse_axes, permute_data, strides, Tensor};
use crate::error::{invalid, shape_err, Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Boolean query-by-key admissibility matrix for [`Graph::masked_softmax`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl BoolMask {
    pub fn new(rows: usize, cols: usize, fill: bool) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![fill; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.allowed[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.allowed[row * self.cols..(row + 1) * self.cols]
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }
}

/// Work charged by recorded ops, split by category.
///
/// `matmul` counts multiply-adds of matrix products. `elementwise`
/// counts one unit per output element of arithmetic ops, `transcendental`
/// one per evaluated exp/cos/sin/sqrt/log/gelu/softplus, and `reduction`
/// one per input element folded by a sum or mean. Data movement
/// (reshape, permute, slice, concat, gather, broadcast) is free.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCost {
    pub matmul: u64,
    pub elementwise: u64,
    pub transcendental: u64,
    pub reduction: u64,
}

impl OpCost {
    pub fn total(&self) -> u64 {
        self.matmul + self.elementwise + self.transcendental + self.reduction
    }

    fn add(&mut self, other: &OpCost) {
        self.matmul += other.matmul;
        self.elementwise += other.elementwise;
        self.transcendental += other.transcendental;
        self.reduction += other.reduction;
    }
}

#[derive(Clone, Copy)]
enum Unary {
    Square,
    Sqrt,
    Exp,
    Ln,
    Cos,
    Sin,
    Gelu,
    Softplus,
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, batched: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Gather { a: usize, index: Rc<[Option<usize>]> },
    Sum { a: usize, axis: Option<usize> },
    Mean { a: usize, axis: Option<usize> },
    Unary(usize, Unary),
    LayerNorm { x: usize, gamma: usize, beta: usize, rstd: Vec<f64> },
    MaskedSoftmax { a: usize },
    Broadcast(usize),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Slice { a, .. }
            | Op::Gather { a, .. }
            | Op::Sum { a, .. }
            | Op::Mean { a, .. }
            | Op::Unary(a, _)
            | Op::MaskedSoftmax { a }
            | Op::Broadcast(a) => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<String>,
}

/// One computation graph; rebuilt every training step.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
    tag: String,
    costs: BTreeMap<String, OpCost>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
            tag: String::new(),
            costs: BTreeMap::new(),
        }
    }

    // ---- leaves ---------------------------------------------------------

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient (used by gradient checks).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a named parameter from `store`. Repeated lookups of the same
    /// name return the same node, so fan-out accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?
            .clone();
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = Some(name.to_string());
        self.params.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v));
        Ok(v)
    }

    /// Parameters bound so far, in binding order.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.param_order.iter().map(|(n, v)| (n.as_str(), *v))
    }

    // ---- inspection -------------------------------------------------------

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Detached copy of `v`: same value, no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    // ---- cost accounting --------------------------------------------------

    /// Runs `f` with `tag` appended to the current cost tag.
    pub fn scoped<R>(&mut self, tag: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        let prev_len = self.tag.len();
        if !self.tag.is_empty() {
            self.tag.push('/');
        }
        self.tag.push_str(tag);
        let out = f(self);
        self.tag.truncate(prev_len);
        out
    }

    pub fn costs(&self) -> &BTreeMap<String, OpCost> {
        &self.costs
    }

    /// Sum of costs whose tag starts with `prefix` (empty prefix = all).
    pub fn cost_under(&self, prefix: &str) -> OpCost {
        let mut total = OpCost::default();
        for (tag, c) in &self.costs {
            if tag_matches(tag, prefix) {
                total.add(c);
            }
        }
        total
    }

    pub fn total_cost(&self) -> OpCost {
        self.cost_under("")
    }

    /// Peak bytes held by forward values under a free-after-last-use policy.
    pub fn peak_live_bytes(&self) -> usize {
        let n = self.nodes.len();
        let mut last_use: Vec<usize> = (0..n).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            for inp in node.op.inputs() {
                last_use[inp] = last_use[inp].max(i);
            }
        }
        let mut frees: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, &lu) in last_use.iter().enumerate() {
            frees[lu].push(i);
        }
        let mut live = 0usize;
        let mut peak = 0usize;
        for i in 0..n {
            live += self.nodes[i].value.numel() * std::mem::size_of::<f64>();
            peak = peak.max(live);
            for &f in &frees[i] {
                live -= self.nodes[f].value.numel() * std::mem::size_of::<f64>();
            }
        }
        peak
    }

    fn charge(&mut self, cost: OpCost) {
        if cost.total() == 0 {
            return;
        }
        self.costs.entry(self.tag.clone()).or_default().add(&cost);
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(id)
    }

    fn push_op(&mut self, value: Tensor, op: Op) -> Var {
        let needs = op.inputs().iter().any(|&i| self.nodes[i].needs_grad);
        self.push(value, op, needs)
    }

    // ---- ops --------------------------------------------------------------

    /// Matrix product. `a: [..., m, k]` with `b: [k, n]` contracts the last
    /// axis of `a`; `a: [batch..., m, k]` with `b: [batch..., k, n]` is a
    /// batched product over identical leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let k = sa[sa.len() - 1];
        if sb.len() == 2 {
            if sb[0] != k {
                return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
            }
            let m: usize = sa[..sa.len() - 1].iter().product();
            let n = sb[1];
            let mut out = vec![0.0; m * n];
            gemm(
                m,
                k,
                n,
                self.value(a).data(),
                (k, 1),
                self.value(b).data(),
                (n, 1),
                &mut out,
                0.0,
            );
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            self.charge(OpCost {
                matmul: (m * k * n) as u64,
                ..OpCost::default()
            });
            let value = Tensor::new(shape, out)?;
            return Ok(self.push_op(
                value,
                Op::MatMul {
                    a: a.0,
                    b: b.0,
                    batched: false,
                },
            ));
        }
        let rank = sa.len();
        if sb.len() != rank || sa[..rank - 2] != sb[..rank - 2] || sb[rank - 2] != k {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let batch: usize = sa[..rank - 2].iter().product();
        let m = sa[rank - 2];
        let n = sb[rank - 1];
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for p in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ad[p * m * k..(p + 1) * m * k],
                    (k, 1),
                    &bd[p * k * n..(p + 1) * k * n],
                    (n, 1),
                    &mut out[p * m * n..(p + 1) * m * n],
                    0.0,
                );
            }
        }
        let mut shape = sa[..rank - 2].to_vec();
        shape.extend([m, n]);
        self.charge(OpCost {
            matmul: (batch * m * k * n) as u64,
            ..OpCost::default()
        });
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(
            value,
            Op::MatMul {
                a: a.0,
                b: b.0,
                batched: true,
            },
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn elementwise_cost(&mut self, n: usize) {
        self.charge(OpCost {
            elementwise: n as u64,
            ..OpCost::default()
        });
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.elementwise_cost(self.value(a).numel());
        Tensor::new(shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push_op(t, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push_op(t, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push_op(t, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let src = self.value(a);
        let t = Tensor::new(src.shape().to_vec(), src.data().iter().map(|x| x * s).collect())
            .expect("same shape");
        self.elementwise_cost(t.numel());
        self.push_op(t, Op::Scale(a.0, s))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push_op(t, Op::Reshape(a.0)))
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(shape_err("permute", format!("axes {axes:?} for {shape:?}")));
        }
        let data = permute_data(self.value(a).data(), &shape, axes);
        let out_shape = axes.iter().map(|&i| shape[i]).collect();
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push_op(t, Op::Permute(a.0, axes.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(shape_err("transpose", format!("{:?}", self.shape(a))));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(a, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat of zero arrays"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(shape_err("concat", format!("{base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        Ok(self.push_op(
            t,
            Op::Concat {
                inputs: parts.iter().map(|v| v.0).collect(),
                axis,
            },
        ))
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push_op(t, Op::Slice { a: a.0, axis, start }))
    }

    /// Row gather on the leading axis; `None` entries produce zero rows.
    pub fn gather_rows(&mut self, a: Var, index: Rc<[Option<usize>]>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(shape_err("gather", "scalar input"));
        }
        let rows = shape[0];
        let width: usize = shape[1..].iter().product();
        if let Some(bad) = index.iter().flatten().find(|&&r| r >= rows) {
            return Err(shape_err("gather", format!("row {bad} of {rows}")));
        }
        let src = self.value(a).data();
        let mut data = vec![0.0; index.len() * width];
        for (o, r) in index.iter().enumerate() {
            if let Some(r) = r {
                data[o * width..(o + 1) * width].copy_from_slice(&src[r * width..(r + 1) * width]);
            }
        }
        let mut out_shape = shape;
        out_shape[0] = index.len();
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push_op(t, Op::Gather { a: a.0, index }))
    }

    fn reduce(&self, a: Var, axis: Option<usize>) -> Result<(Vec<usize>, Vec<f64>)> {
        let shape = self.shape(a).to_vec();
        let src = self.value(a).data();
        match axis {
            None => Ok((Vec::new(), vec![src.iter().sum()])),
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(shape_err("sum", format!("axis {ax} of {shape:?}")));
                }
                let outer: usize = shape[..ax].iter().product();
                let n = shape[ax];
                let inner: usize = shape[ax + 1..].iter().product();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                let mut s = shape;
                s.remove(ax);
                Ok((s, out))
            }
        }
    }

    /// Sum over `axis`, or over everything when `axis` is `None`.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let (shape, data) = self.reduce(a, axis)?;
        self.charge(OpCost {
            reduction: self.value(a).numel() as u64,
            ..OpCost::default()
        });
        let t = Tensor::new(shape, data)?;
        Ok(self.push_op(t, Op::Sum { a: a.0, axis }))
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let (shape, mut data) = self.reduce(a, axis)?;
        let n = reduced_len(self.shape(a), axis) as f64;
        for v in &mut data {
            *v /= n;
        }
        self.charge(OpCost {
            reduction: self.value(a).numel() as u64,
            ..OpCost::default()
        });
        let t = Tensor::new(shape, data)?;
        Ok(self.push_op(t, Op::Mean { a: a.0, axis }))
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let src = self.value(a);
        let data: Vec<f64> = src.data().iter().map(|&x| unary_fwd(kind, x)).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let n = t.numel() as u64;
        let cost = match kind {
            Unary::Square => OpCost {
                elementwise: n,
                ..OpCost::default()
            },
            _ => OpCost {
                transcendental: n,
                ..OpCost::default()
            },
        };
        self.charge(cost);
        self.push_op(t, Op::Unary(a.0, kind))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Cos)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sin)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| shape_err("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "x {shape:?}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.len() / d.max(1);
        let mut out = vec![0.0; src.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mu) * rs * g[j] + b[j];
            }
            rstd.push(rs);
        }
        let n = src.len() as u64;
        self.charge(OpCost {
            elementwise: 3 * n,
            reduction: 2 * n,
            ..OpCost::default()
        });
        let t = Tensor::new(shape, out)?;
        Ok(self.push_op(
            t,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                rstd,
            },
        ))
    }

    /// Softmax over the last axis restricted to admissible keys. `a` has
    /// shape `[..., q, k]` and `mask` is `q x k`, shared by all leading
    /// indices. Inadmissible entries are exactly zero.
    pub fn masked_softmax(&mut self, a: Var, mask: &BoolMask) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 2] != mask.rows() || shape[r - 1] != mask.cols() {
            return Err(shape_err(
                "masked_softmax",
                format!("scores {shape:?}, mask {}x{}", mask.rows(), mask.cols()),
            ));
        }
        for q in 0..mask.rows() {
            if !mask.row(q).iter().any(|&x| x) {
                return Err(Error::EmptyMaskRow { row: q });
            }
        }
        let (qn, kn) = (mask.rows(), mask.cols());
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for (row_idx, (row, dst)) in src.chunks(kn).zip(out.chunks_mut(kn)).enumerate() {
            let allowed = mask.row(row_idx % qn);
            let mut max = f64::NEG_INFINITY;
            for (v, &ok) in row.iter().zip(allowed) {
                if ok && *v > max {
                    max = *v;
                }
            }
            let mut total = 0.0;
            for ((v, &ok), d) in row.iter().zip(allowed).zip(dst.iter_mut()) {
                if ok {
                    *d = (v - max).exp();
                    total += *d;
                }
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        let n = src.len() as u64;
        self.charge(OpCost {
            elementwise: n,
            transcendental: n,
            reduction: n,
            ..OpCost::default()
        });
        let t = Tensor::new(shape, out)?;
        Ok(self.push_op(t, Op::MaskedSoftmax { a: a.0 }))
    }

    /// Replicates size-1 axes of `a` to reach `shape` (ranks must agree).
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src_shape = self.shape(a).to_vec();
        if src_shape.len() != shape.len()
            || src_shape.iter().zip(shape).any(|(&s, &t)| s != t && s != 1)
        {
            return Err(shape_err("broadcast", format!("{src_shape:?} -> {shape:?}")));
        }
        let bstrides = broadcast_strides(&src_shape);
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let src = self.value(a).data();
        for_each_run(shape, &bstrides, |_, off, len, step| {
            if step == 0 {
                data.resize(data.len() + len, src[off]);
            } else {
                data.extend_from_slice(&src[off..off + len]);
            }
        });
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push_op(t, Op::Broadcast(a.0)))
    }

    // ---- convenience compositions ------------------------------------------

    /// `x + bias` where `bias` has the shape of the trailing axes of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias).to_vec();
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != bs[..] {
            return Err(shape_err("add_bias", format!("{xs:?} + {bs:?}")));
        }
        let mut padded = vec![1; xs.len() - bs.len()];
        padded.extend(&bs);
        let r = self.reshape(bias, &padded)?;
        let b = self.broadcast(r, &xs)?;
        self.add(x, b)
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    // ---- backward ------------------------------------------------------------

    /// Propagates gradients from a scalar `loss` to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(ls.to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        let mut leaf = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                leaf.insert(i, Tensor::new(node.value.shape().to_vec(), g).expect("leaf shape"));
            }
        }
        let params = self
            .param_order
            .iter()
            .map(|(name, v)| (name.clone(), v.0))
            .collect();
        Ok(Gradients { leaf, params })
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |id: usize| nodes[id].value.data();
        let shape = |id: usize| nodes[id].value.shape();
        let mut acc = |id: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[id].needs_grad {
                return;
            }
            let buf = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
            f(buf);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, batched } => {
                let (sa, sb) = (shape(*a), shape(*b));
                let k = sa[sa.len() - 1];
                if !batched {
                    let m: usize = sa[..sa.len() - 1].iter().product();
                    let n = sb[1];
                    // dA[m,k] += G[m,n] B^T ; dB[k,n] += A^T G
                    acc(*a, &mut |ga| gemm(m, n, k, g, (n, 1), val(*b), (1, n), ga, 1.0));
                    acc(*b, &mut |gb| gemm(k, m, n, val(*a), (1, k), g, (n, 1), gb, 1.0));
                } else {
                    let r = sa.len();
                    let batch: usize = sa[..r - 2].iter().product();
                    let m = sa[r - 2];
                    let n = sb[r - 1];
                    acc(*a, &mut |ga| {
                        for p in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[p * m * n..(p + 1) * m * n],
                                (n, 1),
                                &val(*b)[p * k * n..(p + 1) * k * n],
                                (1, n),
                                &mut ga[p * m * k..(p + 1) * m * k],
                                1.0,
                            );
                        }
                    });
                    acc(*b, &mut |gb| {
                        for p in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &val(*a)[p * m * k..(p + 1) * m * k],
                                (1, k),
                                &g[p * m * n..(p + 1) * m * n],
                                (n, 1),
                                &mut gb[p * k * n..(p + 1) * k * n],
                                1.0,
                            );
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| axpy(ga, g, 1.0));
                acc(*b, &mut |gb| axpy(gb, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| axpy(ga, g, 1.0));
                acc(*b, &mut |gb| axpy(gb, g, -1.0));
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |ga| {
                    for ((d, gv), bv) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *d += gv * bv;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((d, gv), av) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *d += gv * av;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| axpy(ga, g, *s)),
            Op::Reshape(a) => acc(*a, &mut |ga| axpy(ga, g, 1.0)),
            Op::Permute(a, axes) => {
                let out_shape = nodes[i].value.shape();
                let back = permute_data(g, out_shape, &inverse_axes(axes));
                acc(*a, &mut |ga| axpy(ga, &back, 1.0));
            }
            Op::Concat { inputs, axis } => {
                let out_shape = nodes[i].value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for &p in inputs {
                    let len = shape(p)[*axis] * inner;
                    acc(p, &mut |gp| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            axpy(&mut gp[o * len..(o + 1) * len], src, 1.0);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let sa = shape(*a);
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[axis + 1..].iter().product();
                let len = nodes[i].value.shape()[*axis];
                let full = sa[*axis];
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        let off = (o * full + start) * inner;
                        axpy(
                            &mut ga[off..off + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                            1.0,
                        );
                    }
                });
            }
            Op::Gather { a, index } => {
                let width: usize = shape(*a)[1..].iter().product();
                acc(*a, &mut |ga| {
                    for (o, r) in index.iter().enumerate() {
                        if let Some(r) = r {
                            axpy(
                                &mut ga[r * width..(r + 1) * width],
                                &g[o * width..(o + 1) * width],
                                1.0,
                            );
                        }
                    }
                });
            }
            Op::Sum { a, axis } | Op::Mean { a, axis } => {
                let sa = shape(*a);
                let scale = if matches!(nodes[i].op, Op::Mean { .. }) {
                    1.0 / reduced_len(sa, *axis) as f64
                } else {
                    1.0
                };
                acc(*a, &mut |ga| match axis {
                    None => {
                        for d in ga.iter_mut() {
                            *d += g[0] * scale;
                        }
                    }
                    Some(ax) => {
                        let outer: usize = sa[..*ax].iter().product();
                        let n = sa[*ax];
                        let inner: usize = sa[ax + 1..].iter().product();
                        for o in 0..outer {
                            for j in 0..n {
                                let dst = &mut ga[(o * n + j) * inner..(o * n + j + 1) * inner];
                                axpy(dst, &g[o * inner..(o + 1) * inner], scale);
                            }
                        }
                    }
                });
            }
            Op::Unary(a, kind) => {
                let x = val(*a);
                let y = nodes[i].value.data();
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * unary_grad(*kind, x[j], y[j]);
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let xs = val(*x);
                let gm = val(*gamma);
                let d = gm.len();
                let rows = xs.len() / d;
                let mus: Vec<f64> = xs
                    .chunks(d)
                    .map(|row| row.iter().sum::<f64>() / d as f64)
                    .collect();
                let xhat = |r: usize, j: usize| (xs[r * d + j] - mus[r]) * rstd[r];
                acc(*beta, &mut |gb| {
                    for r in 0..rows {
                        axpy(gb, &g[r * d..(r + 1) * d], 1.0);
                    }
                });
                acc(*gamma, &mut |gg| {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat(r, j);
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    let mut xh = vec![0.0; d];
                    let mut gxh = vec![0.0; d];
                    for r in 0..rows {
                        let row = &xs[r * d..(r + 1) * d];
                        let mu = mus[r];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            xh[j] = (row[j] - mu) * rstd[r];
                            gxh[j] = g[r * d + j] * gm[j];
                            m1 += gxh[j];
                            m2 += gxh[j] * xh[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (gxh[j] - m1 - xh[j] * m2);
                        }
                    }
                });
            }
            Op::MaskedSoftmax { a } => {
                let y = nodes[i].value.data();
                let kn = *nodes[i].value.shape().last().expect("rank >= 2");
                acc(*a, &mut |ga| {
                    for ((yr, gr), dst) in y.chunks(kn).zip(g.chunks(kn)).zip(ga.chunks_mut(kn)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..kn {
                            dst[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Broadcast(a) => {
                let sa = shape(*a).to_vec();
                let bstrides = broadcast_strides(&sa);
                let out_shape = nodes[i].value.shape();
                acc(*a, &mut |ga| {
                    for_each_run(out_shape, &bstrides, |lin, off, len, step| {
                        let run = &g[lin..lin + len];
                        if step == 0 {
                            ga[off] += run.iter().sum::<f64>();
                        } else {
                            axpy(&mut ga[off..off + len], run, 1.0);
                        }
                    });
                });
            }
        }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    leaf: BTreeMap<usize, Tensor>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    /// Gradient of a leaf (`input` or `param`); `None` for constants and
    /// intermediates.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaf.get(&v.0)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, id)| self.leaf.get(id))
    }

    /// Parameter gradients keyed by name.
    pub fn into_param_grads(mut self) -> BTreeMap<String, Tensor> {
        self.params
            .into_iter()
            .filter_map(|(n, id)| self.leaf.remove(&id).map(|g| (n, g)))
            .collect()
    }
}

fn tag_matches(tag: &str, prefix: &str) -> bool {
    prefix.is_empty()
        || tag == prefix
        || (tag.starts_with(prefix) && tag.as_bytes().get(prefix.len()) == Some(&b'/'))
}

fn reduced_len(shape: &[usize], axis: Option<usize>) -> usize {
    match axis {
        None => shape.iter().product(),
        Some(a) => shape[a],
    }
}

fn broadcast_strides(shape: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    shape
        .iter()
        .zip(s)
        .map(|(&d, st)| if d == 1 { 0 } else { st })
        .collect()
}

/// Visits `shape` one last-axis run at a time as
/// `(out_offset, src_offset, run_len, src_step)` where the source offset
/// follows `src_strides` and `src_step` is the last-axis source stride.
fn for_each_run(shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize, usize, usize)) {
    let numel: usize = shape.iter().product();
    if numel == 0 {
        return;
    }
    let Some((&len, lead)) = shape.split_last() else {
        f(0, 0, 1, 0);
        return;
    };
    let step = src_strides[lead.len()];
    let mut idx = vec![0usize; lead.len()];
    let mut out = 0;
    loop {
        let off: usize = idx.iter().zip(src_strides).map(|(i, s)| i * s).sum();
        f(out, off, len, step);
        out += len;
        let mut ax = lead.len();
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < lead[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn unary_fwd(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Square => x * x,
        Unary::Sqrt => x.sqrt(),
        Unary::Exp => x.exp(),
        Unary::Ln => x.ln(),
        Unary::Cos => x.cos(),
        Unary::Sin => x.sin(),
        Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
        Unary::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
    }
}

fn unary_grad(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Square => 2.0 * x,
        Unary::Sqrt => 0.5 / y,
        Unary::Exp => y,
        Unary::Ln => 1.0 / x,
        Unary::Cos => -x.sin(),
        Unary::Sin => x.cos(),
        Unary::Gelu => {
            let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
        }
        Unary::Softplus => 1.0 / (1.0 + (-x).exp()),
    }
}

/// `c = a * b + beta * c` on row-major storage with explicit (row, col)
/// strides for `a` (m x k) and `b` (k x n).
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
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    assert!(k == 0 || a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    assert!(k == 0 || b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    // SAFETY: bounds of every accessed element are asserted above.
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
    fn masked_softmax_uniform_pair() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let y = g.masked_softmax(x, &BoolMask::new(1, 2, true)).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn masked_softmax_zero_at_disallowed() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0, 5.0, -2.0, 0.3, 0.1, 9.0]));
        let mut m = BoolMask::new(2, 3, true);
        m.set(0, 1, false);
        m.set(1, 2, false);
        let y = g.masked_softmax(x, &m).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[1], 0.0);
        assert_eq!(v[5], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
        assert!((v[3] + v[4] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn masked_softmax_rejects_empty_row() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[0.0; 4]));
        let mut m = BoolMask::new(2, 2, true);
        m.set(1, 0, false);
        m.set(1, 1, false);
        assert!(matches!(g.masked_softmax(x, &m), Err(Error::EmptyMaskRow { row: 1 })));
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let i = g.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.value(y), g.value(a));
        assert_eq!(g.total_cost().matmul, 18);
    }

    #[test]
    fn matmul_shape_mismatch_reports_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![4, 2]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![2, 4], 3.5));
        let gamma = g.constant(Tensor::full(vec![4], 1.0));
        let beta = g.constant(Tensor::zeros(vec![4]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_square_sum() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]));
        let sq = g.square(x);
        let l = g.sum(sq, None).unwrap();
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[0.3, -1.0, 2.0]));
        let y = g.add(x, x).unwrap();
        let l = g.sum(y, None).unwrap();
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn unused_param_gets_zero_grad() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(vec![2], 1.0));
        store.insert("unused", Tensor::full(vec![3], 1.0));
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let u = g.param(&store, "unused").unwrap();
        let _ = u;
        let l = g.sum(w, None).unwrap();
        let grads = g.backward(l).unwrap().into_param_grads();
        assert_eq!(grads["unused"].data(), &[0.0, 0.0, 0.0]);
        assert_eq!(grads["w"].data(), &[1.0, 1.0]);
    }

    #[test]
    fn cost_tags_nest() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 2]));
        g.scoped("enc", |g| {
            g.scoped("attn", |g| g.matmul(a, a).unwrap());
            g.square(a);
        });
        assert_eq!(g.cost_under("enc/attn").matmul, 8);
        assert_eq!(g.cost_under("enc").total(), 12);
        assert_eq!(g.cost_under("en").total(), 0);
    }

    #[test]
    fn peak_bytes_counts_live_values() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![10]));
        let b = g.square(a); // a dies here
        let _c = g.square(b);
        assert_eq!(g.peak_live_bytes(), 2 * 10 * 8);
    }
}
