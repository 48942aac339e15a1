use std::collections::HashMap;

use super::tensor::{gemm_nn, gemm_nt, gemm_tn};
use super::{ParamId, ParamStore, Tensor};
use crate::{Error, Result};

/// Index of a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input { name: String, shape: [usize; 2] },
    Param(ParamId),
    Const(Tensor),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Celu(NodeId),
    NonNeg(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    RowMax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    ColMean(NodeId),
    GroupSum(NodeId, usize),
    ConcatCols(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Celu(_) => "celu",
            Op::NonNeg(_) => "nonneg",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::RowMax(_) => "row_max",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::ColMean(_) => "col_mean",
            Op::GroupSum(..) => "group_sum",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
        }
    }

    fn operands(&self) -> [Option<NodeId>; 2] {
        match *self {
            Op::Input { .. } | Op::Param(_) | Op::Const(_) => [None, None],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ConcatCols(a, b) => [Some(a), Some(b)],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Celu(a)
            | Op::NonNeg(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::RowMax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::ColMean(a)
            | Op::GroupSum(a, _)
            | Op::SliceCols(a, _, _) => [Some(a), None],
        }
    }
}

/// Which leaves [`Graph::backward`] differentiates with respect to.
#[derive(Clone, Copy, Debug)]
pub enum Wrt<'a> {
    Params,
    Input(&'a str),
    All,
}

/// Gradients of a scalar output, keyed by leaf.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    params: HashMap<ParamId, Tensor>,
    inputs: HashMap<String, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn input(&self, name: &str) -> Option<&Tensor> {
        self.inputs.get(name)
    }

    pub fn take_input(&mut self, name: &str) -> Option<Tensor> {
        self.inputs.remove(name)
    }

    /// One gradient per parameter in store order; unreached parameters get zeros.
    pub fn dense(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| match self.params.get(&id) {
                Some(g) => g.clone(),
                None => {
                    let [r, c] = store.get(id).shape();
                    Tensor::zeros(r, c)
                }
            })
            .collect()
    }

    pub fn reached_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }
}

#[inline]
fn celu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
fn celu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn broadcast_kind(lhs: [usize; 2], rhs: [usize; 2]) -> Option<Broadcast> {
    if lhs == rhs {
        Some(Broadcast::Same)
    } else if rhs == [1, 1] {
        Some(Broadcast::Scalar)
    } else if rhs == [1, lhs[1]] {
        Some(Broadcast::Row)
    } else if rhs == [lhs[0], 1] {
        Some(Broadcast::Col)
    } else {
        None
    }
}

#[inline]
fn rhs_index(kind: Broadcast, cols: usize, i: usize, j: usize) -> usize {
    match kind {
        Broadcast::Same => i * cols + j,
        Broadcast::Row => j,
        Broadcast::Col => i,
        Broadcast::Scalar => 0,
    }
}

/// A feedforward computation graph over [`Tensor`]s with reverse-mode
/// differentiation.
///
/// Nodes are appended in topological order by the builder methods; nothing
/// is computed until [`Graph::forward`]. Binary elementwise ops broadcast
/// their right operand when it is a `1 x c` row, an `r x 1` column or a
/// `1 x 1` scalar.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    ops: Vec<Op>,
    params: HashMap<ParamId, NodeId>,
    values: Vec<Tensor>,
    argmax: HashMap<usize, Vec<usize>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        // New nodes invalidate any cached evaluation.
        self.values.clear();
        self.ops.push(op);
        NodeId(self.ops.len() - 1)
    }

    pub fn input(&mut self, name: &str, rows: usize, cols: usize) -> NodeId {
        self.push(Op::Input {
            name: name.to_string(),
            shape: [rows, cols],
        })
    }

    /// Leaf bound to a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let n = self.push(Op::Param(id));
        self.params.insert(id, n);
        n
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    /// CELU with unit scale: `x` for `x > 0`, `exp(x) - 1` otherwise.
    pub fn celu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Celu(a))
    }

    /// Elementwise projection onto `[0, inf)`.
    pub fn nonneg(&mut self, a: NodeId) -> NodeId {
        self.push(Op::NonNeg(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    /// Per-row maximum as an `r x 1` column. The gradient is routed to the
    /// first maximal entry of each row.
    pub fn row_max(&mut self, a: NodeId) -> NodeId {
        self.push(Op::RowMax(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    /// Column means as a `1 x c` row.
    pub fn col_mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::ColMean(a))
    }

    /// Sums consecutive blocks of `group` rows: `(b * group) x c -> b x c`.
    pub fn group_sum(&mut self, a: NodeId, group: usize) -> NodeId {
        self.push(Op::GroupSum(a, group))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::ConcatCols(a, b))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        self.push(Op::SliceCols(a, start, end))
    }

    pub fn is_evaluated(&self) -> bool {
        !self.ops.is_empty() && self.values.len() == self.ops.len()
    }

    pub fn value(&self, node: NodeId) -> Option<&Tensor> {
        self.values.get(node.0)
    }

    /// Evaluates every node and caches the values; returns the value of the
    /// most recently added node.
    pub fn forward(&mut self, params: &ParamStore, feeds: &[(&str, &Tensor)]) -> Result<&Tensor> {
        self.evaluate(params, feeds)?;
        let last = self
            .values
            .last()
            .ok_or_else(|| Error::InvalidArgument("empty graph".into()))?;
        if !last.is_finite() {
            let node = self.values.len() - 1;
            self.values.clear();
            return Err(Error::NonFinite(format!("graph output (node {node})")));
        }
        Ok(self.values.last().expect("non-empty"))
    }

    /// Like [`Graph::forward`] but keeps non-finite intermediate and output
    /// values so the caller can inspect them.
    pub(crate) fn evaluate(&mut self, params: &ParamStore, feeds: &[(&str, &Tensor)]) -> Result<()> {
        self.values.clear();
        self.argmax.clear();
        let mut values = Vec::with_capacity(self.ops.len());
        for (idx, op) in self.ops.iter().enumerate() {
            let (v, arg) = eval_node(idx, op, &values, params, feeds)?;
            if let Some(arg) = arg {
                self.argmax.insert(idx, arg);
            }
            values.push(v);
        }
        self.values = values;
        Ok(())
    }

    /// Reverse pass from a scalar `output`.
    pub fn backward(&self, output: NodeId, wrt: Wrt<'_>) -> Result<Gradients> {
        if !self.is_evaluated() {
            return Err(Error::NotEvaluated);
        }
        let out_shape = self.values[output.0].shape();
        if out_shape != [1, 1] {
            return Err(Error::NonScalarOutput(out_shape));
        }

        // Nodes that depend on at least one requested leaf.
        let mut needs = vec![false; output.0 + 1];
        for (i, op) in self.ops[..=output.0].iter().enumerate() {
            needs[i] = match op {
                Op::Param(_) => matches!(wrt, Wrt::Params | Wrt::All),
                Op::Input { name, .. } => match wrt {
                    Wrt::Input(n) => n == name,
                    Wrt::All => true,
                    Wrt::Params => false,
                },
                Op::Const(_) => false,
                _ => op.operands().iter().flatten().any(|n| needs[n.0]),
            };
        }

        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Tensor::scalar(1.0));
        let mut grads = Gradients::default();

        for i in (0..=output.0).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let op = &self.ops[i];
            match op {
                Op::Param(id) => {
                    grads.params.insert(*id, g);
                    continue;
                }
                Op::Input { name, .. } => {
                    grads.inputs.insert(name.clone(), g);
                    continue;
                }
                Op::Const(_) => continue,
                _ => {}
            }
            let val = |n: NodeId| &self.values[n.0];
            let mut send = |n: NodeId, t: Tensor| {
                if !needs[n.0] {
                    return;
                }
                match &mut adj[n.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(t.data())
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(t),
                }
            };
            match *op {
                Op::MatMul(a, b) => {
                    if needs[a.0] {
                        let mut da = Tensor::zeros(val(a).rows(), val(a).cols());
                        gemm_nt(&g, val(b), &mut da);
                        send(a, da);
                    }
                    if needs[b.0] {
                        let mut db = Tensor::zeros(val(b).rows(), val(b).cols());
                        gemm_tn(val(a), &g, &mut db);
                        send(b, db);
                    }
                }
                Op::Transpose(a) => send(a, g.transpose()),
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                    let (av, bv) = (val(a), val(b));
                    let kind = broadcast_kind(av.shape(), bv.shape()).expect("checked in forward");
                    let cols = av.cols();
                    if needs[a.0] {
                        let da = match op {
                            Op::Mul(..) => {
                                let mut d = g.clone();
                                for (k, x) in d.data_mut().iter_mut().enumerate() {
                                    *x *= bv.data()[rhs_index(kind, cols, k / cols, k % cols)];
                                }
                                d
                            }
                            _ => g.clone(),
                        };
                        send(a, da);
                    }
                    if needs[b.0] {
                        let mut db = Tensor::zeros(bv.rows(), bv.cols());
                        for (k, &gk) in g.data().iter().enumerate() {
                            let t = match op {
                                Op::Add(..) => gk,
                                Op::Sub(..) => -gk,
                                _ => gk * av.data()[k],
                            };
                            db.data_mut()[rhs_index(kind, cols, k / cols, k % cols)] += t;
                        }
                        send(b, db);
                    }
                }
                Op::Scale(a, c) => send(a, g.map(|x| x * c)),
                Op::Celu(a) => {
                    let mut d = g;
                    for (x, &z) in d.data_mut().iter_mut().zip(val(a).data()) {
                        *x *= celu_grad(z);
                    }
                    send(a, d);
                }
                Op::NonNeg(a) => {
                    let mut d = g;
                    for (x, &z) in d.data_mut().iter_mut().zip(val(a).data()) {
                        if z <= 0.0 {
                            *x = 0.0;
                        }
                    }
                    send(a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    for (x, &s) in d.data_mut().iter_mut().zip(self.values[i].data()) {
                        *x *= s * (1.0 - s);
                    }
                    send(a, d);
                }
                Op::Tanh(a) => {
                    let mut d = g;
                    for (x, &t) in d.data_mut().iter_mut().zip(self.values[i].data()) {
                        *x *= 1.0 - t * t;
                    }
                    send(a, d);
                }
                Op::RowMax(a) => {
                    let av = val(a);
                    let arg = &self.argmax[&i];
                    let mut d = Tensor::zeros(av.rows(), av.cols());
                    for (r, &j) in arg.iter().enumerate() {
                        d.set(r, j, g.get(r, 0));
                    }
                    send(a, d);
                }
                Op::Sum(a) => {
                    let [r, c] = val(a).shape();
                    send(a, Tensor::full(r, c, g.item()));
                }
                Op::Mean(a) => {
                    let [r, c] = val(a).shape();
                    send(a, Tensor::full(r, c, g.item() / (r * c) as f64));
                }
                Op::ColMean(a) => {
                    let [r, c] = val(a).shape();
                    let inv = 1.0 / r as f64;
                    let mut d = Tensor::zeros(r, c);
                    for row in 0..r {
                        for col in 0..c {
                            d.set(row, col, g.get(0, col) * inv);
                        }
                    }
                    send(a, d);
                }
                Op::GroupSum(a, grp) => {
                    let [r, c] = val(a).shape();
                    let mut d = Tensor::zeros(r, c);
                    for row in 0..r {
                        let src = g.row_slice(row / grp);
                        d.data_mut()[row * c..(row + 1) * c].copy_from_slice(src);
                    }
                    send(a, d);
                }
                Op::ConcatCols(a, b) => {
                    let ca = val(a).cols();
                    let cb = val(b).cols();
                    let rows = g.rows();
                    let mut da = Vec::with_capacity(rows * ca);
                    let mut db = Vec::with_capacity(rows * cb);
                    for r in 0..rows {
                        let row = g.row_slice(r);
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    send(a, Tensor::new(rows, ca, da));
                    send(b, Tensor::new(rows, cb, db));
                }
                Op::SliceCols(a, s, e) => {
                    let [r, c] = val(a).shape();
                    let mut d = Tensor::zeros(r, c);
                    for row in 0..r {
                        d.data_mut()[row * c + s..row * c + e].copy_from_slice(g.row_slice(row));
                    }
                    send(a, d);
                }
                Op::Input { .. } | Op::Param(_) | Op::Const(_) => unreachable!(),
            }
        }
        Ok(grads)
    }
}

fn eval_node(
    idx: usize,
    op: &Op,
    values: &[Tensor],
    params: &ParamStore,
    feeds: &[(&str, &Tensor)],
) -> Result<(Tensor, Option<Vec<usize>>)> {
    let shape_err = |detail: String| Error::Shape {
        node: idx,
        op: op.name(),
        detail,
    };
    let v = |n: NodeId| &values[n.0];
    let mut arg_out = None;
    let out = match op {
        Op::Input { name, shape } => {
            let t = feeds
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| *t)
                .ok_or_else(|| Error::MissingInput(name.clone()))?;
            if t.shape() != *shape {
                return Err(Error::InputShape {
                    name: name.clone(),
                    declared: *shape,
                    found: t.shape(),
                });
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("input `{name}`")));
            }
            t.clone()
        }
        Op::Param(id) => {
            let t = params.get(*id);
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("parameter `{}`", params.name(*id))));
            }
            t.clone()
        }
        Op::Const(t) => t.clone(),
        Op::MatMul(a, b) => {
            let (a, b) = (v(*a), v(*b));
            if a.cols() != b.rows() {
                return Err(shape_err(format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            let mut out = Tensor::zeros(a.rows(), b.cols());
            gemm_nn(a, b, &mut out);
            out
        }
        Op::Transpose(a) => v(*a).transpose(),
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            let (a, b) = (v(*a), v(*b));
            let kind = broadcast_kind(a.shape(), b.shape()).ok_or_else(|| {
                shape_err(format!("cannot broadcast {:?} onto {:?}", b.shape(), a.shape()))
            })?;
            let cols = a.cols();
            let mut out = a.clone();
            let bd = b.data();
            for (k, o) in out.data_mut().iter_mut().enumerate() {
                let bv = bd[rhs_index(kind, cols, k / cols.max(1), k % cols.max(1))];
                match op {
                    Op::Add(..) => *o += bv,
                    Op::Sub(..) => *o -= bv,
                    _ => *o *= bv,
                }
            }
            out
        }
        Op::Scale(a, c) => v(*a).map(|x| x * c),
        Op::Celu(a) => v(*a).map(celu),
        Op::NonNeg(a) => v(*a).map(|x| x.max(0.0)),
        Op::Sigmoid(a) => v(*a).map(sigmoid),
        Op::Tanh(a) => v(*a).map(f64::tanh),
        Op::RowMax(a) => {
            let a = v(*a);
            if a.cols() == 0 {
                return Err(shape_err("row max of zero columns".into()));
            }
            let mut out = Vec::with_capacity(a.rows());
            let mut arg = Vec::with_capacity(a.rows());
            for r in 0..a.rows() {
                let row = a.row_slice(r);
                let mut best = 0;
                for (j, &x) in row.iter().enumerate().skip(1) {
                    if x > row[best] {
                        best = j;
                    }
                }
                out.push(row[best]);
                arg.push(best);
            }
            arg_out = Some(arg);
            Tensor::new(a.rows(), 1, out)
        }
        Op::Sum(a) => Tensor::scalar(v(*a).sum()),
        Op::Mean(a) => {
            let a = v(*a);
            if a.is_empty() {
                return Err(shape_err("mean of empty tensor".into()));
            }
            Tensor::scalar(a.sum() / a.len() as f64)
        }
        Op::ColMean(a) => {
            let a = v(*a);
            if a.rows() == 0 {
                return Err(shape_err("column mean of zero rows".into()));
            }
            a.col_means()
        }
        Op::GroupSum(a, g) => {
            let a = v(*a);
            if *g == 0 || a.rows() % g != 0 {
                return Err(shape_err(format!("{} rows not divisible into groups of {g}", a.rows())));
            }
            let b = a.rows() / g;
            let c = a.cols();
            let mut out = Tensor::zeros(b, c);
            for r in 0..a.rows() {
                let src = a.row_slice(r);
                let dst = &mut out.data_mut()[(r / g) * c..(r / g + 1) * c];
                for (o, x) in dst.iter_mut().zip(src) {
                    *o += x;
                }
            }
            out
        }
        Op::ConcatCols(a, b) => {
            let (a, b) = (v(*a), v(*b));
            if a.rows() != b.rows() {
                return Err(shape_err(format!("{:?} | {:?}", a.shape(), b.shape())));
            }
            let c = a.cols() + b.cols();
            let mut data = Vec::with_capacity(a.rows() * c);
            for r in 0..a.rows() {
                data.extend_from_slice(a.row_slice(r));
                data.extend_from_slice(b.row_slice(r));
            }
            Tensor::new(a.rows(), c, data)
        }
        Op::SliceCols(a, s, e) => {
            let a = v(*a);
            if s > e || *e > a.cols() {
                return Err(shape_err(format!("columns {s}..{e} of {:?}", a.shape())));
            }
            let mut data = Vec::with_capacity(a.rows() * (e - s));
            for r in 0..a.rows() {
                data.extend_from_slice(&a.row_slice(r)[*s..*e]);
            }
            Tensor::new(a.rows(), e - s, data)
        }
    };
    Ok((out, arg_out))
}
