//! Reverse-mode automatic differentiation over an append-only node list.
//!
//! Values are computed eagerly as nodes are added, so the node list is
//! already in topological order. Two reverse sweeps are provided:
//!
//! * [`Graph::backward`] computes plain numeric adjoints for every node that
//!   requires a gradient;
//! * [`Graph::grad`] expresses the adjoints as new nodes of the same graph,
//!   which makes the returned gradients differentiable themselves (used by the
//!   critic gradient penalty).

use crate::error::{Error, Result};
use crate::ndmath::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

// Shape arguments are informational; node values carry the actual shapes.
#[allow(dead_code)]
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a / b` elementwise, with `0` wherever `b == 0`.
    DivSafe(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    LeakyRelu(Var, f64),
    /// `grad * leaky_relu'(pre)`: the adjoint rule of `LeakyRelu`, treated as
    /// piecewise constant in `pre`.
    Gate {
        grad: Var,
        pre: Var,
        slope: f64,
    },
    Sqrt(Var),
    Softplus(Var),
    AddRow(Var, Var),
    SumRows(Var),
    SumCols(Var),
    Sum(Var),
    BroadcastRows(Var, usize),
    BroadcastCols(Var, usize),
    BroadcastScalar(Var, usize, usize),
    Concat(Var, Var),
    SliceCols(Var, usize, usize),
    PadCols(Var, usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::DivSafe(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Gate { .. } => "gate",
            Op::Sqrt(..) => "sqrt",
            Op::Softplus(..) => "softplus",
            Op::AddRow(..) => "add_row",
            Op::SumRows(..) => "sum_rows",
            Op::SumCols(..) => "sum_cols",
            Op::Sum(..) => "sum",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::BroadcastScalar(..) => "broadcast_scalar",
            Op::Concat(..) => "concat",
            Op::SliceCols(..) => "slice_cols",
            Op::PadCols(..) => "pad_cols",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::DivSafe(a, b)
            | Op::AddRow(a, b)
            | Op::Concat(a, b) => vec![a, b],
            Op::Gate { grad, pre, .. } => vec![grad, pre],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::LeakyRelu(a, _)
            | Op::Sqrt(a)
            | Op::Softplus(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::Sum(a)
            | Op::BroadcastRows(a, _)
            | Op::BroadcastCols(a, _)
            | Op::BroadcastScalar(a, _, _)
            | Op::SliceCols(a, _, _)
            | Op::PadCols(a, _, _) => vec![a],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Numeric adjoints produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` if `v` did not influence
    /// the root.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }
}

pub(crate) fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn leaky_slope(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn safe_div(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn div_safe(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "div", safe_div)?;
        Ok(self.push(Op::DivSafe(a, b), v))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a, c), v)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| leaky_relu(x, slope));
        self.push(Op::LeakyRelu(a, slope), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    fn gate(&mut self, grad: Var, pre: Var, slope: f64) -> Result<Var> {
        let v = self
            .value(grad)
            .zip_map(self.value(pre), "gate", |g, p| g * leaky_slope(p, slope))?;
        Ok(self.push(Op::Gate { grad, pre, slope }, v))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    /// `ln(1 + e^x)`. First-order only: [`Graph::grad`] rejects graphs that
    /// route a gradient through it.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(Op::Softplus(a), v)
    }

    /// `x + b` with `b` a `1 x cols` row broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let v = self.value(x).add_row(self.value(b))?;
        Ok(self.push(Op::AddRow(x, b), v))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_rows();
        self.push(Op::SumRows(a), v)
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_cols();
        self.push(Op::SumCols(a), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        if self.value(a).rows() != 1 {
            return Err(Error::dim("broadcast_rows", "1 row", self.value(a).rows()));
        }
        let v = self.value(a).broadcast_rows(rows);
        Ok(self.push(Op::BroadcastRows(a, rows), v))
    }

    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        if self.value(a).cols() != 1 {
            return Err(Error::dim("broadcast_cols", "1 column", self.value(a).cols()));
        }
        let v = self.value(a).broadcast_cols(cols);
        Ok(self.push(Op::BroadcastCols(a, cols), v))
    }

    fn broadcast_scalar(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = Tensor::full(rows, cols, self.value(a).item());
        self.push(Op::BroadcastScalar(a, rows, cols), v)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).concat_cols(self.value(b))?;
        Ok(self.push(Op::Concat(a, b), v))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let cols = self.value(a).cols();
        if start + len > cols {
            return Err(Error::dim("slice_cols", format!("at most {cols} columns"), start + len));
        }
        let v = self.value(a).slice_cols(start, len);
        Ok(self.push(Op::SliceCols(a, start, len), v))
    }

    fn pad_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let v = self.value(a).pad_cols(start, width);
        self.push(Op::PadCols(a, start, width), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same shape")
    }

    /// Euclidean norm of each row, `rows x 1`. The gradient at a zero row is
    /// taken as zero.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        let s = self.sum_cols(sq);
        self.sqrt(s)
    }

    fn check_root(&self, root: Var) -> Result<()> {
        if self.value(root).shape() != [1, 1] {
            return Err(Error::Contract(format!(
                "gradient root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        Ok(())
    }

    /// Numeric reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check_root(root)?;
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(d) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let contributions = self.vjp_numeric(node, &d)?;
            for (input, g) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
            adj[i] = Some(d);
        }
        Ok(Gradients { adjoints: adj })
    }

    fn vjp_numeric(&self, node: &Node, d: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        Ok(match node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if rg(a) {
                    out.push((a, d.matmul(&val(b).transpose())?));
                }
                if rg(b) {
                    out.push((b, val(a).transpose().matmul(d)?));
                }
                out
            }
            Op::Transpose(a) => vec![(a, d.transpose())],
            Op::Add(a, b) => vec![(a, d.clone()), (b, d.clone())],
            Op::Sub(a, b) => vec![(a, d.clone()), (b, d.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (a, d.zip_map(val(b), "mul", |g, y| g * y)?),
                (b, d.zip_map(val(a), "mul", |g, x| g * x)?),
            ],
            Op::DivSafe(a, b) => {
                let da = d.zip_map(val(b), "div", safe_div)?;
                let db = d
                    .zip_map(&node.value, "div", |g, q| g * q)?
                    .zip_map(val(b), "div", |gq, y| -safe_div(gq, y))?;
                vec![(a, da), (b, db)]
            }
            Op::Scale(a, c) => vec![(a, d.map(|x| c * x))],
            Op::AddScalar(a, _) => vec![(a, d.clone())],
            Op::LeakyRelu(a, s) => vec![(a, d.zip_map(val(a), "leaky_relu", |g, x| g * leaky_slope(x, s))?)],
            Op::Gate { grad, pre, slope } => {
                vec![(grad, d.zip_map(val(pre), "gate", |g, p| g * leaky_slope(p, slope))?)]
            }
            Op::Sqrt(a) => vec![(a, d.zip_map(&node.value, "sqrt", |g, r| safe_div(0.5 * g, r))?)],
            Op::Softplus(a) => vec![(a, d.zip_map(val(a), "softplus", |g, x| g * sigmoid(x))?)],
            Op::AddRow(x, b) => vec![(x, d.clone()), (b, d.sum_rows())],
            Op::SumRows(a) => vec![(a, d.broadcast_rows(val(a).rows()))],
            Op::SumCols(a) => vec![(a, d.broadcast_cols(val(a).cols()))],
            Op::Sum(a) => {
                let s = val(a);
                vec![(a, Tensor::full(s.rows(), s.cols(), d.item()))]
            }
            Op::BroadcastRows(a, _) => vec![(a, d.sum_rows())],
            Op::BroadcastCols(a, _) => vec![(a, d.sum_cols())],
            Op::BroadcastScalar(a, _, _) => vec![(a, Tensor::scalar(d.sum()))],
            Op::Concat(a, b) => {
                let wa = val(a).cols();
                vec![(a, d.slice_cols(0, wa)), (b, d.slice_cols(wa, val(b).cols()))]
            }
            Op::SliceCols(a, start, _) => vec![(a, d.pad_cols(start, val(a).cols()))],
            Op::PadCols(a, start, _) => vec![(a, d.slice_cols(start, val(a).cols()))],
        })
    }

    /// Differentiable gradients of a scalar `root` with respect to `wrt`.
    ///
    /// The adjoint computation is recorded as new nodes, so the returned
    /// handles can feed further ops whose [`Graph::backward`] includes the
    /// second-order terms. Inputs that do not influence `root` get a zero
    /// constant.
    pub fn grad(&mut self, root: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        self.check_root(root)?;
        // Only adjoints of nodes downstream of some `wrt` entry can reach it.
        let mut on_path = vec![false; root.0 + 1];
        for w in wrt {
            if w.0 <= root.0 {
                on_path[w.0] = true;
            }
        }
        for i in 0..=root.0 {
            if !on_path[i] {
                on_path[i] = self.nodes[i].op.inputs().iter().any(|v| on_path[v.0]);
            }
        }
        let mut adj: Vec<Option<Var>> = vec![None; root.0 + 1];
        adj[root.0] = Some(self.constant(Tensor::scalar(1.0)));
        for i in (0..=root.0).rev() {
            let Some(d) = adj[i] else { continue };
            if !self.nodes[i].requires_grad || !on_path[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let contributions = self.vjp_symbolic(&op, Var(i), d, &on_path)?;
            for (input, g) in contributions {
                if !self.nodes[input.0].requires_grad || !on_path[input.0] {
                    continue;
                }
                adj[input.0] = Some(match adj[input.0] {
                    Some(acc) => self.add(acc, g)?,
                    None => g,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|&w| match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let [r, c] = self.value(w).shape();
                    self.constant(Tensor::zeros(r, c))
                }
            })
            .collect())
    }

    fn vjp_symbolic(&mut self, op: &Op, out: Var, d: Var, on_path: &[bool]) -> Result<Vec<(Var, Var)>> {
        let rg = |g: &Graph, v: Var| g.nodes[v.0].requires_grad && on_path[v.0];
        Ok(match *op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let mut res = Vec::with_capacity(2);
                if rg(self, a) {
                    let bt = self.transpose(b);
                    res.push((a, self.matmul(d, bt)?));
                }
                if rg(self, b) {
                    let at = self.transpose(a);
                    res.push((b, self.matmul(at, d)?));
                }
                res
            }
            Op::Transpose(a) => vec![(a, self.transpose(d))],
            Op::Add(a, b) => vec![(a, d), (b, d)],
            Op::Sub(a, b) => vec![(a, d), (b, self.scale(d, -1.0))],
            Op::Mul(a, b) => {
                let mut res = Vec::with_capacity(2);
                if rg(self, a) {
                    res.push((a, self.mul(d, b)?));
                }
                if rg(self, b) {
                    res.push((b, self.mul(d, a)?));
                }
                res
            }
            Op::DivSafe(a, b) => {
                let mut res = Vec::with_capacity(2);
                if rg(self, a) {
                    res.push((a, self.div_safe(d, b)?));
                }
                if rg(self, b) {
                    let dq = self.mul(d, out)?;
                    let t = self.div_safe(dq, b)?;
                    res.push((b, self.scale(t, -1.0)));
                }
                res
            }
            Op::Scale(a, c) => vec![(a, self.scale(d, c))],
            Op::AddScalar(a, _) => vec![(a, d)],
            Op::LeakyRelu(a, s) => vec![(a, self.gate(d, a, s)?)],
            Op::Gate { grad, pre, slope } => vec![(grad, self.gate(d, pre, slope)?)],
            Op::Sqrt(a) => {
                let half = self.scale(d, 0.5);
                vec![(a, self.div_safe(half, out)?)]
            }
            Op::Softplus(_) => return Err(Error::UnsupportedOp(op.name())),
            Op::AddRow(x, b) => {
                let mut res = vec![(x, d)];
                if rg(self, b) {
                    res.push((b, self.sum_rows(d)));
                }
                res
            }
            Op::SumRows(a) => {
                let n = self.value(a).rows();
                vec![(a, self.broadcast_rows(d, n)?)]
            }
            Op::SumCols(a) => {
                let m = self.value(a).cols();
                vec![(a, self.broadcast_cols(d, m)?)]
            }
            Op::Sum(a) => {
                let [r, c] = self.value(a).shape();
                vec![(a, self.broadcast_scalar(d, r, c))]
            }
            Op::BroadcastRows(a, _) => vec![(a, self.sum_rows(d))],
            Op::BroadcastCols(a, _) => vec![(a, self.sum_cols(d))],
            Op::BroadcastScalar(a, _, _) => vec![(a, self.sum(d))],
            Op::Concat(a, b) => {
                let wa = self.value(a).cols();
                let wb = self.value(b).cols();
                let da = self.slice_cols(d, 0, wa)?;
                let db = self.slice_cols(d, wa, wb)?;
                vec![(a, da), (b, db)]
            }
            Op::SliceCols(a, start, _) => {
                let w = self.value(a).cols();
                vec![(a, self.pad_cols(d, start, w))]
            }
            Op::PadCols(a, start, _) => {
                let w = self.value(a).cols();
                vec![(a, self.slice_cols(d, start, w)?)]
            }
        })
    }
}
