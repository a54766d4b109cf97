//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node index is a valid
//! topological order and `backward` is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation whose forward value is computed by the caller.
///
/// `backward` receives the upstream gradient and the input values, and
/// returns one gradient per input (or `None` where `needs[i]` is false).
pub trait CustomOp {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        grad_out: &Tensor,
        inputs: &[&Tensor],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Square(Var),
    Softmax(Var),
    Sum(Var),
    SumLast(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Slice { src: Var, start: usize },
    GatherCols { src: Var, idx: Vec<usize> },
    BroadcastRows(Var),
    Reshape(Var),
    Scale(Var, f64),
    AddScalar(Var),
    LogSumExp(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MatMul(..) => "matmul",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::Square(_) => "square",
            Op::Softmax(_) => "softmax",
            Op::Sum(_) => "sum",
            Op::SumLast(_) => "sum_last",
            Op::Mean(_) => "mean",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::GatherCols { .. } => "gather_cols",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::Reshape(_) => "reshape",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::LogSumExp(_) => "logsumexp",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    /// Persistent gradient, only kept for leaves.
    grad: Option<Tensor>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    match t.first_non_finite() {
        Some(index) => Err(Error::NonFinite { op, index }),
        None => Ok(()),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::shape(op, format!("expected a matrix, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// `c = a * b` with optional transposes, `a` is `m x k` after transposition.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    // Row-major strides; a transposed operand swaps them.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    if k == 0 {
        return;
    }
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
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Accumulated gradient of a leaf created with [`Graph::variable`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of a leaf, or zeros if nothing has flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor, op: Op) -> Result<Var> {
        check_finite(op.name(), &value)?;
        let needs = self.op_needs_grad(&op);
        Ok(self.push(value, op, needs))
    }

    fn op_needs_grad(&self, op: &Op) -> bool {
        let n = |v: &Var| self.nodes[v.0].needs_grad;
        match op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                n(a) || n(b)
            }
            Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::Square(a)
            | Op::Softmax(a)
            | Op::Sum(a)
            | Op::SumLast(a)
            | Op::Mean(a)
            | Op::BroadcastRows(a)
            | Op::Reshape(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::LogSumExp(a) => n(a),
            Op::Slice { src, .. } | Op::GatherCols { src, .. } => n(src),
            Op::Concat(vs) => vs.iter().any(n),
            Op::Custom { inputs, .. } => inputs.iter().any(n),
        }
    }

    /// Leaf that receives gradients.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation (data batches, fixed tables).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let v = x.zip_map(y, |p, q| p + q);
        self.push_checked(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("sub", x, y)?;
        let v = x.zip_map(y, |p, q| p - q);
        self.push_checked(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let v = x.zip_map(y, |p, q| p * q);
        self.push_checked(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("div", x, y)?;
        if let Some(index) = y.data().iter().position(|&q| q == 0.0) {
            return Err(Error::Domain {
                op: "div",
                index,
                value: 0.0,
            });
        }
        let v = x.zip_map(y, |p, q| p / q);
        self.push_checked(v, Op::Div(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims("matmul", x)?;
        let (k2, n) = matrix_dims("matmul", y)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", x.shape(), y.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, x.data(), false, y.data(), false, &mut out);
        self.push_checked(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push_checked(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if let Some(index) = x.data().iter().position(|&p| p <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                index,
                value: x.data()[index],
            });
        }
        let v = x.map(f64::ln);
        self.push_checked(v, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        self.push_checked(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|p| p.max(0.0));
        self.push_checked(v, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(softplus);
        self.push_checked(v, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|p| p * p);
        self.push_checked(v, Op::Square(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let v = Tensor::from_parts(x.shape().to_vec(), out);
        self.push_checked(v, Op::Softmax(a))
    }

    /// Log-sum-exp over the last axis; `[n, m] -> [n]`.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (n, _) = matrix_dims("logsumexp", x)?;
        let out: Vec<f64> = (0..n)
            .map(|i| {
                let row = x.row(i);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
            })
            .collect();
        self.push_checked(Tensor::from_parts(vec![n], out), Op::LogSumExp(a))
    }

    /// Sum of all entries, producing a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push_checked(v, Op::Sum(a))
    }

    /// Sum over the last axis; `[n, m] -> [n]`, `[m] -> []`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let v = match x.rank() {
            1 => Tensor::scalar(x.sum()),
            2 => {
                let c = x.cols();
                let out = if c == 0 {
                    vec![0.0; x.rows()]
                } else {
                    x.data().chunks(c).map(|r| r.iter().sum()).collect()
                };
                Tensor::from_parts(vec![x.rows()], out)
            }
            _ => {
                return Err(Error::shape(
                    "sum_last",
                    format!("unsupported rank {:?}", x.shape()),
                ))
            }
        };
        self.push_checked(v, Op::SumLast(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::shape("mean", "empty operand"));
        }
        let v = Tensor::scalar(x.sum() / x.len() as f64);
        self.push_checked(v, Op::Mean(a))
    }

    /// Concatenates matrices along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no operands"));
        }
        let n = matrix_dims("concat", self.value(parts[0]))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = matrix_dims("concat", self.value(p))?;
            if r != n {
                return Err(Error::shape("concat", format!("row counts {} vs {}", n, r)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..n {
                out[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let v = Tensor::from_parts(vec![n, total], out);
        self.push_checked(v, Op::Concat(parts.to_vec()))
    }

    /// Splits a matrix along the last axis into blocks of the given widths.
    pub fn split(&mut self, a: Var, widths: &[usize]) -> Result<Vec<Var>> {
        let (_, c) = matrix_dims("split", self.value(a))?;
        if widths.iter().sum::<usize>() != c {
            return Err(Error::shape(
                "split",
                format!("widths {:?} do not partition {} columns", widths, c),
            ));
        }
        let mut out = Vec::with_capacity(widths.len());
        let mut start = 0;
        for &w in widths {
            out.push(self.slice_cols(a, start, w)?);
            start += w;
        }
        Ok(out)
    }

    /// Columns `[start, start + width)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let x = self.value(a);
        let (_, c) = matrix_dims("slice", x)?;
        if start + width > c {
            return Err(Error::shape("slice", format!("{}+{} > {}", start, width, c)));
        }
        let v = x.slice_cols(start, width);
        self.push_checked(v, Op::Slice { src: a, start })
    }

    /// Column `j` of the result is column `idx[j]` of `a`; indices may repeat.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let (n, c) = matrix_dims("gather_cols", x)?;
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::shape("gather_cols", format!("index {} out of {} columns", bad, c)));
        }
        let w = idx.len();
        let mut data = Vec::with_capacity(n * w);
        for r in 0..n {
            let row = x.row(r);
            data.extend(idx.iter().map(|&j| row[j]));
        }
        let v = Tensor::from_parts(vec![n, w], data);
        self.push_checked(
            v,
            Op::GatherCols {
                src: a,
                idx: idx.to_vec(),
            },
        )
    }

    /// Repeats a vector `[m]` over a new batch axis, producing `[n, m]`.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 1 {
            return Err(Error::shape(
                "broadcast_rows",
                format!("expected a vector, got {:?}", x.shape()),
            ));
        }
        let m = x.len();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(x.data());
        }
        let v = Tensor::from_parts(vec![n, m], out);
        self.push_checked(v, Op::BroadcastRows(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push_checked(v, Op::Reshape(a))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|p| p * c);
        self.push_checked(v, Op::Scale(a, c))
    }

    /// Addition of a constant.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|p| p + c);
        self.push_checked(v, Op::AddScalar(a))
    }

    /// Registers a custom operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        self.push_checked(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Reverse sweep from a scalar root. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let contributions = self.local_backward(i, &g)?;
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (v, t) in contributions {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Ok(())
    }

    fn local_backward(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        let needs = |v: &Var| self.nodes[v.0].needs_grad;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                if needs(b) {
                    res.push((*b, g.map(|p| -p)));
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    res.push((*a, g.zip_map(val(b), |p, q| p * q)));
                }
                if needs(b) {
                    res.push((*b, g.zip_map(val(a), |p, q| p * q)));
                }
            }
            Op::Div(a, b) => {
                let y = val(b);
                if needs(a) {
                    res.push((*a, g.zip_map(y, |p, q| p / q)));
                }
                if needs(b) {
                    // d(x/y)/dy = -out / y
                    let t = g.zip_map(out, |p, o| p * o);
                    res.push((*b, t.zip_map(y, |p, q| -p / q)));
                }
            }
            Op::MatMul(a, b) => {
                let (x, y) = (val(a), val(b));
                let (m, k) = (x.shape()[0], x.shape()[1]);
                let n = y.shape()[1];
                if needs(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, y.data(), true, &mut da);
                    res.push((*a, Tensor::from_parts(vec![m, k], da)));
                }
                if needs(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, x.data(), true, g.data(), false, &mut db);
                    res.push((*b, Tensor::from_parts(vec![k, n], db)));
                }
            }
            Op::Exp(a) => res.push((*a, g.zip_map(out, |p, o| p * o))),
            Op::Log(a) => res.push((*a, g.zip_map(val(a), |p, x| p / x))),
            Op::Tanh(a) => res.push((*a, g.zip_map(out, |p, o| p * (1.0 - o * o)))),
            // Derivative at exactly zero is taken as 0.
            Op::Relu(a) => res.push((*a, g.zip_map(val(a), |p, x| if x > 0.0 { p } else { 0.0 }))),
            Op::Softplus(a) => res.push((*a, g.zip_map(val(a), |p, x| p * sigmoid(x)))),
            Op::Square(a) => res.push((*a, g.zip_map(val(a), |p, x| 2.0 * p * x))),
            Op::Softmax(a) => {
                let c = out.cols().max(1);
                let mut d = vec![0.0; out.len()];
                for ((dr, sr), gr) in d
                    .chunks_mut(c)
                    .zip(out.data().chunks(c))
                    .zip(g.data().chunks(c))
                {
                    let dot: f64 = sr.iter().zip(gr).map(|(s, q)| s * q).sum();
                    for j in 0..sr.len() {
                        dr[j] = sr[j] * (gr[j] - dot);
                    }
                }
                res.push((*a, Tensor::from_parts(out.shape().to_vec(), d)));
            }
            Op::LogSumExp(a) => {
                let x = val(a);
                let c = x.cols();
                let mut d = vec![0.0; x.len()];
                for r in 0..x.rows() {
                    let lse = out.data()[r];
                    for j in 0..c {
                        d[r * c + j] = g.data()[r] * (x.data()[r * c + j] - lse).exp();
                    }
                }
                res.push((*a, Tensor::from_parts(x.shape().to_vec(), d)));
            }
            Op::Sum(a) => res.push((*a, Tensor::full(val(a).shape(), g.item()))),
            Op::SumLast(a) => {
                let x = val(a);
                let c = x.cols();
                let d = if x.rank() == 1 {
                    vec![g.item(); x.len()]
                } else {
                    let mut d = Vec::with_capacity(x.len());
                    for r in 0..x.rows() {
                        d.extend(std::iter::repeat_n(g.data()[r], c));
                    }
                    d
                };
                res.push((*a, Tensor::from_parts(x.shape().to_vec(), d)));
            }
            Op::Mean(a) => {
                let x = val(a);
                res.push((*a, Tensor::full(x.shape(), g.item() / x.len() as f64)));
            }
            Op::Concat(parts) => {
                let total = out.cols();
                let n = out.rows();
                let mut offset = 0;
                for p in parts {
                    let w = val(p).cols();
                    if needs(p) {
                        let mut d = Vec::with_capacity(n * w);
                        for r in 0..n {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        res.push((*p, Tensor::from_parts(vec![n, w], d)));
                    }
                    offset += w;
                }
            }
            Op::Slice { src, start } => {
                let x = val(src);
                let (n, c) = (x.rows(), x.cols());
                let w = out.cols();
                let mut d = vec![0.0; n * c];
                for r in 0..n {
                    d[r * c + start..r * c + start + w].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                res.push((*src, Tensor::from_parts(vec![n, c], d)));
            }
            Op::GatherCols { src, idx } => {
                let x = val(src);
                let (n, c) = (x.rows(), x.cols());
                let w = idx.len();
                let mut d = vec![0.0; n * c];
                for r in 0..n {
                    for (k, &j) in idx.iter().enumerate() {
                        d[r * c + j] += g.data()[r * w + k];
                    }
                }
                res.push((*src, Tensor::from_parts(vec![n, c], d)));
            }
            Op::BroadcastRows(a) => {
                let m = val(a).len();
                let mut d = vec![0.0; m];
                if m > 0 {
                    for row in g.data().chunks(m) {
                        for (acc, v) in d.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                res.push((*a, Tensor::from_parts(vec![m], d)));
            }
            Op::Reshape(a) => {
                res.push((*a, g.clone().reshape(val(a).shape().to_vec())?));
            }
            Op::Scale(a, c) => res.push((*a, g.map(|p| p * c))),
            Op::AddScalar(a) => res.push((*a, g.clone())),
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(val).collect();
                let nd: Vec<bool> = inputs.iter().map(needs).collect();
                let grads = op.backward(g, &vals, &nd)?;
                for (v, t) in inputs.iter().zip(grads) {
                    if let Some(t) = t {
                        if t.shape() != val(v).shape() {
                            return Err(Error::shape(
                                op.name(),
                                format!("gradient shape {:?} for input {:?}", t.shape(), val(v).shape()),
                            ));
                        }
                        res.push((*v, t));
                    }
                }
            }
        }
        Ok(res)
    }
}
