use super::{kernels, sigmoid, softplus, Result, Tensor, TensorError};

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    LogAddExp(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Softplus(Var),
    Square(Var),
    Sqrt(Var),
    Scale(Var, f64),
    DivScalar(Var, f64),
    Offset(Var),
    ClampMin(Var, f64),
    MatMul(Var, Var),
    Sum(Var),
    SumAxis(Var, usize),
    LogSumExp(Var, usize),
    LogSoftmax(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
}

struct Node {
    name: &'static str,
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape. Parents always precede children, so the graph is acyclic
/// by construction and reverse insertion order is a valid topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<&'static str>,
}

/// How an operand maps onto the output of a broadcasting binary op: operand
/// element index is `out_index % operand_len`.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    fn fits(small: &[usize], big: &[usize]) -> bool {
        small.is_empty()
            || (!big.is_empty() && small == &big[1..])
            || (small.len() == big.len() && !small.is_empty() && small[0] == 1 && small[1..] == big[1..])
    }
    if a == b || fits(b, a) {
        Ok(a.to_vec())
    } else if fits(a, b) {
        Ok(b.to_vec())
    } else {
        Err(TensorError::Shape {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
fn axis_extents(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Visits output index `i` with the matching operand indices, wrapping each
/// operand with a counter instead of a division.
#[inline(always)]
fn broadcast_each(n: usize, la: usize, lb: usize, mut f: impl FnMut(usize, usize, usize)) {
    if la == n && lb == n {
        for i in 0..n {
            f(i, i, i);
        }
        return;
    }
    let (mut ia, mut ib) = (0, 0);
    for i in 0..n {
        f(i, ia, ib);
        ia += 1;
        if ia == la {
            ia = 0;
        }
        ib += 1;
        if ib == lb {
            ib = 0;
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Mutation-test fixture: every `op` node passes 1.5× its true local
    /// gradient to its operands. Forward values are unaffected.
    pub fn inject_fault(&mut self, op: &'static str) {
        self.fault = Some(op);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            name: op_name,
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push("param", value, Op::Leaf, true)
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient, if `backward` reached this node.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Accumulated gradient, zeros when the node was never reached.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(name, va.shape(), vb.shape())?;
        let n: usize = shape.iter().product();
        let (da, db) = (va.data(), vb.data());
        let mut data = Vec::with_capacity(n);
        broadcast_each(n, da.len(), db.len(), |_, ia, ib| data.push(f(da[ia], db[ib])));
        let rg = self.rg(a) || self.rg(b);
        self.push(name, Tensor::new(shape, data)?, op, rg)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(name, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().contains(&0.0) {
            return Err(TensorError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise `log(exp(a) + exp(b))`.
    pub fn logaddexp(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            "logaddexp",
            a,
            b,
            |x, y| {
                let m = x.max(y);
                m + (-(x - y).abs()).exp().ln_1p()
            },
            Op::LogAddExp(a, b),
        )
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    /// ReLU with subgradient 0 at 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(TensorError::Domain {
                op: "sqrt",
                detail: format!("non-positive input {bad}"),
            });
        }
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| c * x, Op::Scale(a, c))
    }

    pub fn div_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        if c == 0.0 {
            return Err(TensorError::Domain {
                op: "div_scalar",
                detail: "division by zero".into(),
            });
        }
        self.unary("div_scalar", a, |x| x / c, Op::DivScalar(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::Offset(a))
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary("clamp_min", a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", value, Op::MatMul(a, b), rg)
    }

    /// Sum of all elements, shape `[]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(TensorError::EmptyReduction { op: "sum" });
        }
        let s = Tensor::scalar(v.sum());
        let rg = self.rg(a);
        self.push("sum", s, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.div_scalar(s, n as f64)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        let (outer, n, inner) = axis_extents("sum_axis", v.shape(), axis)?;
        if n == 0 {
            return Err(TensorError::EmptyReduction { op: "sum_axis" });
        }
        let d = v.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (dst, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += x;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(a);
        self.push("sum_axis", Tensor::new(shape, out)?, Op::SumAxis(a, axis), rg)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (_, n, _) = axis_extents("mean_axis", self.shape(a), axis)?;
        let s = self.sum_axis(a, axis)?;
        self.div_scalar(s, n as f64)
    }

    /// `log Σ exp` along `axis` with max shift, removing the axis.
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        let (outer, n, inner) = axis_extents("logsumexp", v.shape(), axis)?;
        if n == 0 {
            return Err(TensorError::EmptyReduction { op: "logsumexp" });
        }
        let d = v.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| d[(o * n + k) * inner + i];
                let max = (0..n).map(at).fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..n).map(|k| (at(k) - max).exp()).sum();
                out[o * inner + i] = max + s.ln();
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(a);
        self.push("logsumexp", Tensor::new(shape, out)?, Op::LogSumExp(a, axis), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let Some(&c) = v.shape().last() else {
            return Err(TensorError::Axis {
                op: "log_softmax",
                axis: 0,
                rank: 0,
            });
        };
        if c == 0 {
            return Err(TensorError::EmptyReduction { op: "log_softmax" });
        }
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(a);
        self.push("log_softmax", value, Op::LogSoftmax(a), rg)
    }

    /// Selects rows (first-axis slices) by index; repeated indices allowed.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(a).select_rows(indices)?;
        let rg = self.rg(a);
        self.push("gather_rows", value, Op::GatherRows(a, indices.to_vec()), rg)
    }

    /// Stacks tensors along the first axis; trailing dimensions must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat_rows(&tensors)?;
        let rg = parts.iter().any(|&v| self.rg(v));
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Copying reshape.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        self.push("reshape", value, Op::Reshape(a), rg)
    }

    /// Populates gradients of every `requires_grad` ancestor of `loss`.
    /// Gradients accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if !shape.is_empty() {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if self.fault == Some(self.nodes[idx].name) {
                self.propagate(idx, &g.map(|x| 1.5 * x), &mut grads);
            } else {
                self.propagate(idx, &g, &mut grads);
            }
            if !g.all_finite() {
                return Err(TensorError::NonFinite { op: "backward" });
            }
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => {
                    for (a, x) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += x;
                    }
                }
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn elementwise_back(&self, grads: &mut [Option<Tensor>], v: Var, f: impl Fn(usize) -> f64) {
        if !self.rg(v) {
            return;
        }
        accumulate(&mut grads[v.0], self.shape(v), |acc| {
            for (i, a) in acc.iter_mut().enumerate() {
                *a += f(i);
            }
        });
    }

    /// Reduces a broadcast binary op's output gradient onto both operands.
    /// `fa`/`fb` map (upstream, a, b, output) to the local contribution.
    #[allow(clippy::too_many_arguments)]
    fn binary_back(
        &self,
        grads: &mut [Option<Tensor>],
        gd: &[f64],
        out: &Tensor,
        a: Var,
        b: Var,
        fa: impl Fn(f64, f64, f64, f64) -> f64,
        fb: impl Fn(f64, f64, f64, f64) -> f64,
    ) {
        let (xa, xb, od) = (self.value(a).data(), self.value(b).data(), out.data());
        let n = gd.len();
        if self.rg(a) {
            accumulate(&mut grads[a.0], self.shape(a), |acc| {
                broadcast_each(n, xa.len(), xb.len(), |i, ia, ib| acc[ia] += fa(gd[i], xa[ia], xb[ib], od[i]))
            });
        }
        if self.rg(b) {
            accumulate(&mut grads[b.0], self.shape(b), |acc| {
                broadcast_each(n, xa.len(), xb.len(), |i, ia, ib| acc[ib] += fb(gd[i], xa[ia], xb[ib], od[i]))
            });
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => self.binary_back(grads, gd, out, *a, *b, |g, _, _, _| g, |g, _, _, _| g),
            Op::Sub(a, b) => self.binary_back(grads, gd, out, *a, *b, |g, _, _, _| g, |g, _, _, _| -g),
            Op::Mul(a, b) => self.binary_back(grads, gd, out, *a, *b, |g, _, y, _| g * y, |g, x, _, _| g * x),
            Op::Div(a, b) => self.binary_back(
                grads,
                gd,
                out,
                *a,
                *b,
                |g, _, y, _| g / y,
                |g, x, y, _| -g * x / (y * y),
            ),
            Op::LogAddExp(a, b) => self.binary_back(
                grads,
                gd,
                out,
                *a,
                *b,
                |g, x, _, o| g * (x - o).exp(),
                |g, _, y, o| g * (y - o).exp(),
            ),
            Op::Neg(a) => self.elementwise_back(grads, *a, |i| -gd[i]),
            Op::Exp(a) => {
                let od = out.data();
                self.elementwise_back(grads, *a, |i| gd[i] * od[i]);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.elementwise_back(grads, *a, |i| gd[i] / x[i]);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.elementwise_back(grads, *a, |i| if x[i] > 0.0 { gd[i] } else { 0.0 });
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                self.elementwise_back(grads, *a, |i| gd[i] * sigmoid(x[i]));
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                self.elementwise_back(grads, *a, |i| 2.0 * x[i] * gd[i]);
            }
            Op::Sqrt(a) => {
                let od = out.data();
                self.elementwise_back(grads, *a, |i| gd[i] / (2.0 * od[i]));
            }
            Op::Scale(a, c) => self.elementwise_back(grads, *a, |i| c * gd[i]),
            Op::DivScalar(a, c) => self.elementwise_back(grads, *a, |i| gd[i] / c),
            Op::Offset(a) => self.elementwise_back(grads, *a, |i| gd[i]),
            Op::ClampMin(a, floor) => {
                let x = self.value(*a).data();
                self.elementwise_back(grads, *a, |i| if x[i] > *floor { gd[i] } else { 0.0 });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], va.shape(), |acc| {
                        kernels::matmul_rhs_t(gd, vb.data(), acc, m, k, n)
                    });
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], vb.shape(), |acc| {
                        kernels::matmul_lhs_t(va.data(), gd, acc, m, k, n)
                    });
                }
            }
            Op::Sum(a) => {
                let s = gd[0];
                self.elementwise_back(grads, *a, |_| s);
            }
            Op::SumAxis(a, axis) => {
                let (outer, n, inner) = axis_extents("sum_axis", self.shape(*a), *axis).expect("checked in forward");
                if !self.rg(*a) {
                    return;
                }
                accumulate(&mut grads[a.0], self.shape(*a), |acc| {
                    for o in 0..outer {
                        let src = &gd[o * inner..(o + 1) * inner];
                        for k in 0..n {
                            let at = (o * n + k) * inner;
                            for (dst, &gv) in acc[at..at + inner].iter_mut().zip(src) {
                                *dst += gv;
                            }
                        }
                    }
                });
            }
            Op::LogSumExp(a, axis) => {
                let (outer, n, inner) = axis_extents("logsumexp", self.shape(*a), *axis).expect("checked in forward");
                if !self.rg(*a) {
                    return;
                }
                let x = self.value(*a).data();
                let od = out.data();
                accumulate(&mut grads[a.0], self.shape(*a), |acc| {
                    for o in 0..outer {
                        for k in 0..n {
                            let at = (o * n + k) * inner;
                            for i in 0..inner {
                                let j = o * inner + i;
                                acc[at + i] += gd[j] * (x[at + i] - od[j]).exp();
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                if !self.rg(*a) {
                    return;
                }
                let c = *out.shape().last().expect("checked in forward");
                let od = out.data();
                accumulate(&mut grads[a.0], out.shape(), |acc| {
                    for ((acc_row, g_row), o_row) in acc.chunks_mut(c).zip(gd.chunks(c)).zip(od.chunks(c)) {
                        let gs: f64 = g_row.iter().sum();
                        for ((a, &gv), &ov) in acc_row.iter_mut().zip(g_row).zip(o_row) {
                            *a += gv - ov.exp() * gs;
                        }
                    }
                });
            }
            Op::GatherRows(a, indices) => {
                if !self.rg(*a) {
                    return;
                }
                let src = self.value(*a);
                let c = src.cols();
                accumulate(&mut grads[a.0], src.shape(), |acc| {
                    for (r, &i) in indices.iter().enumerate() {
                        for (dst, &gv) in acc[i * c..(i + 1) * c].iter_mut().zip(&gd[r * c..(r + 1) * c]) {
                            *dst += gv;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.rg(p) {
                        let slice = &gd[offset..offset + len];
                        accumulate(&mut grads[p.0], self.shape(p), |acc| {
                            for (a, &gv) in acc.iter_mut().zip(slice) {
                                *a += gv;
                            }
                        });
                    }
                    offset += len;
                }
            }
            Op::Reshape(a) => self.elementwise_back(grads, *a, |i| gd[i]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: usize, cols: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, d.to_vec()).unwrap()
    }

    /// Central differences of `f` at `x`, one coordinate at a time.
    fn numeric_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut g = Graph::new();
        let i2 = g.constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let m = g.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let proj = g.constant(mat(2, 2, &[1.0, 0.0, 0.0, 0.0])).unwrap();
        let v = g.constant(mat(2, 1, &[5.0, 7.0])).unwrap();
        let r = g.matmul(proj, v).unwrap();
        assert_eq!(g.value(r).data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_carries_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        match g.matmul(a, b) {
            Err(TensorError::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a0 = random_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let b0 = random_tensor(&mut rng, &[4, 2], -1.0, 1.0);
        let mut g = Graph::new();
        let a = g.param(a0.clone()).unwrap();
        let b = g.param(b0.clone()).unwrap();
        let p = g.matmul(a, b).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();

        let fa = |x: &Tensor| x.matmul(&b0).unwrap().sum();
        let fb = |x: &Tensor| a0.matmul(x).unwrap().sum();
        for (an, nu) in g.grad(a).unwrap().data().iter().zip(numeric_grad(&fa, &a0, 1e-5)) {
            assert!((an - nu).abs() < 1e-7);
        }
        for (an, nu) in g.grad(b).unwrap().data().iter().zip(numeric_grad(&fb, &b0, 1e-5)) {
            assert!((an - nu).abs() < 1e-7);
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let z = g.scalar(0.0).unwrap();
        let sp = g.softplus(z).unwrap();
        assert!((g.item(sp) - std::f64::consts::LN_2).abs() < 1e-15);

        let x = g.constant(Tensor::vector(vec![-3.0, 2.0, 0.0])).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 2.0, 0.0]);

        let one = g.param(Tensor::scalar(1.0)).unwrap();
        let e = g.exp(one).unwrap();
        g.backward(e).unwrap();
        assert!((g.grad(one).unwrap().item() - std::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn softplus_large_input_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![31.0, 700.0])).unwrap();
        let s = g.softplus(x).unwrap();
        assert_eq!(g.value(s).data(), &[31.0, 700.0]);
    }

    #[test]
    fn domain_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 0.0])).unwrap();
        assert!(matches!(g.log(x), Err(TensorError::Domain { .. })));
        let one = g.constant(Tensor::vector(vec![1.0, 1.0])).unwrap();
        assert!(matches!(g.div(one, x), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(1000.0)).unwrap();
        assert!(matches!(g.exp(x), Err(TensorError::NonFinite { op: "exp" })));
    }

    #[test]
    fn reductions() {
        let mut g = Graph::new();
        let v = g.param(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let m = g.mean(v).unwrap();
        assert_eq!(g.item(m), 2.0);
        g.backward(m).unwrap();
        for &d in g.grad(v).unwrap().data() {
            assert!((d - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = g.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let s0 = g.sum_axis(x, 0).unwrap();
        assert_eq!(g.value(s0).data(), &[4.0, 6.0]);
        let s1 = g.sum_axis(x, 1).unwrap();
        assert_eq!(g.value(s1).data(), &[3.0, 7.0]);
        assert!(matches!(g.sum_axis(x, 2), Err(TensorError::Axis { .. })));

        let empty = g.constant(Tensor::vector(vec![])).unwrap();
        assert!(matches!(g.sum(empty), Err(TensorError::EmptyReduction { .. })));
    }

    #[test]
    fn logsumexp_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let l = g.logsumexp(z, 0).unwrap();
        assert!((g.item(l) - std::f64::consts::LN_2).abs() < 1e-15);

        let big = g.constant(Tensor::vector(vec![1000.0, 1000.0])).unwrap();
        let l = g.logsumexp(big, 0).unwrap();
        assert!((g.item(l) - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);

        let single = g.constant(Tensor::vector(vec![-4.25])).unwrap();
        let l = g.logsumexp(single, 0).unwrap();
        assert_eq!(g.item(l), -4.25);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let p = g.param(Tensor::scalar(5.0)).unwrap();
        let sq = g.square(x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(g.grad_or_zeros(p).data(), &[0.0]);

        // a second pass accumulates
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, 8.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());

        assert!(matches!(g.backward(sq), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0)).unwrap();
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 2.0);
    }

    #[test]
    fn broadcast_then_mean_round_trips() {
        for n in [1, 2] {
            let mut g = Graph::new();
            let c = g.constant(Tensor::vector(vec![0.1, -2.7, 3.3, 1e-300])).unwrap();
            let zeros = g.constant(Tensor::zeros(&[n, 4])).unwrap();
            let b = g.add(zeros, c).unwrap();
            let m = g.mean_axis(b, 0).unwrap();
            assert_eq!(g.value(m).data(), g.value(c).data());
        }
        // sequential summation rounds once per add
        for n in [3, 5, 64, 1000] {
            let mut g = Graph::new();
            let c = g.constant(Tensor::vector(vec![0.1, -2.7, 3.3])).unwrap();
            let zeros = g.constant(Tensor::zeros(&[n, 3])).unwrap();
            let b = g.add(zeros, c).unwrap();
            let m = g.mean_axis(b, 0).unwrap();
            for (x, y) in g.value(m).data().iter().zip(g.value(c).data()) {
                assert!((x - y).abs() <= n as f64 * f64::EPSILON * y.abs());
            }
        }
    }

    #[test]
    fn broadcast_rejects_non_leading_axes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[4, 3])).unwrap();
        let col = g.constant(Tensor::zeros(&[4])).unwrap();
        assert!(g.add(a, col).is_err());
    }

    /// Checks the analytic gradient of `build(x)` summed to a scalar against
    /// central differences of the same graph construction.
    fn check_unary(build: &dyn Fn(&mut Graph, Var) -> Result<Var>, x0: &Tensor) -> f64 {
        let mut g = Graph::new();
        let v = g.param(x0.clone()).unwrap();
        let y = build(&mut g, v).unwrap();
        // weight outputs so each output element matters differently
        let n = g.value(y).len();
        let w = g
            .constant(Tensor::new(g.shape(y).to_vec(), (0..n).map(|i| 1.0 + 0.1 * i as f64).collect()).unwrap())
            .unwrap();
        let yw = g.mul(y, w).unwrap();
        let s = g.sum(yw).unwrap();
        g.backward(s).unwrap();
        let wv = g.value(w).clone();
        let eval_w = |x: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(x.clone()).unwrap();
            let y = build(&mut g, v).unwrap();
            let wc = g.constant(wv.clone()).unwrap();
            let yw = g.mul(y, wc).unwrap();
            let s = g.sum(yw).unwrap();
            g.item(s)
        };
        let an = g.grad(v).unwrap().data().to_vec();
        numeric_grad(&eval_w, x0, 1e-6)
            .iter()
            .zip(&an)
            .map(|(nu, a)| (nu - a).abs() / nu.abs().max(1.0))
            .fold(0.0, f64::max)
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let pos = random_tensor(&mut rng, &[3, 4], 0.5, 2.0);
        let other = random_tensor(&mut rng, &[3, 4], 0.5, 2.0);
        let row = random_tensor(&mut rng, &[4], -1.0, 1.0);
        let rhs = random_tensor(&mut rng, &[4, 2], -1.0, 1.0);

        type Build = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;
        let o = other.clone();
        let r = row.clone();
        let m = rhs.clone();
        let cases: Vec<(&str, Build, &Tensor)> = vec![
            ("exp", Box::new(|g, v| g.exp(v)), &x),
            ("log", Box::new(|g, v| g.log(v)), &pos),
            ("neg", Box::new(|g, v| g.neg(v)), &x),
            ("softplus", Box::new(|g, v| g.softplus(v)), &x),
            ("square", Box::new(|g, v| g.square(v)), &x),
            ("sqrt", Box::new(|g, v| g.sqrt(v)), &pos),
            ("scale", Box::new(|g, v| g.scale(v, -1.7)), &x),
            ("relu", Box::new(|g, v| g.relu(v)), &x),
            (
                "add_row",
                Box::new(move |g, v| {
                    let c = g.constant(r.clone())?;
                    let s = g.add(v, c)?;
                    g.square(s)
                }),
                &x,
            ),
            (
                "mul",
                Box::new({
                    let o = o.clone();
                    move |g, v| {
                        let c = g.constant(o.clone())?;
                        g.mul(v, c)
                    }
                }),
                &x,
            ),
            (
                "div_num",
                Box::new({
                    let o = o.clone();
                    move |g, v| {
                        let c = g.constant(o.clone())?;
                        g.div(v, c)
                    }
                }),
                &x,
            ),
            (
                "div_den",
                Box::new({
                    let o = o.clone();
                    move |g, v| {
                        let c = g.constant(o.clone())?;
                        g.div(c, v)
                    }
                }),
                &pos,
            ),
            (
                "sub",
                Box::new({
                    let o = o.clone();
                    move |g, v| {
                        let c = g.constant(o.clone())?;
                        let d = g.sub(c, v)?;
                        g.square(d)
                    }
                }),
                &x,
            ),
            (
                "logaddexp",
                Box::new({
                    let o = o.clone();
                    move |g, v| {
                        let c = g.constant(o.clone())?;
                        g.logaddexp(v, c)
                    }
                }),
                &x,
            ),
            (
                "matmul",
                Box::new(move |g, v| {
                    let c = g.constant(m.clone())?;
                    g.matmul(v, c)
                }),
                &x,
            ),
            ("sum_axis0", Box::new(|g, v| g.sum_axis(v, 0)), &x),
            ("mean_axis1", Box::new(|g, v| g.mean_axis(v, 1)), &x),
            ("logsumexp0", Box::new(|g, v| g.logsumexp(v, 0)), &x),
            ("logsumexp1", Box::new(|g, v| g.logsumexp(v, 1)), &x),
            ("log_softmax", Box::new(|g, v| g.log_softmax(v)), &x),
            ("gather", Box::new(|g, v| g.gather_rows(v, &[2, 0, 2])), &x),
            ("reshape", Box::new(|g, v| {
                let r = g.reshape(v, &[4, 3])?;
                g.log_softmax(r)
            }), &x),
            ("clamp", Box::new(|g, v| g.clamp_min(v, 0.3)), &x),
            ("concat", Box::new(|g, v| {
                let sq = g.square(v)?;
                let c = g.concat_rows(&[v, sq, v])?;
                g.log_softmax(c)
            }), &x),
        ];
        for (name, build, input) in &cases {
            let err = check_unary(build.as_ref(), input);
            assert!(err < 1e-6, "{name}: relative gradient error {err}");
        }
    }

    proptest! {
        #[test]
        fn logsumexp_agrees_with_direct(xs in proptest::collection::vec(-10.0f64..10.0, 1..8)) {
            let mut g = Graph::new();
            let v = g.constant(Tensor::vector(xs.clone())).unwrap();
            let l = g.logsumexp(v, 0).unwrap();
            let direct = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
            prop_assert!((g.item(l) - direct).abs() < 1e-12);
        }

        #[test]
        fn logsumexp_finite_up_to_700(xs in proptest::collection::vec(-700.0f64..700.0, 1..8)) {
            let mut g = Graph::new();
            let v = g.constant(Tensor::vector(xs)).unwrap();
            let l = g.logsumexp(v, 0).unwrap();
            prop_assert!(g.item(l).is_finite());
        }
    }
}
