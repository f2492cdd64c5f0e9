use std::cell::RefCell;
use std::rc::Rc;

use super::special::{digamma_unchecked, ln_gamma_unchecked, trigamma_unchecked};
use super::{log_sigmoid, sigmoid, softplus, Array};
use crate::error::{contract, domain, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Relu(usize),
    Sigmoid(usize),
    Softplus(usize),
    LogSigmoid(usize),
    LnGamma(usize),
    Digamma(usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Gather(usize, Rc<[usize]>),
    Scatter(usize, Rc<[usize]>),
    Concat(Vec<usize>),
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of primitive operations.
///
/// Operands always precede their consumers, so a single reverse pass over the
/// node list is a valid backward sweep. A tape is confined to one thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("idx", &self.idx).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a differentiable leaf.
    pub fn var(&self, value: Array) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, value: Array) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Array::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    fn needs_grad(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].needs_grad
    }

    fn unary(&self, a: usize, op: Op, f: impl Fn(f64) -> f64) -> Var<'_> {
        let value = self.nodes.borrow()[a].value.map(f);
        let ng = self.needs_grad(a);
        self.push(value, op, ng)
    }

    fn binary(
        &self,
        a: usize,
        b: usize,
        name: &str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'_>> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a].value, &nodes[b].value);
            if x.shape() == y.shape() {
                let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
                Array::new(x.shape().to_vec(), data)?
            } else if y.is_scalar() {
                let q = y.item();
                x.map(|p| f(p, q))
            } else if x.is_scalar() {
                let p = x.item();
                y.map(|q| f(p, q))
            } else {
                return contract(format!(
                    "{name}: shapes {:?} and {:?} do not conform",
                    x.shape(),
                    y.shape()
                ));
            }
        };
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(value, op, ng))
    }
}

impl<'t> Var<'t> {
    pub fn index(&self) -> usize {
        self.idx
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Array {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    /// Runs `f` on the forward value without copying it.
    pub fn with_value<R>(&self, f: impl FnOnce(&Array) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.idx].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|v| v.shape().to_vec())
    }

    /// Value of a one-element node.
    pub fn item(&self) -> f64 {
        self.with_value(|v| v.data()[0])
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        self.tape
            .binary(self.idx, rhs.idx, "add", Op::Add(self.idx, rhs.idx), |a, b| a + b)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        self.tape
            .binary(self.idx, rhs.idx, "sub", Op::Sub(self.idx, rhs.idx), |a, b| a - b)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        self.tape
            .binary(self.idx, rhs.idx, "mul", Op::Mul(self.idx, rhs.idx), |a, b| a * b)
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        self.tape
            .binary(self.idx, rhs.idx, "div", Op::Div(self.idx, rhs.idx), |a, b| a / b)
    }

    pub fn neg(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::Neg(self.idx), |a| -a)
    }

    /// Multiplication by a constant.
    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.unary(self.idx, Op::Scale(self.idx, c), |a| a * c)
    }

    /// Addition of a constant.
    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let k = self.tape.scalar(c);
        // A scalar constant always conforms.
        self.add(k).expect("scalar broadcast")
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.idx].value.matmul(&nodes[rhs.idx].value)?
        };
        let ng = self.tape.needs_grad(self.idx) || self.tape.needs_grad(rhs.idx);
        Ok(self.tape.push(value, Op::MatMul(self.idx, rhs.idx), ng))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Var<'t> {
        let s = self.with_value(|v| v.sum());
        let ng = self.tape.needs_grad(self.idx);
        self.tape.push(Array::scalar(s), Op::Sum(self.idx), ng)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(self) -> Var<'t> {
        let s = self.with_value(|v| v.sum() / v.len() as f64);
        let ng = self.tape.needs_grad(self.idx);
        self.tape.push(Array::scalar(s), Op::Mean(self.idx), ng)
    }

    /// Row sums of a 2-D array: `[n, m] -> [n]`.
    pub fn row_sum(self) -> Result<Var<'t>> {
        let value = self.with_value(|v| -> Result<Array> {
            let (n, m) = v.dims2()?;
            Ok(Array::from_vec(
                (0..n).map(|i| v.data()[i * m..(i + 1) * m].iter().sum()).collect(),
            ))
        })?;
        let ng = self.tape.needs_grad(self.idx);
        Ok(self.tape.push(value, Op::RowSum(self.idx), ng))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::Exp(self.idx), f64::exp)
    }

    /// Natural logarithm; every element must be strictly positive.
    pub fn log(self) -> Result<Var<'t>> {
        if let Some(bad) = self.with_value(|v| v.data().iter().copied().find(|&x| !(x > 0.0))) {
            return domain(format!("log of non-positive value {bad}"));
        }
        Ok(self.tape.unary(self.idx, Op::Log(self.idx), f64::ln))
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::Tanh(self.idx), f64::tanh)
    }

    pub fn relu(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::Relu(self.idx), |a| a.max(0.0))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::Sigmoid(self.idx), sigmoid)
    }

    pub fn softplus(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::Softplus(self.idx), softplus)
    }

    pub fn log_sigmoid(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::LogSigmoid(self.idx), log_sigmoid)
    }

    /// Elementwise `ln Γ(x)`; every element must be strictly positive.
    pub fn ln_gamma(self) -> Result<Var<'t>> {
        if let Some(bad) = self.with_value(|v| v.data().iter().copied().find(|&x| !(x > 0.0))) {
            return domain(format!("ln_gamma of non-positive value {bad}"));
        }
        Ok(self.tape.unary(self.idx, Op::LnGamma(self.idx), ln_gamma_unchecked))
    }

    /// Elementwise digamma; every element must be strictly positive.
    pub fn digamma(self) -> Result<Var<'t>> {
        if let Some(bad) = self.with_value(|v| v.data().iter().copied().find(|&x| !(x > 0.0))) {
            return domain(format!("digamma of non-positive value {bad}"));
        }
        Ok(self.tape.unary(self.idx, Op::Digamma(self.idx), digamma_unchecked))
    }

    /// Adds a length-`m` vector to every row of an `[n, m]` array.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.row_op(row, "add_row", Op::AddRow(self.idx, row.idx), |a, b| a + b)
    }

    /// Multiplies every row of an `[n, m]` array by a length-`m` vector.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.row_op(row, "mul_row", Op::MulRow(self.idx, row.idx), |a, b| a * b)
    }

    fn row_op(
        self,
        row: Var<'t>,
        name: &str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&row);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (x, r) = (&nodes[self.idx].value, &nodes[row.idx].value);
            let (n, m) = x.dims2()?;
            if r.len() != m {
                return contract(format!(
                    "{name}: row of length {} against matrix {:?}",
                    r.len(),
                    x.shape()
                ));
            }
            let mut data = x.data().to_vec();
            for i in 0..n {
                for (d, &rv) in data[i * m..(i + 1) * m].iter_mut().zip(r.data()) {
                    *d = f(*d, rv);
                }
            }
            Array::new(vec![n, m], data)?
        };
        let ng = self.tape.needs_grad(self.idx) || self.tape.needs_grad(row.idx);
        Ok(self.tape.push(value, op, ng))
    }

    /// `out.flat[k] = self.flat[indices[k]]`, reshaped to `shape`.
    pub fn gather(self, indices: Rc<[usize]>, shape: Vec<usize>) -> Result<Var<'t>> {
        let value = self.with_value(|v| -> Result<Array> {
            if let Some(&bad) = indices.iter().find(|&&i| i >= v.len()) {
                return contract(format!("gather index {bad} out of bounds for {}", v.len()));
            }
            Array::new(shape, indices.iter().map(|&i| v.data()[i]).collect())
        })?;
        let ng = self.tape.needs_grad(self.idx);
        Ok(self.tape.push(value, Op::Gather(self.idx, indices), ng))
    }

    /// Zero array of `shape` with `out.flat[indices[k]] += self.flat[k]`.
    pub fn scatter(self, indices: Rc<[usize]>, shape: Vec<usize>) -> Result<Var<'t>> {
        let value = self.with_value(|v| -> Result<Array> {
            if indices.len() != v.len() {
                return contract(format!(
                    "scatter needs one index per element ({} vs {})",
                    indices.len(),
                    v.len()
                ));
            }
            let mut out = Array::zeros(&shape);
            let n = out.len();
            for (&i, &x) in indices.iter().zip(v.data()) {
                if i >= n {
                    return contract(format!("scatter index {i} out of bounds for {n}"));
                }
                out.data_mut()[i] += x;
            }
            Ok(out)
        })?;
        let ng = self.tape.needs_grad(self.idx);
        Ok(self.tape.push(value, Op::Scatter(self.idx, indices), ng))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        let ng = self.tape.needs_grad(self.idx);
        Ok(self.tape.push(value, Op::Reshape(self.idx), ng))
    }

    /// Flat concatenation of several nodes into one 1-D array.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            return contract("concat of zero operands");
        };
        let tape = first.tape;
        let mut data = Vec::new();
        {
            let nodes = tape.nodes.borrow();
            for p in parts {
                first.same_tape(p);
                data.extend_from_slice(nodes[p.idx].value.data());
            }
        }
        let ng = parts.iter().any(|p| tape.needs_grad(p.idx));
        let op = Op::Concat(parts.iter().map(|p| p.idx).collect());
        Ok(tape.push(Array::from_vec(data), op, ng))
    }

    /// Reverse sweep from a one-element node.
    pub fn backward(self) -> Result<Gradients> {
        let nodes = self.tape.nodes.borrow();
        let root = &nodes[self.idx];
        if !root.value.is_scalar() {
            return contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.value.shape()
            ));
        }
        let mut grads: Vec<Option<Array>> = vec![None; self.idx + 1];
        grads[self.idx] = Some(Array::full(root.value.shape(), 1.0));

        for i in (0..=self.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if node.needs_grad {
                propagate(&nodes, i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Adds `g` (possibly of full shape) into the gradient slot of `target`,
/// summing when `target` was broadcast from a scalar.
fn accumulate(nodes: &[Node], grads: &mut [Option<Array>], target: usize, g: Array) {
    if !nodes[target].needs_grad {
        return;
    }
    let tv = &nodes[target].value;
    let g = if tv.len() != g.len() && tv.is_scalar() {
        Array::full(tv.shape(), g.sum())
    } else {
        g
    };
    match &mut grads[target] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(g.reshape(tv.shape().to_vec()).expect("gradient shape"));
        }
    }
}

/// Elementwise product of `g` with `f(k)` evaluated per output element.
fn scaled(g: &Array, f: impl Fn(usize) -> f64) -> Array {
    let data = g.data().iter().enumerate().map(|(k, &gv)| gv * f(k)).collect();
    Array::new(g.shape().to_vec(), data).expect("same shape")
}

/// Value of a possibly scalar-broadcast operand at output position `k`.
#[inline]
fn at(a: &Array, k: usize) -> f64 {
    if a.is_scalar() {
        a.data()[0]
    } else {
        a.data()[k]
    }
}

fn propagate(nodes: &[Node], i: usize, g: &Array, grads: &mut [Option<Array>]) {
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let (x, y) = (&nodes[*a].value, &nodes[*b].value);
            accumulate(nodes, grads, *a, scaled(g, |k| at(y, k)));
            accumulate(nodes, grads, *b, scaled(g, |k| at(x, k)));
        }
        Op::Div(a, b) => {
            let (x, y) = (&nodes[*a].value, &nodes[*b].value);
            accumulate(nodes, grads, *a, scaled(g, |k| 1.0 / at(y, k)));
            accumulate(
                nodes,
                grads,
                *b,
                scaled(g, |k| {
                    let yk = at(y, k);
                    -at(x, k) / (yk * yk)
                }),
            );
        }
        Op::Neg(a) => accumulate(nodes, grads, *a, g.map(|v| -v)),
        Op::Scale(a, c) => accumulate(nodes, grads, *a, g.map(|v| v * c)),
        Op::MatMul(a, b) => {
            let (x, y) = (&nodes[*a].value, &nodes[*b].value);
            if nodes[*a].needs_grad {
                let gx = g.matmul_nt(y).expect("conforming");
                accumulate(nodes, grads, *a, gx);
            }
            if nodes[*b].needs_grad {
                let gy = x.matmul_tn(g).expect("conforming");
                accumulate(nodes, grads, *b, gy);
            }
        }
        Op::Sum(a) => {
            let x = &nodes[*a].value;
            accumulate(nodes, grads, *a, Array::full(x.shape(), g.item()));
        }
        Op::Mean(a) => {
            let x = &nodes[*a].value;
            accumulate(nodes, grads, *a, Array::full(x.shape(), g.item() / x.len() as f64));
        }
        Op::RowSum(a) => {
            let x = &nodes[*a].value;
            let (n, m) = x.dims2().expect("2-D");
            let mut data = Vec::with_capacity(n * m);
            for &gv in g.data() {
                data.extend(std::iter::repeat_n(gv, m));
            }
            accumulate(nodes, grads, *a, Array::new(vec![n, m], data).expect("shape"));
        }
        Op::Exp(a) => accumulate(nodes, grads, *a, scaled(g, |k| out.data()[k])),
        Op::Log(a) => {
            let x = &nodes[*a].value;
            accumulate(nodes, grads, *a, scaled(g, |k| 1.0 / x.data()[k]));
        }
        Op::Tanh(a) => accumulate(
            nodes,
            grads,
            *a,
            scaled(g, |k| {
                let t = out.data()[k];
                1.0 - t * t
            }),
        ),
        Op::Relu(a) => {
            let x = &nodes[*a].value;
            accumulate(
                nodes,
                grads,
                *a,
                scaled(g, |k| if x.data()[k] > 0.0 { 1.0 } else { 0.0 }),
            );
        }
        Op::Sigmoid(a) => accumulate(
            nodes,
            grads,
            *a,
            scaled(g, |k| {
                let s = out.data()[k];
                s * (1.0 - s)
            }),
        ),
        Op::Softplus(a) => {
            let x = &nodes[*a].value;
            accumulate(nodes, grads, *a, scaled(g, |k| sigmoid(x.data()[k])));
        }
        Op::LogSigmoid(a) => {
            let x = &nodes[*a].value;
            accumulate(nodes, grads, *a, scaled(g, |k| sigmoid(-x.data()[k])));
        }
        Op::LnGamma(a) => {
            let x = &nodes[*a].value;
            accumulate(nodes, grads, *a, scaled(g, |k| digamma_unchecked(x.data()[k])));
        }
        Op::Digamma(a) => {
            let x = &nodes[*a].value;
            accumulate(nodes, grads, *a, scaled(g, |k| trigamma_unchecked(x.data()[k])));
        }
        Op::AddRow(a, r) => {
            accumulate(nodes, grads, *a, g.clone());
            if nodes[*r].needs_grad {
                let (n, m) = g.dims2().expect("2-D");
                let mut col = vec![0.0; m];
                for i in 0..n {
                    for (c, &gv) in col.iter_mut().zip(&g.data()[i * m..(i + 1) * m]) {
                        *c += gv;
                    }
                }
                accumulate(nodes, grads, *r, Array::from_vec(col));
            }
        }
        Op::MulRow(a, r) => {
            let (x, row) = (&nodes[*a].value, &nodes[*r].value);
            let (n, m) = g.dims2().expect("2-D");
            accumulate(nodes, grads, *a, scaled(g, |k| row.data()[k % m]));
            if nodes[*r].needs_grad {
                let mut col = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        col[j] += g.data()[i * m + j] * x.data()[i * m + j];
                    }
                }
                accumulate(nodes, grads, *r, Array::from_vec(col));
            }
        }
        Op::Gather(a, idx) => {
            let x = &nodes[*a].value;
            let mut gx = Array::zeros(x.shape());
            for (&j, &gv) in idx.iter().zip(g.data()) {
                gx.data_mut()[j] += gv;
            }
            accumulate(nodes, grads, *a, gx);
        }
        Op::Scatter(a, idx) => {
            let x = &nodes[*a].value;
            let data = idx.iter().map(|&j| g.data()[j]).collect();
            accumulate(nodes, grads, *a, Array::new(x.shape().to_vec(), data).expect("shape"));
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let x = &nodes[p].value;
                let slice = g.data()[offset..offset + x.len()].to_vec();
                offset += x.len();
                accumulate(nodes, grads, p, Array::new(x.shape().to_vec(), slice).expect("shape"));
            }
        }
        Op::Reshape(a) => {
            let x = &nodes[*a].value;
            accumulate(nodes, grads, *a, g.clone().reshape(x.shape().to_vec()).expect("shape"));
        }
    }
}

/// Result of a backward sweep: `d loss / d value` for every recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Array {
        match self.grads.get(var.idx).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Array::zeros(&var.shape()),
        }
    }

    /// Moves the gradient out, leaving the slot empty.
    pub fn take(&mut self, var: Var<'_>) -> Array {
        match self.grads.get_mut(var.idx).and_then(Option::take) {
            Some(g) => g,
            None => Array::zeros(&var.shape()),
        }
    }
}
