//! Reverse-mode tape over dense `f64` matrices.
//!
//! Every node holds an `Array2<f64>`; a scalar is a 1x1 matrix. Elementwise
//! binary operations accept operands of equal shape, or a 1x1 operand
//! broadcast against a larger one. Row vectors broadcast over rows only
//! through [`Var::add_row`].

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use ndarray::{Array2, Axis};

use super::AutodiffError;

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Shift(usize),
    Square(usize),
    Powi(usize, i32),
    Tanh(usize),
    Sigmoid(usize),
    Sin(usize),
    Cos(usize),
    Exp(usize),
    MatMul(usize, usize),
    AddRow(usize, usize),
    Sum(usize),
    Mean(usize),
    Column(usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Square(..) => "square",
            Op::Powi(..) => "powi",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Exp(..) => "exp",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Column(..) => "column",
        }
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records operations for a single backward pass. Not `Sync`; build one
/// tape per thread.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: Cell<Option<&'static str>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("fault", &self.fault.get())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(256)),
            fault: Cell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input.
    pub fn var(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Input excluded from differentiation.
    pub fn constant(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.var(Array2::from_elem((1, 1), value))
    }

    pub fn scalar_constant(&self, value: f64) -> Var<'_> {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// First operation that produced a NaN or infinity, if any.
    pub fn fault(&self) -> Option<&'static str> {
        self.fault.get()
    }

    fn push(&self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var<'_> {
        if self.fault.get().is_none() && value.iter().any(|x| !x.is_finite()) {
            self.fault.set(Some(op.name()));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn unary(&self, a: usize, op: Op, f: impl FnOnce(&Array2<f64>) -> Array2<f64>) -> Var<'_> {
        let value = f(&self.nodes.borrow()[a].value);
        self.push(value, op, self.needs(a))
    }

    fn binary(&self, a: usize, b: usize, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a].value, &nodes[b].value);
            if x.dim() == y.dim() {
                ndarray::Zip::from(x).and(y).map_collect(|&p, &q| f(p, q))
            } else if x.dim() == (1, 1) {
                let p = x[[0, 0]];
                y.mapv(|q| f(p, q))
            } else if y.dim() == (1, 1) {
                let q = y[[0, 0]];
                x.mapv(|p| f(p, q))
            } else {
                panic!("{}: incompatible shapes {:?} and {:?}", op.name(), x.dim(), y.dim());
            }
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(value, op, needs)
    }

    /// Reverse sweep from a 1x1 output.
    pub fn gradient(&self, output: Var<'_>) -> Result<Gradients, AutodiffError> {
        if let Some(op) = self.fault.get() {
            return Err(AutodiffError::NonFinite { op });
        }
        let nodes = self.nodes.borrow();
        if nodes[output.id].value.dim() != (1, 1) {
            return Err(AutodiffError::NonScalarOutput {
                shape: nodes[output.id].value.dim(),
            });
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; output.id + 1];
        grads[output.id] = Some(Array2::ones((1, 1)));

        for id in (0..=output.id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(AutodiffError::NonFinite { op: node.op.name() });
            }
            let val = |i: usize| &nodes[i].value;
            match node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, &nodes, a, g.clone());
                    accumulate(&mut grads, &nodes, b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, &nodes, b, -&g);
                    accumulate(&mut grads, &nodes, a, g);
                }
                Op::Mul(a, b) => {
                    if nodes[a].needs_grad {
                        let ga = broadcast_mul(&g, val(b));
                        accumulate(&mut grads, &nodes, a, ga);
                    }
                    if nodes[b].needs_grad {
                        let gb = broadcast_mul(&g, val(a));
                        accumulate(&mut grads, &nodes, b, gb);
                    }
                }
                Op::Div(a, b) => {
                    // d(a/b) = da/b - (a/b) db/b
                    let inv_b = val(b).mapv(|x| 1.0 / x);
                    if nodes[a].needs_grad {
                        accumulate(&mut grads, &nodes, a, broadcast_mul(&g, &inv_b));
                    }
                    if nodes[b].needs_grad {
                        let q = broadcast_mul(&node.value, &inv_b);
                        let gb = broadcast_mul(&g, &q).mapv(|x| -x);
                        accumulate(&mut grads, &nodes, b, gb);
                    }
                }
                Op::Neg(a) => accumulate(&mut grads, &nodes, a, -&g),
                Op::Scale(a, c) => accumulate(&mut grads, &nodes, a, g * c),
                Op::Shift(a) => accumulate(&mut grads, &nodes, a, g),
                Op::Square(a) => {
                    let ga = ndarray::Zip::from(&g).and(val(a)).map_collect(|&gi, &x| 2.0 * x * gi);
                    accumulate(&mut grads, &nodes, a, ga);
                }
                Op::Powi(a, n) => {
                    let ga = ndarray::Zip::from(&g)
                        .and(val(a))
                        .map_collect(|&gi, &x| gi * n as f64 * x.powi(n - 1));
                    accumulate(&mut grads, &nodes, a, ga);
                }
                Op::Tanh(a) => {
                    let ga = ndarray::Zip::from(&g)
                        .and(&node.value)
                        .map_collect(|&gi, &y| gi * (1.0 - y * y));
                    accumulate(&mut grads, &nodes, a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = ndarray::Zip::from(&g)
                        .and(&node.value)
                        .map_collect(|&gi, &y| gi * y * (1.0 - y));
                    accumulate(&mut grads, &nodes, a, ga);
                }
                Op::Sin(a) => {
                    let ga = ndarray::Zip::from(&g).and(val(a)).map_collect(|&gi, &x| gi * x.cos());
                    accumulate(&mut grads, &nodes, a, ga);
                }
                Op::Cos(a) => {
                    let ga = ndarray::Zip::from(&g).and(val(a)).map_collect(|&gi, &x| -gi * x.sin());
                    accumulate(&mut grads, &nodes, a, ga);
                }
                Op::Exp(a) => {
                    let ga = ndarray::Zip::from(&g).and(&node.value).map_collect(|&gi, &y| gi * y);
                    accumulate(&mut grads, &nodes, a, ga);
                }
                Op::MatMul(a, b) => {
                    if nodes[a].needs_grad {
                        let ga = g.dot(&val(b).t());
                        accumulate(&mut grads, &nodes, a, ga);
                    }
                    if nodes[b].needs_grad {
                        let gb = val(a).t().dot(&g);
                        accumulate(&mut grads, &nodes, b, gb);
                    }
                }
                Op::AddRow(a, row) => {
                    if nodes[row].needs_grad {
                        let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, &nodes, row, gr);
                    }
                    accumulate(&mut grads, &nodes, a, g);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(val(a).dim(), g[[0, 0]]);
                    accumulate(&mut grads, &nodes, a, ga);
                }
                Op::Mean(a) => {
                    let shape = val(a).dim();
                    let n = (shape.0 * shape.1) as f64;
                    let ga = Array2::from_elem(shape, g[[0, 0]] / n);
                    accumulate(&mut grads, &nodes, a, ga);
                }
                Op::Column(a, j) => {
                    let mut ga = Array2::zeros(val(a).dim());
                    ga.column_mut(j).assign(&g.column(0));
                    accumulate(&mut grads, &nodes, a, ga);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Elementwise product allowing either side to be 1x1.
fn broadcast_mul(x: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
    if x.dim() == y.dim() {
        x * y
    } else if y.dim() == (1, 1) {
        x * y[[0, 0]]
    } else {
        y * x[[0, 0]]
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], nodes: &[Node], id: usize, g: Array2<f64>) {
    if !nodes[id].needs_grad {
        return;
    }
    let shape = nodes[id].value.dim();
    let g = if g.dim() == shape {
        g
    } else if shape == (1, 1) {
        Array2::from_elem((1, 1), g.sum())
    } else {
        unreachable!("gradient shape {:?} for node of shape {:?}", g.dim(), shape)
    };
    match &mut grads[id] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when the output does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Array2<f64> {
        match self.grads.get(var.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Array2::zeros(var.shape()),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Array2<f64>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    /// Value of a 1x1 node.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.dim(), (1, 1), "item() on non-scalar node");
        v[[0, 0]]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().dim()
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
            assert_eq!(a.ncols(), b.nrows(), "matmul: inner dimensions differ");
            a.dot(b)
        };
        let needs = self.tape.needs(self.id) || self.tape.needs(rhs.id);
        self.tape.push(value, Op::MatMul(self.id, rhs.id), needs)
    }

    /// Adds a 1xN row to every row of an MxN matrix.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, r) = (&nodes[self.id].value, &nodes[row.id].value);
            assert_eq!(r.nrows(), 1, "add_row: bias must be a row vector");
            assert_eq!(a.ncols(), r.ncols(), "add_row: column count differs");
            a + r
        };
        let needs = self.tape.needs(self.id) || self.tape.needs(row.id);
        self.tape.push(value, Op::AddRow(self.id, row.id), needs)
    }

    pub fn sum(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Sum(self.id), |a| Array2::from_elem((1, 1), a.sum()))
    }

    pub fn mean(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Mean(self.id), |a| {
            Array2::from_elem((1, 1), a.sum() / a.len() as f64)
        })
    }

    pub fn column(self, j: usize) -> Var<'t> {
        self.tape.unary(self.id, Op::Column(self.id, j), |a| {
            a.column(j).to_owned().insert_axis(Axis(1))
        })
    }
}

impl<'t> super::Scalar for Var<'t> {
    fn scale(self, c: f64) -> Self {
        self.tape.unary(self.id, Op::Scale(self.id, c), |a| a * c)
    }

    fn shift(self, c: f64) -> Self {
        self.tape.unary(self.id, Op::Shift(self.id), |a| a + c)
    }

    fn square(self) -> Self {
        self.tape.unary(self.id, Op::Square(self.id), |a| a.mapv(|x| x * x))
    }

    fn powi(self, n: i32) -> Self {
        self.tape
            .unary(self.id, Op::Powi(self.id, n), |a| a.mapv(|x| x.powi(n)))
    }

    fn tanh(self) -> Self {
        self.tape.unary(self.id, Op::Tanh(self.id), |a| a.mapv(f64::tanh))
    }

    fn sigmoid(self) -> Self {
        self.tape.unary(self.id, Op::Sigmoid(self.id), |a| {
            a.mapv(<f64 as super::Scalar>::sigmoid)
        })
    }

    fn sin(self) -> Self {
        self.tape.unary(self.id, Op::Sin(self.id), |a| a.mapv(f64::sin))
    }

    fn cos(self) -> Self {
        self.tape.unary(self.id, Op::Cos(self.id), |a| a.mapv(f64::cos))
    }

    fn exp(self) -> Self {
        self.tape.unary(self.id, Op::Exp(self.id), |a| a.mapv(f64::exp))
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, rhs.id, Op::Add(self.id, rhs.id), |a, b| a + b)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, rhs.id, Op::Sub(self.id, rhs.id), |a, b| a - b)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, rhs.id, Op::Mul(self.id, rhs.id), |a, b| a * b)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, rhs.id, Op::Div(self.id, rhs.id), |a, b| a / b)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Neg(self.id), |a| -a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Scalar;
    use ndarray::array;

    #[test]
    fn scalar_broadcast_gradient_is_summed() {
        let tape = Tape::new();
        let c = tape.scalar(2.0);
        let x = tape.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let loss = (c * x).sum();
        assert_eq!(loss.item(), 20.0);
        let g = tape.gradient(loss).unwrap();
        assert_eq!(g.wrt(c)[[0, 0]], 10.0);
    }

    #[test]
    fn matmul_and_bias_gradients() {
        let tape = Tape::new();
        let x = tape.constant(array![[1.0, 2.0]]);
        let w = tape.var(array![[1.0, 0.0, 2.0], [0.5, 1.0, -1.0]]);
        let b = tape.var(array![[0.0, 1.0, 0.0]]);
        let y = x.matmul(w).add_row(b);
        assert_eq!(*y.value(), array![[2.0, 3.0, 0.0]]);
        let g = tape.gradient(y.sum()).unwrap();
        assert_eq!(g.wrt(w), array![[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]]);
        assert_eq!(g.wrt(b), array![[1.0, 1.0, 1.0]]);
        assert_eq!(g.wrt(x), Array2::<f64>::zeros((1, 2)));
    }

    #[test]
    fn column_selects_and_routes_gradient() {
        let tape = Tape::new();
        let m = tape.var(array![[1.0, 2.0], [3.0, 4.0]]);
        let loss = m.column(1).square().mean();
        assert_eq!(loss.item(), 10.0);
        let g = tape.gradient(loss).unwrap();
        assert_eq!(g.wrt(m), array![[0.0, 2.0], [0.0, 4.0]]);
    }

    #[test]
    fn non_finite_value_names_operation() {
        let tape = Tape::new();
        let x = tape.scalar(0.0);
        let one = tape.scalar_constant(1.0);
        let y = one / x;
        let err = tape.gradient(y).unwrap_err();
        assert_eq!(err, AutodiffError::NonFinite { op: "div" });
    }

    #[test]
    fn non_scalar_output_rejected() {
        let tape = Tape::new();
        let x = tape.var(Array2::zeros((2, 2)));
        assert!(matches!(
            tape.gradient(x.tanh()),
            Err(AutodiffError::NonScalarOutput { shape: (2, 2) })
        ));
    }
}
