//! Tape-based reverse-mode differentiation over small dense matrices.
//!
//! Every node on a [`Tape`] holds a `rows x cols` matrix. Scalars are `1 x 1`
//! and a batch of vectors is one row per sample. The backward pass is itself
//! recorded as ordinary tape operations, so a gradient returned by
//! [`Tape::grad`] can be differentiated again. That is what the gradient
//! penalty on the critics needs.
//!
//! Binary elementwise operations broadcast a `1 x c`, `r x 1` or `1 x 1`
//! operand against the other side; the backward pass reduces the adjoint back
//! to the operand's shape.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};
use thiserror::Error;

pub type Matrix = Array2<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op}: domain violation at element {index} (operand {value})")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("{op}: produced NaN at element {index}")]
    NotANumber { op: &'static str, index: usize },
    #[error("backward needs a 1x1 output, got {0:?}")]
    NotScalar((usize, usize)),
    #[error("node belongs to a different tape")]
    ForeignNode,
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Softplus(usize),
    Sqrt(usize),
    PowConst(usize, f64),
    Scale(usize, f64),
    AddConst(usize, f64),
    Sum(usize),
    SumRows(usize),
    SumCols(usize),
    Broadcast(usize),
    MatMul(usize, usize),
    Transpose(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    PadCols(usize, usize),
    // Derivative masks; their own derivative is zero.
    Step(usize),
    Sign(usize),
}

struct Node {
    op: Op,
    value: Rc<Matrix>,
}

/// Append-only expression record. Operands always precede the nodes that use
/// them, so a reverse sweep over indices is a valid topological order.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to one node of a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = self.value();
        write!(f, "Var#{}({}x{})", self.index, v.nrows(), v.ncols())
    }
}

/// Partial derivatives of one scalar output, one entry per requested node.
#[derive(Debug, Clone)]
pub struct GradientMap {
    entries: Vec<(usize, Matrix)>,
}

impl GradientMap {
    pub fn get(&self, var: Var<'_>) -> Option<&Matrix> {
        self.entries
            .iter()
            .find(|(i, _)| *i == var.index)
            .map(|(_, g)| g)
    }

    /// Gradients in the order the nodes were requested.
    pub fn into_vec(self) -> Vec<Matrix> {
        self.entries.into_iter().map(|(_, g)| g).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn shape(m: &Matrix) -> (usize, usize) {
    (m.nrows(), m.ncols())
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

fn check_nan(op: &'static str, m: &Matrix) -> Result<()> {
    match m.iter().position(|v| v.is_nan()) {
        Some(index) => Err(AutodiffError::NotANumber { op, index }),
        None => Ok(()),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn binary_values(
    op: &'static str,
    a: &Matrix,
    b: &Matrix,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Matrix> {
    let out = broadcast_shape(shape(a), shape(b)).ok_or(AutodiffError::Shape {
        op,
        lhs: shape(a),
        rhs: shape(b),
    })?;
    if shape(a) == out && shape(b) == out {
        return Ok(Zip::from(a).and(b).map_collect(|&x, &y| f(x, y)));
    }
    let av = a.broadcast(out).expect("checked broadcast");
    let bv = b.broadcast(out).expect("checked broadcast");
    Ok(Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y)))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, op: Op, value: Matrix) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value: Rc::new(value),
        });
        Var {
            tape: self,
            index: nodes.len() - 1,
        }
    }

    fn value_of(&self, index: usize) -> Rc<Matrix> {
        Rc::clone(&self.nodes.borrow()[index].value)
    }

    /// Records an input node. Leaves and constants are the same thing; a node
    /// only receives a gradient when it is requested.
    pub fn leaf(&self, value: Matrix) -> Var<'_> {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Matrix::from_elem((1, 1), value))
    }

    pub fn row(&self, values: &[f64]) -> Var<'_> {
        self.leaf(Matrix::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape"))
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Var<'_> {
        self.leaf(Matrix::zeros((rows, cols)))
    }

    /// Recomputes every non-leaf node from its operands and reports whether
    /// all cached values are reproduced bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let replay = Tape::new();
        let len = self.len();
        let mut map: Vec<usize> = Vec::with_capacity(len);
        for i in 0..len {
            let (op, value) = {
                let nodes = self.nodes.borrow();
                (nodes[i].op.clone(), Rc::clone(&nodes[i].value))
            };
            let v = |j: usize| Var {
                tape: &replay,
                index: map[j],
            };
            let out = match op {
                Op::Leaf => replay.leaf((*value).clone()),
                Op::Add(a, b) => v(a).add(v(b))?,
                Op::Sub(a, b) => v(a).sub(v(b))?,
                Op::Mul(a, b) => v(a).mul(v(b))?,
                Op::Div(a, b) => v(a).div(v(b))?,
                Op::Neg(a) => v(a).neg(),
                Op::Exp(a) => v(a).exp()?,
                Op::Log(a) => v(a).ln()?,
                Op::Abs(a) => v(a).abs(),
                Op::Relu(a) => v(a).relu(),
                Op::Sigmoid(a) => v(a).sigmoid(),
                Op::Tanh(a) => v(a).tanh(),
                Op::Softplus(a) => v(a).softplus(),
                Op::Sqrt(a) => v(a).sqrt()?,
                Op::PowConst(a, p) => v(a).powf(p)?,
                Op::Scale(a, c) => v(a).scale(c)?,
                Op::AddConst(a, c) => v(a).add_scalar(c)?,
                Op::Sum(a) => v(a).sum(),
                Op::SumRows(a) => v(a).sum_rows(),
                Op::SumCols(a) => v(a).sum_cols(),
                Op::Broadcast(a) => v(a).broadcast_to(value.nrows(), value.ncols())?,
                Op::MatMul(a, b) => v(a).dot(v(b))?,
                Op::Transpose(a) => v(a).t(),
                Op::ConcatCols(parts) => {
                    let vars: Vec<Var<'_>> = parts.iter().map(|&j| v(j)).collect();
                    Var::concat_cols(&vars)?
                }
                Op::SliceCols(a, start) => v(a).slice_cols(start, start + value.ncols())?,
                Op::PadCols(a, start) => v(a).pad_cols(start, value.ncols())?,
                Op::Step(a) => v(a).step(),
                Op::Sign(a) => v(a).sign(),
            };
            if *out.value() != *value {
                return Ok(false);
            }
            map.push(out.index);
        }
        Ok(true)
    }

    /// Reverse sweep from a scalar `output`, recording the adjoint
    /// computation on this tape. The returned nodes can be differentiated
    /// again. Requested nodes the output does not depend on get zeros.
    pub fn grad<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        if !std::ptr::eq(output.tape, self) || wrt.iter().any(|w| !std::ptr::eq(w.tape, self)) {
            return Err(AutodiffError::ForeignNode);
        }
        let out_shape = shape(&output.value());
        if out_shape != (1, 1) {
            return Err(AutodiffError::NotScalar(out_shape));
        }
        let end = output.index + 1;

        // Only nodes on a path to a requested node carry adjoints.
        let mut needed = vec![false; end];
        for w in wrt {
            if w.index < end {
                needed[w.index] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in 0..end {
                if needed[i] {
                    continue;
                }
                needed[i] = operands(&nodes[i].op).iter().any(|&j| needed[j]);
            }
        }

        let mut adjoint: HashMap<usize, Var<'t>> = HashMap::new();
        if needed[output.index] {
            adjoint.insert(output.index, self.scalar(1.0));
        }
        for i in (0..end).rev() {
            if !needed[i] {
                continue;
            }
            let Some(&g) = adjoint.get(&i) else { continue };
            let op = self.nodes.borrow()[i].op.clone();
            let node = Var {
                tape: self,
                index: i,
            };
            for (j, contrib) in self.vjp(&op, node, g, &needed)? {
                let acc = match adjoint.get(&j) {
                    Some(&prev) => prev.add(contrib)?,
                    None => contrib,
                };
                adjoint.insert(j, acc);
            }
        }

        Ok(wrt
            .iter()
            .map(|w| match adjoint.get(&w.index) {
                Some(&g) => g,
                None => {
                    let (r, c) = shape(&w.value());
                    self.zeros(r, c)
                }
            })
            .collect())
    }

    /// Exact reverse-mode partials of a scalar `output` with respect to each
    /// node in `leaves`.
    pub fn backward<'t>(&'t self, output: Var<'t>, leaves: &[Var<'t>]) -> Result<GradientMap> {
        let grads = self.grad(output, leaves)?;
        Ok(GradientMap {
            entries: leaves
                .iter()
                .zip(grads)
                .map(|(l, g)| (l.index, (*g.value()).clone()))
                .collect(),
        })
    }

    /// Differentiates `penalty(∇_inputs output)` with respect to `then_wrt`.
    /// The inner gradient is recorded on the tape, so the outer backward
    /// sweep runs through it.
    pub fn backward_of_gradient<'t, F>(
        &'t self,
        output: Var<'t>,
        wrt_inputs: &[Var<'t>],
        then_wrt: &[Var<'t>],
        penalty: F,
    ) -> Result<GradientMap>
    where
        F: FnOnce(&[Var<'t>]) -> Result<Var<'t>>,
    {
        let inner = self.grad(output, wrt_inputs)?;
        let scalar = penalty(&inner)?;
        self.backward(scalar, then_wrt)
    }

    fn reduce_to<'t>(&'t self, g: Var<'t>, target: (usize, usize)) -> Result<Var<'t>> {
        let mut g = g;
        let gs = shape(&g.value());
        if gs == target {
            return Ok(g);
        }
        if target.0 == 1 && gs.0 != 1 {
            g = g.sum_rows();
        }
        if target.1 == 1 && gs.1 != 1 {
            g = g.sum_cols();
        }
        Ok(g)
    }

    fn vjp<'t>(
        &'t self,
        op: &Op,
        node: Var<'t>,
        g: Var<'t>,
        needed: &[bool],
    ) -> Result<Vec<(usize, Var<'t>)>> {
        let v = |j: usize| Var {
            tape: self,
            index: j,
        };
        let shp = |j: usize| shape(&self.value_of(j));
        let mut out = Vec::with_capacity(2);
        match *op {
            Op::Leaf | Op::Step(_) | Op::Sign(_) => {}
            Op::Add(a, b) => {
                if needed[a] {
                    out.push((a, self.reduce_to(g, shp(a))?));
                }
                if needed[b] {
                    out.push((b, self.reduce_to(g, shp(b))?));
                }
            }
            Op::Sub(a, b) => {
                if needed[a] {
                    out.push((a, self.reduce_to(g, shp(a))?));
                }
                if needed[b] {
                    out.push((b, self.reduce_to(g.neg(), shp(b))?));
                }
            }
            Op::Mul(a, b) => {
                if needed[a] {
                    out.push((a, self.reduce_to(g.mul(v(b))?, shp(a))?));
                }
                if needed[b] {
                    out.push((b, self.reduce_to(g.mul(v(a))?, shp(b))?));
                }
            }
            Op::Div(a, b) => {
                if needed[a] {
                    out.push((a, self.reduce_to(g.div(v(b))?, shp(a))?));
                }
                if needed[b] {
                    let gb = g.mul(node)?.div(v(b))?.neg();
                    out.push((b, self.reduce_to(gb, shp(b))?));
                }
            }
            Op::Neg(a) => out.push((a, g.neg())),
            Op::Exp(a) => out.push((a, g.mul(node)?)),
            Op::Log(a) => out.push((a, g.div(v(a))?)),
            Op::Abs(a) => out.push((a, g.mul(v(a).sign())?)),
            Op::Relu(a) => out.push((a, g.mul(v(a).step())?)),
            Op::Sigmoid(a) => {
                let d = node.mul(node.neg().add_scalar(1.0)?)?;
                out.push((a, g.mul(d)?));
            }
            Op::Tanh(a) => {
                let d = node.mul(node)?.neg().add_scalar(1.0)?;
                out.push((a, g.mul(d)?));
            }
            Op::Softplus(a) => out.push((a, g.mul(v(a).sigmoid())?)),
            Op::Sqrt(a) => out.push((a, g.div(node)?.scale(0.5)?)),
            Op::PowConst(a, p) => {
                let d = if p == 2.0 {
                    v(a).scale(2.0)?
                } else {
                    v(a).powf(p - 1.0)?.scale(p)?
                };
                out.push((a, g.mul(d)?));
            }
            Op::Scale(a, c) => out.push((a, g.scale(c)?)),
            Op::AddConst(a, _) => out.push((a, g)),
            Op::Sum(a) | Op::SumRows(a) | Op::SumCols(a) => {
                let (r, c) = shp(a);
                out.push((a, g.broadcast_to(r, c)?));
            }
            Op::Broadcast(a) => out.push((a, self.reduce_to(g, shp(a))?)),
            Op::MatMul(a, b) => {
                if needed[a] {
                    out.push((a, g.dot(v(b).t())?));
                }
                if needed[b] {
                    out.push((b, v(a).t().dot(g)?));
                }
            }
            Op::Transpose(a) => out.push((a, g.t())),
            Op::ConcatCols(ref parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = shp(p).1;
                    if needed[p] {
                        out.push((p, g.slice_cols(start, start + w)?));
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let total = shp(a).1;
                out.push((a, g.pad_cols(start, total)?));
            }
            Op::PadCols(a, start) => {
                let w = shp(a).1;
                out.push((a, g.slice_cols(start, start + w)?));
            }
        }
        Ok(out)
    }
}

fn operands(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
            vec![*a, *b]
        }
        Op::ConcatCols(parts) => parts.clone(),
        Op::Neg(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Abs(a)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Tanh(a)
        | Op::Softplus(a)
        | Op::Sqrt(a)
        | Op::PowConst(a, _)
        | Op::Scale(a, _)
        | Op::AddConst(a, _)
        | Op::Sum(a)
        | Op::SumRows(a)
        | Op::SumCols(a)
        | Op::Broadcast(a)
        | Op::Transpose(a)
        | Op::SliceCols(a, _)
        | Op::PadCols(a, _)
        | Op::Step(a)
        | Op::Sign(a) => vec![*a],
    }
}

impl<'t> Var<'t> {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Matrix> {
        self.tape.value_of(self.index)
    }

    pub fn shape(&self) -> (usize, usize) {
        shape(&self.value())
    }

    /// Value of a `1 x 1` node (first element otherwise).
    pub fn item(&self) -> f64 {
        self.value()[[0, 0]]
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(AutodiffError::ForeignNode)
        }
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = self.value().mapv(f);
        self.tape.push(op, value)
    }

    fn binary(
        self,
        rhs: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let value = binary_values(name, &self.value(), &rhs.value(), f)?;
        check_nan(name, &value)?;
        Ok(self.tape.push(op, value))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "add", Op::Add(self.index, rhs.index), |a, b| a + b)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "sub", Op::Sub(self.index, rhs.index), |a, b| a - b)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "mul", Op::Mul(self.index, rhs.index), |a, b| a * b)
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        if let Some(index) = rhs.value().iter().position(|&d| d == 0.0) {
            return Err(AutodiffError::Domain {
                op: "div",
                index,
                value: 0.0,
            });
        }
        self.binary(rhs, "div", Op::Div(self.index, rhs.index), |a, b| a / b)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.index), |a| -a)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        let out = self.unary(Op::Exp(self.index), f64::exp);
        check_nan("exp", &out.value())?;
        Ok(out)
    }

    pub fn ln(self) -> Result<Var<'t>> {
        if let Some((index, &value)) = self.value().iter().enumerate().find(|(_, &x)| !(x > 0.0)) {
            return Err(AutodiffError::Domain {
                op: "log",
                index,
                value,
            });
        }
        Ok(self.unary(Op::Log(self.index), f64::ln))
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Op::Abs(self.index), f64::abs)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.index), |a| if a > 0.0 { a } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.index), sigmoid)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.index), f64::tanh)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus(self.index), softplus)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        if let Some((index, &value)) = self.value().iter().enumerate().find(|(_, &x)| !(x >= 0.0)) {
            return Err(AutodiffError::Domain {
                op: "sqrt",
                index,
                value,
            });
        }
        Ok(self.unary(Op::Sqrt(self.index), f64::sqrt))
    }

    /// Elementwise power with a constant exponent.
    pub fn powf(self, p: f64) -> Result<Var<'t>> {
        let integral = p.fract() == 0.0;
        let bad = self
            .value()
            .iter()
            .enumerate()
            .find(|(_, &x)| (x < 0.0 && !integral) || (x == 0.0 && p < 0.0))
            .map(|(i, &x)| (i, x));
        if let Some((index, value)) = bad {
            return Err(AutodiffError::Domain {
                op: "pow_const",
                index,
                value,
            });
        }
        let out = if p == 2.0 {
            self.unary(Op::PowConst(self.index, p), |a| a * a)
        } else {
            self.unary(Op::PowConst(self.index, p), |a| a.powf(p))
        };
        check_nan("pow_const", &out.value())?;
        Ok(out)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.powf(2.0)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let out = self.unary(Op::Scale(self.index, c), |a| a * c);
        check_nan("scale", &out.value())?;
        Ok(out)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        let out = self.unary(Op::AddConst(self.index, c), |a| a + c);
        check_nan("add_const", &out.value())?;
        Ok(out)
    }

    /// Sum of all elements, `1 x 1`.
    pub fn sum(self) -> Var<'t> {
        let total = self.value().sum();
        self.tape
            .push(Op::Sum(self.index), Matrix::from_elem((1, 1), total))
    }

    /// Mean of all elements, `1 x 1`.
    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().len();
        self.sum().scale(1.0 / n as f64)
    }

    /// Column sums: `r x c -> 1 x c`.
    pub fn sum_rows(self) -> Var<'t> {
        let value = self.value().sum_axis(Axis(0)).insert_axis(Axis(0));
        self.tape.push(Op::SumRows(self.index), value)
    }

    /// Row sums: `r x c -> r x 1`.
    pub fn sum_cols(self) -> Var<'t> {
        let value = self.value().sum_axis(Axis(1)).insert_axis(Axis(1));
        self.tape.push(Op::SumCols(self.index), value)
    }

    pub fn broadcast_to(self, rows: usize, cols: usize) -> Result<Var<'t>> {
        let v = self.value();
        let b = v.broadcast((rows, cols)).ok_or(AutodiffError::Shape {
            op: "broadcast",
            lhs: shape(&v),
            rhs: (rows, cols),
        })?;
        let value = b.to_owned();
        Ok(self.tape.push(Op::Broadcast(self.index), value))
    }

    /// Matrix product; a `1 x n` by `n x 1` product is the vector dot product.
    pub fn dot(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let (a, b) = (self.value(), rhs.value());
        if a.ncols() != b.nrows() {
            return Err(AutodiffError::Shape {
                op: "dot",
                lhs: shape(&a),
                rhs: shape(&b),
            });
        }
        let value = a.dot(&*b);
        Ok(self.tape.push(Op::MatMul(self.index, rhs.index), value))
    }

    pub fn t(self) -> Var<'t> {
        let value = self.value().t().to_owned();
        self.tape.push(Op::Transpose(self.index), value)
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(AutodiffError::Shape {
            op: "concat_cols",
            lhs: (0, 0),
            rhs: (0, 0),
        })?;
        let rows = first.shape().0;
        let mut cols = 0;
        for p in parts {
            first.same_tape(p)?;
            let s = p.shape();
            if s.0 != rows {
                return Err(AutodiffError::Shape {
                    op: "concat_cols",
                    lhs: first.shape(),
                    rhs: s,
                });
            }
            cols += s.1;
        }
        let mut value = Matrix::zeros((rows, cols));
        let mut start = 0;
        for p in parts {
            let pv = p.value();
            value
                .slice_mut(s![.., start..start + pv.ncols()])
                .assign(&*pv);
            start += pv.ncols();
        }
        let op = Op::ConcatCols(parts.iter().map(|p| p.index).collect());
        Ok(first.tape.push(op, value))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.value();
        if start > end || end > v.ncols() {
            return Err(AutodiffError::Shape {
                op: "slice_cols",
                lhs: shape(&v),
                rhs: (start, end),
            });
        }
        let value = v.slice(s![.., start..end]).to_owned();
        Ok(self.tape.push(Op::SliceCols(self.index, start), value))
    }

    /// Places this node's columns at `start..` inside a zero matrix with
    /// `total` columns.
    pub fn pad_cols(self, start: usize, total: usize) -> Result<Var<'t>> {
        let v = self.value();
        if start + v.ncols() > total {
            return Err(AutodiffError::Shape {
                op: "pad_cols",
                lhs: shape(&v),
                rhs: (start, total),
            });
        }
        let mut value = Matrix::zeros((v.nrows(), total));
        value
            .slice_mut(s![.., start..start + v.ncols()])
            .assign(&*v);
        Ok(self.tape.push(Op::PadCols(self.index, start), value))
    }

    /// Heaviside mask, `1` where the operand is strictly positive. This is
    /// the ReLU derivative with the subgradient at zero taken as zero.
    pub fn step(self) -> Var<'t> {
        self.unary(Op::Step(self.index), |a| if a > 0.0 { 1.0 } else { 0.0 })
    }

    /// Sign with `sign(0) = 0`.
    pub fn sign(self) -> Var<'t> {
        self.unary(Op::Sign(self.index), |a| {
            if a > 0.0 {
                1.0
            } else if a < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }
}
