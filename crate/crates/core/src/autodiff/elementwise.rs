//! Elementwise arithmetic and activations.
//!
//! Binary operations accept equal shapes, or one operand with a single
//! element that is broadcast over the other. Nothing else broadcasts.

use super::graph::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{split_axis, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    /// Elementwise maximum; ties send the gradient to the first operand.
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Relu,
    /// 0.5x² for |x| < 1, |x| − 0.5 otherwise.
    SmoothL1,
}

impl BinaryKind {
    fn apply(self, a: Real, b: Real) -> Real {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
            BinaryKind::Div => a / b,
            BinaryKind::Max => {
                if a >= b {
                    a
                } else {
                    b
                }
            }
        }
    }

    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
            BinaryKind::Max => "max",
        }
    }
}

pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn smooth_l1(x: Real) -> Real {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: Real) -> Real {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

impl UnaryKind {
    fn name(self) -> &'static str {
        match self {
            UnaryKind::Neg => "neg",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Relu => "relu",
            UnaryKind::SmoothL1 => "smooth_l1",
        }
    }

    fn apply(self, x: Real) -> Real {
        match self {
            UnaryKind::Neg => -x,
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::SmoothL1 => smooth_l1(x),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: Real, y: Real) -> Real {
        match self {
            UnaryKind::Neg => -1.0,
            UnaryKind::Sigmoid => y * (1.0 - y),
            UnaryKind::Tanh => 1.0 - y * y,
            UnaryKind::Exp => y,
            UnaryKind::Log => 1.0 / x,
            UnaryKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryKind::SmoothL1 => smooth_l1_grad(x),
        }
    }
}

struct BinaryFn(BinaryKind);

/// Index into an operand that is either full-size or a broadcast scalar.
#[inline]
fn at(t: &[Real], i: usize) -> Real {
    if t.len() == 1 {
        t[0]
    } else {
        t[i]
    }
}

fn reduce_to(operand: &Tensor, full: Vec<Real>) -> Tensor {
    if operand.len() == 1 && full.len() != 1 {
        let mut t = operand.zeros_like();
        t.data_mut()[0] = full.iter().sum();
        t
    } else {
        Tensor::new(operand.shape().to_vec(), full).expect("same shape as operand")
    }
}

impl Function for BinaryFn {
    fn name(&self) -> &'static str {
        self.0.name()
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let g = grad.data();
        let n = g.len();
        let mut ga = vec![0.0; n];
        let mut gb = vec![0.0; n];
        for i in 0..n {
            let (x, y) = (at(a, i), at(b, i));
            let (da, db) = match self.0 {
                BinaryKind::Add => (1.0, 1.0),
                BinaryKind::Sub => (1.0, -1.0),
                BinaryKind::Mul => (y, x),
                BinaryKind::Div => (1.0 / y, -x / (y * y)),
                BinaryKind::Max => {
                    if x >= y {
                        (1.0, 0.0)
                    } else {
                        (0.0, 1.0)
                    }
                }
            };
            ga[i] = g[i] * da;
            gb[i] = g[i] * db;
        }
        Ok(vec![
            needs[0].then(|| reduce_to(inputs[0], ga)),
            needs[1].then(|| reduce_to(inputs[1], gb)),
        ])
    }
}

struct UnaryFn(UnaryKind);

impl Function for UnaryFn {
    fn name(&self) -> &'static str {
        self.0.name()
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let data = inputs[0]
            .data()
            .iter()
            .zip(output.data())
            .zip(grad.data())
            .map(|((&x, &y), &g)| g * self.0.derivative(x, y))
            .collect();
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), data)?)])
    }
}

struct ScaleFn(Real);

impl Function for ScaleFn {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.map(|g| g * self.0))])
    }
}

/// Bias added along one axis: `x[.., j, ..] + b[j]`.
struct AddBiasFn {
    axis: usize,
}

impl Function for AddBiasFn {
    fn name(&self) -> &'static str {
        "add_bias"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let gb = needs[1].then(|| {
            let (outer, n, inner) = split_axis(grad.shape(), self.axis);
            let mut b = inputs[1].zeros_like();
            let g = grad.data();
            let bd = b.data_mut();
            for o in 0..outer {
                for j in 0..n {
                    let base = (o * n + j) * inner;
                    bd[j] += g[base..base + inner].iter().sum::<Real>();
                }
            }
            b
        });
        Ok(vec![needs[0].then(|| grad.clone()), gb])
    }
}

impl Graph {
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.shape() == tb.shape() || tb.len() == 1 {
            ta.shape().to_vec()
        } else if ta.len() == 1 {
            tb.shape().to_vec()
        } else {
            return Err(Error::ShapeMismatch {
                op: kind.name(),
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        let n = ta.len().max(tb.len());
        if kind == BinaryKind::Div {
            if let Some(i) = tb.data().iter().position(|&y| y == 0.0) {
                return Err(Error::Domain {
                    op: "div",
                    detail: format!("zero divisor at element {i}"),
                });
            }
        }
        let (da, db) = (ta.data(), tb.data());
        let data = (0..n).map(|i| kind.apply(at(da, i), at(db, i))).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.record(BinaryFn(kind), &[a, b], value))
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if kind == UnaryKind::Log {
            if let Some(i) = ta.data().iter().position(|&x| x <= 0.0) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive argument {} at element {i}", ta.data()[i]),
                });
            }
        }
        let value = ta.map(|x| kind.apply(x));
        Ok(self.record(UnaryFn(kind), &[a], value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Max, a, b)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn smooth_l1(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::SmoothL1, a)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: Real) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.record(ScaleFn(c), &[a], value)
    }

    /// Adds a constant.
    pub fn add_scalar(&mut self, a: Var, c: Real) -> Result<Var> {
        let s = self.scalar(c);
        self.add(a, s)
    }

    /// Adds `bias[j]` to every element whose index along `axis` is `j`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if axis >= tx.rank() {
            return Err(Error::InvalidAxis {
                axis,
                rank: tx.rank(),
            });
        }
        let (outer, n, inner) = split_axis(tx.shape(), axis);
        if tb.len() != n {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut value = tx.clone();
        let b = tb.data();
        let d = value.data_mut();
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for v in &mut d[base..base + inner] {
                    *v += b[j];
                }
            }
        }
        Ok(self.record(AddBiasFn { axis }, &[x, bias], value))
    }
}
