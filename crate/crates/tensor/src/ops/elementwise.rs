use crate::error::Result;
use crate::real::Real;
use crate::tape::{Backward, Var};
use crate::tensor::{reduce_to_shape, zip_broadcast, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }
}

struct BinaryOp {
    kind: BinaryKind,
}

impl<T: Real> Backward<T> for BinaryOp {
    fn name(&self) -> &'static str {
        self.kind.name()
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let ga = needs[0].then(|| {
            let full = match self.kind {
                BinaryKind::Add | BinaryKind::Sub => grad.clone(),
                BinaryKind::Mul => zip_broadcast(grad, b, "mul", |g, y| g * y).unwrap(),
                BinaryKind::Div => zip_broadcast(grad, b, "div", |g, y| g / y).unwrap(),
            };
            reduce_to_shape(&full, a.shape())
        });
        let gb = needs[1].then(|| {
            let full = match self.kind {
                BinaryKind::Add => grad.clone(),
                BinaryKind::Sub => grad.map(|g| -g),
                BinaryKind::Mul => zip_broadcast(grad, a, "mul", |g, x| g * x).unwrap(),
                BinaryKind::Div => {
                    // d(a/b)/db = -a/b^2
                    let q = zip_broadcast(a, b, "div", |x, y| x / (y * y)).unwrap();
                    zip_broadcast(grad, &q, "div", |g, v| -g * v).unwrap()
                }
            };
            reduce_to_shape(&full, b.shape())
        });
        vec![ga, gb]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Sigmoid,
    LeakyRelu(f64),
    Exp,
    Sqrt,
    AddScalar(f64),
    MulScalar(f64),
}

struct UnaryOp {
    kind: UnaryKind,
}

impl UnaryKind {
    fn name(self) -> &'static str {
        match self {
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::LeakyRelu(_) => "leaky_relu",
            UnaryKind::Exp => "exp",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::AddScalar(_) => "add_scalar",
            UnaryKind::MulScalar(_) => "mul_scalar",
        }
    }

    fn apply<T: Real>(self, x: T) -> T {
        match self {
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::LeakyRelu(s) => {
                if x > T::zero() {
                    x
                } else {
                    x * T::lit(s)
                }
            }
            UnaryKind::Exp => x.exp(),
            UnaryKind::Sqrt => x.sqrt(),
            UnaryKind::AddScalar(s) => x + T::lit(s),
            UnaryKind::MulScalar(s) => x * T::lit(s),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            UnaryKind::Sigmoid => y * (T::one() - y),
            UnaryKind::LeakyRelu(s) => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::lit(s)
                }
            }
            UnaryKind::Exp => y,
            UnaryKind::Sqrt => T::lit(0.5) / y,
            UnaryKind::AddScalar(_) => T::one(),
            UnaryKind::MulScalar(s) => T::lit(s),
        }
    }
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Backward<T> for UnaryOp {
    fn name(&self) -> &'static str {
        self.kind.name()
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let data = x
            .data()
            .iter()
            .zip(output.data())
            .zip(grad.data())
            .map(|((&x, &y), &g)| g * self.kind.derivative(x, y))
            .collect();
        vec![Some(Tensor::new(x.shape(), data).unwrap())]
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn binary(self, kind: BinaryKind, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&rhs)?;
        let (a, b) = (self.value(), rhs.value());
        let out = match kind {
            BinaryKind::Add => zip_broadcast(&a, &b, "add", |x, y| x + y)?,
            BinaryKind::Sub => zip_broadcast(&a, &b, "sub", |x, y| x - y)?,
            BinaryKind::Mul => zip_broadcast(&a, &b, "mul", |x, y| x * y)?,
            BinaryKind::Div => zip_broadcast(&a, &b, "div", |x, y| x / y)?,
        };
        Ok(self.tape.record(out, &[self, rhs], BinaryOp { kind }))
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryKind::Add, rhs)
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryKind::Sub, rhs)
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryKind::Mul, rhs)
    }

    pub fn div(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryKind::Div, rhs)
    }

    pub fn unary(self, kind: UnaryKind) -> Var<'t, T> {
        let out = self.value().map(|v| kind.apply(v));
        self.tape.record(out, &[self], UnaryOp { kind })
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t, T> {
        self.unary(UnaryKind::LeakyRelu(slope))
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(UnaryKind::Exp)
    }

    pub fn sqrt(self) -> Var<'t, T> {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t, T> {
        self.unary(UnaryKind::AddScalar(s))
    }

    pub fn mul_scalar(self, s: f64) -> Var<'t, T> {
        self.unary(UnaryKind::MulScalar(s))
    }

    pub fn square(self) -> Var<'t, T> {
        self.mul(self).expect("same shape")
    }
}
