//! Pointwise arithmetic and activations.
//!
//! Binary ops accept equal shapes or a one-element operand broadcast against
//! the other; nothing else.

use crate::error::{Result, TensorError};
use crate::tape::{Binary, Op, Tape, Unary, Var};
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`, exact-branch form for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x + (-x).exp()
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn apply_unary(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Sqrt => x.sqrt(),
        Unary::Exp => x.exp(),
        Unary::Ln => x.ln(),
        Unary::Gelu => gelu(x),
        Unary::Relu => x.max(0.0),
        Unary::LeakyRelu(slope) => {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        }
        Unary::Sigmoid => sigmoid(x),
        Unary::Tanh => x.tanh(),
        Unary::Softplus => softplus(x),
        Unary::Abs => x.abs(),
        Unary::Square => x * x,
        Unary::Neg => -x,
    }
}

pub(crate) fn unary_backward(kind: Unary, x: &Tensor, y: &Tensor, g: &[f64]) -> Vec<f64> {
    x.data()
        .iter()
        .zip(y.data())
        .zip(g)
        .map(|((&x, &y), &g)| {
            let d = match kind {
                // subgradient 0 at the origin
                Unary::Sqrt => {
                    if y > 0.0 {
                        0.5 / y
                    } else {
                        0.0
                    }
                }
                Unary::Exp => y,
                Unary::Ln => 1.0 / x,
                Unary::Gelu => gelu_grad(x),
                Unary::Relu => {
                    if x > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                Unary::LeakyRelu(slope) => {
                    if x > 0.0 {
                        1.0
                    } else {
                        slope
                    }
                }
                Unary::Sigmoid => y * (1.0 - y),
                Unary::Tanh => 1.0 - y * y,
                Unary::Softplus => sigmoid(x),
                Unary::Abs => {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }
                Unary::Square => 2.0 * x,
                Unary::Neg => -1.0,
            };
            g * d
        })
        .collect()
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(TensorError::mismatch(op, a.shape(), b.shape()))
    }
}

#[inline]
fn at(t: &[f64], i: usize) -> f64 {
    if t.len() == 1 {
        t[0]
    } else {
        t[i]
    }
}

/// Sums a full-size gradient down to a broadcast operand's size.
fn reduce_to(len: usize, full: Vec<f64>) -> Vec<f64> {
    if len == 1 && full.len() != 1 {
        vec![full.iter().sum()]
    } else {
        full
    }
}

pub(crate) fn binary_backward(
    kind: Binary,
    a: Var,
    av: &Tensor,
    b: Var,
    bv: &Tensor,
    g: &[f64],
) -> Vec<(Var, Vec<f64>)> {
    let (ad, bd) = (av.data(), bv.data());
    let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
        Binary::Add => (g.to_vec(), g.to_vec()),
        Binary::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
        Binary::Mul => g
            .iter()
            .enumerate()
            .map(|(i, &g)| (g * at(bd, i), g * at(ad, i)))
            .unzip(),
        Binary::Div => g
            .iter()
            .enumerate()
            .map(|(i, &g)| {
                let (x, y) = (at(ad, i), at(bd, i));
                (g / y, -g * x / (y * y))
            })
            .unzip(),
    };
    vec![(a, reduce_to(ad.len(), ga)), (b, reduce_to(bd.len(), gb))]
}

impl Tape {
    fn binary(&mut self, kind: Binary, op: &'static str, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let shape = broadcast_shape(op, av, bv)?;
        let n = shape.iter().product::<usize>();
        let (ad, bd) = (av.data(), bv.data());
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = (at(ad, i), at(bd, i));
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, "div", a, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|a| a * s).collect());
        self.push(out, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|a| a + s).collect());
        self.push(out, Op::AddScalar(x))
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().map(|&a| apply_unary(kind, a)).collect(),
        );
        self.push(out, Op::Unary(kind, x))
    }

    /// Square root; the gradient at exactly zero is taken as 0.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(Unary::Ln, x)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(Unary::Gelu, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(Unary::LeakyRelu(slope), x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }
}
