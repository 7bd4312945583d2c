use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::{Op, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    /// Tanh approximation.
    Gelu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
}

impl UnaryKind {
    pub(crate) fn name(self) -> &'static str {
        match self {
            UnaryKind::Relu => "relu",
            UnaryKind::Gelu => "gelu",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let (c, a, half) = (T::from_f64_lossy(GELU_C), T::from_f64_lossy(GELU_A), T::from_f64_lossy(0.5));
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let (c, a, half) = (T::from_f64_lossy(GELU_C), T::from_f64_lossy(GELU_A), T::from_f64_lossy(0.5));
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn apply<T: Real>(kind: UnaryKind, x: T) -> T {
    match kind {
        UnaryKind::Relu => if x < T::zero() { T::zero() } else { x },
        UnaryKind::Gelu => gelu(x),
        UnaryKind::Sigmoid => sigmoid(x),
        UnaryKind::Tanh => x.tanh(),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Log => x.ln(),
    }
}

pub(crate) fn unary_backward<T: Real>(kind: UnaryKind, x: &[T], y: &[T], g: &[T]) -> Vec<T> {
    x.iter()
        .zip(y)
        .zip(g)
        .map(|((&x, &y), &g)| {
            g * match kind {
                UnaryKind::Relu => {
                    if x > T::zero() {
                        T::one()
                    } else {
                        T::zero()
                    }
                }
                UnaryKind::Gelu => gelu_grad(x),
                UnaryKind::Sigmoid => y * (T::one() - y),
                UnaryKind::Tanh => T::one() - y * y,
                UnaryKind::Exp => y,
                UnaryKind::Log => T::one() / x,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    pub(crate) fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }

    fn apply<T: Real>(self, a: T, b: T) -> T {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
            BinaryKind::Div => a / b,
        }
    }
}

/// Same-rank broadcasting: each input extent equals the output extent or is 1.
fn broadcast_dims(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Flat offset into an operand for each flat output index.
fn broadcast_offsets(operand: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..rank).rev() {
        strides[i] = if operand[i] == 1 { 0 } else { s };
        s *= operand[i];
    }
    let total: usize = out.iter().product();
    let mut offsets = Vec::with_capacity(total);
    let mut index = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for d in (0..rank).rev() {
            index[d] += 1;
            off += strides[d];
            if index[d] < out[d] {
                break;
            }
            off -= strides[d] * out[d];
            index[d] = 0;
        }
    }
    offsets
}

impl<T: Real> Tape<T> {
    fn unary(&mut self, input: Var, kind: UnaryKind) -> Result<Var> {
        let value = self.data(input).iter().map(|&x| apply(kind, x)).collect();
        self.push(self.dims(input).to_vec(), value, Op::Unary { input, kind })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Tanh)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Log)
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let value = self.data(input).iter().map(|&x| x * factor).collect();
        self.push(self.dims(input).to_vec(), value, Op::Scale { input, factor })
    }

    pub fn add_scalar(&mut self, input: Var, c: T) -> Result<Var> {
        let value = self.data(input).iter().map(|&x| x + c).collect();
        self.push(self.dims(input).to_vec(), value, Op::AddScalar { input })
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        let dims = broadcast_dims(da, db)
            .ok_or_else(|| shape_err!("{} cannot broadcast {da:?} with {db:?}", kind.name()))?;
        let value = if self.is_shape_only() {
            Vec::new()
        } else if da == db {
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| kind.apply(x, y)).collect()
        } else {
            let (oa, ob) = (broadcast_offsets(da, &dims), broadcast_offsets(db, &dims));
            let (xa, xb) = (self.data(a), self.data(b));
            oa.iter().zip(&ob).map(|(&i, &j)| kind.apply(xa[i], xb[j])).collect()
        };
        self.push(dims, value, Op::Binary { a, b, kind })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div)
    }
}

pub(crate) fn binary_backward<T: Real>(
    tape: &Tape<T>,
    a: Var,
    b: Var,
    kind: BinaryKind,
    out_dims: &[usize],
    g: &[T],
) -> Vec<(Var, Vec<T>)> {
    let (xa, xb) = (tape.data(a), tape.data(b));
    let (oa, ob) = (broadcast_offsets(tape.dims(a), out_dims), broadcast_offsets(tape.dims(b), out_dims));
    let mut out = Vec::with_capacity(2);
    if tape.requires_grad(a) {
        let mut da = vec![T::zero(); xa.len()];
        for ((&i, &j), &gv) in oa.iter().zip(&ob).zip(g) {
            da[i] += match kind {
                BinaryKind::Add | BinaryKind::Sub => gv,
                BinaryKind::Mul => gv * xb[j],
                BinaryKind::Div => gv / xb[j],
            };
        }
        out.push((a, da));
    }
    if tape.requires_grad(b) {
        let mut db = vec![T::zero(); xb.len()];
        for ((&i, &j), &gv) in oa.iter().zip(&ob).zip(g) {
            db[j] += match kind {
                BinaryKind::Add => gv,
                BinaryKind::Sub => -gv,
                BinaryKind::Mul => gv * xa[i],
                BinaryKind::Div => -gv * xa[i] / (xb[j] * xb[j]),
            };
        }
        out.push((b, db));
    }
    out
}
