use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::{Op, Tape, Var};

impl<T: Real> Tape<T> {
    /// `x · Wᵀ + b` over the last axis; `weight` is (out, in).
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xd = self.dims(input).to_vec();
        let [dout, din] = self.dims(weight)[..] else {
            return Err(shape_err!("linear weight must be (out, in), got {:?}", self.dims(weight)));
        };
        if xd.last() != Some(&din) {
            return Err(shape_err!("linear input {xd:?} does not end in {din}"));
        }
        if let Some(b) = bias {
            if self.dims(b) != [dout] {
                return Err(shape_err!("linear bias must be ({dout},), got {:?}", self.dims(b)));
            }
        }
        let rows = xd.iter().product::<usize>() / din;
        self.add_macs(rows * din * dout);
        let mut dims = xd;
        *dims.last_mut().unwrap() = dout;
        let value = if self.is_shape_only() {
            Vec::new()
        } else {
            let mut out = vec![T::zero(); rows * dout];
            if let Some(b) = bias {
                for row in out.chunks_exact_mut(dout) {
                    row.copy_from_slice(self.data(b));
                }
            }
            let (x, w) = (self.data(input), self.data(weight));
            T::gemm(rows, din, dout, x, (din as isize, 1), w, (1, din as isize), &mut out, (dout as isize, 1), bias.is_some());
            out
        };
        self.push(dims, value, Op::Linear { input, weight, bias })
    }

    /// Batched matrix product of (B, M, K) with (B, K, N), or with (B, N, K)
    /// transposed when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let [ba, m, k] = self.dims(a)[..] else {
            return Err(shape_err!("bmm lhs must be rank 3, got {:?}", self.dims(a)));
        };
        let [bb, r, c] = self.dims(b)[..] else {
            return Err(shape_err!("bmm rhs must be rank 3, got {:?}", self.dims(b)));
        };
        let (kb, n) = if transpose_b { (c, r) } else { (r, c) };
        if ba != bb || k != kb {
            return Err(shape_err!("bmm cannot multiply {:?} by {:?} (transpose_b={transpose_b})", self.dims(a), self.dims(b)));
        }
        self.add_macs(ba * m * k * n);
        let value = if self.is_shape_only() {
            Vec::new()
        } else {
            let (xa, xb) = (self.data(a), self.data(b));
            let mut out = vec![T::zero(); ba * m * n];
            let bs = if transpose_b { (1, k as isize) } else { (n as isize, 1) };
            for i in 0..ba {
                T::gemm(m, k, n, &xa[i * m * k..][..m * k], (k as isize, 1), &xb[i * k * n..][..k * n], bs, &mut out[i * m * n..][..m * n], (n as isize, 1), false);
            }
            out
        };
        self.push(vec![ba, m, n], value, Op::Bmm { a, b, transpose_b })
    }
}

pub(crate) fn linear_backward<T: Real>(tape: &Tape<T>, input: Var, weight: Var, bias: Option<Var>, g: &[T]) -> Vec<(Var, Vec<T>)> {
    let (x, w) = (tape.data(input), tape.data(weight));
    let [dout, din] = tape.dims(weight)[..] else { unreachable!() };
    let rows = x.len() / din;
    let mut out = Vec::with_capacity(3);
    if tape.requires_grad(input) {
        let mut dx = vec![T::zero(); x.len()];
        T::gemm(rows, dout, din, g, (dout as isize, 1), w, (din as isize, 1), &mut dx, (din as isize, 1), false);
        out.push((input, dx));
    }
    if tape.requires_grad(weight) {
        let mut dw = vec![T::zero(); w.len()];
        T::gemm(dout, rows, din, g, (1, dout as isize), x, (din as isize, 1), &mut dw, (din as isize, 1), false);
        out.push((weight, dw));
    }
    if let Some(b) = bias {
        let mut db = vec![T::zero(); dout];
        for row in g.chunks_exact(dout) {
            db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
        }
        out.push((b, db));
    }
    out
}

pub(crate) fn bmm_backward<T: Real>(tape: &Tape<T>, a: Var, b: Var, transpose_b: bool, g: &[T]) -> Vec<(Var, Vec<T>)> {
    let [batch, m, k] = tape.dims(a)[..] else { unreachable!() };
    let n = g.len() / (batch * m);
    let (xa, xb) = (tape.data(a), tape.data(b));
    // Strides of B viewed as a logical (K, N) matrix.
    let bs: (isize, isize) = if transpose_b { (1, k as isize) } else { (n as isize, 1) };
    let mut out = Vec::with_capacity(2);
    if tape.requires_grad(a) {
        let mut da = vec![T::zero(); xa.len()];
        for i in 0..batch {
            // dA = dC · Bᵀ
            T::gemm(m, n, k, &g[i * m * n..][..m * n], (n as isize, 1), &xb[i * k * n..][..k * n], (bs.1, bs.0), &mut da[i * m * k..][..m * k], (k as isize, 1), false);
        }
        out.push((a, da));
    }
    if tape.requires_grad(b) {
        let mut db = vec![T::zero(); xb.len()];
        for i in 0..batch {
            // dB (logical K×N) = Aᵀ · dC, written through the same strides as B.
            T::gemm(k, m, n, &xa[i * m * k..][..m * k], (1, k as isize), &g[i * m * n..][..m * n], (n as isize, 1), &mut db[i * k * n..][..k * n], bs, false);
        }
        out.push((b, db));
    }
    out
}
