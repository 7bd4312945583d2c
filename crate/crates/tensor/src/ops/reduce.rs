use crate::error::{shape_err, Result};
use crate::ops::split_axis;
use crate::real::Real;
use crate::tape::{Op, Tape, Var};

fn keepdim(dims: &[usize], axis: usize) -> Vec<usize> {
    let mut d = dims.to_vec();
    d[axis] = 1;
    d
}

impl<T: Real> Tape<T> {
    fn check_axis(&self, x: Var, axis: usize, op: &str) -> Result<()> {
        if axis >= self.dims(x).len() {
            return Err(shape_err!("{op}: axis {axis} out of range for {:?}", self.dims(x)));
        }
        Ok(())
    }

    fn fold_axis(&self, x: Var, axis: usize, mut f: impl FnMut(&mut dyn Iterator<Item = (usize, T)>) -> T) -> Vec<T> {
        if self.is_shape_only() {
            return Vec::new();
        }
        let (outer, n, inner) = split_axis(self.dims(x), axis);
        let data = self.data(x);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut it = (0..n).map(|j| (base + j * inner, data[base + j * inner]));
                out.push(f(&mut it));
            }
        }
        out
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        self.check_axis(input, axis, "sum_axis")?;
        let value = self.fold_axis(input, axis, |it| it.map(|(_, v)| v).sum());
        self.push(keepdim(self.dims(input), axis), value, Op::SumAxis { input, axis })
    }

    pub fn mean_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        self.check_axis(input, axis, "mean_axis")?;
        let n = T::from_usize(self.dims(input)[axis]).unwrap();
        let value = self.fold_axis(input, axis, |it| it.map(|(_, v)| v).sum::<T>() / n);
        self.push(keepdim(self.dims(input), axis), value, Op::MeanAxis { input, axis })
    }

    /// (B, C, H, W) → (B, C, 1, 1) spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        if self.dims(input).len() != 4 {
            return Err(shape_err!("global_avg_pool input must be (B, C, H, W), got {:?}", self.dims(input)));
        }
        let x = self.mean_axis(input, 3)?;
        self.mean_axis(x, 2)
    }

    /// Max along `axis` (first index wins ties).
    pub fn max_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        self.check_axis(input, axis, "max_axis")?;
        let mut argmax = Vec::new();
        let value = self.fold_axis(input, axis, |it| {
            let (mut bi, mut bv) = it.next().expect("non-empty axis");
            for (i, v) in it {
                if v > bv {
                    (bi, bv) = (i, v);
                }
            }
            argmax.push(bi);
            bv
        });
        self.push(keepdim(self.dims(input), axis), value, Op::MaxAxis { input, argmax })
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let value = if self.is_shape_only() { Vec::new() } else { vec![self.data(input).iter().copied().sum()] };
        self.push(vec![1], value, Op::SumAll { input })
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let value = if self.is_shape_only() {
            Vec::new()
        } else {
            let d = self.data(input);
            vec![d.iter().copied().sum::<T>() / T::from_usize(d.len()).unwrap()]
        };
        self.push(vec![1], value, Op::MeanAll { input })
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        self.check_axis(input, axis, "softmax")?;
        let value = self.softmax_values(input, axis, false);
        self.push(self.dims(input).to_vec(), value, Op::Softmax { input, axis })
    }

    pub fn log_softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        self.check_axis(input, axis, "log_softmax")?;
        let value = self.softmax_values(input, axis, true);
        self.push(self.dims(input).to_vec(), value, Op::LogSoftmax { input, axis })
    }

    fn softmax_values(&self, input: Var, axis: usize, log: bool) -> Vec<T> {
        if self.is_shape_only() {
            return Vec::new();
        }
        let (outer, n, inner) = split_axis(self.dims(input), axis);
        let x = self.data(input);
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * n * inner + j * inner + i;
                let m = (0..n).map(|j| x[idx(j)]).fold(T::neg_infinity(), T::max);
                let z: T = (0..n).map(|j| (x[idx(j)] - m).exp()).sum();
                let lz = z.ln();
                for j in 0..n {
                    out[idx(j)] = if log { x[idx(j)] - m - lz } else { (x[idx(j)] - m).exp() / z };
                }
            }
        }
        out
    }
}

/// Broadcasts a keepdim-reduced gradient back over `axis`, scaled by `factor`.
pub(crate) fn sum_axis_backward<T: Real>(in_dims: &[usize], axis: usize, g: &[T], factor: T) -> Vec<T> {
    let (outer, n, inner) = split_axis(in_dims, axis);
    let mut dx = vec![T::zero(); outer * n * inner];
    for o in 0..outer {
        for j in 0..n {
            for i in 0..inner {
                dx[o * n * inner + j * inner + i] = g[o * inner + i] * factor;
            }
        }
    }
    dx
}

pub(crate) fn softmax_backward<T: Real>(dims: &[usize], axis: usize, y: &[T], g: &[T]) -> Vec<T> {
    let (outer, n, inner) = split_axis(dims, axis);
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| o * n * inner + j * inner + i;
            let dot: T = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
            for j in 0..n {
                dx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
            }
        }
    }
    dx
}

pub(crate) fn log_softmax_backward<T: Real>(dims: &[usize], axis: usize, y: &[T], g: &[T]) -> Vec<T> {
    let (outer, n, inner) = split_axis(dims, axis);
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| o * n * inner + j * inner + i;
            let gsum: T = (0..n).map(|j| g[idx(j)]).sum();
            for j in 0..n {
                dx[idx(j)] = g[idx(j)] - y[idx(j)].exp() * gsum;
            }
        }
    }
    dx
}
