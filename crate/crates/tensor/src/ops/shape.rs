use crate::error::{shape_err, Result};
use crate::ops::split_axis;
use crate::real::Real;
use crate::tape::{Op, Tape, Var};
use crate::tensor::numel;

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

/// For each flat output index of `x.permute(perm)`, the flat source index.
fn permute_sources(in_dims: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_dims);
    let out_dims: Vec<usize> = perm.iter().map(|&p| in_dims[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = numel(in_dims);
    let rank = out_dims.len();
    let mut out = Vec::with_capacity(total);
    let mut index = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(off);
        for d in (0..rank).rev() {
            index[d] += 1;
            off += src_strides[d];
            if index[d] < out_dims[d] {
                break;
            }
            off -= src_strides[d] * out_dims[d];
            index[d] = 0;
        }
    }
    out
}

impl<T: Real> Tape<T> {
    pub fn reshape(&mut self, input: Var, dims: &[usize]) -> Result<Var> {
        if numel(dims) != numel(self.dims(input)) || dims.contains(&0) {
            return Err(shape_err!("cannot reshape {:?} into {dims:?}", self.dims(input)));
        }
        let value = self.data(input).to_vec();
        self.push(dims.to_vec(), value, Op::Reshape { input })
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, input: Var, perm: &[usize]) -> Result<Var> {
        let in_dims = self.dims(input).to_vec();
        let mut seen = vec![false; in_dims.len()];
        if perm.len() != in_dims.len() || perm.iter().any(|&p| p >= in_dims.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err!("invalid permutation {perm:?} for {in_dims:?}"));
        }
        let out_dims: Vec<usize> = perm.iter().map(|&p| in_dims[p]).collect();
        let value = if self.is_shape_only() {
            Vec::new()
        } else {
            let x = self.data(input);
            permute_sources(&in_dims, perm).into_iter().map(|s| x[s]).collect()
        };
        self.push(out_dims, value, Op::Permute { input, perm: perm.to_vec() })
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let base = self.dims(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &v in inputs {
            let d = self.dims(v);
            let compatible = d.len() == base.len() && d.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err!("concat along {axis}: {d:?} does not match {base:?}"));
            }
            total += d[axis];
        }
        let mut dims = base.clone();
        dims[axis] = total;
        let value = if self.is_shape_only() {
            Vec::new()
        } else {
            let (outer, _, inner) = split_axis(&dims, axis);
            let mut out = Vec::with_capacity(numel(&dims));
            for o in 0..outer {
                for &v in inputs {
                    let chunk = self.dims(v)[axis] * inner;
                    out.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
                }
            }
            out
        };
        self.push(dims, value, Op::Concat { inputs: inputs.to_vec(), axis })
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let in_dims = self.dims(input).to_vec();
        if axis >= in_dims.len() || len == 0 || start + len > in_dims[axis] {
            return Err(shape_err!("slice [{start}, {}) along {axis} out of range for {in_dims:?}", start + len));
        }
        let mut dims = in_dims.clone();
        dims[axis] = len;
        let value = if self.is_shape_only() {
            Vec::new()
        } else {
            let (outer, n, inner) = split_axis(&in_dims, axis);
            let x = self.data(input);
            let mut out = Vec::with_capacity(numel(&dims));
            for o in 0..outer {
                out.extend_from_slice(&x[(o * n + start) * inner..(o * n + start + len) * inner]);
            }
            out
        };
        self.push(dims, value, Op::Slice { input, axis, start })
    }

    /// Splits `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, input: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(input, axis, start, len)?);
            start += len;
        }
        if self.dims(input).get(axis) != Some(&start) {
            return Err(shape_err!("split sizes {sizes:?} do not cover axis {axis} of {:?}", self.dims(input)));
        }
        Ok(out)
    }
}

pub(crate) fn permute_backward<T: Real>(in_dims: &[usize], perm: &[usize], g: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); g.len()];
    for (o, s) in permute_sources(in_dims, perm).into_iter().enumerate() {
        dx[s] = g[o];
    }
    dx
}

pub(crate) fn concat_backward<T: Real>(
    tape: &Tape<T>,
    inputs: &[Var],
    axis: usize,
    dims: &[usize],
    g: &[T],
) -> Vec<(Var, Vec<T>)> {
    let (outer, total, inner) = split_axis(dims, axis);
    let mut offset = 0;
    let mut out = Vec::with_capacity(inputs.len());
    for &v in inputs {
        let n = tape.dims(v)[axis];
        if tape.requires_grad(v) {
            let mut dx = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                dx.extend_from_slice(&g[(o * total + offset) * inner..(o * total + offset + n) * inner]);
            }
            out.push((v, dx));
        }
        offset += n;
    }
    out
}

pub(crate) fn slice_backward<T: Real>(in_dims: &[usize], axis: usize, start: usize, out_dims: &[usize], g: &[T]) -> Vec<T> {
    let (outer, n, inner) = split_axis(in_dims, axis);
    let len = out_dims[axis];
    let mut dx = vec![T::zero(); numel(in_dims)];
    for o in 0..outer {
        dx[(o * n + start) * inner..(o * n + start + len) * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
    }
    dx
}
