use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::{Op, Tape, Var};

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n − 1) variance, as used for running averages.
    pub var: Vec<T>,
}

impl<T: Real> Tape<T> {
    /// Batch normalisation of (B, C, H, W) using the batch's own statistics.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let [b, c, h, w] = self.dims(input)[..] else {
            return Err(shape_err!("batch_norm input must be (B, C, H, W), got {:?}", self.dims(input)));
        };
        if self.dims(gamma) != [c] || self.dims(beta) != [c] {
            return Err(shape_err!("batch_norm affine params must be ({c},)"));
        }
        let plane = h * w;
        let n = b * plane;
        let mut stats = BatchStats { mean: vec![T::zero(); c], var: vec![T::zero(); c] };
        let (mut value, mut xhat, mut inv_std) = (Vec::new(), Vec::new(), Vec::new());
        if !self.is_shape_only() {
            let x = self.data(input);
            let (gm, bt) = (self.data(gamma), self.data(beta));
            value = vec![T::zero(); x.len()];
            xhat = vec![T::zero(); x.len()];
            inv_std = vec![T::zero(); c];
            let nt = T::from_usize(n).unwrap();
            for ch in 0..c {
                let idx = |bi: usize| (bi * c + ch) * plane;
                let mut sum = T::zero();
                for bi in 0..b {
                    sum += x[idx(bi)..idx(bi) + plane].iter().copied().sum::<T>();
                }
                let mean = sum / nt;
                let mut ss = T::zero();
                for bi in 0..b {
                    ss += x[idx(bi)..idx(bi) + plane].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
                }
                let var = ss / nt;
                let inv = T::one() / (var + T::from_f64_lossy(eps)).sqrt();
                for bi in 0..b {
                    for j in idx(bi)..idx(bi) + plane {
                        xhat[j] = (x[j] - mean) * inv;
                        value[j] = xhat[j] * gm[ch] + bt[ch];
                    }
                }
                inv_std[ch] = inv;
                stats.mean[ch] = mean;
                stats.var[ch] = if n > 1 { ss / T::from_usize(n - 1).unwrap() } else { var };
            }
        }
        let v = self.push(vec![b, c, h, w], value, Op::BatchNorm { input, gamma, beta, xhat, inv_std })?;
        Ok((v, stats))
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let dims = self.dims(input).to_vec();
        let d = *dims.last().ok_or_else(|| shape_err!("layer_norm of a rank-0 tensor"))?;
        if self.dims(gamma) != [d] || self.dims(beta) != [d] {
            return Err(shape_err!("layer_norm affine params must be ({d},)"));
        }
        let (mut value, mut xhat, mut inv_std) = (Vec::new(), Vec::new(), Vec::new());
        if !self.is_shape_only() {
            let x = self.data(input);
            let (gm, bt) = (self.data(gamma), self.data(beta));
            let dt = T::from_usize(d).unwrap();
            value.reserve(x.len());
            xhat.reserve(x.len());
            for row in x.chunks_exact(d) {
                let mean = row.iter().copied().sum::<T>() / dt;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
                let inv = T::one() / (var + T::from_f64_lossy(eps)).sqrt();
                inv_std.push(inv);
                for (j, &v) in row.iter().enumerate() {
                    let xh = (v - mean) * inv;
                    xhat.push(xh);
                    value.push(xh * gm[j] + bt[j]);
                }
            }
        }
        self.push(dims, value, Op::LayerNorm { input, gamma, beta, xhat, inv_std })
    }
}

/// Shared normalisation VJP: `groups` yields the flat indices of each
/// normalised group together with its channel (affine) index per element.
#[allow(clippy::too_many_arguments)]
fn norm_backward<T: Real>(
    tape: &Tape<T>,
    input: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    inv_std: &[T],
    g: &[T],
    groups: &[Vec<(usize, usize)>],
) -> Vec<(Var, Vec<T>)> {
    let gm = tape.data(gamma);
    let c = gm.len();
    let mut out = Vec::with_capacity(3);
    if tape.requires_grad(input) {
        let mut dx = vec![T::zero(); g.len()];
        for (gi, group) in groups.iter().enumerate() {
            let n = T::from_usize(group.len()).unwrap();
            let (mut s1, mut s2) = (T::zero(), T::zero());
            for &(j, ch) in group {
                let dxh = g[j] * gm[ch];
                s1 += dxh;
                s2 += dxh * xhat[j];
            }
            for &(j, ch) in group {
                let dxh = g[j] * gm[ch];
                dx[j] = inv_std[gi] / n * (n * dxh - s1 - xhat[j] * s2);
            }
        }
        out.push((input, dx));
    }
    if tape.requires_grad(gamma) || tape.requires_grad(beta) {
        let (mut dg, mut db) = (vec![T::zero(); c], vec![T::zero(); c]);
        for group in groups {
            for &(j, ch) in group {
                dg[ch] += g[j] * xhat[j];
                db[ch] += g[j];
            }
        }
        out.push((gamma, dg));
        out.push((beta, db));
    }
    out
}

pub(crate) fn batch_norm_backward<T: Real>(
    tape: &Tape<T>,
    input: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    inv_std: &[T],
    g: &[T],
) -> Vec<(Var, Vec<T>)> {
    let [b, c, h, w] = tape.dims(input)[..] else { unreachable!() };
    let plane = h * w;
    let groups: Vec<Vec<(usize, usize)>> = (0..c)
        .map(|ch| (0..b).flat_map(|bi| ((bi * c + ch) * plane..(bi * c + ch + 1) * plane).map(move |j| (j, ch))).collect())
        .collect();
    norm_backward(tape, input, gamma, beta, xhat, inv_std, g, &groups)
}

pub(crate) fn layer_norm_backward<T: Real>(
    tape: &Tape<T>,
    input: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    inv_std: &[T],
    g: &[T],
) -> Vec<(Var, Vec<T>)> {
    let d = *tape.dims(input).last().unwrap();
    let groups: Vec<Vec<(usize, usize)>> = (0..g.len() / d).map(|r| (0..d).map(|j| (r * d + j, j)).collect()).collect();
    norm_backward(tape, input, gamma, beta, xhat, inv_std, g, &groups)
}

impl<T: Real> Tape<T> {
    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, input: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        let c = *self.dims(input).get(1).ok_or_else(|| shape_err!("batch_norm input needs a channel axis"))?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err!("batch_norm running stats must have {c} entries"));
        }
        let e = T::from_f64_lossy(eps);
        let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + e).sqrt()).collect();
        let bshape = [1, c, 1, 1];
        let mean = self.input(crate::Tensor::new(bshape, mean.to_vec())?);
        let inv = self.input(crate::Tensor::new(bshape, inv)?);
        let gamma = self.reshape(gamma, &bshape)?;
        let beta = self.reshape(beta, &bshape)?;
        let centred = self.sub(input, mean)?;
        let scale = self.mul(gamma, inv)?;
        let scaled = self.mul(centred, scale)?;
        self.add(scaled, beta)
    }
}
