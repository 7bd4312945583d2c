use crate::error::{shape_err, Result, TensorError};
use crate::real::Real;
use crate::tape::{Op, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Self { stride: 1, padding: 0, dilation: 1 }
    }
}

impl Conv2dOptions {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self { stride, padding, dilation }
    }

    /// Stride 1 with `padding = dilation * (k - 1) / 2`, preserving extent for odd k.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self { stride: 1, padding: dilation * (kernel - 1) / 2, dilation }
    }
}

/// Output extent of a convolution along one axis, or `None` if non-positive.
pub fn conv_out_extent(input: usize, kernel: usize, opts: Conv2dOptions) -> Option<usize> {
    let span = opts.dilation * (kernel - 1) + 1;
    let padded = input + 2 * opts.padding;
    if padded < span {
        return None;
    }
    Some((padded - span) / opts.stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    ho: usize,
    wo: usize,
    opts: Conv2dOptions,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// Pointwise convolution reads its input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.opts.stride == 1 && self.opts.padding == 0
    }

    /// Unfolds one image (cin, h, w) into columns (cin·k·k, ho·wo).
    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let (k, p) = (self.k, self.out_plane());
        let Conv2dOptions { stride, padding, dilation } = self.opts;
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * p..][..p];
                    for oy in 0..self.ho {
                        let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                        let out = &mut row[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            out.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..][..self.w];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                            *o = if ix < 0 || ix >= self.w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let (k, p) = (self.k, self.out_plane());
        let Conv2dOptions { stride, padding, dilation } = self.opts;
        for c in 0..self.cin {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * p..][..p];
                    for oy in 0..self.ho {
                        let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += row[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Tape<T> {
    /// 2-D cross-correlation of `input` (B, Cin, H, W) with `weight`
    /// (Cout, Cin, k, k) plus an optional per-channel `bias` (Cout).
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, opts: Conv2dOptions) -> Result<Var> {
        let [batch, cin, h, w] = self.dims(input)[..] else {
            return Err(shape_err!("conv2d input must be (B, C, H, W), got {:?}", self.dims(input)));
        };
        let [cout, wcin, k, k2] = self.dims(weight)[..] else {
            return Err(shape_err!("conv2d weight must be (Cout, Cin, k, k), got {:?}", self.dims(weight)));
        };
        if k != k2 {
            return Err(shape_err!("conv2d kernel must be square, got {k}x{k2}"));
        }
        if wcin != cin {
            return Err(shape_err!("conv2d input has {cin} channels but weight expects {wcin}"));
        }
        if let Some(b) = bias {
            if self.dims(b) != [cout] {
                return Err(shape_err!("conv2d bias must be ({cout},), got {:?}", self.dims(b)));
            }
        }
        if opts.stride == 0 || opts.dilation == 0 || k == 0 {
            return Err(TensorError::Config(format!("conv2d needs stride, dilation, kernel >= 1, got {opts:?} k={k}")));
        }
        let (Some(ho), Some(wo)) = (conv_out_extent(h, k, opts), conv_out_extent(w, k, opts)) else {
            return Err(TensorError::Config(format!(
                "conv2d output extent is non-positive for input {h}x{w}, kernel {k}, {opts:?}"
            )));
        };
        let geom = ConvGeom { batch, cin, h, w, cout, k, ho, wo, opts };
        self.add_macs(batch * cout * ho * wo * geom.patch());
        let out_dims = vec![batch, cout, ho, wo];
        let value = if self.is_shape_only() { Vec::new() } else { forward(self, input, weight, bias, &geom) };
        self.push(out_dims, value, Op::Conv2d { input, weight, bias, geom })
    }
}

fn forward<T: Real>(tape: &Tape<T>, input: Var, weight: Var, bias: Option<Var>, g: &ConvGeom) -> Vec<T> {
    let (x, wt) = (tape.data(input), tape.data(weight));
    let (kk, p) = (g.patch(), g.out_plane());
    let mut out = vec![T::zero(); g.batch * g.cout * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * p] };
    for b in 0..g.batch {
        let xb = &x[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
        let cols: &[T] = if g.is_pointwise() {
            xb
        } else {
            g.im2col(xb, &mut cols);
            &cols
        };
        let ob = &mut out[b * g.cout * p..(b + 1) * g.cout * p];
        if let Some(bias) = bias {
            for (co, &bv) in tape.data(bias).iter().enumerate() {
                ob[co * p..(co + 1) * p].fill(bv);
            }
        }
        T::gemm(g.cout, kk, p, wt, (kk as isize, 1), cols, (p as isize, 1), ob, (p as isize, 1), bias.is_some());
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Real>(
    tape: &Tape<T>,
    input: Var,
    weight: Var,
    bias: Option<Var>,
    g: &ConvGeom,
    dy: &[T],
    want_input: bool,
    want_weight: bool,
) -> Vec<(Var, Vec<T>)> {
    let (x, wt) = (tape.data(input), tape.data(weight));
    let (kk, p) = (g.patch(), g.out_plane());
    let plane_in = g.cin * g.h * g.w;
    let mut dx = if want_input { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut dw = if want_weight { vec![T::zero(); wt.len()] } else { Vec::new() };
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { kk * p }];
    let mut dcols = vec![T::zero(); if want_input && !g.is_pointwise() { kk * p } else { 0 }];
    for b in 0..g.batch {
        let dyb = &dy[b * g.cout * p..(b + 1) * g.cout * p];
        if want_weight {
            let xb = &x[b * plane_in..(b + 1) * plane_in];
            let cols: &[T] = if g.is_pointwise() {
                xb
            } else {
                g.im2col(xb, &mut cols);
                &cols
            };
            // dW += dY_b · cols^T
            T::gemm(g.cout, p, kk, dyb, (p as isize, 1), cols, (1, p as isize), &mut dw, (kk as isize, 1), true);
        }
        if want_input {
            let dxb = &mut dx[b * plane_in..(b + 1) * plane_in];
            // dcols = W^T · dY_b
            if g.is_pointwise() {
                T::gemm(kk, g.cout, p, wt, (1, kk as isize), dyb, (p as isize, 1), dxb, (p as isize, 1), true);
            } else {
                T::gemm(kk, g.cout, p, wt, (1, kk as isize), dyb, (p as isize, 1), &mut dcols, (p as isize, 1), false);
                g.col2im(&dcols, dxb);
            }
        }
    }
    let mut out = Vec::with_capacity(3);
    if want_input {
        out.push((input, dx));
    }
    if want_weight {
        out.push((weight, dw));
    }
    if let Some(bias) = bias {
        let mut db = vec![T::zero(); g.cout];
        for b in 0..g.batch {
            for (co, acc) in db.iter_mut().enumerate() {
                *acc += dy[(b * g.cout + co) * p..][..p].iter().copied().sum::<T>();
            }
        }
        out.push((bias, db));
    }
    out
}
