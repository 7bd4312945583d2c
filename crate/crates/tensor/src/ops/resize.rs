use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::{Op, Tape, Var};

/// Per-output-coordinate source taps `(lo, hi, frac)` for half-pixel-centre
/// bilinear sampling (align_corners = false).
pub(crate) fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

impl<T: Real> Tape<T> {
    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [b, c, h, w] = self.dims(input)[..] else {
            return Err(shape_err!("bilinear_resize input must be (B, C, H, W), got {:?}", self.dims(input)));
        };
        if out_h == 0 || out_w == 0 {
            return Err(shape_err!("bilinear_resize target must be at least 1x1, got {out_h}x{out_w}"));
        }
        let dims = vec![b, c, out_h, out_w];
        if (h, w) == (out_h, out_w) {
            let value = self.data(input).to_vec();
            return self.push(dims, value, Op::Resize { input });
        }
        let value = if self.is_shape_only() {
            Vec::new()
        } else {
            let (ty, tx) = (taps(h, out_h), taps(w, out_w));
            let x = self.data(input);
            let mut out = Vec::with_capacity(b * c * out_h * out_w);
            for plane in x.chunks_exact(h * w) {
                for &(y0, y1, fy) in &ty {
                    let (r0, r1) = (&plane[y0 * w..][..w], &plane[y1 * w..][..w]);
                    let fy = T::from_f64_lossy(fy);
                    for &(x0, x1, fx) in &tx {
                        let fx = T::from_f64_lossy(fx);
                        let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                        let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
                        out.push(top + (bottom - top) * fy);
                    }
                }
            }
            out
        };
        self.push(dims, value, Op::Resize { input })
    }
}

pub(crate) fn backward<T: Real>(in_dims: &[usize], out_dims: &[usize], g: &[T]) -> Vec<T> {
    let (h, w, oh, ow) = (in_dims[2], in_dims[3], out_dims[2], out_dims[3]);
    if (h, w) == (oh, ow) {
        return g.to_vec();
    }
    let (ty, tx) = (taps(h, oh), taps(w, ow));
    let mut dx = vec![T::zero(); in_dims.iter().product()];
    for (plane, gp) in dx.chunks_exact_mut(h * w).zip(g.chunks_exact(oh * ow)) {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64_lossy(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64_lossy(fx);
                let v = gp[oy * ow + ox];
                plane[y0 * w + x0] += v * (T::one() - fy) * (T::one() - fx);
                plane[y0 * w + x1] += v * (T::one() - fy) * fx;
                plane[y1 * w + x0] += v * fy * (T::one() - fx);
                plane[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    dx
}
