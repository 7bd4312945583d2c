use crate::error::{shape_err, Result};
use crate::ops::conv::{conv_out_extent, Conv2dOptions};
use crate::real::Real;
use crate::tape::{Op, Tape, Var};

impl<T: Real> Tape<T> {
    /// Max pooling with a square window; padded cells never win.
    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let [b, c, h, w] = self.dims(input)[..] else {
            return Err(shape_err!("max_pool2d input must be (B, C, H, W), got {:?}", self.dims(input)));
        };
        let opts = Conv2dOptions::new(stride, padding, 1);
        let (Some(ho), Some(wo)) = (conv_out_extent(h, kernel, opts), conv_out_extent(w, kernel, opts)) else {
            return Err(shape_err!("max_pool2d window {kernel} does not fit {h}x{w}"));
        };
        if padding >= kernel {
            return Err(shape_err!("max_pool2d padding {padding} must be smaller than window {kernel}"));
        }
        let mut argmax = Vec::new();
        let mut value = Vec::new();
        if !self.is_shape_only() {
            let x = self.data(input);
            argmax.reserve(b * c * ho * wo);
            value.reserve(b * c * ho * wo);
            for plane in 0..b * c {
                let base = plane * h * w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best: Option<(usize, T)> = None;
                        for ky in 0..kernel {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kernel {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx = base + iy as usize * w + ix as usize;
                                // NaN wins so that it propagates.
                                if best.is_none_or(|(_, v)| !v.is_nan() && (x[idx] > v || x[idx].is_nan())) {
                                    best = Some((idx, x[idx]));
                                }
                            }
                        }
                        let (idx, v) = best.expect("window overlaps the input");
                        argmax.push(idx);
                        value.push(v);
                    }
                }
            }
        }
        self.push(vec![b, c, ho, wo], value, Op::MaxPool2d { input, argmax })
    }
}
