//! Multi-head scaled dot-product self-attention, composed from tape primitives.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Tape, Var};

/// Projection weights bound on a tape. Each weight is (D, D), each bias (D,).
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub q: (Var, Var),
    pub k: (Var, Var),
    pub v: (Var, Var),
    pub out: (Var, Var),
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// (B, N, D)
    pub output: Var,
    /// Row-stochastic weights, (B·heads, N, N).
    pub weights: Var,
}

impl<T: Real> Tape<T> {
    pub fn multi_head_self_attention(&mut self, tokens: Var, p: &AttentionVars, heads: usize) -> Result<AttentionOutput> {
        let [b, n, d] = self.dims(tokens)[..] else {
            return Err(TensorError::Shape(format!("attention tokens must be (B, N, D), got {:?}", self.dims(tokens))));
        };
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Config(format!("embed dim {d} is not divisible by {heads} heads")));
        }
        let hd = d / heads;
        let split_heads = |tape: &mut Self, (w, bias): (Var, Var)| -> Result<Var> {
            let x = tape.linear(tokens, w, Some(bias))?;
            let x = tape.reshape(x, &[b, n, heads, hd])?;
            let x = tape.permute(x, &[0, 2, 1, 3])?;
            tape.reshape(x, &[b * heads, n, hd])
        };
        let q = split_heads(self, p.q)?;
        let k = split_heads(self, p.k)?;
        let v = split_heads(self, p.v)?;
        let scores = self.bmm(q, k, true)?;
        let scores = self.scale(scores, T::from_f64_lossy(1.0 / (hd as f64).sqrt()))?;
        let weights = self.softmax(scores, 2)?;
        let ctx = self.bmm(weights, v, false)?;
        let ctx = self.reshape(ctx, &[b, heads, n, hd])?;
        let ctx = self.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = self.reshape(ctx, &[b, n, d])?;
        let output = self.linear(ctx, p.out.0, Some(p.out.1))?;
        Ok(AttentionOutput { output, weights })
    }
}
